# -*- coding: utf-8 -*-

"""
Stationarity of the multiple Poisson-Dirichlet law, exactly and by Monte Carlo.

The exact checks integrate generator values against the closed-form moments. The Monte Carlo
check averages B f over truncated draws and compares with three standard errors.
"""

import logging

from multipd.samplers import SeedSpec
from multipd.simplex import ThetaParams
from multipd.verify import (exact_stationarity_B, exact_stationarity_BK, mc_stationarity_B,
                            reports_to_frame)


if __name__ == '__main__':

    logging.basicConfig(level=logging.INFO)
    theta = ThetaParams([2.0, 3.0])
    seed = SeedSpec(7)

    reports = exact_stationarity_BK(theta, 4)
    reports += exact_stationarity_BK(theta, 4, sign=-1.0)
    reports += exact_stationarity_B(theta)
    reports += exact_stationarity_B(theta, operator='Bhat')
    reports += mc_stationarity_B(theta, N=20_000, seed=seed, truncation=500, threads=2)

    table = reports_to_frame(reports)
    print(table.to_string(index=False))
    print(f'{int((table.passed == table.expect_pass).sum())} of {len(table)} as expected')
