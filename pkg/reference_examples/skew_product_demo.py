# -*- coding: utf-8 -*-

"""
One skew-product path with four types per mark, and one path of the limit surrogate started
from a multiple Poisson-Dirichlet draw. Both are written as CSV.
"""

import numpy as np

from multipd.samplers import MPDSpec, SeedSpec, sample_mpd_batch
from multipd.timechange import build_limit_process, build_skew_product


if __name__ == '__main__':

    theta = [2.0, 3.0]
    seed = SeedSpec(2022)

    init = ([0.4, 0.6], np.full((2, 4), 0.25))
    skew = build_skew_product(theta, 4, init, seed.stream(0), step=1e-3, horizon=1.0)
    skew.to_frame(top=4).to_csv('skew_product.csv', index=False, float_format='%.17g')
    print(f'skew product: clocks at t=1 are {skew.clock.tau[:, -1]}, '
          f'composition gap {skew.consistency_gap():.2e}')

    start = sample_mpd_batch(MPDSpec(theta, 1000), 1, seed.stream(1)).point(0)
    limit = build_limit_process(theta, 256, start, seed.stream(2), step=1e-3, horizon=1.0)
    limit.to_frame(top=5).to_csv('limit_process.csv', index=False, float_format='%.17g')
    print(f'limit surrogate: largest atoms at t=1 are {limit.x[-1, :, 0]}')
