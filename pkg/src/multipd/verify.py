"""
Verification harness: exact moment identities, Monte-Carlo stationarity, path checks of the
martingale problem, distributional comparisons and the boundary example.

Every check returns :class:`TestReport` objects. A report passes when ``|statistic|`` is at most
``threshold``; Monte-Carlo reports use three standard errors, Kolmogorov-Smirnov reports the
critical distance at level 0.01 and exact reports a floating-point tolerance.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import gammaln
from scipy.stats import ks_2samp

from .generators import (PowerSums, TestFunction, apply_B, apply_Bh, apply_Bhat, apply_BK,
                         check_convergence_bound, domain_family, finite_difference_oracle,
                         gradient, hessian, interaction, intertwining_deviations,
                         mass_correction)
from .polynomial import Polynomial, dirichlet_log_moments, monomial_exponents
from .samplers import (MPDSpec, SeedSpec, run_streams, sample_dirichlet,
                       sample_grouped_dirichlet, sample_mpd_batch, sample_product_dirichlet,
                       sample_ranked_dirichlet)
from .simplex import (DomainError, ThetaParams, Tolerances, boundary_limit_points,
                      boundary_sequence, compose_S)
from .timechange import (driver_increment_correlation, limit_process_batch,
                         skew_product_batch)
from .wright_fisher import WFIntegrator, WFSpec, grid_indices, simulate_wf_batch

logger = logging.getLogger(__name__)

KS_ALPHA = 0.01
SE_MULTIPLE = 3.0
EXACT_TOLERANCE = 1e-10


@dataclass(frozen=True)
class MomentSpec:
    """Mixed moment ``E prod_i z_i**n_i`` under Dir(alpha)."""

    exponents: tuple
    alpha: tuple

    def __post_init__(self):
        exponents = tuple(int(n) for n in self.exponents)
        alpha = tuple(float(a) for a in self.alpha)
        if len(exponents) != len(alpha):
            raise ValueError('Dimension mismatch: one exponent per Dirichlet parameter.')
        if any(n < 0 for n in exponents):
            raise ValueError('Invalid parameter input. Exponents must be nonnegative.')
        if any(not a > 0 for a in alpha):
            raise ValueError('Invalid parameter input. Dirichlet parameters must be positive.')
        object.__setattr__(self, 'exponents', exponents)
        object.__setattr__(self, 'alpha', alpha)


@dataclass
class TestReport:
    """Outcome of one check."""

    __test__ = False

    name: str
    statistic: float
    se: float
    threshold: float
    passed: bool
    replicates: int = 0
    seed: int = None
    expect_pass: bool = True
    details: dict = field(default_factory=dict)

    @classmethod
    def from_statistic(cls, name, statistic, threshold, se=0.0, replicates=0, seed=None,
                       expect_pass=True, **details):
        statistic = float(statistic)
        return cls(name, statistic, float(se), float(threshold),
                   bool(abs(statistic) <= threshold), int(replicates), seed, expect_pass,
                   details)

    @property
    def unexpected(self):
        return self.passed != self.expect_pass

    def to_dict(self):
        return asdict(self)


def _seed_value(seed):
    return seed.master_seed if isinstance(seed, SeedSpec) else seed


def _as_seed(seed):
    return seed if isinstance(seed, SeedSpec) else SeedSpec(seed)


def _as_theta(theta):
    return theta if isinstance(theta, ThetaParams) else ThetaParams(theta)


def mean_and_se(values):
    """Compensated mean and its standard error."""
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if n < 2:
        raise ValueError('Invalid parameter input. Need at least two replicates.')
    mean = math.fsum(values) / n
    variance = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(variance / n)


def _mean_report(name, values, expected, seed, expect_pass=True, bias=0.0, **details):
    values = np.asarray(values, dtype=float)
    valid = values[~np.isnan(values)]
    rejection_rate = 1 - valid.size / values.size
    mean, se = mean_and_se(valid)
    report = TestReport.from_statistic(name, mean - expected, SE_MULTIPLE * se + bias, se,
                                       valid.size, _seed_value(seed), expect_pass,
                                       mean=mean, expected=expected,
                                       rejection_rate=rejection_rate, **details)
    if rejection_rate > Tolerances.rejection_cap:
        logger.warning('%s: %.2g%% of replicates rejected at the mass floor', name,
                       100 * rejection_rate)
        report.passed = False
    return report


def _ks_report(name, sample, reference, seed, **details):
    result = ks_2samp(sample, reference)
    n, m = len(sample), len(reference)
    critical = math.sqrt(-math.log(KS_ALPHA / 2) / 2) * math.sqrt((n + m) / (n * m))
    return TestReport.from_statistic(name, result.statistic, critical, 0.0, n,
                                     _seed_value(seed), p_value=float(result.pvalue), **details)


def _correlation_report(name, a, b, seed):
    n = len(a)
    se = 1 / math.sqrt(n)
    if np.std(a) == 0 or np.std(b) == 0:
        correlation = 0.0
    else:
        correlation = float(np.corrcoef(a, b)[0, 1])
    return TestReport.from_statistic(name, correlation, SE_MULTIPLE * se, se, n,
                                     _seed_value(seed))


# Exact moments

def dirichlet_moment(spec):
    """Exact mixed Dirichlet moment, computed from log rising factorials."""
    return float(np.exp(dirichlet_log_moments(spec.alpha, [spec.exponents]))[0])


def set_partitions(items):
    """All set partitions of a list, as lists of blocks."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for partition in set_partitions(rest):
        yield [[first]] + partition
        for j in range(len(partition)):
            yield partition[:j] + [[first] + partition[j]] + partition[j + 1:]


def pd_moment(theta, mvec, K=None):
    r"""
    :math:`E \prod_q \varphi_{m_q}` under PD(theta) (``K=None``) or under the symmetric
    Dirichlet law with K parameters ``theta / K``. Orders equal to one contribute the factor 1.
    """
    if not theta > 0:
        raise ValueError('Invalid parameter input. theta must be positive.')
    orders = [int(m) for m in mvec if int(m) != 1]
    if any(m < 1 for m in orders):
        raise ValueError('Invalid parameter input. Power-sum orders must be >= 1.')
    M = sum(orders)
    normalizer = gammaln(theta + M) - gammaln(theta)
    terms = []
    for partition in set_partitions(range(len(orders))):
        sizes = [sum(orders[q] for q in block) for block in partition]
        k = len(partition)
        if K is None:
            log_term = k * math.log(theta) + sum(gammaln(n) for n in sizes)
        else:
            if k > K:
                continue
            rate = theta / K
            log_term = (gammaln(K + 1) - gammaln(K - k + 1)
                        + sum(gammaln(rate + n) - gammaln(rate) for n in sizes))
        terms.append(math.exp(log_term - normalizer))
    return math.fsum(terms)


def mpd_expectation(theta, f):
    r"""
    Exact expectation of a test function under the multiple Poisson-Dirichlet law:
    Dirichlet moment of the homogeneity degrees times the PD moments of every mark.

    Raises
    ------
    DomainError
        If the mark-mass moment is infinite.
    """
    theta = _as_theta(theta)
    p = np.array(f.w_exponents, dtype=float)
    if np.any(theta.theta + p <= 0):
        raise DomainError(f'E[{f}] is infinite under mPD{tuple(theta.theta)}.')
    mass_part = float(np.exp(dirichlet_log_moments(theta.theta, [p]))[0])
    return mass_part * math.prod(pd_moment(theta_h, mvec)
                                 for theta_h, mvec in zip(theta.theta, f.mvecs))


def combination_expectation(theta, comb):
    return math.fsum(c * mpd_expectation(theta, f) for f, c in comb.items())


def finite_mark_phi2(theta, K, h):
    """Exact ``E phi_2(z_h)`` under the flat Dirichlet law with K types per mark."""
    theta = _as_theta(theta)
    theta_h, total = theta.theta[h], theta.theta_bar
    return theta_h * (theta_h + 1) / (total * (total + 1)) * pd_moment(theta_h, (2,), K)


# Exact stationarity

def exact_stationarity_BK(theta, K, max_degree=3, sign=1.0, family=None):
    r"""
    :math:`\int B^K f\, d\nu^{*K}` for every polynomial of the family (all monomials up to
    ``max_degree`` by default), integrated term by term against the flat Dirichlet law.
    ``sign=-1`` flips the mutation drift and is expected to fail.
    """
    theta = _as_theta(theta)
    flat_rates = np.repeat(theta.theta / K, K)
    if family is None:
        family = [Polynomial.monomial(n) for n in monomial_exponents(theta.H * K, max_degree)]
    residuals = np.array([
        f.generator(flat_rates, theta.theta_bar, sign=sign).integrate_dirichlet(flat_rates)
        for f in family])
    worst = int(np.argmax(np.abs(residuals)))
    flipped = sign < 0
    name = f'stationary-exact BK K={K}' + (' flipped drift' if flipped else '')
    return [TestReport.from_statistic(name, residuals[worst], EXACT_TOLERANCE,
                                      replicates=len(family), expect_pass=not flipped,
                                      worst_exponents=family[worst].exponents.tolist())]


def exact_stationarity_B(theta, family=None, operator='B'):
    """
    ``int B f dnu*`` computed exactly from multiple Poisson-Dirichlet moments, one report per
    test function. With ``operator='Bhat'`` a function is expected to fail whenever its mass
    correction has a nonzero mean.
    """
    theta = _as_theta(theta)
    family = domain_family(theta.H) if family is None else family
    apply = apply_B if operator == 'B' else apply_Bhat
    reports = []
    for f in family:
        residual = combination_expectation(theta, apply(theta, f))
        expect_pass = (operator == 'B' or abs(combination_expectation(
            theta, mass_correction(theta, f))) <= EXACT_TOLERANCE)
        reports.append(TestReport.from_statistic(f'stationary-exact {operator} {f}', residual,
                                                 EXACT_TOLERANCE, expect_pass=expect_pass))
    return reports


# Monte-Carlo stationarity of the limit law

def _mpd_values(theta, functions, N, seed, truncation, chunk, threads):
    spec = MPDSpec(theta, truncation)

    def task(stream, size):
        ps = PowerSums.of(sample_mpd_batch(spec, size, stream))
        return [g.values(ps, on_floor='nan') for g in functions]

    chunks = run_streams(task, _as_seed(seed), N, chunk, threads)
    return [np.concatenate([values[j] for values in chunks]) for j in range(len(functions))]


def default_stationarity_family(H):
    family = [TestFunction.mark_power(H, h) for h in range(H)]
    family += [TestFunction.power_sums(H, h, 2) for h in range(H)]
    if H > 1:
        family.append(TestFunction.mark_power(H, 0) * TestFunction.mark_power(H, 1))
        family.append(TestFunction.power_sums(H, 0, 2) * TestFunction.power_sums(H, 1, 2))
    return family


def mc_stationarity_B(theta, family=None, N=100_000, seed=0, truncation=None, chunk=2000,
                      threads=1, contrast=True):
    """
    Monte-Carlo mean of ``B f`` under the multiple Poisson-Dirichlet law, expected to vanish.
    With ``contrast`` the operator without mass correction is applied to ``|z_1|`` as well and
    expected to fail.
    """
    theta = _as_theta(theta)
    family = default_stationarity_family(theta.H) if family is None else family
    operators = [apply_B(theta, f) for f in family]
    names = [f'stationary-mc B {f}' for f in family]
    expect = [True] * len(family)
    if contrast:
        operators.append(apply_Bhat(theta, TestFunction.mark_power(theta.H, 0)))
        names.append(f'stationary-mc Bhat {TestFunction.mark_power(theta.H, 0)}')
        expect.append(False)

    values = _mpd_values(theta, operators, N, seed, truncation, chunk, threads)
    reports = []
    for name, sample, expect_pass in zip(names, values, expect):
        report = _mean_report(name, sample, 0.0, seed, expect_pass)
        logger.info('%s: mean %.3e, se %.3e', name, report.details['mean'], report.se)
        reports.append(report)
    return reports


def mc_moments_test(theta, family=None, N=100_000, seed=0, truncation=None, chunk=2000,
                    threads=1):
    """Monte-Carlo means of test functions under mPD against their exact values."""
    theta = _as_theta(theta)
    if family is None:
        family = ([TestFunction.power_sums(theta.H, h, 2) for h in range(theta.H)]
                  + [TestFunction.mark_power(theta.H, h) for h in range(theta.H)])
    values = _mpd_values(theta, family, N, seed, truncation, chunk, threads)
    return [_mean_report(f'moments mPD {f}', sample, mpd_expectation(theta, f), seed)
            for f, sample in zip(family, values)]


# Path checks

def _flat_martingale_residuals(theta, K, f, t_grid, n_paths, seed, step):
    theta = _as_theta(theta)
    spec = WFSpec.flat(theta, K, step, max(t_grid))
    generator = apply_BK(theta, K, f)
    indices = grid_indices(spec, t_grid)
    shape = (-1, theta.H, K)
    init = np.repeat(theta.theta / (theta.theta_bar * K), K)
    integrator = WFIntegrator(spec, init, seed, n_paths=n_paths)

    start = f.values(integrator.states.reshape(shape))
    previous = generator.values(integrator.states.reshape(shape))
    integral = np.zeros(n_paths)
    residuals = np.zeros((n_paths, indices.size))
    for k in range(1, int(indices.max()) + 1):
        integrator.step()
        current = generator.values(integrator.states.reshape(shape))
        integral += 0.5 * spec.step * (previous + current)
        previous = current
        hits = indices == k
        if hits.any():
            value = f.values(integrator.states.reshape(shape))
            residuals[:, hits] = (value - start - integral)[:, None]
    return indices * spec.step, residuals


def _flat_values(theta, K, f, w0, x0, t_grid, n_paths, seed, step):
    theta = _as_theta(theta)
    spec = WFSpec.flat(theta, K, step, max(t_grid))
    init = (np.asarray(w0)[:, None] * np.asarray(x0)).ravel()
    times, states = simulate_wf_batch(spec, init, seed, n_paths, t_grid)
    return times, f.values(states.reshape(n_paths, len(times), theta.H, K))


def mark_mass_mean(theta, w0, t):
    """Exact ``E W_h(t)`` of the mark-mass process started at ``w0``."""
    theta = _as_theta(theta)
    stationary = theta.theta / theta.theta_bar
    return stationary + (np.asarray(w0, dtype=float) - stationary) \
        * math.exp(-theta.theta_bar * t / 2)


def moment_ode_check(process, theta, f, t_grid, N, seed, K=None, step=1e-3, approx_K=256,
                     init=None, bias_constant=1.0, threads=1, chunk=2000):
    """
    Path checks of the moment equations, one report per time of ``t_grid``.

    ``process='flat'``
        Martingale residual ``f(X_t) - f(X_0) - int_0^t B^K f(X_s) ds`` of the flat process
        started at ``theta / (theta_bar K)``, expected mean 0.
    ``process='skew'``
        ``E f(Z_t)`` of the skew product against direct flat simulation from the same start.
    ``process='limit'``
        ``E f(Z_t)`` of the limit surrogate: started from mPD draws it must stay at the
        stationary value; started from ``init`` (a KingmanPoint) with ``f = |z_h|`` it must
        follow the mark-mass mean.

    Tolerance: three standard errors plus ``bias_constant * step`` (and ``1 / approx_K`` for the
    limit surrogate).
    """
    theta = _as_theta(theta)
    seed = _as_seed(seed)
    t_grid = [float(t) for t in t_grid]
    bias = bias_constant * step
    reports = []

    if process == 'flat':
        def task(stream, size):
            return _flat_martingale_residuals(theta, K, f, t_grid, size, stream, step)
        chunks = run_streams(task, seed, N, chunk, threads)
        times = chunks[0][0]
        residuals = np.concatenate([values for _, values in chunks])
        for j, t in enumerate(times):
            reports.append(_mean_report(f'moments martingale flat K={K} {f} t={t:g}',
                                        residuals[:, j], 0.0, seed, bias=bias,
                                        bias_constant=bias_constant))
    elif process == 'skew':
        w0 = theta.theta / theta.theta_bar
        x0 = np.full((theta.H, K), 1 / K)
        batch = skew_product_batch(theta, K, w0, x0, seed.substream(0), N, step, max(t_grid),
                                   t_grid)
        times, direct = _flat_values(theta, K, f, w0, x0, t_grid, N, seed.substream(1), step)
        skew = f.values(batch.z)
        for j, t in enumerate(times):
            mean_skew, se_skew = mean_and_se(skew[:, j])
            mean_flat, se_flat = mean_and_se(direct[:, j])
            se = math.hypot(se_skew, se_flat)
            reports.append(TestReport.from_statistic(
                f'moments skew vs flat K={K} {f} t={t:g}', mean_skew - mean_flat,
                2 * SE_MULTIPLE * se + bias, se, N, seed.master_seed,
                mean_skew=mean_skew, mean_flat=mean_flat, bias_constant=bias_constant))
    elif process == 'limit':
        bias += bias_constant / approx_K
        if init is None:
            draws = sample_mpd_batch(MPDSpec(theta), N, seed.substream(0))
            masses, atoms, tails = draws.masses, draws.atoms, draws.tails
            expected = [mpd_expectation(theta, f)] * len(t_grid)
        else:
            if not (f.is_pure_w and sum(f.m0) == 1):
                raise ValueError('Invalid parameter input. From a fixed start the limit check '
                                 'takes f = |z_h|.')
            h = f.m0.index(1)
            atoms, tails = init.to_arrays()
            masses = np.tile(init.masses, (N, 1))
            atoms = np.tile(atoms, (N, 1, 1))
            tails = np.tile(tails, (N, 1))
            expected = [mark_mass_mean(theta, init.masses, t)[h] for t in t_grid]
        batch = limit_process_batch(theta, approx_K, masses, atoms, tails, seed.substream(1),
                                    step, max(t_grid), t_grid)
        values = f.values(batch.z)
        for j, t in enumerate(batch.times):
            reports.append(_mean_report(f'moments limit K\'={approx_K} {f} t={t:g}',
                                        values[:, j], expected[j], seed, bias=bias,
                                        bias_constant=bias_constant))
    else:
        raise ValueError(f'Invalid parameter input. Unknown process {process!r}.')
    return reports


def phi2_relaxation(theta, K, phi2_start, t):
    """Exact ``E phi_2(X_t)`` of the symmetric K-type process with total rate ``theta``."""
    asymptote = (1 + theta / K) / (1 + theta)
    return asymptote + (phi2_start - asymptote) * math.exp(-(1 + theta) * t)


def phi2_relaxation_check(theta=1.0, K=64, N=10_000, seed=0, step=1e-4,
                          t_grid=(0.1, 0.5, 1.0), relative=0.02, threads=1, chunk=2000):
    """
    ``E phi_2`` of the symmetric K-type process started uniform against its exact relaxation
    curve, within ``max(3 SE, relative * exact)``.
    """
    spec = WFSpec.symmetric(theta, K, step, max(t_grid))
    init = np.full(K, 1 / K)

    def task(stream, size):
        times, states = simulate_wf_batch(spec, init, stream, size, t_grid)
        return times, np.sum(states ** 2, axis=-1)

    chunks = run_streams(task, _as_seed(seed), N, chunk, threads)
    times = chunks[0][0]
    values = np.concatenate([phi2 for _, phi2 in chunks])
    reports = []
    for j, t in enumerate(times):
        exact = phi2_relaxation(theta, K, 1 / K, t)
        mean, se = mean_and_se(values[:, j])
        reports.append(TestReport.from_statistic(
            f'moments phi2 relaxation K={K} t={t:g}', mean - exact,
            max(SE_MULTIPLE * se, relative * exact), se, N, _seed_value(seed),
            mean=mean, expected=exact))
    return reports


# Distributional checks

def selfsimilarity_test(theta, K, N, seed):
    """
    Both directions of Dirichlet self-similarity by two-sample KS tests: grouping a flat draw
    against direct mark-mass and frequency draws, and composing independent draws against a flat
    draw. Also checks that mark masses and frequencies are uncorrelated.
    """
    theta = _as_theta(theta)
    seed = _as_seed(seed)
    flat_rates = np.repeat(theta.theta / K, K)
    zeta, upsilon, xi = sample_grouped_dirichlet(theta, K, seed.substream(0), size=N)
    direct_w = sample_dirichlet(theta.theta, seed.substream(1), size=N)
    reports = [_ks_report(f'selfsim grouped w1 K={K}', upsilon[:, 0], direct_w[:, 0], seed)]
    for h, theta_h in enumerate(theta.theta):
        direct_x = sample_dirichlet(np.full(K, theta_h / K), seed.substream(2 + h), size=N)
        reports.append(_ks_report(f'selfsim grouped x{h + 1}_1 K={K}', xi[:, h, 0],
                                  direct_x[:, 0], seed))
    reports.append(_correlation_report(f'selfsim corr(w1, x1_1) K={K}', upsilon[:, 0],
                                       xi[:, 0, 0], seed))

    composed = sample_product_dirichlet(theta, K, seed.substream(2 + theta.H), size=N)
    flat = sample_dirichlet(flat_rates, seed.substream(3 + theta.H), size=N).reshape(N, -1, K)
    for h in range(theta.H):
        reports.append(_ks_report(f'selfsim composed z{h + 1}_1 K={K}', composed[:, h, 0],
                                  flat[:, h, 0], seed))
        reports.append(_ks_report(f'selfsim composed phi2(z{h + 1}) K={K}',
                                  np.sum(composed[:, h] ** 2, axis=-1),
                                  np.sum(flat[:, h] ** 2, axis=-1), seed))
    return reports


def kingman_limit_sweep(theta, K_list, N, seed):
    """
    ``E phi_2`` per mark of ranked flat Dirichlet draws against the exact finite-K value, and
    monotone approach of the exact values to the multiple Poisson-Dirichlet limit.
    """
    theta = _as_theta(theta)
    seed = _as_seed(seed)
    reports = []
    limits = [mpd_expectation(theta, TestFunction.power_sums(theta.H, h, 2))
              for h in range(theta.H)]
    distances = []
    for j, K in enumerate(K_list):
        blocks = sample_ranked_dirichlet(theta, K, seed.substream(j), N)
        phi2 = np.sum(blocks ** 2, axis=-1)
        exact = [finite_mark_phi2(theta, K, h) for h in range(theta.H)]
        distances.append([abs(e - limit) for e, limit in zip(exact, limits)])
        for h in range(theta.H):
            reports.append(_mean_report(f'sweep phi2(z{h + 1}) K={K}', phi2[:, h], exact[h],
                                        seed, limit=limits[h]))
    distances = np.array(distances)
    violations = int(np.sum(np.diff(distances, axis=0) > 0))
    reports.append(TestReport.from_statistic('sweep monotone approach', violations, 0,
                                             replicates=len(K_list), limits=limits))
    return reports


def skew_product_test(theta, K, N, seed, step=1e-3, t_points=(0.25, 0.5)):
    """
    Two-sample KS comparison between the skew product and direct simulation of the flat
    process from the same start, for ``|z_1|`` and ``phi_2`` of every frequency vector, plus
    the driver-independence correlation.
    """
    theta = _as_theta(theta)
    seed = _as_seed(seed)
    w0 = theta.theta / theta.theta_bar
    x0 = np.full((theta.H, K), 1 / K)
    horizon = max(t_points)
    batch = skew_product_batch(theta, K, w0, x0, seed.substream(0), N, step, horizon, t_points)
    spec = WFSpec.flat(theta, K, step, horizon)
    init = compose_S(w0, list(x0)).z
    times, states = simulate_wf_batch(spec, init, seed.substream(1), N, t_points)
    direct = states.reshape(N, len(times), theta.H, K)
    direct_w = direct.sum(axis=-1)

    reports = []
    for j, t in enumerate(times):
        reports.append(_ks_report(f'skew |z1| K={K} t={t:g}', batch.w[:, j, 0],
                                  direct_w[:, j, 0], seed))
        for h in range(theta.H):
            skew_phi2 = np.sum(batch.x[:, j, h] ** 2, axis=-1)
            direct_phi2 = np.sum((direct[:, j, h] / direct_w[:, j, h, None]) ** 2, axis=-1)
            reports.append(_ks_report(f'skew phi2(x{h + 1}) K={K} t={t:g}', skew_phi2,
                                      direct_phi2, seed))
    for h in range(theta.H):
        correlation, se = driver_increment_correlation(batch, mark=h)
        reports.append(TestReport.from_statistic(f'skew driver independence x{h + 1}',
                                                 correlation, SE_MULTIPLE * se, se, N,
                                                 seed.master_seed))
    return reports


def _excursion_run(spec, init, n_paths, seed):
    integrator = WFIntegrator(spec, init, seed, n_paths=n_paths)
    lowest = [float(integrator.states.min())]
    hits = [0]

    def watch(current):
        lowest[0] = min(lowest[0], float(current.states.min()))
        hits[0] += int(np.sum(current.states.min(axis=-1) <= 0))

    integrator.run(spec.n_steps, watch)
    return integrator.excursions, hits[0], lowest[0]


def entrance_boundary_test(theta, n_paths, seed, step=1e-3, horizon=2.0, rejected=(0.9, 0.9),
                           below=(0.2, 0.2), max_excursion_fraction=0.1):
    """
    Mark-mass paths with theta_h >= 1 started at ``theta / theta_bar``.

    Reports, in order: projected states with a zero mark mass (none allowed); the fraction of
    paths whose Euler state left the open simplex before projection (at most
    ``max_excursion_fraction``); the same fraction for the parameters ``below``, simulated as a
    one-type-per-mark flat process and expected to fail; and whether ``rejected`` is refused
    when the mark-mass process is specified.
    """
    theta = _as_theta(theta)
    seed = _as_seed(seed)
    spec = WFSpec.mark_mass(theta, step, horizon)
    excursions, hits, lowest = _excursion_run(spec, theta.theta / theta.theta_bar, n_paths,
                                              seed.substream(0))
    reports = [TestReport.from_statistic('entrance boundary hits', hits, 0, replicates=n_paths,
                                         seed=seed.master_seed, min_mass=lowest),
               TestReport.from_statistic(f'entrance excursions theta={tuple(theta.theta)}',
                                         np.mean(excursions > 0), max_excursion_fraction,
                                         replicates=n_paths, seed=seed.master_seed,
                                         excursion_steps=int(excursions.sum()))]

    low = ThetaParams(below)
    low_spec = WFSpec.flat(low, 1, step, horizon, projection=spec.projection)
    excursions, _, _ = _excursion_run(low_spec, low.theta / low.theta_bar, n_paths,
                                      seed.substream(1))
    reports.append(TestReport.from_statistic(f'entrance excursions theta={tuple(low.theta)}',
                                             np.mean(excursions > 0), max_excursion_fraction,
                                             replicates=n_paths, seed=seed.master_seed,
                                             expect_pass=low.theta.min() >= 1,
                                             excursion_steps=int(excursions.sum())))
    try:
        WFSpec.mark_mass(rejected, step, horizon)
        accepted = 1
    except ValueError:
        accepted = 0
    reports.append(TestReport.from_statistic(f'entrance rejects theta={tuple(rejected)}',
                                             accepted, 0))
    return reports


# Generator identities

def _interior_points(H, K, n_points, seed, concentration=1.0):
    z = sample_dirichlet(np.full(H * K, concentration), seed, size=n_points)
    return z.reshape(n_points, H, K)


def intertwining_report(theta, K, max_degree=4, n_points=1000, seed=0):
    """Largest intertwining defect over all monomials up to ``max_degree``."""
    theta = _as_theta(theta)
    exponents = monomial_exponents(theta.H * K, max_degree)
    points = _interior_points(theta.H, K, n_points, _as_seed(seed))
    deviation = intertwining_deviations(theta, K, exponents, points)
    worst = int(np.argmax(deviation))
    return TestReport.from_statistic(f'intertwine H={theta.H} K={K} degree<={max_degree}',
                                     deviation[worst], EXACT_TOLERANCE,
                                     replicates=n_points, seed=_seed_value(seed),
                                     monomials=len(exponents),
                                     worst_exponents=exponents[worst].tolist())


def decomposition_report(theta, family=None, n_points=200, seed=0):
    """``sum_h B_h f - interaction = B f`` over the domain family at random interior points."""
    theta = _as_theta(theta)
    family = domain_family(theta.H) if family is None else family
    seed = _as_seed(seed)
    draws = sample_mpd_batch(MPDSpec(theta, 50), n_points, seed)
    ps = PowerSums.of(draws)
    worst = 0.0
    for f in family:
        parts = sum(apply_Bh(theta, f, h).values(ps) for h in range(theta.H))
        total = apply_B(theta, f).values(ps)
        gap = np.abs(parts - interaction(f).values(ps) - total) / np.maximum(1, np.abs(total))
        worst = max(worst, float(gap.max()))
    return TestReport.from_statistic(f'decompose B H={theta.H}', worst, EXACT_TOLERANCE,
                                     replicates=n_points, seed=seed.master_seed,
                                     functions=len(family))


def derivative_report(family, H, K, n_points=20, seed=0, rtol=1e-5):
    """
    Closed-form gradients and Hessians against central differences, at Dirichlet(4) points so
    that relative steps stay well above rounding.
    """
    seed = _as_seed(seed)
    points = _interior_points(H, K, n_points, seed, concentration=4.0)
    worst = 0.0
    for f in family:
        for blocks in points:
            grad_fd, hess_fd = finite_difference_oracle(f, blocks)
            grad, hess = gradient(f, blocks), hessian(f, blocks)
            scale_g = max(np.abs(grad).max(), 1e-300)
            scale_h = max(np.abs(hess).max(), 1e-300)
            worst = max(worst, float(np.abs(grad_fd - grad).max() / scale_g),
                        float(np.abs(hess_fd - hess).max() / scale_h))
    return TestReport.from_statistic(f'derivatives finite differences H={H} K={K}', worst, rtol,
                                     replicates=n_points, seed=seed.master_seed,
                                     functions=len(family))


def convergence_report(theta, f=None, K_list=(4, 16, 64, 256), sample_size=1000, seed=0):
    """Sampled ``sup |B^K f - B f|`` against its 1/K bound, and its decrease in K."""
    theta = _as_theta(theta)
    f = TestFunction.power_sums(theta.H, 0, 2) if f is None else f
    table = check_convergence_bound(theta, f, K_list, sample_size, _as_seed(seed))
    reports = [TestReport.from_statistic(f'convergence {f} K={row.K}', row.sup_deviation,
                                         row.bound, replicates=sample_size,
                                         seed=_seed_value(seed))
               for row in table.itertuples()]
    increases = int(np.sum(np.diff(table['sup_deviation'].to_numpy()) > 0))
    reports.append(TestReport.from_statistic(f'convergence {f} decreasing', increases, 0,
                                             replicates=len(table)))
    return reports


# Boundary example

def boundary_frame(depth=40, n_max=200, top=5):
    """
    The boundary sequence for ``n = 1..n_max`` with its decomposition: columns n, parity,
    w1, w2 and the ``top`` largest atoms of z1, z2, x1, x2.
    """
    rows = []
    for n in range(1, n_max + 1):
        z, (w, x) = boundary_sequence(n, depth)
        row = {'n': n, 'parity': 'even' if n % 2 == 0 else 'odd', 'w1': w.w[0], 'w2': w.w[1]}
        for label, vectors in (('z', z.marks), ('x', x)):
            for h, vector in enumerate(vectors, start=1):
                for i in range(top):
                    row[f'{label}{h}_{i + 1}'] = vector.atoms[i]
        rows.append(row)
    return pd.DataFrame(rows)


def boundary_report(depth=40, n_max=200, theta=(2.0, 3.0)):
    """
    Even and odd decompositions of the boundary sequence against their two closed-form limits,
    after removing the exact finite-n offset. The limits differ, and so do the limits of
    ``B |z_1|`` along the two subsequences.
    """
    theta = _as_theta(theta)
    limits = boundary_limit_points(depth)
    tolerance = 2.0 ** -depth
    reports = []
    for parity, offset_mark, scale in (('even', 0, 2), ('odd', 1, 3)):
        limit_w, limit_x = limits[parity]
        worst = 0.0
        for n in range(2 if parity == 'even' else 1, n_max + 1, 2):
            _, (w, x) = boundary_sequence(n, depth)
            worst = max(worst, float(np.abs(w.w - limit_w.w).max()))
            for h in range(2):
                atoms = x[h].atoms.copy()
                if h == offset_mark:
                    atoms[:min(n, depth)] -= 1 / (scale * n)
                worst = max(worst, float(np.abs(atoms - limit_x[h].atoms).max()))
        reports.append(TestReport.from_statistic(f'boundary {parity} limit depth={depth}', worst,
                                                 tolerance, replicates=n_max // 2))

    gap = float(np.abs(limits['even'][0].w - limits['odd'][0].w).max())
    reports.append(TestReport.from_statistic('boundary limits coincide', gap, tolerance,
                                             expect_pass=False))
    f = TestFunction.mark_power(2, 0)
    generated = apply_B(theta, f)
    last_even = n_max - n_max % 2
    along = {'even': generated.evaluate(boundary_sequence(last_even, depth)[0]),
             'odd': generated.evaluate(boundary_sequence(last_even - 1, depth)[0])}
    reports.append(TestReport.from_statistic(f'boundary B{f} single limit',
                                             along['even'] - along['odd'], 1e-3,
                                             expect_pass=False, **along))
    return reports


# Runner

TARGETS = ('intertwine', 'stationary-exact', 'stationary-mc', 'moments', 'selfsim', 'sweep',
           'convergence', 'skew', 'entrance', 'boundary')


def run_target(target, config):
    """
    Run one verification target with the settings of a :class:`multipd.cli.RunConfig`.
    """
    theta = ThetaParams.from_string(config.theta)
    K_list = config.k_list
    seed = SeedSpec(config.seed)
    logger.info('Running %s', target)
    if target == 'intertwine':
        reports = [intertwining_report(theta, K, 4, 1000, seed.stream(j))
                   for j, K in enumerate(K_list)]
        reports.append(decomposition_report(theta, seed=seed.stream(len(K_list))))
        family = [TestFunction.power_sums(theta.H, 0, 2),
                  TestFunction.power_sums(theta.H, 0, 2, m0=-1),
                  TestFunction.power_sums(theta.H, theta.H - 1, 3, 2, m0=1)]
        reports.append(derivative_report(family, theta.H, K_list[0],
                                         seed=seed.stream(len(K_list) + 1)))
        return reports
    if target == 'stationary-exact':
        reports = []
        for K in K_list:
            reports += exact_stationarity_BK(theta, K)
        reports += exact_stationarity_BK(theta, K_list[0], sign=-1.0)
        return (reports + exact_stationarity_B(theta)
                + exact_stationarity_B(theta, operator='Bhat'))
    if target == 'stationary-mc':
        return (mc_stationarity_B(theta, N=config.n, seed=seed, truncation=config.truncation,
                                  threads=config.threads)
                + mc_moments_test(theta, N=config.n, seed=seed.stream(10 ** 6),
                                  truncation=config.truncation, threads=config.threads))
    if target == 'moments':
        reports = phi2_relaxation_check(1.0, 64, min(config.n, 10_000), seed, config.ode_step,
                                        threads=config.threads)
        f = TestFunction.power_sums(theta.H, 0, 2)
        reports += moment_ode_check('flat', theta, f, (0.25, 0.5), min(config.n, 10_000),
                                    seed.stream(1), K=K_list[0], step=config.step,
                                    threads=config.threads)
        reports += moment_ode_check('skew', theta, f, (0.25, 0.5), config.paths,
                                    seed.stream(2), K=K_list[0], step=config.step)
        reports += moment_ode_check('limit', theta, f, (0.25, 0.5), config.paths // 5,
                                    seed.stream(3), step=config.step, approx_K=config.approx_k)
        return reports
    if target == 'selfsim':
        return selfsimilarity_test(theta, K_list[-1], config.n, seed)
    if target == 'sweep':
        return kingman_limit_sweep(theta, K_list, config.n, seed)
    if target == 'convergence':
        return convergence_report(theta, K_list=K_list, seed=seed)
    if target == 'skew':
        return skew_product_test(theta, K_list[0], config.paths, seed, config.step)
    if target == 'entrance':
        return entrance_boundary_test(theta, min(config.paths, 1000), seed, config.step,
                                      config.horizon * 2)
    if target == 'boundary':
        return boundary_report(config.depth, config.n_max, theta)
    raise ValueError(f'Invalid parameter input. Unknown verification target {target!r}.')


def run_all(config, targets=TARGETS):
    reports = []
    for target in targets:
        reports += run_target(target, config)
    return reports


def reports_to_frame(reports):
    columns = ['name', 'statistic', 'se', 'threshold', 'passed', 'expect_pass', 'replicates',
               'seed']
    return pd.DataFrame([{key: getattr(report, key) for key in columns} for report in reports],
                        columns=columns)


def write_jsonl(path, reports, header):
    """Write a header object followed by one report per line."""
    with open(path, 'w', encoding='utf-8') as stream:
        stream.write(json.dumps(header, default=str) + '\n')
        for report in reports:
            stream.write(json.dumps(report.to_dict(), default=_json_default) + '\n')


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


