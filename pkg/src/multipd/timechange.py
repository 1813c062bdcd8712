"""
Multiparameter random time change and the skew-product construction.

Each within-mark driver X_h runs on its own clock ``tau_h(t) = int_0^t ds / w_h(s)`` driven by
the mark-mass process W, and the composed process is ``Z_h(t) = W_h(t) X_h(tau_h(t))``.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid

from .samplers import SeedSpec
from .simplex import (DomainError, FlatSimplexPoint, KingmanPoint, SimplexPoint, ThetaParams,
                      compose_S)
from .wright_fisher import (Path, SimulationError, WFIntegrator, WFSpec, grid_indices,
                            simulate_wf)

logger = logging.getLogger(__name__)

# Guards floor() against clock values a rounding error below a driver grid point.
_GRID_SLACK = 1e-9


class ClockPath:
    """
    Integrated clocks on the grid of the driving mark-mass path.

    Parameters
    ----------
    times : array_like
        Grid, shape (M + 1,).
    tau : array_like
        Clock values, shape (H, M + 1).
    """

    def __init__(self, times, tau):
        times = np.asarray(times, dtype=float)
        tau = np.atleast_2d(np.asarray(tau, dtype=float))
        if tau.shape[1] != times.size:
            raise ValueError('Dimension mismatch: one clock value per grid time is required.')
        if np.any(tau[:, 0] != 0):
            raise ValueError('Invalid parameter input. Clocks start at 0.')
        if np.any(np.diff(tau, axis=1) <= 0):
            raise ValueError('Invalid parameter input. Clocks must increase strictly.')
        if np.any(tau < times * (1 - 1e-12)):
            raise ValueError('Invalid parameter input. Clocks run at least as fast as real time.')
        self._times = times
        self._tau = tau

    @property
    def times(self):
        return self._times

    @property
    def tau(self):
        return self._tau

    @property
    def H(self):
        return self._tau.shape[0]


def integrate_clock(w_path):
    """
    Trapezoidal integration of ``1 / w_h`` along a mark-mass path.

    Raises
    ------
    DomainError
        If some mark mass is not positive on the grid.
    """
    w = w_path.states
    if np.any(w <= 0):
        raise DomainError('Clock integration needs positive mark masses at every grid time.')
    tau = cumulative_trapezoid(1 / w, w_path.times, axis=0, initial=0)
    return ClockPath(w_path.times, tau.T)


class LazyDriver:
    """
    A driver path simulated on its own uniform grid only as far as requested. The stored grid
    at least doubles whenever it has to grow.

    Parameters
    ----------
    spec : WFSpec
        Process and grid step; ``spec.horizon`` is the initial simulated horizon.
    init : array_like
        Initial state.
    seed : SeedSpec or numpy.random.Generator
    max_steps : int
        Hard limit on the grid length.
    """

    def __init__(self, spec, init, seed, max_steps=10 ** 7):
        self._integrator = WFIntegrator(spec, init, seed)
        self._max_steps = max_steps
        self._states = np.empty((spec.n_steps + 1, spec.dims))
        self._states[0] = self._integrator.states[0]
        self._filled = 1
        self._fill(spec.n_steps)

    @property
    def step(self):
        return self._integrator.spec.step

    @property
    def horizon(self):
        """Time of the last simulated grid point."""
        return (self._filled - 1) * self.step

    def _fill(self, last_index):
        if last_index >= self._states.shape[0]:
            rows = max(2 * self._states.shape[0], last_index + 1)
            grown = np.empty((rows, self._states.shape[1]))
            grown[:self._filled] = self._states[:self._filled]
            self._states = grown
        while self._filled <= last_index:
            self._integrator.step()
            self._states[self._filled] = self._integrator.states[0]
            self._filled += 1

    def extend_to(self, t):
        """Make sure the grid covers time ``t``."""
        needed = math.floor(t / self.step + _GRID_SLACK)
        if needed < self._filled:
            return
        target = max(needed, 2 * (self._filled - 1))
        if target > self._max_steps:
            if needed > self._max_steps:
                raise SimulationError(f'Driver horizon exhausted: time {t!r} needs {needed} '
                                      f'steps, the limit is {self._max_steps}.')
            target = self._max_steps
        logger.debug('Extending driver grid from %d to %d steps', self._filled - 1, target)
        self._fill(target)

    def states_at(self, times):
        """States at the left-nearest grid points of ``times``."""
        times = np.asarray(times, dtype=float)
        self.extend_to(times.max())
        indices = np.floor(times / self.step + _GRID_SLACK).astype(int)
        return self._states[indices]


def time_changed_eval(driver, clock, mark=0):
    """
    Evaluate a driver along one clock, ``t -> X(tau_mark(t))``.

    Returns
    -------
    Path
        On the clock's grid.
    """
    return Path(clock.times, driver.states_at(clock.tau[mark]))


class SkewProductState:
    """
    One state of a skew product: mark masses, within-mark frequencies and their composition.

    Parameters
    ----------
    w : SimplexPoint or array_like
    x : sequence
        Frequency vectors (arrays or OrderedMassVector).
    z : FlatSimplexPoint or KingmanPoint, optional
        Stored composition, checked against ``compose_S(w, x)``.
    """

    def __init__(self, w, x, z=None):
        self._w = w if isinstance(w, SimplexPoint) else SimplexPoint(w)
        self._x = list(x)
        composed = compose_S(self._w, self._x)
        if z is not None and _composition_gap(composed, z) > 1e-12:
            raise ValueError('Invalid parameter input. z is not the composition of (w, x).')
        self._z = composed if z is None else z

    @property
    def w(self):
        return self._w

    @property
    def x(self):
        return self._x

    @property
    def z(self):
        return self._z


def _composition_gap(a, b):
    if isinstance(a, FlatSimplexPoint) and isinstance(b, FlatSimplexPoint):
        return float(np.abs(a.z - b.z).max())
    if isinstance(a, KingmanPoint) and isinstance(b, KingmanPoint):
        n = max(max(len(mark) for mark in a.marks), max(len(mark) for mark in b.marks))
        atoms_a, tails_a = a.to_arrays(n)
        atoms_b, tails_b = b.to_arrays(n)
        return float(max(np.abs(atoms_a - atoms_b).max(), np.abs(tails_a - tails_b).max()))
    return math.inf


class SkewProductTrajectory:
    """
    Trajectory of a skew product on the grid of its mark-mass path.

    Parameters
    ----------
    clock : ClockPath
    w : numpy.ndarray
        Mark masses, shape (M + 1, H).
    x : numpy.ndarray
        Within-mark frequencies at the clock times, shape (M + 1, H, K).
    ranked : bool
        Whether ``x`` is ranked per mark (limit regime).
    """

    def __init__(self, clock, w, x, ranked=False):
        self._clock = clock
        self._w = np.asarray(w, dtype=float)
        self._x = np.asarray(x, dtype=float)
        self._z = self._w[..., None] * self._x
        self._ranked = ranked

    def __len__(self):
        return self._w.shape[0]

    @property
    def times(self):
        return self._clock.times

    @property
    def clock(self):
        return self._clock

    @property
    def w(self):
        return self._w

    @property
    def x(self):
        return self._x

    @property
    def z(self):
        return self._z

    @property
    def ranked(self):
        return self._ranked

    def state(self, k):
        """SkewProductState at grid index ``k``."""
        H, K = self._x.shape[1:]
        return SkewProductState(self._w[k], list(self._x[k]),
                                FlatSimplexPoint(self._z[k].ravel(), H, K))

    def consistency_gap(self):
        """Largest deviation between the stored z and compose_S(w, x) over the grid."""
        return max(_composition_gap(compose_S(self._w[k], list(self._x[k])),
                                    FlatSimplexPoint(self._z[k].ravel(), *self._x.shape[1:]))
                   for k in range(len(self)))

    def to_frame(self, top=5):
        """
        Columns t, tau1..tauH, w1..wH and the ``top`` largest atoms of every z_h
        (``z{h}_{i}``), ranked.
        """
        H, K = self._x.shape[1:]
        top = min(top, K)
        data = {'t': self.times}
        for h in range(H):
            data[f'tau{h + 1}'] = self._clock.tau[h]
        for h in range(H):
            data[f'w{h + 1}'] = self._w[:, h]
        ranked = -np.sort(-self._z, axis=-1)
        for h in range(H):
            for i in range(top):
                data[f'z{h + 1}_{i + 1}'] = ranked[:, h, i]
        return pd.DataFrame(data)


def _check_init(theta, w0, x0):
    w0 = np.asarray(w0.w if isinstance(w0, SimplexPoint) else w0, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if w0.shape[-1] != theta.H or x0.shape[-2] != theta.H:
        raise ValueError(f'Dimension mismatch: theta has {theta.H} marks.')
    if np.any(w0 <= 0):
        raise ValueError('Invalid parameter input. Initial mark masses must be positive.')
    return w0, x0


def build_skew_product(theta, K, init, seed, step=1e-3, horizon=1.0, driver_step=None):
    """
    Simulate one skew product ``Z_h(t) = W_h(t) X_h(tau_h(t))`` with independent drivers.

    Parameters
    ----------
    theta : ThetaParams or array_like
        Needs theta_h >= 1.
    K : int
        Types per mark.
    init : tuple
        ``(w0, x0)`` with w0 interior and x0 of shape (H, K).
    seed : SeedSpec
        Substream 0 drives W, substream h + 1 drives X_h.
    step, horizon : float
        Grid of the mark-mass process.
    driver_step : float, optional
        Grid step of the drivers, default ``step``.

    Returns
    -------
    SkewProductTrajectory
    """
    theta = theta if isinstance(theta, ThetaParams) else ThetaParams(theta)
    theta.require_diffusion_valid()
    w0, x0 = _check_init(theta, *init)
    driver_step = step if driver_step is None else driver_step
    seed = seed if isinstance(seed, SeedSpec) else SeedSpec(seed)

    w_path = simulate_wf(WFSpec.mark_mass(theta, step, horizon), w0, seed.substream(0))
    clock = integrate_clock(w_path)
    x = np.empty(w_path.states.shape + (int(K),))
    for h, theta_h in enumerate(theta.theta):
        spec = WFSpec.symmetric(theta_h, K, driver_step, max(horizon, driver_step))
        driver = LazyDriver(spec, x0[h], seed.substream(h + 1))
        x[:, h] = time_changed_eval(driver, clock, h).states
    return SkewProductTrajectory(clock, w_path.states, x)


def lump_arrays(atoms, tails, K):
    """
    Vectorized :meth:`KingmanPoint.lumped`: keep K atoms per mark and add the rest of the mark
    mass to the largest one. Shapes (..., H, N) and (..., H).
    """
    kept = np.zeros(atoms.shape[:-1] + (K,))
    width = min(K, atoms.shape[-1])
    kept[..., :width] = atoms[..., :width]
    kept[..., 0] += atoms[..., width:].sum(axis=-1) + tails
    return kept


def build_limit_process(theta, approx_K, init, seed, step=1e-3, horizon=1.0, driver_step=None):
    """
    Approximate the limit diffusion on the generalized Kingman simplex by a skew product whose
    drivers are ranked ``approx_K``-type symmetric Wright-Fisher processes.

    Parameters
    ----------
    init : KingmanPoint
        Interior starting point; it is lumped to ``approx_K`` atoms per mark.

    Returns
    -------
    SkewProductTrajectory
        Ranked per mark.
    """
    if not isinstance(init, KingmanPoint) or not init.is_interior():
        raise ValueError('Invalid parameter input. The limit process starts from an interior '
                         'KingmanPoint.')
    masses = init.masses
    blocks = init.lumped(int(approx_K)).blocks()
    x0 = blocks / masses[:, None]
    trajectory = build_skew_product(theta, approx_K, (masses, x0), seed, step, horizon,
                                    driver_step)
    return SkewProductTrajectory(trajectory.clock, trajectory.w,
                                 -np.sort(-trajectory.x, axis=-1), ranked=True)


@dataclass(frozen=True)
class SkewProductBatch:
    """Independent skew-product replicates recorded at a few times."""

    times: np.ndarray
    w: np.ndarray
    x: np.ndarray
    tau: np.ndarray

    @property
    def z(self):
        return self.w[..., None] * self.x


def _capture_driver(spec, init, seed, clock_values):
    """States of independent drivers at the left-nearest grid points of per-path clock values."""
    n_paths, n_times = clock_values.shape
    indices = np.floor(clock_values / spec.step + _GRID_SLACK).astype(int)
    flat = indices.ravel()
    order = np.argsort(flat, kind='stable')
    ordered = flat[order]
    captured = np.empty((n_paths, n_times, spec.dims))

    integrator = WFIntegrator(spec, init, seed, n_paths=n_paths)
    last = int(ordered[-1])
    logger.debug('Driver batch runs %d steps for %d paths', last, n_paths)
    start = 0
    for j in range(last + 1):
        if j:
            integrator.step()
        stop = np.searchsorted(ordered, j, side='right')
        if stop > start:
            hits = order[start:stop]
            rows = hits // n_times
            captured[rows, hits % n_times] = integrator.states[rows]
            start = stop
    return captured


def skew_product_batch(theta, K, w0, x0, seed, n_paths, step, horizon, record_times,
                       driver_step=None):
    """
    Simulate ``n_paths`` independent skew products and record them at ``record_times``.

    Parameters
    ----------
    w0 : array_like
        Initial mark masses, shape (H,) or (n_paths, H).
    x0 : array_like
        Initial frequencies, shape (H, K) or (n_paths, H, K).

    Returns
    -------
    SkewProductBatch
    """
    theta = theta if isinstance(theta, ThetaParams) else ThetaParams(theta)
    w0, x0 = _check_init(theta, w0, x0)
    driver_step = step if driver_step is None else driver_step
    seed = seed if isinstance(seed, SeedSpec) else SeedSpec(seed)

    mark_spec = WFSpec.mark_mass(theta, step, horizon)
    indices = grid_indices(mark_spec, record_times)
    integrator = WFIntegrator(mark_spec, w0, seed.substream(0), n_paths=n_paths)
    recorded_w = np.empty((n_paths, indices.size, theta.H))
    recorded_tau = np.zeros((n_paths, indices.size, theta.H))
    recorded_w[:, indices == 0] = integrator.states[:, None]

    tau = np.zeros((n_paths, theta.H))
    inverse = 1 / integrator.states
    for k in range(1, int(indices.max()) + 1):
        integrator.step()
        new_inverse = 1 / integrator.states
        tau += 0.5 * mark_spec.step * (inverse + new_inverse)
        inverse = new_inverse
        hits = indices == k
        if hits.any():
            recorded_w[:, hits] = integrator.states[:, None]
            recorded_tau[:, hits] = tau[:, None]

    x = np.empty((n_paths, indices.size, theta.H, int(K)))
    for h, theta_h in enumerate(theta.theta):
        spec = WFSpec.symmetric(theta_h, K, driver_step, max(horizon, driver_step))
        x_init = x0[..., h, :] if x0.ndim == 3 else x0[h]
        x[:, :, h] = _capture_driver(spec, x_init, seed.substream(h + 1), recorded_tau[..., h])
    return SkewProductBatch(indices * mark_spec.step, recorded_w, x, recorded_tau)


def limit_process_batch(theta, approx_K, masses, atoms, tails, seed, step, horizon,
                        record_times, driver_step=None):
    """
    Replicates of the ranked limit surrogate started from given points, e.g. an
    :class:`~multipd.samplers.MPDBatch`: masses (n, H), atoms (n, H, N), tails (n, H).
    """
    masses = np.asarray(masses, dtype=float)
    if np.any(masses <= 0):
        raise ValueError('Invalid parameter input. The limit process starts in the interior.')
    x0 = lump_arrays(atoms, tails, int(approx_K)) / masses[..., None]
    batch = skew_product_batch(theta, approx_K, masses, x0, seed, masses.shape[0], step,
                               horizon, record_times, driver_step)
    return SkewProductBatch(batch.times, batch.w, -np.sort(-batch.x, axis=-1), batch.tau)


def driver_increment_correlation(batch, mark=0):
    """
    Sample correlation between the increment of w_1 and the increment of the first coordinate of
    X_mark over the recorded window, with its standard error ``1 / sqrt(n)``.
    """
    dw = batch.w[:, -1, 0] - batch.w[:, 0, 0]
    dx = batch.x[:, -1, mark, 0] - batch.x[:, 0, mark, 0]
    n = dw.size
    if dw.std() == 0 or dx.std() == 0:
        return 0.0, 1 / math.sqrt(n)
    return float(np.corrcoef(dw, dx)[0, 1]), 1 / math.sqrt(n)
