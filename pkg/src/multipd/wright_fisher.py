r"""
Euler-Maruyama integration of Wright-Fisher diffusions with parent-independent mutation.

Every process handled here has generator

.. math::

    \frac{1}{2}\sum_{i,j} x_i(\delta_{ij} - x_j)\partial_i\partial_j
    + \frac{1}{2}\sum_i (u_i - U x_i)\partial_i, \qquad U = \sum_i u_i,

and differs only in the mutation rates ``u``: the mark-mass process uses the thetas, the
symmetric K-type process uses theta_h / K for every type, and the flat process on H*K types uses
theta_h / K within mark h.
"""

import logging
import math

import numpy as np
import pandas as pd

from .samplers import as_generator
from .simplex import DomainError, ThetaParams, Tolerances

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Numerical integration cannot continue."""


class WFSpec:
    """
    Wright-Fisher process specification.

    Parameters
    ----------
    kind : {'mark_mass', 'symmetric', 'flat'}
    theta : ThetaParams or array_like
        For 'symmetric' a single value theta_h.
    step : float
        Requested time step; the grid uses ``horizon / ceil(horizon / step)``.
    horizon : float
    K : int
        Types per mark, required for 'symmetric' and 'flat'.
    projection : {'clip', 'reflect'}, optional
        Defaults to 'reflect' for 'mark_mass' (entrance boundaries) and 'clip' otherwise.
    noise : bool
        False integrates the drift only (diagnostic).
    """

    kinds = ('mark_mass', 'symmetric', 'flat')
    projections = ('clip', 'reflect')
    default_step = 1e-4

    def __init__(self, kind, theta, step=None, horizon=1.0, K=None, projection=None, noise=True):
        if kind not in self.kinds:
            raise ValueError(f'Invalid parameter input. Unknown process kind {kind!r}.')
        theta = theta if isinstance(theta, ThetaParams) else ThetaParams(theta)
        step = self.default_step if step is None else float(step)
        if not step > 0 or not horizon > 0:
            raise ValueError('Invalid parameter input. step and horizon must be positive.')
        if step > horizon:
            raise ValueError('Invalid parameter input. step must not exceed horizon.')

        if kind == 'mark_mass':
            theta.require_diffusion_valid()
            rates = theta.theta.copy()
        else:
            if K is None or int(K) != K or K < 1:
                raise ValueError(f'Invalid parameter input. Kind {kind!r} needs integer K >= 1.')
            K = int(K)
            if kind == 'symmetric' and theta.H != 1:
                raise ValueError('Invalid parameter input. The symmetric process takes a single '
                                 'theta_h.')
            rates = np.repeat(theta.theta / K, K)

        projection = projection or ('reflect' if kind == 'mark_mass' else 'clip')
        if projection not in self.projections:
            raise ValueError(f'Invalid parameter input. Unknown projection {projection!r}.')

        self._kind = kind
        self._theta = theta
        self._K = K
        self._horizon = float(horizon)
        self._n_steps = math.ceil(self._horizon / step - 1e-9)
        self._step = self._horizon / self._n_steps
        self._rates = rates
        self._rates.flags.writeable = False
        self._projection = projection
        self._noise = bool(noise)

    @classmethod
    def mark_mass(cls, theta, step=None, horizon=1.0, **kwargs):
        return cls('mark_mass', theta, step, horizon, **kwargs)

    @classmethod
    def symmetric(cls, theta_h, K, step=None, horizon=1.0, **kwargs):
        return cls('symmetric', [theta_h], step, horizon, K=K, **kwargs)

    @classmethod
    def flat(cls, theta, K, step=None, horizon=1.0, **kwargs):
        return cls('flat', theta, step, horizon, K=K, **kwargs)

    def __repr__(self):
        return (f'WFSpec({self._kind!r}, {self._theta!r}, step={self._step!r}, '
                f'horizon={self._horizon!r}, K={self._K!r})')

    @property
    def kind(self):
        return self._kind

    @property
    def theta(self):
        return self._theta

    @property
    def K(self):
        return self._K

    @property
    def dims(self):
        return self._rates.size

    @property
    def step(self):
        return self._step

    @property
    def horizon(self):
        return self._horizon

    @property
    def n_steps(self):
        return self._n_steps

    @property
    def mutation_rates(self):
        return self._rates

    @property
    def total_rate(self):
        return float(self._rates.sum())

    @property
    def projection(self):
        return self._projection

    @property
    def noise(self):
        return self._noise

    def times(self):
        return np.linspace(0.0, self._horizon, self._n_steps + 1)


def wf_drift(spec, state):
    """First-order coefficients ``(u - U x) / 2``; they sum to zero on the simplex."""
    state = np.asarray(state, dtype=float)
    return 0.5 * (spec.mutation_rates - spec.total_rate * state)


def wf_covariance(state):
    """The Wright-Fisher covariance ``diag(x) - x x^T``."""
    state = np.asarray(state, dtype=float)
    return np.diag(state) - np.outer(state, state)


def wf_diffusion_factor(state, method='explicit'):
    """
    A factor L of the Wright-Fisher covariance, ``L @ L.T == diag(x) - x x^T``.

    Parameters
    ----------
    state : array_like
        Simplex point.
    method : {'explicit', 'cholesky'}
        'explicit' returns the d x d factor ``diag(sqrt(x)) - x sqrt(x)^T``, valid on the whole
        simplex. 'cholesky' factors the leading (d-1) x (d-1) minor and sets the last row to the
        negated column sums (d x (d-1)); it needs an interior point.
    """
    state = np.asarray(state, dtype=float)
    if np.any(state < 0):
        raise ValueError('Invalid parameter input. State has negative entries.')

    if method == 'explicit':
        root = np.sqrt(state)
        return np.diag(root) - np.outer(state, root)
    if method != 'cholesky':
        raise ValueError(f'Invalid parameter input. Unknown factor method {method!r}.')

    d = state.size
    if d == 1:
        return np.zeros((1, 0))
    try:
        minor = np.linalg.cholesky(wf_covariance(state)[:-1, :-1])
    except np.linalg.LinAlgError as err:
        raise DomainError('Cholesky factor needs an interior state.') from err
    return np.vstack([minor, -minor.sum(axis=0)])


def project_to_simplex(states, mode='clip'):
    """
    Map states back to the simplex, either clipping or reflecting negative coordinates at zero,
    then renormalizing.

    Returns
    -------
    tuple
        Projected states and the L1 distance moved per state.
    """
    projected = np.abs(states) if mode == 'reflect' else np.clip(states, 0.0, None)
    projected = projected / projected.sum(axis=-1, keepdims=True)
    return projected, np.abs(projected - states).sum(axis=-1)


def _check_states(spec, states):
    if states.shape[-1] != spec.dims:
        raise ValueError(f'Dimension mismatch: state has {states.shape[-1]} coordinates, '
                         f'process has {spec.dims}.')
    if np.any(states < 0) or np.any(np.abs(states.sum(axis=-1) - 1) > Tolerances.simplex):
        raise ValueError('Invalid parameter input. Initial state is not on the simplex.')
    if spec.kind == 'mark_mass' and np.any(states <= 0):
        raise ValueError('Invalid parameter input. The mark-mass process starts in the interior.')


class WFIntegrator:
    """
    Advances a batch of independent paths of one Wright-Fisher process.

    Parameters
    ----------
    spec : WFSpec
    init : array_like
        Initial state, shape (d,) shared by all paths or (n_paths, d).
    seed : SeedSpec or numpy.random.Generator
    n_paths : int, optional
        Needed when ``init`` is a single state.
    """

    def __init__(self, spec, init, seed, n_paths=None):
        init = np.asarray(init, dtype=float)
        if init.ndim == 1:
            init = np.tile(init, (n_paths or 1, 1))
        elif n_paths is not None and init.shape[0] != n_paths:
            raise ValueError('Dimension mismatch: init rows differ from n_paths.')
        _check_states(spec, init)

        self._spec = spec
        self._states = init.copy()
        self._rng = as_generator(seed)
        self._steps = 0
        self._excursions = np.zeros(init.shape[0], dtype=int)

    @property
    def spec(self):
        return self._spec

    @property
    def states(self):
        view = self._states.view()
        view.flags.writeable = False
        return view

    @property
    def steps(self):
        return self._steps

    @property
    def time(self):
        return self._steps * self._spec.step

    @property
    def excursions(self):
        """Per path, the number of steps whose Euler state left the open simplex."""
        return self._excursions.copy()

    def step(self):
        """One Euler-Maruyama step followed by projection onto the simplex."""
        spec = self._spec
        dt = spec.step
        states = self._states
        increment = wf_drift(spec, states) * dt
        if spec.noise:
            root = np.sqrt(states)
            kicks = root * self._rng.standard_normal(states.shape) * math.sqrt(dt)
            increment += kicks - states * kicks.sum(axis=-1, keepdims=True)

        raw = states + increment
        self._excursions += raw.min(axis=-1) <= 0
        projected, moved = project_to_simplex(raw, spec.projection)
        if moved.max() > Tolerances.max_projection_move:
            raise SimulationError(f'Projection moved a state by {moved.max():.3g} in L1 at step '
                                  f'{self._steps + 1}; reduce the time step.')
        self._states = projected
        self._steps += 1

    def run(self, n_steps, callback=None):
        """Advance ``n_steps`` steps, calling ``callback(integrator)`` after each one."""
        for _ in range(n_steps):
            self.step()
            if callback is not None:
                callback(self)


class Path:
    """
    Time-gridded trajectory of one simplex-valued process.

    Parameters
    ----------
    times : array_like
        Increasing grid starting at 0.
    states : array_like
        One state per grid time, shape (M + 1, d).
    """

    def __init__(self, times, states):
        times = np.asarray(times, dtype=float)
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if times.ndim != 1 or states.shape[0] != times.size:
            raise ValueError('Dimension mismatch: one state per grid time is required.')
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError('Invalid parameter input. Path times must increase.')
        if np.any(states < 0) or np.any(np.abs(states.sum(axis=1) - 1) > Tolerances.simplex):
            raise ValueError('Invalid parameter input. Path leaves the simplex.')
        self._times = times
        self._states = states
        self._times.flags.writeable = False
        self._states.flags.writeable = False

    def __len__(self):
        return self._times.size

    @property
    def times(self):
        return self._times

    @property
    def states(self):
        return self._states

    def is_interior(self):
        """Every state at t > 0 has all coordinates positive."""
        return bool(np.all(self._states[1:] > 0))

    def to_frame(self, prefix='x'):
        """Path as a DataFrame with columns t, prefix1, ..., prefixd."""
        columns = [f'{prefix}{i + 1}' for i in range(self._states.shape[1])]
        frame = pd.DataFrame(self._states, columns=columns)
        frame.insert(0, 't', self._times)
        return frame


def simulate_wf(spec, init, seed, record_every=1):
    """
    Simulate one path on the grid of ``spec``.

    Parameters
    ----------
    spec : WFSpec
    init : array_like
        Initial simplex point.
    seed : SeedSpec or numpy.random.Generator
    record_every : int
        Keep every ``record_every``-th grid state (the final state is always kept).

    Returns
    -------
    Path
    """
    integrator = WFIntegrator(spec, init, seed)
    times, states = [0.0], [integrator.states[0].copy()]

    def record(current):
        if current.steps % record_every == 0 or current.steps == spec.n_steps:
            times.append(current.time)
            states.append(current.states[0].copy())

    logger.debug('Simulating %s for %d steps', spec, spec.n_steps)
    integrator.run(spec.n_steps, record)
    return Path(times, states)


def grid_indices(spec, record_times):
    """Indices of the grid points nearest to ``record_times``."""
    record_times = np.atleast_1d(np.asarray(record_times, dtype=float))
    indices = np.rint(record_times / spec.step).astype(int)
    if np.any(indices < 0) or np.any(indices > spec.n_steps):
        raise ValueError('Invalid parameter input. Record times must lie within the horizon.')
    return indices


def simulate_wf_batch(spec, init, seed, n_paths, record_times):
    """
    Simulate ``n_paths`` independent paths and keep the states at ``record_times`` only.

    Returns
    -------
    tuple
        ``(times, states)`` with the snapped record times and states of shape
        (n_paths, len(record_times), d).
    """
    indices = grid_indices(spec, record_times)
    integrator = WFIntegrator(spec, init, seed, n_paths=n_paths)
    recorded = np.empty((integrator.states.shape[0], indices.size, spec.dims))
    recorded[:, indices == 0] = integrator.states[:, None]

    def record(current):
        hits = indices == current.steps
        if hits.any():
            recorded[:, hits] = current.states[:, None]

    integrator.run(int(indices.max()), record)
    return indices * spec.step, recorded
