"""
Samplers for the stationary laws: Dirichlet, Poisson-Dirichlet (GEM stick-breaking) and the
multiple Poisson-Dirichlet law, on reproducible counter-based random streams.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .simplex import (FlatSimplexPoint, KingmanPoint, OrderedMassVector, SimplexPoint,
                      ThetaParams, compose_S)

logger = logging.getLogger(__name__)


class SeedSpec:
    """
    Identifies one random stream: a master seed plus a stream id, optionally refined by a path
    of child indices. Equal specs give identical generators, distinct specs independent ones.

    The root spec ``SeedSpec(master_seed)`` owns the top-level streams ``SeedSpec(master_seed,
    k)``. Any other spec derives its streams and substreams below its own key, streams on odd
    and substreams on even path entries, so the two families never meet.

    Parameters
    ----------
    master_seed : int
        Nonnegative 64-bit integer.
    stream_id : int
        Nonnegative stream index.
    """

    def __init__(self, master_seed, stream_id=0, _path=()):
        if not 0 <= int(master_seed) < 2 ** 64:
            raise ValueError('Invalid parameter input. master_seed must be a 64-bit unsigned '
                             'integer.')
        if int(stream_id) < 0:
            raise ValueError('Invalid parameter input. stream_id must be nonnegative.')
        self._master_seed = int(master_seed)
        self._stream_id = int(stream_id)
        self._path = tuple(int(j) for j in _path)

    def __repr__(self):
        path = f', path={self._path}' if self._path else ''
        return f'SeedSpec({self._master_seed}, {self._stream_id}{path})'

    def __eq__(self, other):
        if not isinstance(other, SeedSpec):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    @property
    def master_seed(self):
        return self._master_seed

    @property
    def stream_id(self):
        return self._stream_id

    @property
    def key(self):
        return (self._master_seed, self._stream_id) + self._path

    @property
    def is_root(self):
        return self._stream_id == 0 and not self._path

    def stream(self, k):
        """Stream ``k`` of this spec: top-level for the root, a child key otherwise."""
        if int(k) < 0:
            raise ValueError('Invalid parameter input. stream_id must be nonnegative.')
        if self.is_root:
            return SeedSpec(self._master_seed, k)
        return SeedSpec(self._master_seed, self._stream_id, self._path + (2 * int(k) + 1,))

    def substream(self, j):
        """Independent child stream ``j`` of this stream."""
        if int(j) < 0:
            raise ValueError('Invalid parameter input. Substream index must be nonnegative.')
        return SeedSpec(self._master_seed, self._stream_id, self._path + (2 * int(j),))

    def generator(self):
        """Fresh numpy Generator on a Philox (counter-based) bit generator."""
        sequence = np.random.SeedSequence(self._master_seed,
                                          spawn_key=(self._stream_id,) + self._path)
        return np.random.Generator(np.random.Philox(sequence))


def as_generator(seed):
    """Accept a SeedSpec, a numpy Generator or an integer master seed."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, SeedSpec):
        return seed.generator()
    return SeedSpec(seed).generator()


def chunk_sizes(n_total, chunk):
    """Split ``n_total`` replicates into chunks; chunk ``k`` is always drawn from stream ``k``."""
    if n_total < 1 or chunk < 1:
        raise ValueError('Invalid parameter input. Replicate and chunk counts must be >= 1.')
    full, rest = divmod(n_total, chunk)
    return [chunk] * full + ([rest] if rest else [])


def run_streams(task, seed, n_total, chunk=2000, threads=1):
    """
    Run ``task(seed_spec, size)`` over replicate chunks and return the results in chunk order.

    Chunk ``k`` always uses ``seed.stream(k)``, so results do not depend on ``threads``.
    """
    sizes = chunk_sizes(n_total, chunk)
    specs = [seed.stream(k) for k in range(len(sizes))]
    logger.debug('Running %d chunks of at most %d replicates on %d threads',
                 len(sizes), chunk, threads)
    if threads <= 1 or len(sizes) == 1:
        return [task(spec, size) for spec, size in zip(specs, sizes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(task, specs, sizes))


def log_gamma_variates(shape, size, rng):
    """
    Logarithms of Gamma(shape, 1) variates. Shapes below one are boosted: a Gamma(shape + 1)
    variate is multiplied by U**(1/shape), done here as an addition of logarithms.
    """
    shape = np.asarray(shape, dtype=float)
    small = shape < 1
    logs = np.log(rng.standard_gamma(np.where(small, shape + 1, shape), size=size))
    if np.any(small):
        uniform = rng.random(size=size)
        with np.errstate(divide='ignore'):
            logs = logs + np.where(small, np.log(uniform) / shape, 0.0)
    return logs


def _normalize_logs(logs):
    return np.exp(logs - logsumexp(logs, axis=-1, keepdims=True))


def _check_alpha(alpha):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if alpha.ndim != 1 or alpha.size == 0 or np.any(~(alpha > 0)):
        raise ValueError('Invalid parameter input. Dirichlet parameters must be positive.')
    return alpha


def sample_dirichlet(alpha, seed, size=None):
    """
    Dirichlet variates by normalizing independent gamma variates.

    Returns
    -------
    numpy.ndarray
        Shape ``(len(alpha),)`` if ``size`` is None, else ``(size, len(alpha))``.
    """
    alpha = _check_alpha(alpha)
    rng = as_generator(seed)
    n = 1 if size is None else size
    sample = _normalize_logs(log_gamma_variates(alpha, (n, alpha.size), rng))
    return sample[0] if size is None else sample


def _check_truncation(N):
    if int(N) != N or N < 1:
        raise ValueError('Invalid parameter input. Truncation N must be a positive integer.')
    return int(N)


def sample_pd_batch(theta, N, size, seed):
    """
    Poisson-Dirichlet draws by GEM(theta) stick-breaking, ranked.

    Returns
    -------
    tuple
        ``(atoms, tails)`` with atoms of shape ``(size, N)`` descending along the last axis and
        tails of shape ``(size,)``.
    """
    if not theta > 0:
        raise ValueError('Invalid parameter input. theta must be positive.')
    N = _check_truncation(N)
    rng = as_generator(seed)

    fractions = rng.beta(1.0, theta, size=(size, N))
    log_left = np.cumsum(np.log1p(-fractions), axis=1)
    left_before = np.exp(np.concatenate([np.zeros((size, 1)), log_left[:, :-1]], axis=1))
    weights = fractions * left_before
    atoms = -np.sort(-weights, axis=1)
    tails = np.clip(1 - weights.sum(axis=1), 0.0, None)
    return atoms, tails


def sample_pd(theta, N, seed):
    """A single truncated PD(theta) draw as an OrderedMassVector."""
    atoms, tails = sample_pd_batch(theta, N, 1, seed)
    return OrderedMassVector(atoms[0], tails[0])


class MPDSpec:
    r"""
    Multiple Poisson-Dirichlet law with parameters theta and N stored atoms per mark.

    Parameters
    ----------
    theta : ThetaParams or array_like
    truncation : int
        Atoms per mark, default 1000.
    """

    default_truncation = 1000

    def __init__(self, theta, truncation=None):
        self._theta = theta if isinstance(theta, ThetaParams) else ThetaParams(theta)
        self._truncation = _check_truncation(
            self.default_truncation if truncation is None else truncation)

    def __repr__(self):
        return f'MPDSpec({self._theta!r}, truncation={self._truncation})'

    @property
    def theta(self):
        return self._theta

    @property
    def truncation(self):
        return self._truncation

    def tail_bound(self):
        r"""
        Expected stick-breaking residual per mark, :math:`(\theta_h / (1 + \theta_h))^N`.
        """
        theta = self._theta.theta
        return (theta / (1 + theta)) ** self._truncation


@dataclass(frozen=True)
class MPDBatch:
    """A batch of truncated multiple Poisson-Dirichlet draws."""

    masses: np.ndarray
    atoms: np.ndarray
    tails: np.ndarray

    def __len__(self):
        return self.masses.shape[0]

    def point(self, i):
        return KingmanPoint(OrderedMassVector(atoms, tail)
                            for atoms, tail in zip(self.atoms[i], self.tails[i]))

    def truncated(self, top):
        """Keep the ``top`` largest atoms per mark; the dropped atoms join the tails."""
        top = min(int(top), self.atoms.shape[-1])
        if top < 1:
            raise ValueError('Invalid parameter input. top must be >= 1.')
        tails = self.tails + self.atoms[..., top:].sum(axis=-1)
        return MPDBatch(self.masses, self.atoms[..., :top].copy(), tails)

    @classmethod
    def concatenate(cls, batches):
        return cls(np.concatenate([b.masses for b in batches]),
                   np.concatenate([b.atoms for b in batches]),
                   np.concatenate([b.tails for b in batches]))


def sample_mpd_batch(spec, size, seed):
    r"""
    Draw :math:`\zeta_h = \upsilon_h \xi_h` with :math:`\upsilon \sim Dir_H(\theta)` and
    independent :math:`\xi_h \sim PD(\theta_h)`.
    """
    rng = as_generator(seed)
    theta = spec.theta.theta
    masses = sample_dirichlet(theta, rng, size=size)
    atoms = np.empty((size, theta.size, spec.truncation))
    tails = np.empty((size, theta.size))
    for h, theta_h in enumerate(theta):
        xi, xi_tail = sample_pd_batch(theta_h, spec.truncation, size, rng)
        atoms[:, h] = masses[:, h, None] * xi
        tails[:, h] = masses[:, h] * xi_tail
    return MPDBatch(masses, atoms, tails)


def sample_mpd(spec, seed):
    """A single multiple Poisson-Dirichlet draw as a KingmanPoint."""
    return sample_mpd_batch(spec, 1, seed).point(0)


def _as_seed(seed):
    return seed if isinstance(seed, SeedSpec) else SeedSpec(seed)


def sample_pd_chunks(theta, N, size, seed, top=None, chunk=2000, threads=1):
    """
    Like :func:`sample_pd_batch`, drawn in chunks of at most ``chunk`` with chunk ``k`` on
    ``seed.stream(k)``. With ``top`` each chunk keeps its ``top`` largest atoms and adds the rest
    to the tail before the next chunk is drawn, so memory grows with ``top`` and not with ``N``.
    """
    def task(stream, n):
        atoms, tails = sample_pd_batch(theta, N, n, stream)
        if top is None or top >= N:
            return atoms, tails
        return atoms[:, :top].copy(), tails + atoms[:, top:].sum(axis=1)

    chunks = run_streams(task, _as_seed(seed), size, chunk, threads)
    return (np.concatenate([atoms for atoms, _ in chunks]),
            np.concatenate([tails for _, tails in chunks]))


def sample_mpd_chunks(spec, size, seed, top=None, chunk=2000, threads=1):
    """
    Like :func:`sample_mpd_batch`, drawn in chunks through :func:`run_streams` and optionally
    cut to the ``top`` largest atoms per mark chunk by chunk (see :meth:`MPDBatch.truncated`).
    Results do not depend on ``threads``.
    """
    def task(stream, n):
        batch = sample_mpd_batch(spec, n, stream)
        return batch if top is None else batch.truncated(top)

    return MPDBatch.concatenate(run_streams(task, _as_seed(seed), size, chunk, threads))


def _flat_rates(theta, K):
    if int(K) != K or K < 1:
        raise ValueError('Invalid parameter input. K must be a positive integer.')
    theta = theta if isinstance(theta, ThetaParams) else ThetaParams(theta)
    return theta, np.repeat(theta.theta / K, int(K)).reshape(theta.H, int(K))


def _grouped_arrays(theta, K, size, rng):
    theta, rates = _flat_rates(theta, K)
    logs = log_gamma_variates(rates, (size,) + rates.shape, rng)
    block_logs = logsumexp(logs, axis=-1)
    upsilon = _normalize_logs(block_logs)
    xi = _normalize_logs(logs)
    return upsilon[..., None] * xi, upsilon, xi


def sample_grouped_dirichlet(theta, K, seed, size=None):
    r"""
    Draw a flat Dirichlet point with every :math:`\theta_h / K` repeated K times and group it
    into mark masses :math:`\upsilon_h = |\zeta_h|` and frequencies
    :math:`\xi_h = \zeta_h / \upsilon_h`.

    Returns
    -------
    tuple
        ``(zeta, upsilon, xi)``; for ``size=None`` a FlatSimplexPoint, a SimplexPoint and a
        list of H arrays, otherwise arrays of shapes (size, H, K), (size, H), (size, H, K).
    """
    if int(K) != K or K < 2:
        raise ValueError('Invalid parameter input. Grouping requires K >= 2.')
    rng = as_generator(seed)
    zeta, upsilon, xi = _grouped_arrays(theta, K, 1 if size is None else size, rng)
    if size is not None:
        return zeta, upsilon, xi
    H = upsilon.shape[1]
    return (FlatSimplexPoint(zeta[0].ravel(), H, int(K)), SimplexPoint(upsilon[0]), list(xi[0]))


def sample_product_dirichlet(theta, K, seed, size=None):
    r"""
    Compose independent :math:`\upsilon \sim Dir_H(\theta)` and
    :math:`\xi_h \sim Dir_K(\theta_h/K, \dots)` with S.

    Returns
    -------
    FlatSimplexPoint or numpy.ndarray
        A single point, or an array of shape (size, H, K).
    """
    theta, rates = _flat_rates(theta, K)
    rng = as_generator(seed)
    n = 1 if size is None else size
    upsilon = sample_dirichlet(theta.theta, rng, size=n)
    xi = _normalize_logs(log_gamma_variates(rates, (n,) + rates.shape, rng))
    if size is None:
        return compose_S(upsilon[0], list(xi[0]))
    return upsilon[..., None] * xi


def sample_ranked_dirichlet(theta, K, seed, size):
    """
    Draws of the flat Dirichlet law pushed through per-block ranking, shape (size, H, K).
    K = 1 is allowed: every block is then its mark mass.
    """
    rng = as_generator(seed)
    zeta, _, _ = _grouped_arrays(theta, K, size, rng)
    return -np.sort(-zeta, axis=-1)
