"""
State spaces of the multiple Poisson-Dirichlet diffusion and the deterministic maps between them.

Points of the infinite-dimensional Kingman simplex are stored truncated: a finite prefix of
nonincreasing atoms plus an explicit ``tail`` holding the mass of every coordinate beyond the
prefix. Power sums of order two and higher ignore the tail, mark masses include it.
"""

import logging
import math

import numpy as np

logger = logging.getLogger(__name__)


class DomainError(ValueError):
    """A point lies outside the domain of the requested operation."""


class Tolerances:
    """
    Numerical tolerances shared by the whole package. Values are class attributes so that a run
    can adjust them once, e.g. ``Tolerances.update_attributes({'simplex': 1e-8})``.
    """

    simplex = 1e-9
    theta_sum = 1e-12
    mass_floor = 1e-8
    rejection_cap = 1e-3
    max_projection_move = 0.5

    @classmethod
    def get_attributes(cls):
        """Gather tolerance values in a dictionary."""
        attributes = {name: value for name, value in cls.__dict__.items() if
                      not name.startswith('_')
                      and not isinstance(cls.__dict__[name], classmethod)
                      and not callable(cls.__dict__[name])}
        return attributes

    @classmethod
    def update_attributes(cls, update_attributes_dict):
        """
        Update tolerance values from dictionary. Raise ValueError for mistakes in input.

        Parameters
        ----------
        update_attributes_dict : dict
            Dictionary with tolerance name and value.
        """
        attr = cls.get_attributes()

        for attribute_name, new_value in update_attributes_dict.items():
            if attribute_name not in attr:
                raise ValueError(f'Invalid tolerance name: {attribute_name}.')
            if not new_value > 0:
                raise ValueError(f'Tolerance {attribute_name} has to be > 0.')
            if attribute_name == 'rejection_cap' and new_value >= 1:
                raise ValueError('Tolerance rejection_cap has to be < 1.')

            setattr(cls, attribute_name, float(new_value))

    @classmethod
    def reset_default_attribute_values(cls):
        """Reset tolerances to their default values."""
        cls.simplex = 1e-9
        cls.theta_sum = 1e-12
        cls.mass_floor = 1e-8
        cls.rejection_cap = 1e-3
        cls.max_projection_move = 0.5


def _frozen(values):
    """Return a read-only float copy of ``values``."""
    array = np.array(values, dtype=float)
    array.flags.writeable = False
    return array


class ThetaParams:
    r"""
    Mutation intensities :math:`\theta_1, \dots, \theta_H` of the H marks.

    Parameters
    ----------
    theta : array_like
        Positive reals, one per mark.
    """

    def __init__(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.ndim != 1 or theta.size == 0:
            raise ValueError('Invalid parameter input. theta must be a nonempty vector.')
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
            raise ValueError('Invalid parameter input. Every theta_h must be positive.')

        self._theta = _frozen(theta)
        self._theta_bar = math.fsum(self._theta)

    @classmethod
    def from_string(cls, text):
        """Parse a comma separated list, e.g. ``'2,3'``."""
        try:
            values = [float(item) for item in text.split(',') if item.strip()]
        except ValueError as err:
            raise ValueError(f'Invalid parameter input. Cannot parse theta {text!r}.') from err
        return cls(values)

    def __repr__(self):
        return f'ThetaParams({self._theta.tolist()})'

    def __len__(self):
        return self._theta.size

    def __eq__(self, other):
        if not isinstance(other, ThetaParams):
            return NotImplemented
        return np.array_equal(self._theta, other._theta)

    def __hash__(self):
        return hash(tuple(self._theta.tolist()))

    @property
    def theta(self):
        return self._theta

    @property
    def theta_bar(self):
        return self._theta_bar

    @property
    def H(self):
        return self._theta.size

    def diffusion_valid(self):
        """True iff every theta_h >= 1, the entrance-boundary regime of the mark-mass process."""
        return bool(np.all(self._theta >= 1))

    def require_diffusion_valid(self):
        if not self.diffusion_valid():
            raise ValueError('Invalid parameter input. Simulation requires theta_h >= 1 for all '
                             f'marks, got {self._theta.tolist()}.')


class SimplexPoint:
    """
    A point of the finite simplex: H nonnegative mark masses summing to one.

    Parameters
    ----------
    w : array_like
        Mark masses.
    """

    def __init__(self, w):
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if w.ndim != 1 or w.size == 0:
            raise ValueError('Invalid parameter input. w must be a nonempty vector.')
        if np.any(w < 0):
            raise ValueError('Invalid parameter input. Simplex coordinates must be nonnegative.')
        if abs(math.fsum(w) - 1) > Tolerances.simplex:
            raise ValueError(f'Invalid parameter input. Simplex coordinates sum to {w.sum()!r}, '
                             'not 1.')
        self._w = _frozen(w)

    def __repr__(self):
        return f'SimplexPoint({self._w.tolist()})'

    def __len__(self):
        return self._w.size

    @property
    def w(self):
        return self._w

    @property
    def H(self):
        return self._w.size

    def is_interior(self):
        return bool(self._w.min() > 0)


class OrderedMassVector:
    """
    Truncated point of the Kingman simplex: nonincreasing atoms plus tail mass.

    Parameters
    ----------
    atoms : array_like
        Nonincreasing nonnegative frequencies.
    tail : float
        Mass of all coordinates beyond the stored atoms.
    """

    def __init__(self, atoms, tail=0.0):
        atoms = np.atleast_1d(np.asarray(atoms, dtype=float))
        if atoms.ndim != 1:
            raise ValueError('Invalid parameter input. atoms must be a vector.')
        if np.any(atoms < 0) or tail < 0:
            raise ValueError('Invalid parameter input. Atoms and tail must be nonnegative.')
        if np.any(np.diff(atoms) > 0):
            raise ValueError('Invalid parameter input. Atoms must be nonincreasing.')
        if math.fsum(atoms) + tail > 1 + Tolerances.simplex:
            raise ValueError('Invalid parameter input. Atoms and tail exceed total mass 1.')

        self._atoms = _frozen(atoms)
        self._tail = float(tail)

    def __repr__(self):
        return f'OrderedMassVector({self._atoms.tolist()}, tail={self._tail!r})'

    def __len__(self):
        return self._atoms.size

    @property
    def atoms(self):
        return self._atoms

    @property
    def tail(self):
        return self._tail

    @property
    def mass(self):
        """Total mass, atoms and tail."""
        return math.fsum(self._atoms) + self._tail

    def power_sum(self, m):
        """Power sum of order ``m``; order one is the mass, higher orders ignore the tail."""
        if m == 1:
            return self.mass
        return float(np.sum(self._atoms ** m))

    def padded(self, n):
        """Atoms zero padded to length ``n``; raises if more than n atoms are stored."""
        if n < self._atoms.size:
            raise ValueError(f'Cannot pad {self._atoms.size} atoms to length {n}.')
        out = np.zeros(n)
        out[:self._atoms.size] = self._atoms
        return out

    def scaled(self, factor):
        return OrderedMassVector(self._atoms * factor, self._tail * factor)


class KingmanPoint:
    """
    Point of the generalized Kingman simplex: one ordered mass vector per mark.

    Parameters
    ----------
    marks : list of OrderedMassVector
    """

    def __init__(self, marks):
        marks = list(marks)
        if not marks:
            raise ValueError('Invalid parameter input. A Kingman point needs at least one mark.')
        if not all(isinstance(mark, OrderedMassVector) for mark in marks):
            raise ValueError('Invalid parameter input. Marks must be OrderedMassVector objects.')
        self._marks = tuple(marks)
        self._masses = _frozen([mark.mass for mark in marks])
        if math.fsum(self._masses) > 1 + Tolerances.simplex:
            raise ValueError('Invalid parameter input. Total mass of a Kingman point exceeds 1.')

    @classmethod
    def from_arrays(cls, atoms, tails=None):
        """Build from an (H, N) atom array and optional tail masses. Rows are ranked first."""
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        tails = np.zeros(atoms.shape[0]) if tails is None else np.asarray(tails, dtype=float)
        return cls(OrderedMassVector(-np.sort(-row), tail) for row, tail in zip(atoms, tails))

    def __repr__(self):
        return f'KingmanPoint({list(self._marks)})'

    def __len__(self):
        return len(self._marks)

    def __getitem__(self, h):
        return self._marks[h]

    @property
    def marks(self):
        return self._marks

    @property
    def masses(self):
        return self._masses

    @property
    def H(self):
        return len(self._marks)

    def is_interior(self):
        """Total mass one and every mark mass positive."""
        return bool(abs(math.fsum(self._masses) - 1) <= Tolerances.simplex
                    and self._masses.min() > 0)

    def to_arrays(self, n=None):
        """Return ``(atoms, tails)`` with atoms zero padded to a common length ``n``."""
        n = max(len(mark) for mark in self._marks) if n is None else n
        atoms = np.stack([mark.padded(n) for mark in self._marks])
        tails = np.array([mark.tail for mark in self._marks])
        return atoms, tails

    def lumped(self, K):
        """
        Map to the flat simplex with K coordinates per mark: the first K atoms are kept and the
        remaining mass of the mark (further atoms and tail) is added to its largest atom.
        """
        if K < 1:
            raise ValueError('Invalid parameter input. K must be >= 1.')
        blocks = np.zeros((self.H, K))
        for h, mark in enumerate(self._marks):
            kept = mark.atoms[:K]
            blocks[h, :kept.size] = kept
            blocks[h, 0] += math.fsum(mark.atoms[K:]) + mark.tail
        return FlatSimplexPoint(blocks.ravel(), self.H, K)


class FlatSimplexPoint:
    """
    Point of the flat simplex with H blocks of K coordinates, ``z[h*K + i] = z_{h,i}``.

    Parameters
    ----------
    z : array_like
        H*K nonnegative coordinates summing to one.
    H, K : int
        Block layout.
    """

    def __init__(self, z, H, K):
        z = np.asarray(z, dtype=float).ravel()
        if H < 1 or K < 1 or z.size != H * K:
            raise ValueError(f'Invalid parameter input. Expected {H}*{K} coordinates, '
                             f'got {z.size}.')
        if np.any(z < 0):
            raise ValueError('Invalid parameter input. Coordinates must be nonnegative.')
        if abs(math.fsum(z) - 1) > Tolerances.simplex:
            raise ValueError('Invalid parameter input. Coordinates must sum to 1.')
        self._z = _frozen(z)
        self._H = H
        self._K = K

    def __repr__(self):
        return f'FlatSimplexPoint({self.blocks().tolist()})'

    @property
    def z(self):
        return self._z

    @property
    def H(self):
        return self._H

    @property
    def K(self):
        return self._K

    def blocks(self):
        """Read-only (H, K) view of the coordinates."""
        return self._z.reshape(self._H, self._K)

    @property
    def masses(self):
        return self.blocks().sum(axis=1)

    def is_interior(self):
        """Every block carries positive mass."""
        return bool(self.masses.min() > 0)


def _check_frequency_vector(x, h):
    mass = x.mass if isinstance(x, OrderedMassVector) else math.fsum(x)
    if abs(mass - 1) > Tolerances.simplex:
        raise ValueError(f'Invalid parameter input. Frequency vector of mark {h + 1} has mass '
                         f'{mass!r}, not 1.')


def compose_S(w, x):
    """
    Compose mark masses and within-mark frequencies, ``z_h = w_h * x_h``.

    Parameters
    ----------
    w : SimplexPoint or array_like
        Mark masses.
    x : sequence
        H frequency vectors, either all OrderedMassVector (Kingman regime) or all arrays of a
        common length K (finite regime).

    Returns
    -------
    KingmanPoint or FlatSimplexPoint
    """
    w = w if isinstance(w, SimplexPoint) else SimplexPoint(w)
    x = list(x)
    if len(x) != w.H:
        raise ValueError(f'Dimension mismatch: {w.H} mark masses but {len(x)} frequency vectors.')
    for h, x_h in enumerate(x):
        _check_frequency_vector(x_h, h)

    if all(isinstance(x_h, OrderedMassVector) for x_h in x):
        return KingmanPoint(x_h.scaled(w_h) for w_h, x_h in zip(w.w, x))
    if any(isinstance(x_h, OrderedMassVector) for x_h in x):
        raise ValueError('Frequency vectors must be all ordered or all finite blocks.')

    blocks = [np.asarray(x_h, dtype=float) for x_h in x]
    K = blocks[0].size
    if any(block.ndim != 1 or block.size != K for block in blocks):
        raise ValueError('Dimension mismatch: finite frequency vectors need a common length.')
    if any(np.any(block < 0) for block in blocks):
        raise ValueError('Invalid parameter input. Frequencies must be nonnegative.')
    z = w.w[:, None] * np.stack(blocks)
    return FlatSimplexPoint(z.ravel(), w.H, K)


def decompose_S(z):
    """
    Inverse of :func:`compose_S` on the interior: ``w_h = |z_h|`` and ``x_h = z_h / |z_h|``.

    Raises
    ------
    DomainError
        If some mark carries zero mass.
    """
    if isinstance(z, KingmanPoint):
        if z.masses.min() <= 0:
            raise DomainError('decompose_S is undefined at points with an empty mark.')
        if not z.is_interior():
            raise DomainError('decompose_S requires total mass 1.')
        w = SimplexPoint(z.masses)
        return w, [mark.scaled(1 / mass) for mark, mass in zip(z.marks, z.masses)]

    if isinstance(z, FlatSimplexPoint):
        masses = z.masses
        if masses.min() <= 0:
            raise DomainError('decompose_S is undefined at points with an empty mark.')
        blocks = z.blocks()
        return SimplexPoint(masses), [blocks[h] / masses[h] for h in range(z.H)]

    raise ValueError(f'Cannot decompose object of type {type(z).__name__}.')


def rank(x):
    """
    Descending order statistics of a frequency vector (stable sort).

    Parameters
    ----------
    x : array_like or OrderedMassVector
        Nonnegative entries with sum at most one.

    Returns
    -------
    OrderedMassVector
    """
    if isinstance(x, OrderedMassVector):
        return x
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0):
        raise ValueError('Invalid parameter input. Cannot rank negative frequencies.')
    order = np.argsort(-x, kind='stable')
    return OrderedMassVector(x[order])


def rank_blocks(z):
    """Rank every block of a flat point, giving a point of the generalized Kingman simplex."""
    if z.masses.min() <= 0:
        raise DomainError('rank_blocks requires every block to carry positive mass.')
    return KingmanPoint(rank(block) for block in z.blocks())


def _boundary_terms(depth):
    i = np.arange(1, depth + 1)
    return i, 2.0 ** -(i + 2), 2.0 ** -(i + 1)


def boundary_sequence(n, depth=40):
    """
    Member ``n`` of a sequence inside the interior of the generalized Kingman simplex (H = 2)
    whose decompositions have two different limit points, one along even and one along odd n.

    Parameters
    ----------
    n : int
        Index, n >= 1.
    depth : int
        Number of stored atoms per mark; the remainder goes to the tail.

    Returns
    -------
    tuple
        ``(z, (w, x))`` with ``z`` a KingmanPoint and ``(w, x) = decompose_S(z)``.
    """
    if n < 1 or depth < 1:
        raise ValueError('Invalid parameter input. n and depth must be >= 1.')

    i, z1, z2 = _boundary_terms(depth)
    tail1, tail2 = 2.0 ** -(depth + 2), 2.0 ** -(depth + 1)
    bump = 1 / (4 * n)
    extra = bump * max(n - depth, 0)
    if n % 2 == 0:
        z1 = z1 + bump * (i <= n)
        tail1 += extra
    else:
        z2 = z2 + bump * (i <= n)
        tail2 += extra

    z = KingmanPoint([OrderedMassVector(z1, tail1), OrderedMassVector(z2, tail2)])
    return z, decompose_S(z)


def boundary_limit_points(depth=40):
    """
    The two limit points of the decomposed boundary sequence.

    The offsets ``1/(2n)`` and ``1/(3n)`` spread mass over ever more atoms, so it vanishes from
    every single atom: the limit atoms of x1 sum to 1/2 along even n and those of x2 sum to 2/3
    along odd n. This escaped mass is not dropped but stored as tail, 1/2 and 1/3 respectively
    (plus the ``2**-depth`` truncation remainder), so every vector keeps mass one while its
    atoms alone sum to less.

    Returns
    -------
    dict
        ``{'even': (w, x), 'odd': (w, x)}``.
    """
    i, _, _ = _boundary_terms(depth)
    half, full = 2.0 ** -(i + 1), 2.0 ** -i

    def vector(atoms):
        return OrderedMassVector(atoms, max(1 - math.fsum(atoms), 0.0))

    return {'even': (SimplexPoint([0.5, 0.5]), [vector(half), vector(full)]),
            'odd': (SimplexPoint([0.25, 0.75]), [vector(full), vector(2 / 3 * full)])}
