r"""
Generators of the finite and limit diffusions acting on the algebra of power-sum test functions.

A test function is stored as exponent data. For every mark ``h`` it holds an integer ``m0`` (the
power of the mark mass) and a multiset of power-sum orders, all at least two:

.. math::

    f(z) = \prod_h |z_h|^{m_0^h} \prod_q \varphi_{m_q^h}(z_h),
    \qquad \varphi_m(z_h) = \sum_i z_{h,i}^m.

Every operator maps a test function to a :class:`Combination` of test functions, so generator
values are exact. Coordinates beyond the stored atoms (the tail of a truncated Kingman point)
count in the mark mass but not in power sums of order two or more.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from .polynomial import wf_monomial_values
from .samplers import MPDBatch, SeedSpec, sample_dirichlet
from .simplex import (DomainError, FlatSimplexPoint, KingmanPoint, SimplexPoint, ThetaParams,
                      Tolerances)

logger = logging.getLogger(__name__)


class PowerSums:
    """
    Mark masses and cached power sums of a point or a batch of points.

    Parameters
    ----------
    atoms : array_like
        Shape (..., H, N).
    tails : array_like, optional
        Mass beyond the atoms, shape (..., H).
    """

    def __init__(self, atoms, tails=None):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim < 2:
            raise ValueError('Invalid parameter input. atoms must have shape (..., H, N).')
        tails = np.zeros(atoms.shape[:-1]) if tails is None else np.asarray(tails, dtype=float)
        if tails.shape != atoms.shape[:-1]:
            raise ValueError('Dimension mismatch: one tail per mark is required.')
        self._atoms = atoms
        self._masses = atoms.sum(axis=-1) + tails
        self._cache = {}

    @classmethod
    def of(cls, point):
        """Power sums of a Kingman, flat or mark-mass point, an MPDBatch, an ``(atoms, tails)``
        pair or an (..., H, K) array."""
        if isinstance(point, PowerSums):
            return point
        if isinstance(point, KingmanPoint):
            return cls(*point.to_arrays())
        if isinstance(point, FlatSimplexPoint):
            return cls(point.blocks())
        if isinstance(point, SimplexPoint):
            return cls.of_masses(point.w)
        if isinstance(point, MPDBatch):
            return cls(point.atoms, point.tails)
        if isinstance(point, tuple) and len(point) == 2:
            return cls(*point)
        return cls(point)

    @classmethod
    def of_masses(cls, w):
        """Mark masses only, for functions of w."""
        w = np.asarray(w.w if isinstance(w, SimplexPoint) else w, dtype=float)
        return cls(np.zeros(w.shape + (0,)), w)

    @property
    def masses(self):
        return self._masses

    @property
    def shape(self):
        """Batch shape."""
        return self._masses.shape[:-1]

    @property
    def H(self):
        return self._masses.shape[-1]

    @property
    def n_atoms(self):
        return self._atoms.shape[-1]

    def phi(self, m):
        """Power sums of order ``m`` for every mark, shape (..., H)."""
        if m == 1:
            return self._masses
        if m not in self._cache:
            self._cache[m] = np.sum(self._atoms ** m, axis=-1)
        return self._cache[m]


def _normal_mvec(mvec):
    orders = tuple(int(m) for m in mvec)
    if any(m < 1 for m in orders):
        raise ValueError('Invalid parameter input. Power-sum orders must be >= 1.')
    return tuple(sorted((m for m in orders if m > 1), reverse=True))


@dataclass(frozen=True)
class TestFunction:
    r"""
    :math:`\prod_h |z_h|^{m_0^h} \prod_q \varphi_{m_q^h}(z_h)`.

    Orders equal to one are dropped at construction and the remaining orders are sorted
    nonincreasingly, so equal functions compare and hash equal.

    Parameters
    ----------
    m0 : sequence of int
        Mark-mass exponents, may be negative.
    mvecs : sequence of sequence of int
        Power-sum orders per mark.
    """

    __test__ = False

    m0: tuple
    mvecs: tuple

    def __post_init__(self):
        m0 = tuple(int(a) for a in self.m0)
        mvecs = tuple(_normal_mvec(mvec) for mvec in self.mvecs)
        if not m0 or len(m0) != len(mvecs):
            raise ValueError('Dimension mismatch: m0 and mvecs need one entry per mark.')
        object.__setattr__(self, 'm0', m0)
        object.__setattr__(self, 'mvecs', mvecs)

    @classmethod
    def constant(cls, H):
        return cls((0,) * H, ((),) * H)

    @classmethod
    def mark_power(cls, H, h, power=1):
        """``|z_h|**power``."""
        return cls.constant(H).replace(h, power, ())

    @classmethod
    def power_sums(cls, H, h, *orders, m0=0):
        """``|z_h|**m0`` times the power sums of the given orders on mark ``h``."""
        return cls.constant(H).replace(h, m0, orders)

    @classmethod
    def w_monomial(cls, p):
        """The pure mark-mass monomial ``prod_h w_h**p_h``."""
        return cls(tuple(p), ((),) * len(p))

    @classmethod
    def from_dict(cls, marks):
        """From a list of per-mark ``{"m0": int, "mvec": [int, ...]}`` objects."""
        return cls(tuple(mark.get('m0', 0) for mark in marks),
                   tuple(mark.get('mvec', ()) for mark in marks))

    def to_dict(self):
        return [{'m0': a, 'mvec': list(mvec)} for a, mvec in zip(self.m0, self.mvecs)]

    def __str__(self):
        factors = []
        for h, (a, mvec) in enumerate(zip(self.m0, self.mvecs), start=1):
            if a:
                factors.append(f'|z{h}|^{a}')
            factors.extend(f'phi{m}(z{h})' for m in mvec)
        return ' '.join(factors) if factors else '1'

    def __mul__(self, other):
        if not isinstance(other, TestFunction):
            return NotImplemented
        if other.H != self.H:
            raise ValueError('Dimension mismatch: factors have different numbers of marks.')
        return TestFunction(tuple(a + b for a, b in zip(self.m0, other.m0)),
                            tuple(m + n for m, n in zip(self.mvecs, other.mvecs)))

    @property
    def H(self):
        return len(self.m0)

    def degree(self, h):
        """Total power-sum order on mark ``h``."""
        return sum(self.mvecs[h])

    @property
    def w_exponents(self):
        """Homogeneity degree in each mark, ``m0 + sum of orders``."""
        return tuple(a + sum(mvec) for a, mvec in zip(self.m0, self.mvecs))

    @property
    def is_pure_w(self):
        return not any(self.mvecs)

    def replace(self, h, m0, mvec):
        """Copy with mark ``h`` replaced."""
        m0s = list(self.m0)
        mvecs = list(self.mvecs)
        m0s[h] = m0
        mvecs[h] = tuple(mvec)
        return TestFunction(tuple(m0s), tuple(mvecs))

    def in_domain(self):
        """
        Membership in the domain of the limit generator: a mark with power sums needs
        ``m0 >= 1 - sum of orders``, a mark without needs ``m0 >= 0``.
        """
        return all(a >= (1 - sum(mvec) if mvec else 0) for a, mvec in zip(self.m0, self.mvecs))

    def values(self, point, on_floor='raise'):
        """
        Values at a point or a batch of points, as an array of the batch shape.

        Parameters
        ----------
        on_floor : {'raise', 'nan'}
            What to do where a negative mass exponent meets a mark mass below
            ``Tolerances.mass_floor``.

        Raises
        ------
        DomainError
            ``on_floor='raise'`` and a mark mass is below the floor.
        """
        ps = PowerSums.of(point)
        if ps.H != self.H:
            raise ValueError(f'Dimension mismatch: the point has {ps.H} marks, f has {self.H}.')
        value = np.ones(ps.shape)
        below = np.zeros(ps.shape, dtype=bool)
        with np.errstate(divide='ignore', invalid='ignore'):
            for h, (a, mvec) in enumerate(zip(self.m0, self.mvecs)):
                mass = ps.masses[..., h]
                if a < 0:
                    below |= mass < Tolerances.mass_floor
                if a:
                    value = value * mass ** float(a)
                for m in mvec:
                    value = value * ps.phi(m)[..., h]
        if below.any():
            if on_floor == 'raise':
                raise DomainError(f'Mark mass below {Tolerances.mass_floor!r} for {self}.')
            value = np.where(below, np.nan, value)
        return value

    def evaluate(self, point, on_floor='raise'):
        """Value at a point (float) or at a batch of points (array)."""
        value = self.values(point, on_floor)
        return float(value) if value.ndim == 0 else value


def family_to_json(functions):
    return json.dumps([f.to_dict() for f in functions])


def family_from_json(text):
    return [TestFunction.from_dict(marks) for marks in json.loads(text)]


def domain_family(H, mvecs=((), (2,), (3,), (2, 2)), m0_values=(-1, 0, 1)):
    """All products over marks of the given per-mark factors that lie in the domain."""
    factors = [(a, mvec) for mvec in mvecs for a in m0_values]
    family = []
    for combo in itertools.product(factors, repeat=H):
        f = TestFunction(tuple(a for a, _ in combo), tuple(mvec for _, mvec in combo))
        if f.in_domain():
            family.append(f)
    return family


class Combination:
    """Finite linear combination of test functions; evaluation is linear."""

    def __init__(self, terms=()):
        self._terms = {}
        for f, coefficient in (terms.items() if isinstance(terms, dict) else terms):
            self.add(f, coefficient)

    @classmethod
    def of(cls, f, coefficient=1.0):
        return cls([(f, coefficient)])

    def __repr__(self):
        return ' + '.join(f'{c!r}*[{f}]' for f, c in self._terms.items()) or '0'

    def __len__(self):
        return len(self._terms)

    def __iter__(self):
        return iter(self._terms.items())

    def items(self):
        return self._terms.items()

    def coefficient(self, f):
        return self._terms.get(f, 0.0)

    def add(self, f, coefficient):
        if coefficient == 0:
            return
        total = self._terms.get(f, 0.0) + coefficient
        if total == 0:
            self._terms.pop(f, None)
        else:
            self._terms[f] = total

    def __add__(self, other):
        result = Combination(self.items())
        for f, coefficient in other.items():
            result.add(f, coefficient)
        return result

    def __mul__(self, scalar):
        return Combination((f, scalar * c) for f, c in self.items())

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def values(self, point, on_floor='raise'):
        ps = PowerSums.of(point)
        value = np.zeros(ps.shape)
        for f, coefficient in self._terms.items():
            value = value + coefficient * f.values(ps, on_floor)
        return value

    def evaluate(self, point, on_floor='raise'):
        value = self.values(point, on_floor)
        return float(value) if value.ndim == 0 else value


# Symbolic building blocks on one mark, F = |z|**a * prod_q phi_{m_q}(z). Terms are
# (coefficient, a, mvec) triples.

def _drop(mvec, *positions):
    return tuple(m for q, m in enumerate(mvec) if q not in positions)


def _with_order(a, mvec, order):
    if order == 1:
        return a + 1, mvec
    return a, mvec + (order,)


def _diagonal_terms(a, mvec):
    """``sum_i z_i d^2 F / dz_i^2``."""
    M = sum(mvec)
    terms = [(a * (a - 1) + 2 * a * M, a - 1, mvec)]
    for q, m in enumerate(mvec):
        terms.append((m * (m - 1), *_with_order(a, _drop(mvec, q), m - 1)))
        for r, n in enumerate(mvec):
            if r != q:
                terms.append((m * n, *_with_order(a, _drop(mvec, q, r), m + n - 1)))
    return terms


def _gradient_sum_terms(a, mvec, K):
    """``sum_i dF / dz_i`` over a block of K coordinates."""
    terms = [(a * K, a - 1, mvec)]
    for q, m in enumerate(mvec):
        terms.append((m, *_with_order(a, _drop(mvec, q), m - 1)))
    return terms


def _add_mark_terms(comb, f, h, terms, factor):
    for coefficient, a, mvec in terms:
        comb.add(f.replace(h, a, mvec), factor * coefficient)


def _as_theta(theta):
    return theta if isinstance(theta, ThetaParams) else ThetaParams(theta)


def _require_domain(theta, f):
    if f.H != theta.H:
        raise ValueError(f'Dimension mismatch: theta has {theta.H} marks, f has {f.H}.')
    if not f.in_domain():
        raise DomainError(f'{f} is outside the domain of the generator.')


def _check_K(K):
    if K is None or int(K) != K or K < 1:
        raise ValueError('Invalid parameter input. K must be a positive integer.')
    return int(K)


def _mark_degrees(f):
    return [a + sum(mvec) for a, mvec in zip(f.m0, f.mvecs)]


def _diffusion_part(theta, f):
    """Second-order and mass-drift terms shared by B, B-hat and B^K."""
    comb = Combination()
    for h, (a, mvec) in enumerate(zip(f.m0, f.mvecs)):
        _add_mark_terms(comb, f, h, _diagonal_terms(a, mvec), 0.5)
    D = sum(_mark_degrees(f))
    comb.add(f, -0.5 * D * (D - 1) - 0.5 * theta.theta_bar * D)
    return comb


def apply_Bhat(theta, f):
    """The limit generator without its mass correction term."""
    theta = _as_theta(theta)
    _require_domain(theta, f)
    return _diffusion_part(theta, f)


def mass_correction(theta, f):
    r""":math:`\frac{1}{2}\sum_h \theta_h m_0^h |z_h|^{-1} f`."""
    theta = _as_theta(theta)
    comb = Combination()
    for h, (a, theta_h) in enumerate(zip(f.m0, theta.theta)):
        if a:
            comb.add(f.replace(h, a - 1, f.mvecs[h]), 0.5 * theta_h * a)
    return comb


def apply_B(theta, f):
    """The limit generator on the generalized Kingman simplex."""
    theta = _as_theta(theta)
    _require_domain(theta, f)
    return _diffusion_part(theta, f) + mass_correction(theta, f)


def apply_BK(theta, K, f):
    """The flat generator with K types per mark and mutation rates theta_h / K."""
    theta = _as_theta(theta)
    K = _check_K(K)
    _require_domain(theta, f)
    comb = _diffusion_part(theta, f)
    for h, (a, mvec, theta_h) in enumerate(zip(f.m0, f.mvecs, theta.theta)):
        _add_mark_terms(comb, f, h, _gradient_sum_terms(a, mvec, K), 0.5 * theta_h / K)
    return comb


def apply_Bh(theta, f, h):
    """Independent dynamics of mark ``h``."""
    theta = _as_theta(theta)
    _require_domain(theta, f)
    a, mvec = f.m0[h], f.mvecs[h]
    d = a + sum(mvec)
    comb = Combination()
    _add_mark_terms(comb, f, h, _diagonal_terms(a, mvec), 0.5)
    comb.add(f, -0.5 * d * (d - 1) - 0.5 * theta.theta_bar * d)
    if a:
        comb.add(f.replace(h, a - 1, mvec), 0.5 * theta.theta[h] * a)
    return comb


def interaction(f):
    r"""Cross-mark term :math:`\frac{1}{2}\sum_{h \ne k} d_h d_k f`."""
    degrees = _mark_degrees(f)
    total = sum(degrees)
    return Combination.of(f, 0.5 * (total ** 2 - sum(d * d for d in degrees)))


def apply_A0(theta, f):
    """Wright-Fisher generator of the mark masses on a pure mark-mass monomial."""
    theta = _as_theta(theta)
    if f.H != theta.H:
        raise ValueError(f'Dimension mismatch: theta has {theta.H} marks, f has {f.H}.')
    if not f.is_pure_w or any(p < 0 for p in f.m0):
        raise DomainError(f'{f} is not a monomial in the mark masses.')
    P = sum(f.m0)
    comb = Combination.of(f, -0.5 * (P * (P - 1) + theta.theta_bar * P))
    for h, (p, theta_h) in enumerate(zip(f.m0, theta.theta)):
        if p:
            comb.add(f.replace(h, p - 1, ()), 0.5 * p * (p - 1 + theta_h))
    return comb


def apply_AhK(theta_h, K, f):
    """Symmetric K-type Wright-Fisher generator with total rate ``theta_h`` on a function of
    one frequency vector (H = 1)."""
    if f.H != 1 or f.m0 != (0,):
        raise DomainError(f'{f} is not a product of power sums of one frequency vector.')
    return apply_BK(ThetaParams([theta_h]), K, f)


def _phi_product(ps, h, mvec):
    value = np.ones(ps.shape)
    for m in mvec:
        value = value * ps.phi(m)[..., h]
    return value


def eval_AK(theta, K, f, w, x):
    r"""
    :math:`A^K (f \circ S)` at ``(w, x)`` for ``f`` of product form
    :math:`w^p \prod_h \Phi_{m^h}(x_h)`, with ``p`` the homogeneity degrees of ``f``.

    Parameters
    ----------
    w : array_like
        Mark masses, shape (..., H), all positive.
    x : array_like
        Frequencies, shape (..., H, K).
    """
    theta = _as_theta(theta)
    K = _check_K(K)
    if f.H != theta.H:
        raise ValueError(f'Dimension mismatch: theta has {theta.H} marks, f has {f.H}.')
    if any(p < 0 for p in f.w_exponents):
        raise DomainError(f'{f} is not a polynomial in the mark masses.')
    w = np.asarray(w.w if isinstance(w, SimplexPoint) else w, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] != (theta.H, K) or w.shape[-1] != theta.H:
        raise ValueError(f'Dimension mismatch: expected {theta.H} marks of {K} types.')
    if np.any(w <= 0):
        raise DomainError('A^K needs positive mark masses.')

    w_part = TestFunction.w_monomial(f.w_exponents)
    mass_values = PowerSums.of_masses(w)
    frequencies = PowerSums(x)
    phis = [_phi_product(frequencies, h, mvec) for h, mvec in enumerate(f.mvecs)]

    value = apply_A0(theta, w_part).values(mass_values) * np.prod(phis, axis=0)
    w_values = w_part.values(mass_values)
    for h, (mvec, theta_h) in enumerate(zip(f.mvecs, theta.theta)):
        within = TestFunction((0,), (mvec,))
        driven = apply_AhK(theta_h, K, within).values(PowerSums(x[..., h:h + 1, :]))
        others = np.prod([phi for k, phi in enumerate(phis) if k != h], axis=0)
        value = value + w_values / w[..., h] * driven * others
    return float(value) if value.ndim == 0 else value


class Tag(Enum):
    A0 = 'A0'
    AHK = 'AhK'
    AK = 'AK'
    BK = 'BK'
    B = 'B'
    BHAT = 'Bhat'
    BH_DECOMPOSED = 'Bh_decomposed'


@dataclass(frozen=True)
class GeneratorKind:
    """
    An operator together with its parameters.

    ``K`` is required by AhK, AK and BK; ``mark`` selects theta_h for AhK.
    """

    tag: Tag
    theta: ThetaParams
    K: int = None
    mark: int = None

    def __post_init__(self):
        object.__setattr__(self, 'tag', Tag(self.tag))
        object.__setattr__(self, 'theta', _as_theta(self.theta))
        if self.tag in (Tag.AHK, Tag.AK, Tag.BK):
            object.__setattr__(self, 'K', _check_K(self.K))
        if self.tag is Tag.AHK and self.mark not in range(self.theta.H):
            raise ValueError('Invalid parameter input. AhK needs a mark index.')

    def apply(self, f):
        """The operator applied symbolically."""
        if self.tag is Tag.A0:
            return apply_A0(self.theta, f)
        if self.tag is Tag.AHK:
            return apply_AhK(self.theta.theta[self.mark], self.K, f)
        if self.tag is Tag.BK:
            return apply_BK(self.theta, self.K, f)
        if self.tag is Tag.B:
            return apply_B(self.theta, f)
        if self.tag is Tag.BHAT:
            return apply_Bhat(self.theta, f)
        if self.tag is Tag.BH_DECOMPOSED:
            comb = -interaction(f)
            for h in range(self.theta.H):
                comb = comb + apply_Bh(self.theta, f, h)
            return comb
        raise ValueError('A^K acts on (w, x) pairs; evaluate it with eval_AK.')


def apply_generator(kind, f, point, on_floor='raise'):
    """
    Value of ``kind`` applied to ``f`` at a point or a batch of points.

    The point is a pair ``(w, x)`` for AK, mark masses for A0, a frequency vector (..., K) for
    AhK, a flat point with K types per mark for BK, and any point for B, Bhat and
    Bh_decomposed.
    """
    if kind.tag is Tag.AK:
        w, x = point
        return eval_AK(kind.theta, kind.K, f, w, x)
    comb = kind.apply(f)
    if kind.tag is Tag.A0:
        ps = PowerSums.of_masses(point)
    elif kind.tag is Tag.AHK:
        ps = PowerSums(np.asarray(point, dtype=float)[..., None, :])
    else:
        ps = PowerSums.of(point)
    if kind.tag is Tag.BK and ps.n_atoms != kind.K:
        raise ValueError(f'Dimension mismatch: B^K with K={kind.K} needs {kind.K} types '
                         f'per mark.')
    return comb.evaluate(ps, on_floor)


def _flat_blocks(point):
    if isinstance(point, FlatSimplexPoint):
        return np.array(point.blocks())
    blocks = np.asarray(point, dtype=float)
    if blocks.ndim != 2:
        raise ValueError('Invalid parameter input. Expected one flat point of shape (H, K).')
    return blocks


def _mark_derivatives(a, mvec, z):
    """Value, gradient and Hessian of ``|z|**a prod_q phi_{m_q}(z)`` on one block."""
    s = z.sum()
    if a < 0 and s < Tolerances.mass_floor:
        raise DomainError(f'Mark mass {s!r} below the floor.')
    phis = [np.sum(z ** m) for m in mvec]
    first = [m * z ** (m - 1) for m in mvec]

    def others(*skip):
        return math.prod(phi for q, phi in enumerate(phis) if q not in skip)

    psi = others()
    dpsi = np.zeros_like(z)
    d2psi = np.zeros((z.size, z.size))
    for q, m in enumerate(mvec):
        dpsi += first[q] * others(q)
        d2psi += np.diag(m * (m - 1) * z ** (m - 2)) * others(q)
        for r in range(len(mvec)):
            if r != q:
                d2psi += np.outer(first[q], first[r]) * others(q, r)

    value = s ** a * psi
    gradient = a * s ** (a - 1) * psi + s ** a * dpsi
    hessian = (a * (a - 1) * s ** (a - 2) * psi
               + a * s ** (a - 1) * (dpsi[:, None] + dpsi[None, :])
               + s ** a * d2psi)
    return value, gradient, hessian


def _all_derivatives(f, blocks):
    if blocks.shape[0] != f.H:
        raise ValueError(f'Dimension mismatch: the point has {blocks.shape[0]} marks.')
    blocks = blocks.astype(float)
    return [_mark_derivatives(float(a), mvec, blocks[h])
            for h, (a, mvec) in enumerate(zip(f.m0, f.mvecs))]


def gradient(f, point):
    """Closed-form gradient at a flat point, shape (H, K)."""
    parts = _all_derivatives(f, _flat_blocks(point))
    values = [value for value, _, _ in parts]
    return np.stack([grad * math.prod(v for k, v in enumerate(values) if k != h)
                     for h, (_, grad, _) in enumerate(parts)])


def hessian(f, point):
    """Closed-form Hessian at a flat point, shape (H, K, H, K)."""
    parts = _all_derivatives(f, _flat_blocks(point))
    values = [value for value, _, _ in parts]
    H, K = len(parts), parts[0][1].size
    result = np.empty((H, K, H, K))
    for h, k in itertools.product(range(H), repeat=2):
        rest = math.prod(v for l, v in enumerate(values) if l not in (h, k))
        if h == k:
            result[h, :, h, :] = parts[h][2] * rest
        else:
            result[h, :, k, :] = np.outer(parts[h][1], parts[k][1]) * rest
    return result


def apply_generator_coordinates(kind, f, point):
    """
    B, Bhat or BK at a flat point from the closed-form derivatives, assembled as explicit sums
    over coordinates. Cross-checks the symbolic route.
    """
    if kind.tag not in (Tag.B, Tag.BHAT, Tag.BK):
        raise ValueError(f'Coordinate evaluation supports B, Bhat and BK, not {kind.tag.value}.')
    _require_domain(kind.theta, f)
    blocks = _flat_blocks(point)
    H, K = blocks.shape
    z = blocks.ravel()
    grad = gradient(f, blocks).ravel()
    hess = hessian(f, blocks).reshape(H * K, H * K)
    theta = kind.theta

    value = 0.5 * (z @ np.diag(hess) - z @ hess @ z) - 0.5 * theta.theta_bar * (z @ grad)
    if kind.tag is Tag.BK:
        if K != kind.K:
            raise ValueError(f'Dimension mismatch: expected {kind.K} types per mark.')
        value += 0.5 * np.sum(np.repeat(theta.theta / K, K) * grad)
    elif kind.tag is Tag.B:
        f_value = f.evaluate(blocks)
        masses = blocks.sum(axis=1)
        value += 0.5 * sum(theta_h * a * f_value / s
                           for theta_h, a, s in zip(theta.theta, f.m0, masses) if a)
    return float(value)


def finite_difference_oracle(f, point, pair=None, bump=1e-5, bump2=1e-4):
    """
    Central-difference partial derivatives of ``f`` at a flat point. Steps are relative to the
    coordinate: ``bump * z`` for first and ``bump2 * z`` for second derivatives.

    Parameters
    ----------
    pair : tuple, optional
        ``((h, i), (k, j))``. If given, return the first partial along ``(h, i)`` and the second
        partial along the pair; otherwise return the full gradient and Hessian.

    Raises
    ------
    DomainError
        If a coordinate is too close to zero for a relative bump.
    """
    blocks = _flat_blocks(point)
    if blocks.min() < Tolerances.mass_floor:
        raise DomainError('Point too close to the boundary for finite differences.')
    H, K = blocks.shape
    n = H * K
    z = blocks.ravel()
    step1 = bump * z
    step2 = bump2 * z

    def at(shifts):
        return f.values(np.array(shifts).reshape(-1, H, K))

    def first(a):
        e = np.zeros(n)
        e[a] = step1[a]
        plus, minus = at([z + e, z - e])
        return (plus - minus) / (2 * step1[a])

    def second(a, b):
        ea = np.zeros(n)
        ea[a] = step2[a]
        if a == b:
            plus, centre, minus = at([z + ea, z, z - ea])
            return (plus - 2 * centre + minus) / step2[a] ** 2
        eb = np.zeros(n)
        eb[b] = step2[b]
        pp, pm, mp, mm = at([z + ea + eb, z + ea - eb, z - ea + eb, z - ea - eb])
        return (pp - pm - mp + mm) / (4 * step2[a] * step2[b])

    if pair is not None:
        (h, i), (k, j) = pair
        return first(h * K + i), second(h * K + i, k * K + j)
    grad = np.array([first(a) for a in range(n)])
    hess = np.empty((n, n))
    for a in range(n):
        for b in range(a, n):
            hess[a, b] = hess[b, a] = second(a, b)
    return grad.reshape(H, K), hess.reshape(H, K, H, K)


def _interior_flat_points(points, H, K):
    z = np.asarray(points, dtype=float).reshape(-1, H * K)
    if np.any(z <= 0):
        raise ValueError('Invalid parameter input. Intertwining points must be interior.')
    return z


def intertwining_deviations(theta, K, exponents, points, chunk=256):
    r"""
    Largest :math:`|A^K(x^n \circ S)(S^{-1} z) - B^K x^n(z)|` over the points, for every row
    ``n`` of ``exponents``.
    """
    theta = _as_theta(theta)
    K = _check_K(K)
    H = theta.H
    exponents = np.atleast_2d(np.asarray(exponents, dtype=int))
    z = _interior_flat_points(points, H, K)
    composed = np.hstack([exponents.reshape(-1, H, K).sum(axis=2), exponents])
    flat_rates = np.repeat(theta.theta / K, K)

    deviation = np.zeros(exponents.shape[0])
    for start in range(0, z.shape[0], chunk):
        zc = z[start:start + chunk]
        w = zc.reshape(-1, H, K).sum(axis=2)
        wx = np.hstack([w, (zc.reshape(-1, H, K) / w[..., None]).reshape(-1, H * K)])
        rhs = wf_monomial_values(exponents, zc, flat_rates, theta.theta_bar)
        lhs = wf_monomial_values(composed, wx, theta.theta, theta.theta_bar,
                                 variables=range(H))
        for h, theta_h in enumerate(theta.theta):
            block = range(H + h * K, H + (h + 1) * K)
            lhs += wf_monomial_values(composed, wx, theta_h / K, theta_h,
                                      variables=block) / w[:, h, None]
        deviation = np.maximum(deviation, np.abs(lhs - rhs).max(axis=0))
    return deviation


def check_intertwining(theta, K, f, points, chunk=256):
    """
    Max over points of ``|A^K(f o S)(S^-1 z) - B^K f(z)|`` for a Polynomial ``f`` in the H*K
    flat coordinates.
    """
    theta = _as_theta(theta)
    K = _check_K(K)
    H = theta.H
    if f.nvars != H * K:
        raise ValueError(f'Dimension mismatch: f has {f.nvars} variables, expected {H * K}.')
    if not len(f):
        return 0.0
    z = _interior_flat_points(points, H, K)
    composed = f.compose_S(H, K)
    flat_rates = np.repeat(theta.theta / K, K)

    worst = 0.0
    for start in range(0, z.shape[0], chunk):
        zc = z[start:start + chunk]
        w = zc.reshape(-1, H, K).sum(axis=2)
        wx = np.hstack([w, (zc.reshape(-1, H, K) / w[..., None]).reshape(-1, H * K)])
        rhs = f.generator(flat_rates, theta.theta_bar).evaluate(zc)
        lhs = composed.generator(theta.theta, theta.theta_bar, variables=range(H)).evaluate(wx)
        for h, theta_h in enumerate(theta.theta):
            block = range(H + h * K, H + (h + 1) * K)
            lhs = lhs + composed.generator(theta_h / K, theta_h,
                                           variables=block).evaluate(wx) / w[:, h]
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def convergence_bound(theta, f, K):
    r"""
    :math:`\frac{1}{K}\sum_h \theta_h \sum_q m_q^h`, bounding
    :math:`\sup |B^K f - B f|` on the flat simplex.
    """
    theta = _as_theta(theta)
    return float(sum(theta_h * sum(mvec) for theta_h, mvec in zip(theta.theta, f.mvecs)) / K)


def check_convergence_bound(theta, f, K_list, sample_size, seed):
    """
    Sampled sup-deviation between B^K and B on ranked uniform interior points of the flat
    simplex, for every K, next to the analytic bound.

    Returns
    -------
    pandas.DataFrame
        Columns K, sup_deviation, bound, within_bound.
    """
    theta = _as_theta(theta)
    _require_domain(theta, f)
    seed = seed if isinstance(seed, SeedSpec) else SeedSpec(seed)
    limit = apply_B(theta, f)
    rows = []
    for j, K in enumerate(K_list):
        K = _check_K(K)
        z = sample_dirichlet(np.ones(theta.H * K), seed.substream(j), size=sample_size)
        blocks = -np.sort(-z.reshape(-1, theta.H, K), axis=-1)
        gap = apply_BK(theta, K, f).values(blocks) - limit.values(blocks)
        sup = float(np.abs(gap).max())
        bound = convergence_bound(theta, f, K)
        rows.append({'K': K, 'sup_deviation': sup, 'bound': bound,
                     'within_bound': sup <= bound + 1e-12})
        logger.debug('K=%d: sup deviation %.3e, bound %.3e', K, sup, bound)
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class BDecomposition:
    """Independent per-mark parts, the interaction term and the full limit generator value."""

    per_mark: np.ndarray
    interaction: object
    total: object


def decompose_B(theta, f, point, atol=1e-10):
    """
    Evaluate every B_h f, the interaction term and B f at a point, and check
    ``sum_h B_h f - interaction = B f``.

    Raises
    ------
    ArithmeticError
        If the identity fails beyond ``atol`` (relative to ``max(1, |B f|)``).
    """
    theta = _as_theta(theta)
    ps = PowerSums.of(point)
    per_mark = np.stack([apply_Bh(theta, f, h).values(ps) for h in range(theta.H)], axis=-1)
    cross = interaction(f).values(ps)
    total = apply_B(theta, f).values(ps)
    gap = np.abs(per_mark.sum(axis=-1) - cross - total)
    if np.any(gap > atol * np.maximum(1.0, np.abs(total))):
        raise ArithmeticError(f'Decomposition of B fails for {f}: gap {gap.max()!r}.')
    if total.ndim == 0:
        return BDecomposition(per_mark, float(cross), float(total))
    return BDecomposition(per_mark, cross, total)
