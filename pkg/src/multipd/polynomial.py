"""
Polynomials in the coordinates of a flat simplex, stored as an exponent matrix and a coefficient
vector, with the Wright-Fisher generator applied monomial by monomial and exact integration
against Dirichlet laws.
"""

import itertools
import logging

import numpy as np
from scipy.special import gammaln

logger = logging.getLogger(__name__)


def monomial_exponents(nvars, max_degree):
    """All exponent vectors of total degree <= max_degree, constant first, shape (T, nvars)."""
    rows = [np.zeros(nvars, dtype=int)]
    for degree in range(1, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), degree):
            row = np.zeros(nvars, dtype=int)
            np.add.at(row, list(combo), 1)
            rows.append(row)
    return np.array(rows, dtype=int)


def monomial_powers(points, exponents):
    """
    Values of every monomial at every point, shape (n, T). Uses logarithms, so coordinates must
    be positive wherever an exponent is.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    with np.errstate(divide='ignore'):
        logs = np.log(points)
    used = exponents > 0
    if np.any(np.isinf(logs[:, used.any(axis=0)])):
        raise ValueError('Invalid parameter input. Monomial evaluation needs positive coordinates.')
    logs = np.where(np.isinf(logs), 0.0, logs)
    return np.exp(logs @ exponents.T)


def dirichlet_log_moments(alpha, exponents):
    r"""
    Logarithms of the Dirichlet mixed moments
    :math:`E\prod_i z_i^{n_i} = \prod_i (\alpha_i)_{n_i} / (\bar\alpha)_{\bar n}`
    for every row of ``exponents``. Real exponents are allowed as long as every
    :math:`\alpha_i + n_i > 0`.
    """
    alpha = np.asarray(alpha, dtype=float)
    exponents = np.atleast_2d(np.asarray(exponents, dtype=float))
    if np.any(alpha + exponents <= 0):
        raise ValueError('Invalid parameter input. Dirichlet moment is infinite.')
    total = alpha.sum()
    return (np.sum(gammaln(alpha + exponents) - gammaln(alpha), axis=1)
            - (gammaln(total + exponents.sum(axis=1)) - gammaln(total)))


def _variable_mask(nvars, variables):
    mask = np.zeros(nvars, dtype=bool)
    mask[np.arange(nvars) if variables is None else list(variables)] = True
    return mask


def wf_monomial_values(exponents, points, rates, total, variables=None, sign=1.0):
    r"""
    Values of a Wright-Fisher generator applied to every monomial, shape (n, T).

    The generator acts on the coordinates listed in ``variables`` (all by default):

    .. math::

        G x^n = \frac{1}{2}\sum_{a} n_a (n_a - 1 + s\,u_a) x^{n - e_a}
                - \frac{1}{2}\big(N(N - 1) + s\,U N\big) x^n,

    with :math:`N` the degree in those coordinates and :math:`s` the drift sign.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mask = _variable_mask(points.shape[1], variables)
    if np.any(points[:, mask] <= 0):
        raise ValueError('Invalid parameter input. Generator evaluation needs interior points.')
    rates = np.broadcast_to(np.asarray(rates, dtype=float), (int(mask.sum()),))

    acting = exponents[:, mask]
    lowering = 0.5 * acting * (acting - 1 + sign * rates)
    degree = acting.sum(axis=1)
    diagonal = 0.5 * (degree * (degree - 1) + sign * total * degree)
    return monomial_powers(points, exponents) * (1 / points[:, mask] @ lowering.T - diagonal)


class Polynomial:
    """
    A polynomial :math:`\\sum_t c_t x^{n_t}`.

    Parameters
    ----------
    exponents : array_like
        Nonnegative integer exponents, shape (T, nvars).
    coefficients : array_like
        Shape (T,).
    """

    def __init__(self, exponents, coefficients):
        exponents = np.atleast_2d(np.asarray(exponents, dtype=int))
        coefficients = np.atleast_1d(np.asarray(coefficients, dtype=float))
        if exponents.shape[0] != coefficients.size:
            raise ValueError('Dimension mismatch: one coefficient per monomial is required.')
        if np.any(exponents < 0):
            raise ValueError('Invalid parameter input. Exponents must be nonnegative.')
        merged, inverse = np.unique(exponents, axis=0, return_inverse=True)
        summed = np.zeros(merged.shape[0])
        np.add.at(summed, np.ravel(inverse), coefficients)
        keep = summed != 0
        self._exponents = merged[keep] if keep.any() else np.zeros((0, exponents.shape[1]), int)
        self._coefficients = summed[keep]
        self._nvars = exponents.shape[1]

    @classmethod
    def monomial(cls, exponent, coefficient=1.0):
        exponent = np.asarray(exponent, dtype=int)
        return cls(exponent[None, :], [coefficient])

    @classmethod
    def constant(cls, value, nvars):
        return cls(np.zeros((1, nvars), dtype=int), [value])

    def __repr__(self):
        return f'Polynomial({len(self)} terms in {self._nvars} variables)'

    def __len__(self):
        return self._coefficients.size

    @property
    def nvars(self):
        return self._nvars

    @property
    def exponents(self):
        return self._exponents

    @property
    def coefficients(self):
        return self._coefficients

    @property
    def degree(self):
        return int(self._exponents.sum(axis=1).max()) if len(self) else 0

    def evaluate(self, points):
        """Values at points of shape (n, nvars) or (nvars,)."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        points = np.atleast_2d(points)
        if not len(self):
            values = np.zeros(points.shape[0])
        else:
            values = np.prod(points[:, None, :] ** self._exponents[None], axis=-1) \
                @ self._coefficients
        return float(values[0]) if single else values

    def compose_S(self, H, K):
        """
        The polynomial ``f(S(w, x))`` in the H + H*K variables ``(w_1..w_H, x_11..x_HK)``.
        """
        if self._nvars != H * K:
            raise ValueError(f'Dimension mismatch: {self._nvars} variables, expected {H * K}.')
        w_exponents = self._exponents.reshape(-1, H, K).sum(axis=2)
        return Polynomial(np.hstack([w_exponents, self._exponents]), self._coefficients)

    def generator(self, rates, total, variables=None, sign=1.0):
        """
        The Wright-Fisher generator with mutation rates ``rates`` (total ``total``) acting on
        ``variables``, applied symbolically. ``sign=-1`` flips the drift.
        """
        mask = _variable_mask(self._nvars, variables)
        rates = np.broadcast_to(np.asarray(rates, dtype=float), (int(mask.sum()),))
        acting = self._exponents[:, mask]
        degree = acting.sum(axis=1)

        exponents = [self._exponents]
        coefficients = [-0.5 * (degree * (degree - 1) + sign * total * degree)
                        * self._coefficients]
        for column, rate in zip(np.flatnonzero(mask), rates):
            power = self._exponents[:, column]
            present = power > 0
            lowered = self._exponents[present].copy()
            lowered[:, column] -= 1
            exponents.append(lowered)
            coefficients.append(0.5 * power[present] * (power[present] - 1 + sign * rate)
                                * self._coefficients[present])
        return Polynomial(np.vstack(exponents), np.concatenate(coefficients))

    def integrate_dirichlet(self, alpha):
        """Exact integral against Dir(alpha), term by term."""
        if not len(self):
            return 0.0
        moments = np.exp(dirichlet_log_moments(alpha, self._exponents))
        return float(np.sum(self._coefficients * moments))
