"""
Deformed (Tsallis) calculus on scalars and dense arrays.

The q-logarithm and q-exponential

.. math::
    \\log_q(x) = \\frac{x^{1-q} - 1}{1 - q}, \\qquad
    \\exp_q(x) = [1 + (1 - q) x]^{1/(1-q)}

reduce to ``log`` / ``exp`` at ``q = 1``. Every function here routes
``|q - 1| < Q_ONE_TOL`` to the classical formula.
"""

from dataclasses import dataclass

import numpy as np

Q_ONE_TOL = 1e-9

_FMAX = np.finfo(float).max


def is_classical(q):
    """True when ``q`` is close enough to 1 to use the Shannon/KL branch."""
    return abs(q - 1.0) < Q_ONE_TOL


def _out(arr, like):
    if np.ndim(like) == 0:
        return float(arr)
    return arr


def _powzero(p, e):
    # p**e with the convention 0**e = 0 for every e (including e = 0).
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] ** e
    return out


def q_log(x, q):
    """q-logarithm of a positive real or array.

    Raises
    ------
    ValueError
        If any entry of ``x`` is not strictly positive.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)):
        raise ValueError("q_log is only defined for x > 0")
    if is_classical(q):
        return _out(np.log(xa), x)
    return _out((xa ** (1.0 - q) - 1.0) / (1.0 - q), x)


def q_exp(x, q, return_overflow=False):
    """q-exponential with the cutoff convention.

    For ``q < 1`` a non-positive base ``1 + (1-q) x`` gives 0. For
    ``q > 1`` the same situation is a pole; such entries, and any other
    overflow, are saturated at the largest finite float. Pass
    ``return_overflow=True`` to get the boolean mask of saturated entries
    alongside the values.
    """
    xa = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if is_classical(q):
            val = np.exp(xa)
        else:
            base = 1.0 + (1.0 - q) * xa
            expo = 1.0 / (1.0 - q)
            val = np.where(base > 0, np.abs(base) ** expo,
                           0.0 if expo > 0 else np.inf)
    overflow = ~np.isfinite(val)
    val = np.where(overflow, _FMAX, val)
    val = _out(val, x)
    if return_overflow:
        return val, (bool(overflow) if np.ndim(x) == 0 else overflow)
    return val


def gibbs_weight(a, q):
    """Element-wise ``exp_q(-1) / exp_q(a)``.

    This is the parametric form of every regularized plan: entries are
    ``((1 + (1-q) a) / q) ** (1 / (q-1))``. For ``q > 1`` a non-positive
    base maps to exactly 0 (the support cutoff); for ``q < 1`` it maps to
    ``inf`` (callers must keep the base positive).
    """
    aa = np.asarray(a, dtype=float)
    if is_classical(q):
        with np.errstate(over="ignore"):
            return _out(np.exp(-1.0 - aa), a)
    base = 1.0 + (1.0 - q) * aa
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        pos = np.where(base > 0, np.abs(base) / q, 0.0)
        w = np.where(base > 0, pos ** (1.0 / (q - 1.0)),
                     0.0 if q > 1 else np.inf)
    return _out(w, a)


def gibbs_argument(p, q):
    """Inverse of :func:`gibbs_weight` on ``p > 0``."""
    pa = np.asarray(p, dtype=float)
    if np.any(~(pa > 0)):
        raise ValueError("gibbs_argument needs strictly positive entries")
    if is_classical(q):
        return _out(-1.0 - np.log(pa), p)
    return _out((q * pa ** (q - 1.0) - 1.0) / (1.0 - q), p)


@dataclass(frozen=True)
class EntropyReport:
    h_q: float
    q: float

    def __float__(self):
        return self.h_q


def _check_nonneg(*arrays):
    for a in arrays:
        if np.any(np.asarray(a) < 0):
            raise ValueError("entries must be nonnegative")


def tsallis_entropy(p, q):
    """Tsallis entropy of a nonnegative vector; matrices are flattened.

    ``H_q(p) = sum(p**q - p) / (1 - q)``, Shannon entropy at ``q = 1``,
    with ``0**q = 0`` for every q (so empty cells contribute nothing).
    """
    pa = np.asarray(p, dtype=float).ravel()
    _check_nonneg(pa)
    pos = pa[pa > 0]
    if is_classical(q):
        h = -float(np.sum(pos * np.log(pos)))
    else:
        h = float(np.sum(pos ** q - pos) / (1.0 - q))
    return EntropyReport(h, float(q))


def tsallis_relative_entropy(P, R, q):
    """Tsallis relative q-entropy ``K_q(P, R)``.

    ``sum(q p + (1-q) r - p**q r**(1-q)) / (1 - q)``; the generalized
    Kullback-Leibler divergence ``sum(p log(p/r) - p + r)`` at ``q = 1``.
    Returns ``inf`` whenever some ``p > 0`` sits on ``r = 0``, for every q.
    """
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    if P.shape != R.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {R.shape}")
    _check_nonneg(P, R)
    if np.any((P > 0) & (R == 0)):
        return float("inf")
    if is_classical(q):
        pos = P > 0
        return float(np.sum(P[pos] * (np.log(P[pos]) - np.log(R[pos]))) + np.sum(R - P))
    cross = np.zeros_like(P)
    both = (P > 0) & (R > 0)
    cross[both] = P[both] ** q * R[both] ** (1.0 - q)
    return float(np.sum(q * P + (1.0 - q) * R - cross) / (1.0 - q))


def escort_power(P, q):
    """Element-wise ``P**q`` (zero entries stay zero)."""
    P = np.asarray(P, dtype=float)
    _check_nonneg(P)
    return _powzero(P, q)
