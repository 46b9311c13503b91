"""
Numerical harnesses for metric-type properties of regularized transport.

Covers plan composition (gluing), the entropy inequality that goes with
it, triangle-inequality sweeps for the entropy-adjusted distance and the
``r = c`` no-transport bound.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import qmath
from .core import QParams, TransportProblem, beta_adjusted_distance
from .solvers import SolverConfig, solve

MARGINAL_TOL = 1e-9
SLACK = 1e-10


@dataclass(frozen=True)
class GluedPlan:
    """Composition of ``P in U(x, y)`` and ``Q in U(y, z)``."""

    S: np.ndarray
    x: np.ndarray
    z: np.ndarray


def glue(P, Q, y, tol=MARGINAL_TOL):
    """``s_ik = sum_j p_ij q_jk / y_j``, skipping ``y_j = 0``.

    Raises
    ------
    ValueError
        If the column sums of ``P`` or the row sums of ``Q`` differ from
        ``y`` by more than ``tol`` (L1).
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    y = np.asarray(y, dtype=float)
    if P.shape[1] != y.size or Q.shape[0] != y.size:
        raise ValueError("plans do not share the middle dimension")
    if np.abs(P.sum(0) - y).sum() > tol:
        raise ValueError("column sums of P do not match the middle marginal")
    if np.abs(Q.sum(1) - y).sum() > tol:
        raise ValueError("row sums of Q do not match the middle marginal")
    inv = np.zeros_like(y)
    inv[y > 0] = 1.0 / y[y > 0]
    S = (P * inv[None, :]) @ Q
    return GluedPlan(S, P.sum(1), Q.sum(0))


def entropy_gap(P, S, x, y, z, q):
    """``[H(S) - H(x) - H(z)] - [H(P) - H(x) - H(y)]`` in Tsallis entropy."""
    H = lambda v: qmath.tsallis_entropy(v, q).h_q
    return (H(S) - H(x) - H(z)) - (H(P) - H(x) - H(y))


def entropy_monotonicity_check(P, Q, S, x, y, z, q):
    """True iff the glued plan's mutual-information-like gap does not drop.

    Checks ``H_q(S) - H_q(x) - H_q(z) >= H_q(P) - H_q(x) - H_q(y)`` with
    ``-1e-10`` slack. ``Q`` is accepted for symmetry with :func:`glue`.
    """
    if q < 1:
        raise ValueError("the entropy inequality is stated for q >= 1")
    return bool(entropy_gap(P, S, x, y, z, q) >= -SLACK)


def sample_marginal(n, rng):
    """Uniform draw from the probability simplex (Dirichlet(1))."""
    return rng.dirichlet(np.ones(n))


def _corner_vertex(x, y, rng):
    # north-west corner rule on shuffled rows and columns: a vertex of U(x, y)
    ri, ci = rng.permutation(x.size), rng.permutation(y.size)
    a, b = x[ri].copy(), y[ci].copy()
    V = np.zeros((x.size, y.size))
    i = j = 0
    while i < x.size and j < y.size:
        t = min(a[i], b[j])
        V[ri[i], ci[j]] = t
        a[i] -= t
        b[j] -= t
        if a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return V


def random_coupling(x, y, rng, sparsity=0.0):
    """A random element of ``U(x, y)``.

    With ``sparsity == 0`` a random positive kernel is balanced to the
    marginals. Otherwise the result mixes a few random vertices of the
    polytope, so it has exact zeros; larger ``sparsity`` mixes fewer.
    """
    if sparsity:
        k = max(1, int(round((1.0 - sparsity) * 4)))
        w = rng.dirichlet(np.ones(k))
        return sum(wi * _corner_vertex(x, y, rng) for wi in w)
    K = rng.random((x.size, y.size)) ** 3 + 1e-3
    u = np.ones(x.size)
    for _ in range(5000):
        v = np.divide(y, K.T @ u, out=np.zeros_like(y), where=y > 0)
        u = np.divide(x, K @ v, out=np.zeros_like(x), where=x > 0)
        P = u[:, None] * K * v[None, :]
        if np.abs(P.sum(0) - y).sum() < 1e-13:
            break
    return P


def random_metric_matrix(n, rng, dim=2):
    """Pairwise Euclidean distances of ``n`` uniform points in the unit square."""
    X = rng.random((n, dim))
    return np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))


def validate_metric(M, tol=1e-12):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("metric matrix must be square")
    if np.any(M < -tol) or np.abs(np.diag(M)).max() > tol:
        raise ValueError("metric matrix needs nonnegative entries and zero diagonal")
    if np.abs(M - M.T).max() > tol:
        raise ValueError("metric matrix is not symmetric")
    through = (M[:, :, None] + M[None, :, :]).min(1)
    if np.any(M > through + tol):
        raise ValueError("metric matrix violates the triangle inequality")
    return M


@dataclass(frozen=True)
class SweepReport:
    trials: int
    violations: int
    max_violation: float

    def to_json(self):
        return json.dumps(asdict(self))


def trot_distance(x, z, M, q, lam, beta_const=0.0, cfg=None):
    """Entropy-adjusted TROT distance between two marginals."""
    prob = TransportProblem(x, z, M)
    params = QParams(q, lam)
    plan, _, _ = solve(prob, params, cfg)
    return beta_adjusted_distance(prob, params, beta_const, plan)


def _distance_parts(x, z, M, q, lam, cfg):
    # TROT value and H_q(x) + H_q(z), so several beta share one solve.
    prob = TransportProblem(x, z, M)
    params = QParams(q, lam)
    plan, _, _ = solve(prob, params, cfg)
    base = beta_adjusted_distance(prob, params, 0.0, plan)
    h = qmath.tsallis_entropy(x, q).h_q + qmath.tsallis_entropy(z, q).h_q
    return base, h / lam


def triangle_sweep(M, beta_const, lam, trials, q=1.0, seed=0, cfg=None,
                   tol=1e-8):
    """Count triples violating ``d(x, z) <= d(x, y) + d(y, z)``.

    ``beta_const`` may be a scalar or a sequence; a sequence returns one
    report per value, all computed from the same solves.
    """
    M = validate_metric(M)
    betas = np.atleast_1d(np.asarray(beta_const, dtype=float))
    cfg = cfg or SolverConfig()
    rng = np.random.default_rng(seed)
    n = M.shape[0]
    worst = np.full(betas.size, -np.inf)
    count = np.zeros(betas.size, dtype=int)
    for _ in range(trials):
        x, y, z = (sample_marginal(n, rng) for _ in range(3))
        xz = _distance_parts(x, z, M, q, lam, cfg)
        xy = _distance_parts(x, y, M, q, lam, cfg)
        yz = _distance_parts(y, z, M, q, lam, cfg)
        for k, b in enumerate(betas):
            gap = (xz[0] + b * xz[1]) - (xy[0] + b * xy[1]) - (yz[0] + b * yz[1])
            worst[k] = max(worst[k], gap)
            count[k] += gap > tol
    reports = [SweepReport(trials, int(c), float(w)) for c, w in zip(count, worst)]
    return reports[0] if np.ndim(beta_const) == 0 else reports


def weak_indiscernibles_check(r, M, lam, q, cfg=None):
    """True iff the ``beta = 1/2`` distance from ``r`` to itself is <= 1e-10."""
    if q < 1:
        raise ValueError("the bound is stated for q >= 1")
    validate_metric(M)
    return bool(trot_distance(r, r, M, q, lam, 0.5, cfg) <= SLACK)


def gluing_sweep(q, trials, n=4, seed=0, zero_prob=0.0):
    """Random gluing trials: feasibility of ``S`` and the entropy inequality.

    With ``zero_prob > 0`` entries of the middle marginal are zeroed at
    that rate to exercise the ``y_j = 0`` convention.

    Returns a dict with a feasibility :class:`SweepReport` (max L1 marginal
    error) and a monotonicity :class:`SweepReport` (largest drop of the
    entropy gap), plus the worst counterexample found.
    """
    rng = np.random.default_rng(seed)
    feas_bad, mono_bad = 0, 0
    feas_worst, mono_worst = 0.0, -np.inf
    witness = None
    for _ in range(trials):
        x, y, z = (sample_marginal(n, rng) for _ in range(3))
        if zero_prob:
            y[rng.random(n) < zero_prob] = 0.0
            if y.sum() == 0:
                y[rng.integers(n)] = 1.0
            y /= y.sum()
        P = random_coupling(x, y, rng, sparsity=0.5)
        Q = random_coupling(y, z, rng, sparsity=0.5)
        x, z = P.sum(1), Q.sum(0)
        g = glue(P, Q, y)
        err = np.abs(g.S.sum(1) - x).sum() + np.abs(g.S.sum(0) - z).sum()
        feas_worst = max(feas_worst, err)
        feas_bad += err > 1e-12
        drop = -entropy_gap(P, g.S, x, y, z, q)
        if drop > mono_worst:
            mono_worst = drop
            witness = {"P": P.tolist(), "Q": Q.tolist(), "drop": drop}
        mono_bad += drop > SLACK
    return {
        "feasibility": SweepReport(trials, int(feas_bad), float(feas_worst)),
        "monotonicity": SweepReport(trials, int(mono_bad), float(mono_worst)),
        "worst_case": witness,
    }
