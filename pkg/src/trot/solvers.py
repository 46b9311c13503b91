"""
Solvers for regularized optimal transport, one per regime of ``q``.

======================  =====================================================
``q == 0``              exact transport LP (dual simplex vertex)
``q == 1``              Sinkhorn-Knopp balancing of the Gibbs kernel
``0 < q < 1``           second-order row/column balancing (SO-TROT)
``q > 1``               KL mirror descent with Sinkhorn projections (KL-TROT)
======================  =====================================================

Rows and columns with zero marginal mass are removed before solving and
re-inserted as zero rows/columns afterwards.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq, linprog

from . import qmath
from .core import (
    DualCertificate,
    TransportPlan,
    TransportProblem,
    build_gibbs_kernel,
    escort_divergence_objective,
    kkt_form_residual,
    recover_duals,
    trot_objective,
)

LOG_DOMAIN_THRESHOLD = 200.0
PLAN_FLOOR = 1e-300
_LOG_FLOOR = math.log(PLAN_FLOOR)


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``t_k`` for KL-TROT.

    ``harmonic``: ``t0 * w / (w + k - 1)``, i.e. ``t0 / k`` shifted by a
    warm-up length ``w``; keeps ``sum t_k = inf`` and ``sum t_k**2 < inf``.
    ``sqrt``: ``t0 / sqrt(k)``; diverging square sum, kept for comparison.

    With ``t0=None`` the solver uses the inverse relative-smoothness bound
    ``lam / (q * B**(q-1))``, ``B`` the largest feasible plan entry.
    """

    t0: Optional[float] = None
    decay: str = "harmonic"
    warmup: float = 1e4

    def __post_init__(self):
        if self.decay not in ("harmonic", "sqrt"):
            raise ValueError(f"unknown step decay {self.decay!r}")
        if self.t0 is not None and not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if not self.warmup >= 1:
            raise ValueError("warmup must be >= 1")

    def step(self, k, t0):
        if self.decay == "harmonic":
            return t0 * self.warmup / (self.warmup + k - 1)
        return t0 / math.sqrt(k)


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and switches shared by every solver.

    Parameters
    ----------
    max_outer_iters : int
        Outer sweeps (Sinkhorn, SO-TROT) or mirror steps (KL-TROT).
    marginal_tol : float
        L1 tolerance on each marginal.
    objective_tol : float
        Relative objective change per sweep below which the run may stop.
    step_schedule : StepSchedule
    production_mods : bool
        SO-TROT speed-ups: no step cap, halved curvature term, doubled
        shrinking steps, plus a pole guard on growing steps.
    polish : bool
        KL-TROT only: every ``polish_every`` mirror steps, try to finish
        with a damped Newton solve of the dual warm-started at the iterate.
    inner_max_iters, inner_tol
        Sinkhorn projection inside KL-TROT.
    """

    max_outer_iters: int = 20000
    marginal_tol: float = 1e-9
    objective_tol: float = 1e-12
    step_schedule: StepSchedule = field(default_factory=StepSchedule)
    production_mods: bool = True
    polish: bool = True
    inner_max_iters: int = 1000
    inner_tol: float = 1e-12
    polish_every: int = 10

    def __post_init__(self):
        if min(self.max_outer_iters, self.inner_max_iters, self.polish_every) < 1:
            raise ValueError("iteration limits must be >= 1")
        for name in ("marginal_tol", "objective_tol", "inner_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class SolveTrace:
    """Per-sweep diagnostics.

    ``objective_history`` holds the escort divergence of each iterate for
    Sinkhorn and SO-TROT and the TROT objective for KL-TROT (whose iterates
    are feasible). ``lyapunov_history`` holds the Bregman divergence from
    the independent coupling ``r c^T`` to the iterate, which the balancing
    solvers decrease monotonically. ``auxiliary_values`` records ``A(P, y)``
    for every SO-TROT half sweep (row sweep, then column sweep).
    """

    solver: str
    iterations: int = 0
    objective_history: list = field(default_factory=list)
    row_residual_history: list = field(default_factory=list)
    col_residual_history: list = field(default_factory=list)
    converged: bool = False
    auxiliary_values: Optional[list] = None
    lyapunov_history: list = field(default_factory=list)
    polish_iterations: int = 0
    message: str = ""

    @property
    def residual_history(self):
        return [max(a, b) for a, b in zip(self.row_residual_history,
                                          self.col_residual_history)]

    def record(self, objective, row_res, col_res, lyapunov=None):
        self.objective_history.append(float(objective))
        self.row_residual_history.append(float(row_res))
        self.col_residual_history.append(float(col_res))
        if lyapunov is not None:
            self.lyapunov_history.append(float(lyapunov))

    def to_jsonl(self):
        """One JSON object per sweep: iter, objective, residuals, aux."""
        lines = []
        aux = self.auxiliary_values
        for k, (obj, rr, cr) in enumerate(zip(self.objective_history,
                                              self.row_residual_history,
                                              self.col_residual_history)):
            rec = {"iter": k + 1, "objective": obj,
                   "row_residual": rr, "col_residual": cr,
                   "aux": None if aux is None else aux[2 * k:2 * k + 2]}
            lines.append(json.dumps(rec))
        return "\n".join(lines) + ("\n" if lines else "")


def _residuals(P, r, c):
    return float(np.abs(P.sum(1) - r).sum()), float(np.abs(P.sum(0) - c).sum())


def _stalled(hist, tol):
    if len(hist) < 2:
        return False
    a, b = hist[-2], hist[-1]
    if not (np.isfinite(a) and np.isfinite(b)):
        return a == b
    return abs(b - a) <= tol * max(1.0, abs(b))


def _support(prob):
    rows = np.flatnonzero(prob.r > 0)
    cols = np.flatnonzero(prob.c > 0)
    if len(rows) == len(prob.r) and len(cols) == len(prob.c):
        return prob, rows, cols
    sub = TransportProblem(prob.r[rows], prob.c[cols], prob.M[np.ix_(rows, cols)])
    return sub, rows, cols


def _embed(Psub, prob, rows, cols):
    P = np.zeros(prob.shape)
    P[np.ix_(rows, cols)] = Psub
    return TransportPlan.from_matrix(P, prob)


def _bregman_gap(X, P, q):
    """Bregman divergence of the negative Tsallis entropy, ``D(X || P)``."""
    if qmath.is_classical(q):
        return qmath.tsallis_relative_entropy(X, P, 1.0)
    if np.any(P <= 0):
        return float("inf")
    phi = lambda Z: -qmath.tsallis_entropy(Z, q).h_q
    grad = -(q * P ** (q - 1.0) - 1.0) / (1.0 - q)
    return float(phi(X) - phi(P) - np.sum(grad * (X - P)))


# --------------------------------------------------------------------- q = 0

def solve_exact_lp(prob, cfg=None):
    """Exact optimal transport by the dual simplex method.

    The transport LP is handed to HiGHS's dual simplex, which returns a
    basic (vertex) solution of ``U(r, c)``.
    """
    plan, trace, _ = _solve_lp(prob, cfg)
    return plan, trace


def _solve_lp(prob, cfg):
    cfg = cfg or SolverConfig()
    n, m = prob.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([prob.r, prob.c])
    res = linprog(prob.M.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs-ds")
    trace = SolveTrace("exact_lp")
    if res.status != 0:
        raise ValueError(f"transport LP failed: {res.message}")
    P = np.maximum(res.x.reshape(n, m), 0.0)
    rr, cr = _residuals(P, prob.r, prob.c)
    trace.iterations = int(res.nit)
    trace.record(res.fun, rr, cr)
    trace.converged = max(rr, cr) < cfg.marginal_tol
    marg = res.eqlin.marginals
    trace.message = "optimal vertex"
    plan = TransportPlan.from_matrix(P, prob)
    plan_duals = (np.asarray(marg[:n]), np.asarray(marg[n:]))
    return plan, trace, plan_duals


# --------------------------------------------------------------------- q = 1

def sinkhorn_knopp(K, r, c, tol=1e-9, max_iters=10000, log_K=None,
                   objective_tol=None, record=True):
    """Scale ``K`` to ``diag(u) K diag(v)`` with marginals ``(r, c)``.

    Parameters
    ----------
    K : array (n, m)
        Nonnegative kernel. Ignored when ``log_K`` is given.
    r, c : arrays
        Target marginals.
    tol : float
        L1 tolerance on each marginal.
    log_K : array (n, m), optional
        Run the stabilized log-domain iteration on this log-kernel instead.
    objective_tol : float, optional
        When given, also require the relative change of ``KL(P || K)``
        between sweeps to fall below it.
    record : bool
        Record ``KL(P || K)`` and ``KL(r c^T || P)`` each sweep. Turning it
        off leaves only the residual histories.

    Returns
    -------
    P : array (n, m)
    trace : SolveTrace

    Raises
    ------
    ValueError
        If a row (column) of the kernel vanishes while its marginal is positive.
    """
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    if log_K is not None:
        return _sinkhorn_log(np.asarray(log_K, dtype=float), r, c, tol,
                             max_iters, objective_tol)
    K = np.asarray(K, dtype=float)
    if K.shape != (r.size, c.size):
        raise ValueError(f"kernel shape {K.shape} does not match marginals")
    if np.any(K < 0):
        raise ValueError("kernel has negative entries")
    _check_starvation(K > 0, r, c)
    trace = SolveTrace("sinkhorn")
    Pt = np.outer(r, c)
    u = np.ones(r.size)
    v = np.ones(c.size)
    P = K
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(1, max_iters + 1):
            u = np.where(r > 0, r / (K @ v), 0.0)
            v = np.where(c > 0, c / (K.T @ u), 0.0)
            P = u[:, None] * K * v[None, :]
            if not np.all(np.isfinite(P)):
                trace.message = "scaling overflow"
                break
            rr, cr = _residuals(P, r, c)
            if record:
                trace.record(qmath.tsallis_relative_entropy(P, K, 1.0), rr, cr,
                             qmath.tsallis_relative_entropy(Pt, P, 1.0))
            else:
                trace.record(np.nan, rr, cr)
            trace.iterations = k
            if max(rr, cr) < tol and (objective_tol is None or k == 1 or
                                      _stalled(trace.objective_history, objective_tol)):
                trace.converged = True
                break
    return P, trace


def _check_starvation(support, r, c):
    dead_rows = np.flatnonzero((r > 0) & ~support.any(1))
    if dead_rows.size:
        raise ValueError(f"kernel row {int(dead_rows[0])} is all zero but r > 0 there")
    dead_cols = np.flatnonzero((c > 0) & ~support.any(0))
    if dead_cols.size:
        raise ValueError(f"kernel column {int(dead_cols[0])} is all zero but c > 0 there")


def _logsumexp(X, axis):
    mx = np.max(X, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return (mx + np.log(np.sum(np.exp(X - mx), axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_log(logK, r, c, tol, max_iters, objective_tol):
    _check_starvation(np.isfinite(logK), r, c)
    trace = SolveTrace("sinkhorn_log")
    with np.errstate(divide="ignore"):
        lr, lc = np.log(r), np.log(c)
    f = np.zeros(r.size)
    g = np.zeros(c.size)
    Pt = np.outer(r, c)
    K = None
    P = np.exp(logK)
    for k in range(1, max_iters + 1):
        f = np.where(r > 0, lr - _logsumexp(logK + g[None, :], 1), -np.inf)
        g = np.where(c > 0, lc - _logsumexp(logK + f[:, None], 0), -np.inf)
        L = f[:, None] + logK + g[None, :]
        P = np.exp(L)
        rr, cr = _residuals(P, r, c)
        if K is None:
            K = np.exp(logK)
        obj = _kl_from_logs(P, L, logK)
        trace.record(obj, rr, cr, qmath.tsallis_relative_entropy(Pt, P, 1.0)
                     if np.all(P[Pt > 0] > 0) else float("inf"))
        trace.iterations = k
        if max(rr, cr) < tol and (objective_tol is None or k == 1 or
                                  _stalled(trace.objective_history, objective_tol)):
            trace.converged = True
            break
    return P, trace


def _kl_from_logs(P, logP, logK):
    # Generalized KL(P || K) using logs so underflowed kernels stay finite.
    pos = P > 0
    return float(np.sum(P[pos] * (logP[pos] - logK[pos]))
                 - P.sum() + np.exp(logK).sum())


def solve_sinkhorn(prob, params, cfg=None):
    """Shannon-regularized transport (``q = 1``) by Sinkhorn balancing.

    Switches to the log-domain iteration when ``lam * max(M) > 200``.
    """
    cfg = cfg or SolverConfig()
    sub, rows, cols = _support(prob)
    A = params.lam * sub.M
    if params.lam * float(sub.M.max(initial=0.0)) > LOG_DOMAIN_THRESHOLD:
        Psub, trace = sinkhorn_knopp(None, sub.r, sub.c, cfg.marginal_tol,
                                     cfg.max_outer_iters, log_K=-1.0 - A,
                                     objective_tol=cfg.objective_tol)
    else:
        Psub, trace = sinkhorn_knopp(np.exp(-1.0 - A), sub.r, sub.c,
                                     cfg.marginal_tol, cfg.max_outer_iters,
                                     objective_tol=cfg.objective_tol)
    return _embed(Psub, prob, rows, cols), trace


# ----------------------------------------------------------------- 0 < q < 1

def so_trot_auxiliary(P, y, A, r, q):
    """Auxiliary function ``sum_i A_i(P, y)`` of the row balancing step.

    ``A`` is the matrix of KKT arguments generating ``P`` (so that
    ``P = gibbs_weight(A, q)``), ``y`` the per-row shift and ``r`` the row
    marginal. ``A_i = y_i r_i + sum_j (p_ij**q - w(a_ij - y_i)**q)``.
    """
    P = np.asarray(P, dtype=float)
    y = np.asarray(y, dtype=float)
    Pn = qmath.gibbs_weight(np.asarray(A) - y[:, None], q)
    return float(np.sum(y * np.asarray(r)) + np.sum(P ** q - Pn ** q))


def so_trot_sweep(A, r, q, production_mods=False):
    """One row-balancing sweep of SO-TROT on the argument matrix ``A``.

    Returns the updated matrix, the shifts ``y`` and ``A(P, y)``. Apply to
    ``A.T`` with the column marginal for a column sweep.
    """
    P = qmath.gibbs_weight(A, q)
    D = 1.0 + (1.0 - q) * A
    P1 = P / D
    P2 = P1 / D
    d = r - P.sum(1)
    b = P1.sum(1)
    a = (2.0 - q) * P2.sum(1)
    if production_mods:
        a = a / 2.0
    root = (-b + np.sqrt(b * b + 4.0 * a * np.maximum(d, 0.0))) / (2.0 * a)
    y = np.where(d >= 0, root, d / b)
    if production_mods:
        y = np.where(d < 0, 2.0 * y, y)
        # keep 1 + (1-q)(a - y) positive: never cross the pole of the weight
        y = np.minimum(y, 0.5 * D.min(1) / (1.0 - q))
    else:
        cap = q / ((6.0 - 4.0 * q) * (P ** (1.0 - q)).max(1))
        y = np.where(np.abs(y) > cap, cap * np.sign(d), y)
    aux = so_trot_auxiliary(P, y, A, r, q)
    return A - y[:, None], y, aux


def solve_so_trot(prob, params, cfg=None):
    """TROT for ``0 < q < 1`` by alternating second-order row/column sweeps.

    Starting from ``A = lam * M`` (the Gibbs kernel), each outer iteration
    runs one row sweep and one column sweep (the latter on transposed
    matrices). The plan is always ``gibbs_weight(A, q)``.
    """
    q = params.q
    if not 0 < q < 1:
        raise ValueError(f"SO-TROT needs 0 < q < 1, got {q}")
    cfg = cfg or SolverConfig()
    sub, rows, cols = _support(prob)
    r, c = sub.r, sub.c
    kernel = build_gibbs_kernel(sub, params)
    Pt = np.outer(r, c)
    A = params.lam * sub.M
    trace = SolveTrace("so_trot", auxiliary_values=[])
    P = kernel.U_tilde
    for k in range(1, cfg.max_outer_iters + 1):
        A, _, aux_r = so_trot_sweep(A, r, q, cfg.production_mods)
        At, _, aux_c = so_trot_sweep(A.T, c, q, cfg.production_mods)
        A = At.T
        P = qmath.gibbs_weight(A, q)
        trace.auxiliary_values += [aux_r, aux_c]
        if not np.all(np.isfinite(P)):
            trace.message = "iterate left the domain of the weight function"
            break
        rr, cr = _residuals(P, r, c)
        trace.record(escort_divergence_objective(P, kernel, q), rr, cr,
                     _bregman_gap(Pt, P, q))
        trace.iterations = k
        if max(rr, cr) < cfg.marginal_tol and _stalled(trace.objective_history,
                                                       cfg.objective_tol):
            trace.converged = True
            break
    return _embed(P, prob, rows, cols), trace


# -------------------------------------------------------------------- q > 1

def trot_gradient(P, M, params):
    """Element-wise gradient of the TROT objective,
    ``m_ij - (q p**(q-1) - 1) / ((1-q) lam)``.
    """
    P = np.asarray(P, dtype=float)
    q, lam = params.q, params.lam
    if qmath.is_classical(q):
        with np.errstate(divide="ignore"):
            return M + (1.0 + np.log(P)) / lam
    return M - (q * qmath._powzero(P, q - 1.0) - 1.0) / ((1.0 - q) * lam)


def _center(G):
    # Rank-two (row + column) offsets are absorbed by the Sinkhorn scalings.
    return G - G.mean(1, keepdims=True) - G.mean(0, keepdims=True) + G.mean()


def _kl_project(L, r, c, cfg):
    """Sinkhorn projection of ``exp(L)``; the log domain is a fallback for
    overflow or starved rows/columns, not for slow convergence."""
    L = np.maximum(L - L.max(), _LOG_FLOOR)
    K = np.exp(L)
    try:
        P, tr = sinkhorn_knopp(K, r, c, cfg.inner_tol, cfg.inner_max_iters,
                               record=False)
        if np.all(np.isfinite(P)):
            return P, tr.iterations
    except ValueError:
        pass
    P, tr = sinkhorn_knopp(None, r, c, cfg.inner_tol, cfg.inner_max_iters,
                           log_K=L)
    return P, tr.iterations


def _weight_slope(w, q):
    # d w / d a = -w**(2-q) / q on the support, 0 at the cutoff
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(w > 0, -qmath._powzero(w, 2.0 - q) / q, 0.0)


def _dual_hessian(w, q):
    n, m = w.shape
    dw = _weight_slope(w, q)
    H = np.zeros((n + m, n + m))
    H[:n, :n] = np.diag(dw.sum(1))
    H[n:, n:] = np.diag(dw.sum(0))
    H[:n, n:] = dw
    H[n:, :n] = dw.T
    return H


def _marginal_gap(w, prob):
    return np.concatenate([w.sum(1) - prob.r, w.sum(0) - prob.c])


def _cutoff_weight(E, q):
    # gibbs_weight expressed through E = 1/(q-1) - a, the distance to the
    # cutoff; E keeps full relative precision where a does not.
    E = np.asarray(E, dtype=float)
    return np.where(E > 0, (np.maximum(E, 0.0) * ((q - 1.0) / q)) ** (1.0 / (q - 1.0)), 0.0)


def _cutoff_distance(p, q):
    return q * p ** (q - 1.0) / (q - 1.0)


def _phi(X, q, gap):
    """Per-cell dual integrand ``a * w(a) - h(w(a))`` and the weights.

    ``X`` holds the arguments ``a``, or their cutoff distances when ``gap``.
    The derivative of the integrand in ``a`` is ``w(a)``.
    """
    if gap:
        w = _cutoff_weight(X, q)
        A = 1.0 / (q - 1.0) - X
    else:
        w = np.asarray(qmath.gibbs_weight(X, q))
        A = X
    if qmath.is_classical(q):
        return -w, w
    h = (qmath._powzero(w, q) - w) / (1.0 - q)
    return A * w - h, w


def _balance_line(E, k, axis, target, q):
    """Shift row (axis 0) or column (axis 1) ``k`` of the cutoff distances
    ``E`` so its weights sum to ``target``; returns the shift of the
    argument (``E`` moves by its negative)."""
    line = E[k] if axis == 0 else E[:, k]
    f = lambda x: float(np.sum(_cutoff_weight(line - x, q))) - target
    top = float(line.max())
    lo = top - _cutoff_distance(target, q)
    if f(lo) <= 0:
        # The cheapest cell alone carries the target up to rounding.
        return lo
    return brentq(f, lo, top, xtol=1e-300)


def _balance(E, alpha, beta, prob, q, dead_only):
    """Exact 1-D balancing of rows, then columns, in place (``q > 1``).

    With ``dead_only`` only lines whose cells are all cut off are touched;
    Newton cannot move those since their Hessian rows vanish.
    """
    for axis, marg, dual in ((0, prob.r, alpha), (1, prob.c, beta)):
        w = _cutoff_weight(E, q)
        mass = w.sum(1 - axis)
        for k in np.flatnonzero(marg > 0):
            if dead_only and mass[k] > 0:
                continue
            x = _balance_line(E, k, axis, marg[k], q)
            dual[k] += x
            if axis == 0:
                E[k] -= x
            else:
                E[:, k] -= x


BALANCE_SWEEPS = 3


def _armijo(X, phi, g, step, prob, q, gap):
    """Backtracking on the dual gain; returns (s, (da, db, X, phi, w)), s = 0 on failure."""
    n = X.shape[0]
    sign = -1.0 if gap else 1.0
    gn = np.abs(g).sum()
    slope = float(g @ step)
    if not np.isfinite(slope) or slope <= 0:
        return 0.0, None
    s = 1.0
    for _ in range(40):
        da, db = s * step[:n], s * step[n:]
        Xn = X + sign * (da[:, None] + db[None, :])
        phin, wn = _phi(Xn, q, gap)
        with np.errstate(invalid="ignore"):
            gain = float(np.sum(phin - phi) - da @ prob.r - db @ prob.c)
        if gain >= 1e-4 * s * slope:
            return s, (da, db, Xn, phin, wn)
        # Near the optimum the gain drowns in rounding; fall back on the
        # gradient norm.
        if (abs(gain) <= 1e-13 * (1.0 + np.abs(phi).sum()) and
                np.abs(_marginal_gap(wn, prob)).sum() < (1.0 - 1e-4 * s) * gn):
            return s, (da, db, Xn, phin, wn)
        s *= 0.5
    return 0.0, None


def dual_polish(prob, params, alpha, beta, tol=1e-9, max_iters=200):
    """Solve the concave dual of the ``q > 0`` problem to high accuracy.

    The dual variables parameterize plans through the KKT form and the
    dual gradient is the marginal violation of that plan. Steps are
    Levenberg-Marquardt regularized Newton steps with an Armijo search on
    the dual value. For ``q > 1``, rows/columns pushed entirely past the
    cutoff, and stalled searches, are repaired by exact 1-D balancing.

    The argument matrix ``A = alpha + lam M + beta`` is carried explicitly
    and updated by small increments. For ``q > 1`` it is carried as the
    distance to the cutoff, ``1/(q-1) - A``: a cell of mass ``p`` sits
    ``~p**(q-1)`` below the cutoff, which ``A`` itself cannot resolve.

    Returns
    -------
    alpha, beta : arrays
        Duals with ``alpha[0] = 0``.
    P : array
        The plan they generate.
    iterations : int
    converged : bool
        Both marginal L1 violations below ``tol``.
    """
    q = params.q
    n, m = prob.shape
    alpha = np.array(alpha, dtype=float)
    beta = np.array(beta, dtype=float)
    beta += alpha[0]
    alpha -= alpha[0]
    A = alpha[:, None] + params.lam * prob.M + beta[None, :]
    cutoff = q > 1 and not qmath.is_classical(q)
    X = 1.0 / (q - 1.0) - A if cutoff else A
    if cutoff:
        _balance(X, alpha, beta, prob, q, dead_only=True)
    phi, w = _phi(X, q, cutoff)
    k = 0
    while k < max_iters:
        g = _marginal_gap(w, prob)
        if np.abs(g[:n]).sum() < tol and np.abs(g[n:]).sum() < tol:
            break
        if not np.all(np.isfinite(w)):
            break
        k += 1
        gn = np.abs(g).sum()
        H = _dual_hessian(w, q)[1:, 1:]
        d = np.abs(np.diag(H))
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        step = np.linalg.lstsq(H - 1e-3 * min(1.0, gn) * np.diag(d), -g[1:],
                               rcond=None)[0]
        s, trial = _armijo(X, phi, g, np.concatenate([[0.0], step]), prob, q, cutoff)
        if s > 0:
            da, db, X, phi, w = trial
            alpha += da
            beta += db
        progress = np.abs(_marginal_gap(w, prob)).sum() < 0.99 * gn
        if cutoff and (not progress or np.any(w.sum(1) == 0) or np.any(w.sum(0) == 0)):
            for _ in range(1 if progress else BALANCE_SWEEPS):
                _balance(X, alpha, beta, prob, q, dead_only=progress)
            phi, w = _phi(X, q, cutoff)
        elif s == 0:
            break
    g = _marginal_gap(w, prob)
    ok = bool(np.abs(g[:n]).sum() < tol and np.abs(g[n:]).sum() < tol)
    return alpha - alpha[0], beta + alpha[0], w, k, ok


def solve_kl_trot(prob, params, cfg=None):
    """TROT for ``q > 1`` by KL-projected gradient (mirror) descent.

    ``P <- SK(P * exp(-t_k grad f(P)), r, c)`` starting from the Gibbs
    kernel, where ``SK`` is a Sinkhorn projection and ``f`` the TROT
    objective. Cut-off (zero) kernel cells are seeded with a small positive
    mass; a multiplicative update could never revive them otherwise.

    With ``cfg.polish`` the descent is periodically handed to
    :func:`dual_polish`, warm-started from duals fitted to the current
    iterate; the first successful hand-off ends the run. If the first
    hand-off fails, a start built from the LP duals is tried once (useful
    at large ``lam``, where the Gibbs kernel is mostly cut off), and the
    interval between hand-offs doubles after each failure; if every
    hand-off fails, mirror descent finishes alone. Mirror descent alone
    is slow on plans with a wide dynamic range (the step is limited by the
    largest entry while small entries move at a rate ``~ p**(q-1)``).
    """
    q = params.q
    if not q > 1:
        raise ValueError(f"KL-TROT needs q > 1, got {q}")
    cfg = cfg or SolverConfig()
    sub, rows, cols = _support(prob)
    r, c, M = sub.r, sub.c, sub.M
    kernel = build_gibbs_kernel(sub, params)
    U = kernel.U_tilde.copy()
    if np.any(U > 0):
        U[U == 0] = 1e-3 * U[U > 0].min()
    else:
        U[:] = 1.0
    bound = float(np.minimum(r[:, None], c[None, :]).max())
    sched = cfg.step_schedule
    t0 = sched.t0 if sched.t0 is not None else params.lam / (q * bound ** (q - 1.0))
    trace = SolveTrace("kl_trot")
    P = U
    inner = 0
    tried_lp = False
    next_polish, gap = cfg.polish_every, cfg.polish_every
    for k in range(1, cfg.max_outer_iters + 1):
        t = sched.step(k, t0)
        G = _center(trot_gradient(P, M, params))
        L = np.log(np.maximum(P, PLAN_FLOOR)) - t * G
        P, its = _kl_project(L, r, c, cfg)
        inner += its
        rr, cr = _residuals(P, r, c)
        trace.record(trot_objective(P, sub, params), rr, cr)
        trace.iterations = k
        stalled = max(rr, cr) < cfg.marginal_tol and _stalled(
            trace.objective_history, cfg.objective_tol)
        if cfg.polish and (stalled or k >= next_polish
                           or k == cfg.max_outer_iters):
            fit = recover_duals(P, sub, params, refine=False)
            W = _polish(fit.alpha, fit.beta, sub, params, cfg, trace)
            if W is None and not tried_lp:
                tried_lp = True
                W = _polish(*_lp_dual_start(sub, params), sub, params, cfg, trace)
            if W is not None:
                P = W
                break
            # back off: each failed hand-off doubles the wait for the next
            gap *= 2
            next_polish = k + gap
        if stalled:
            trace.converged = True
            break
    trace.message = f"{inner} inner Sinkhorn sweeps"
    return _embed(P, prob, rows, cols), trace


def _lp_dual_start(prob, params):
    # As lam grows the duals approach -lam times the LP duals; the offset
    # gives each LP-tight cell the weight of a uniform spread over n + m - 1.
    _, _, (u, v) = _solve_lp(prob, None)
    n, m = prob.shape
    s0 = float(qmath.gibbs_argument(1.0 / (n + m - 1), params.q))
    return -params.lam * u + s0, -params.lam * v


def _polish(alpha, beta, sub, params, cfg, trace):
    _, _, W, its, ok = dual_polish(sub, params, alpha, beta, tol=cfg.marginal_tol)
    trace.polish_iterations += its
    if not ok:
        return None
    rr, cr = _residuals(W, sub.r, sub.c)
    trace.record(trot_objective(W, sub, params), rr, cr)
    trace.converged = True
    return W


# ------------------------------------------------------------------ dispatch

def solve(prob, params, cfg=None):
    """Solve with the regime matching ``params.q``; certify with duals.

    Returns
    -------
    plan : TransportPlan
    trace : SolveTrace
    cert : DualCertificate
        Recovered from the plan for ``q > 0``; for ``q = 0`` the LP duals,
        with ``residual`` the largest reduced-cost violation on the support.
    """
    cfg = cfg or SolverConfig()
    q = params.q
    if q < 0:
        raise ValueError("q < 0 is not supported")
    if q == 0:
        plan, trace, (u, v) = _solve_lp(prob, cfg)
        red = prob.M - u[:, None] - v[None, :]
        on = plan.P > 0
        res = float(max(np.abs(red[on]).max(initial=0.0),
                        -red.min(initial=0.0)))
        cert = DualCertificate(np.asarray(u, float), np.asarray(v, float),
                               res, True).canonical()
        return plan, trace, cert
    if qmath.is_classical(q):
        plan, trace = solve_sinkhorn(prob, params, cfg)
    elif q < 1:
        plan, trace = solve_so_trot(prob, params, cfg)
    else:
        plan, trace = solve_kl_trot(prob, params, cfg)
    cert = recover_duals(plan, prob, params)
    if not trace.converged:
        warnings.warn(f"{trace.solver} did not converge in {trace.iterations} "
                      f"iterations", RuntimeWarning, stacklevel=2)
    return plan, trace, cert


__all__ = [
    "StepSchedule", "SolverConfig", "SolveTrace", "solve_exact_lp",
    "sinkhorn_knopp", "solve_sinkhorn", "so_trot_auxiliary", "so_trot_sweep",
    "solve_so_trot", "trot_gradient", "solve_kl_trot", "dual_polish", "solve",
    "kkt_form_residual",
]
