"""
Transport problems, plans, objectives and the KKT-form certificate.

Every regularized optimum has the form

.. math::
    p_{ij} = \\exp_q(-1)\\,\\exp_q^{-1}(\\alpha_i + \\lambda m_{ij} + \\beta_j)

and the helpers here build, check and invert that form.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import qmath

MARGINAL_SUM_TOL = 1e-9
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class TransportProblem:
    """Marginals ``r`` (rows), ``c`` (columns) and an ``n x m`` cost ``M``."""

    r: np.ndarray
    c: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        c = np.array(self.c, dtype=float)
        M = np.array(self.M, dtype=float)
        if r.ndim != 1 or c.ndim != 1:
            raise ValueError("marginals r and c must be vectors")
        if M.shape != (r.size, c.size):
            raise ValueError(
                f"cost matrix has shape {M.shape}, expected {(r.size, c.size)}")
        if not np.all(np.isfinite(M)):
            raise ValueError("cost matrix M has NaN or infinite entries")
        for name, v in (("r", r), ("c", c)):
            if np.any(v < 0):
                raise ValueError(f"marginal {name} has negative entries")
            if abs(v.sum() - 1.0) > MARGINAL_SUM_TOL:
                raise ValueError(
                    f"marginal {name} must sum to 1 (sums to {v.sum():.12g})")
        for name, v in (("r", r), ("c", c), ("M", M)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def shape(self):
        return self.M.shape

    def to_json(self):
        return json.dumps({"r": self.r.tolist(), "c": self.c.tolist(),
                           "M": self.M.tolist()})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        missing = {"r", "c", "M"} - set(obj)
        if missing:
            raise ValueError(f"problem JSON lacks keys {sorted(missing)}")
        return cls(obj["r"], obj["c"], obj["M"])


@dataclass(frozen=True)
class QParams:
    """Deformation ``q >= 0`` and inverse regularization weight ``lam > 0``."""

    q: float
    lam: float

    def __post_init__(self):
        if not np.isfinite(self.q) or self.q < 0:
            raise ValueError(f"q must be finite and >= 0, got {self.q}")
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")


@dataclass(frozen=True)
class TransportPlan:
    P: np.ndarray
    row_residual: float
    col_residual: float

    @classmethod
    def from_matrix(cls, P, prob):
        P = np.array(P, dtype=float)
        if P.shape != prob.shape:
            raise ValueError(f"plan shape {P.shape} != problem shape {prob.shape}")
        if np.any(P < 0):
            raise ValueError("transport plan has negative entries")
        P.setflags(write=False)
        return cls(P, float(np.abs(P.sum(1) - prob.r).sum()),
                   float(np.abs(P.sum(0) - prob.c).sum()))

    def is_feasible(self, tol=FEASIBILITY_TOL):
        return self.row_residual < tol and self.col_residual < tol


@dataclass(frozen=True)
class DualCertificate:
    """Lagrange vectors, canonicalized so that ``alpha[0] == 0``.

    ``residual`` is the KKT-form residual the vectors achieve on the plan
    they were recovered from; ``unique`` is False when the positive support
    of that plan is disconnected (the vectors are then one solution among
    many).
    """

    alpha: np.ndarray
    beta: np.ndarray
    residual: float = 0.0
    unique: bool = True

    def shifted(self, const):
        return DualCertificate(self.alpha + const, self.beta - const,
                               self.residual, self.unique)

    def canonical(self):
        return self.shifted(-self.alpha[0])


@dataclass(frozen=True)
class GibbsKernel:
    U_tilde: np.ndarray
    q: float
    cutoff: np.ndarray = field(repr=False, default=None)


def _as_matrix(P):
    if isinstance(P, TransportPlan):
        return P.P
    return np.asarray(P, dtype=float)


def trot_objective(P, prob, params):
    """``<P, M> - H_q(P) / lambda``."""
    P = _as_matrix(P)
    if P.shape != prob.shape:
        raise ValueError(f"plan shape {P.shape} != cost shape {prob.shape}")
    h = qmath.tsallis_entropy(P, params.q).h_q
    return float(np.sum(P * prob.M) - h / params.lam)


def build_gibbs_kernel(prob, params):
    """``exp_q(-1) / exp_q(lambda M)`` element-wise."""
    A = params.lam * prob.M
    U = qmath.gibbs_weight(A, params.q)
    U = np.asarray(U, dtype=float)
    cutoff = U == 0
    return GibbsKernel(U, params.q, cutoff)


def escort_divergence_objective(P, kernel, q):
    """``K_{1/q}(P**q, U**q)``, the divergence minimized by the q != 1 solvers."""
    if q <= 0:
        raise ValueError("escort divergence needs q > 0")
    P = _as_matrix(P)
    return qmath.tsallis_relative_entropy(
        qmath.escort_power(P, q), qmath.escort_power(kernel.U_tilde, q), 1.0 / q)


def escort_offset(prob, params, kernel=None):
    """Additive constant linking the escort divergence to the TROT objective.

    Returns ``-<U**q, 1> / lambda`` so that, for every plan P vanishing
    wherever the kernel is cut off,

        trot_objective(P) == escort_divergence_objective(P) / lambda + offset
    """
    if kernel is None:
        kernel = build_gibbs_kernel(prob, params)
    return -float(np.sum(qmath.escort_power(kernel.U_tilde, params.q))) / params.lam


def kkt_form(cert, prob, params):
    """Plan generated by the dual vectors through the KKT form."""
    a = cert.alpha[:, None] + params.lam * prob.M + cert.beta[None, :]
    return np.asarray(qmath.gibbs_weight(a, params.q), dtype=float)


def kkt_form_residual(P, cert, prob, params):
    """Max-abs gap between ``P`` and the plan generated by ``cert``."""
    P = _as_matrix(P)
    with np.errstate(invalid="ignore"):
        gap = np.abs(P - kkt_form(cert, prob, params))
    return float(np.nanmax(np.where(np.isfinite(gap), gap, np.inf)))


def support_is_connected(mask):
    """Connectivity of the bipartite row/column graph of a boolean mask."""
    n, m = mask.shape
    i, j = np.nonzero(mask)
    if i.size == 0:
        return False
    g = coo_matrix((np.ones(i.size), (i, n + j)), shape=(n + m, n + m))
    ncomp, _ = connected_components(g, directed=False)
    return ncomp == 1


def recover_duals(P, prob, params, support_tol=None, refine=True):
    """Invert the KKT form of a plan into dual vectors.

    On the support ``p_ij > support_tol * max(P)`` the argument
    ``alpha_i + beta_j`` is read off the plan and fitted by least squares
    (an ``(n+m)``-unknown, rank ``n+m-1`` system). When the fit leaves a
    residual above 1e-10 and ``refine`` is set, a nonlinear least-squares
    pass on the plan entries themselves follows, which also accounts for
    cells sitting at the ``q > 1`` cutoff. Only rows and columns with
    positive marginal mass enter the fit; others get dual 0.

    ``support_tol`` defaults to 1e-12, or 1e-9 for ``q > 1``: there optimal
    plans have exact zeros that iterative solvers only approach, and a
    residual cell of mass ``p`` would pin its argument within ``p**(q-1)``
    of the cutoff, below double precision.
    """
    P = _as_matrix(P)
    if params.q == 0:
        raise ValueError("no KKT form at q = 0")
    if support_tol is None:
        support_tol = 1e-9 if params.q > 1 and not qmath.is_classical(params.q) else 1e-12
    n, m = P.shape
    rows = np.flatnonzero(prob.r > 0)
    cols = np.flatnonzero(prob.c > 0)
    sub = P[np.ix_(rows, cols)]
    Msub = prob.M[np.ix_(rows, cols)]
    mask = sub > support_tol * max(sub.max(), np.finfo(float).tiny)
    unique = support_is_connected(mask)
    ii, jj = np.nonzero(mask)
    target = qmath.gibbs_argument(sub[mask], params.q) - params.lam * Msub[mask]
    nr, nc = len(rows), len(cols)
    X = np.zeros((ii.size, nr + nc))
    X[np.arange(ii.size), ii] = 1.0
    X[np.arange(ii.size), nr + jj] = 1.0
    X = X[:, 1:]  # alpha_0 = 0 fixes the gauge
    z = np.linalg.lstsq(X, target, rcond=None)[0]
    z = np.concatenate([[0.0], z])

    def fit(zz):
        a = zz[:nr, None] + params.lam * Msub + zz[None, nr:]
        return (np.asarray(qmath.gibbs_weight(a, params.q)) - sub).ravel()

    if refine:
        with np.errstate(all="ignore"):
            start = np.abs(fit(z))
        if not np.all(np.isfinite(start)) or start.max() > 1e-10:
            def fit_gauged(zz):
                r = fit(np.concatenate([[0.0], zz]))
                return np.where(np.isfinite(r), r, 1e3)
            with np.errstate(all="ignore"):
                sol = least_squares(fit_gauged, z[1:], xtol=1e-15, ftol=1e-15,
                                    gtol=1e-15, max_nfev=2000)
            z_new = np.concatenate([[0.0], sol.x])
            with np.errstate(all="ignore"):
                if np.nanmax(np.abs(fit(z_new))) < np.nanmax(start):
                    z = z_new
    alpha = np.zeros(n)
    beta = np.zeros(m)
    alpha[rows] = z[:nr]
    beta[cols] = z[nr:]
    # Empty rows/columns carry no constraint; leave them out of the residual.
    sub_cert = DualCertificate(z[:nr], z[nr:])
    sub_prob = _SubProblem(Msub)
    res = kkt_form_residual(sub, sub_cert, sub_prob, params)
    return DualCertificate(alpha, beta, res, unique).canonical()


@dataclass(frozen=True)
class _SubProblem:
    M: np.ndarray


def beta_adjusted_distance(prob, params, beta_const, plan):
    """TROT value of ``plan`` plus ``beta / lambda * (H_q(r) + H_q(c))``."""
    h = (qmath.tsallis_entropy(prob.r, params.q).h_q
         + qmath.tsallis_entropy(prob.c, params.q).h_q)
    return trot_objective(plan, prob, params) + beta_const / params.lam * h
