import json
import warnings

import numpy as np
import pytest

from oracles import lp_vertex_enumeration, penalty_oracle
from trot import qmath
from trot.core import (
    QParams,
    TransportProblem,
    build_gibbs_kernel,
    kkt_form_residual,
    recover_duals,
    trot_objective,
)
from trot.solvers import (
    SolverConfig,
    StepSchedule,
    _lp_dual_start,
    dual_polish,
    sinkhorn_knopp,
    so_trot_auxiliary,
    so_trot_sweep,
    solve,
    solve_exact_lp,
    solve_kl_trot,
    solve_sinkhorn,
    solve_so_trot,
    trot_gradient,
)

Q_GRID = [0.0, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 4.0]


def random_problem(rng, n=None, m=None, lam_scale=1.0):
    n = n or int(rng.integers(1, 9))
    m = m or int(rng.integers(1, 9))
    return TransportProblem(rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m)),
                            lam_scale * rng.random((n, m)))


def l1(A, B):
    return float(np.abs(np.asarray(A) - np.asarray(B)).sum())


# ------------------------------------------------------------ configuration

def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_outer_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(marginal_tol=0.0)
    with pytest.raises(ValueError):
        StepSchedule(decay="cosine")
    with pytest.raises(ValueError):
        StepSchedule(t0=-1.0)


def test_step_schedules_meet_summability_contract():
    s = StepSchedule(t0=1.0, warmup=1.0)
    assert [s.step(k, 1.0) for k in (1, 2, 4)] == [1.0, 0.5, 0.25]
    assert StepSchedule(decay="sqrt").step(4, 2.0) == 1.0
    w = StepSchedule(t0=1.0, warmup=100.0)
    assert w.step(1, 1.0) == 1.0
    assert w.step(101, 1.0) == pytest.approx(0.5)


def test_negative_q_rejected_by_dispatch():
    prob = random_problem(np.random.default_rng(0), 2, 2)
    with pytest.raises(ValueError):
        QParams(-1.0, 1.0)
    with pytest.raises(ValueError):
        solve_so_trot(prob, QParams(2.0, 1.0))
    with pytest.raises(ValueError):
        solve_kl_trot(prob, QParams(0.5, 1.0))


# ------------------------------------------------------------ exact LP

def test_lp_point_masses():
    M = np.array([[2.5, 1.0], [0.3, 4.0]])
    prob = TransportProblem([1.0, 0.0], [1.0, 0.0], M)
    plan, trace = solve_exact_lp(prob)
    np.testing.assert_array_equal(plan.P, [[1.0, 0.0], [0.0, 0.0]])
    assert trace.objective_history[-1] == pytest.approx(2.5)


def test_lp_diagonal_matching():
    prob = TransportProblem([0.5, 0.5], [0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]])
    plan, trace = solve_exact_lp(prob)
    np.testing.assert_allclose(plan.P, np.eye(2) / 2, atol=1e-15)
    assert trace.converged


@pytest.mark.parametrize("seed", range(8))
def test_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, 3, 3)
    plan, _ = solve_exact_lp(prob)
    assert plan.is_feasible(1e-12)
    cost = float(np.sum(plan.P * prob.M))
    assert cost == pytest.approx(lp_vertex_enumeration(prob.r, prob.c, prob.M), abs=1e-12)


def test_lp_solution_is_a_vertex():
    rng = np.random.default_rng(20)
    prob = random_problem(rng, 4, 4)
    plan, _ = solve_exact_lp(prob)
    assert np.count_nonzero(plan.P > 1e-14) <= 4 + 4 - 1


def test_lp_dispatch_and_dual_certificate():
    rng = np.random.default_rng(21)
    prob = random_problem(rng, 4, 5)
    plan, _, cert = solve(prob, QParams(0.0, 1.0))
    np.testing.assert_array_equal(plan.P, solve_exact_lp(prob)[0].P)
    assert cert.residual < 1e-9
    # dual objective equals primal cost at an optimum
    dual = cert.alpha @ prob.r + cert.beta @ prob.c
    assert dual == pytest.approx(np.sum(plan.P * prob.M), abs=1e-12)


# ------------------------------------------------------------ Sinkhorn

def test_sinkhorn_on_feasible_kernel_is_one_sweep():
    r = np.array([0.2, 0.8])
    c = np.array([0.5, 0.5])
    K = np.outer(r, c)
    P, trace = sinkhorn_knopp(K, r, c)
    np.testing.assert_allclose(P, K, rtol=1e-15)
    assert trace.iterations == 1 and trace.converged


def test_sinkhorn_single_row_is_exact_in_one_sweep():
    c = np.array([0.1, 0.6, 0.3])
    P, trace = sinkhorn_knopp(np.array([[3.0, 0.2, 7.0]]), np.array([1.0]), c)
    np.testing.assert_allclose(P[0], c, rtol=1e-15)
    assert trace.iterations == 1


def test_sinkhorn_starvation_names_index():
    K = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError, match="column 1"):
        sinkhorn_knopp(K, np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    K = np.array([[1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="row 1"):
        sinkhorn_knopp(K, np.array([0.5, 0.5]), np.array([0.5, 0.5]))


def test_sinkhorn_gibbs_kernel_satisfies_kkt():
    rng = np.random.default_rng(30)
    prob = random_problem(rng, 5, 4)
    params = QParams(1.0, 3.0)
    K = build_gibbs_kernel(prob, params).U_tilde
    P, trace = sinkhorn_knopp(K, prob.r, prob.c)
    assert trace.converged
    cert = recover_duals(P, prob, params)
    assert kkt_form_residual(P, cert, prob, params) < 1e-6


def test_q1_dispatch_matches_direct_sinkhorn():
    rng = np.random.default_rng(31)
    prob = random_problem(rng, 4, 4)
    params = QParams(1.0, 2.0)
    cfg = SolverConfig()
    K = build_gibbs_kernel(prob, params).U_tilde
    direct, _ = sinkhorn_knopp(K, prob.r, prob.c, cfg.marginal_tol,
                               cfg.max_outer_iters, objective_tol=cfg.objective_tol)
    np.testing.assert_allclose(solve(prob, params, cfg)[0].P, direct, rtol=1e-14)


def test_sinkhorn_log_domain_agrees_with_plain_domain():
    rng = np.random.default_rng(32)
    prob = random_problem(rng, 4, 5)
    lam = 150.0
    plain = sinkhorn_knopp(np.exp(-1 - lam * prob.M), prob.r, prob.c, tol=1e-12)[0]
    logd = sinkhorn_knopp(None, prob.r, prob.c, tol=1e-12, log_K=-1 - lam * prob.M)[0]
    assert l1(plain, logd) < 1e-9


def test_sinkhorn_large_lambda_stays_finite():
    rng = np.random.default_rng(33)
    prob = random_problem(rng, 5, 5)
    plan, trace = solve_sinkhorn(prob, QParams(1.0, 5000.0))
    assert trace.solver == "sinkhorn_log"
    assert np.all(np.isfinite(plan.P)) and plan.is_feasible(1e-8)


def test_sinkhorn_lyapunov_decreases_while_escort_objective_rises():
    # KL(P || K) is 0 at the kernel and must grow to reach feasibility;
    # the divergence from r c^T to the iterate is the quantity that falls.
    rng = np.random.default_rng(34)
    prob = random_problem(rng, 5, 5)
    K = build_gibbs_kernel(prob, QParams(1.0, 4.0)).U_tilde
    _, trace = sinkhorn_knopp(K, prob.r, prob.c, tol=1e-12)
    lyap = np.array(trace.lyapunov_history)
    assert np.all(np.diff(lyap) <= 1e-12 * np.maximum(1, lyap[:-1]))
    assert trace.objective_history[0] > 0


# ------------------------------------------------------------ SO-TROT

def test_auxiliary_function_vanishes_at_zero_shift():
    rng = np.random.default_rng(40)
    A = rng.random((3, 4))
    q = 0.5
    P = qmath.gibbs_weight(A, q)
    assert so_trot_auxiliary(P, np.zeros(3), A, rng.dirichlet(np.ones(3)), q) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_so_trot_auxiliary_nonnegative_with_mods_off(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, 4, 4)
    cfg = SolverConfig(production_mods=False, max_outer_iters=3000)
    _, trace = solve_so_trot(prob, QParams(0.5, 2.0), cfg)
    assert min(trace.auxiliary_values) >= -1e-14


def test_so_trot_auxiliary_vanishes_at_convergence():
    rng = np.random.default_rng(41)
    prob = random_problem(rng, 4, 4)
    params = QParams(0.5, 2.0)
    plan, trace = solve_so_trot(prob, params)
    assert trace.converged
    A = qmath.gibbs_argument(plan.P, 0.5)
    _, y, aux = so_trot_sweep(A, prob.r, 0.5)
    assert np.abs(y).max() < 1e-8
    assert abs(aux) < 1e-9


@pytest.mark.parametrize("q", [0.3, 0.5, 0.8])
def test_so_trot_lyapunov_decreases_with_mods_off(q):
    rng = np.random.default_rng(44)
    for _ in range(5):
        prob = random_problem(rng, 5, 4)
        cfg = SolverConfig(production_mods=False)
        _, trace = solve_so_trot(prob, QParams(q, 3.0), cfg)
        lyap = np.array(trace.lyapunov_history)
        assert trace.converged
        assert np.all(np.diff(lyap) <= 1e-13)


@pytest.mark.parametrize("mods", [True, False])
def test_so_trot_matches_penalty_oracle(mods):
    rng = np.random.default_rng(42)
    prob = random_problem(rng, 3, 3)
    params = QParams(0.5, 5.0)
    plan, trace = solve_so_trot(prob, params, SolverConfig(production_mods=mods))
    assert trace.converged
    ref = penalty_oracle(prob.r, prob.c, prob.M, 0.5, 5.0)
    assert l1(plan.P, ref) < 1e-4


def test_so_trot_never_leaves_weight_domain():
    rng = np.random.default_rng(43)
    for _ in range(10):
        prob = random_problem(rng, 6, 6)
        plan, trace = solve_so_trot(prob, QParams(0.3, 50.0))
        assert np.all(np.isfinite(plan.P))
        assert trace.converged, trace.message


# ------------------------------------------------------------ constant cost

@pytest.mark.parametrize("q", [0.5, 2.0])
def test_constant_cost_with_uniform_marginal_gives_product(q):
    rng = np.random.default_rng(50)
    r = np.full(3, 1 / 3)
    c = rng.dirichlet(np.ones(4))
    prob = TransportProblem(r, c, np.full((3, 4), 0.4))
    plan, trace, _ = solve(prob, QParams(q, 3.0))
    assert l1(plan.P, np.outer(r, c)) < 1e-8


@pytest.mark.parametrize("q", [0.5, 2.0])
def test_constant_cost_optimum_agrees_with_oracle_and_beats_product(q):
    # stationarity h'(p_ij) = alpha_i + beta_j is additive, so for q != 1
    # r c^T is not optimal once both marginals are non-uniform
    rng = np.random.default_rng(1)
    r, c = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
    prob = TransportProblem(r, c, np.full((3, 4), 0.7))
    params = QParams(q, 3.0)
    plan, _, _ = solve(prob, params)
    assert l1(plan.P, penalty_oracle(r, c, prob.M, q, 3.0)) < 1e-6
    assert trot_objective(plan, prob, params) < trot_objective(np.outer(r, c), prob, params)


# ------------------------------------------------------------ KL-TROT

@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_gradient_matches_central_differences(q):
    rng = np.random.default_rng(60)
    params = QParams(q, 1.7)
    M = rng.random((3, 3))
    prob = TransportProblem(np.full(3, 1 / 3), np.full(3, 1 / 3), M)
    P = rng.random((3, 3)) + 0.1
    G = trot_gradient(P, M, params)
    h = 1e-6
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            fd = (trot_objective(P + E, prob, params)
                  - trot_objective(P - E, prob, params)) / (2 * h)
            assert abs(G[i, j] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_kl_trot_matches_penalty_oracle():
    rng = np.random.default_rng(61)
    prob = random_problem(rng, 3, 3)
    plan, trace = solve_kl_trot(prob, QParams(2.0, 5.0))
    assert trace.converged
    ref = penalty_oracle(prob.r, prob.c, prob.M, 2.0, 5.0)
    assert l1(plan.P, ref) < 1e-4


def test_pure_mirror_descent_reaches_oracle():
    rng = np.random.default_rng(62)
    prob = random_problem(rng, 3, 3)
    cfg = SolverConfig(polish=False, max_outer_iters=20000, objective_tol=1e-15)
    plan, trace = solve_kl_trot(prob, QParams(2.0, 2.0), cfg)
    assert trace.polish_iterations == 0
    ref = penalty_oracle(prob.r, prob.c, prob.M, 2.0, 2.0)
    assert l1(plan.P, ref) < 1e-4
    # iterates are projected, so every recorded objective is for a feasible plan
    assert max(trace.residual_history) < 1e-9


def test_kl_trot_near_one_matches_sinkhorn():
    rng = np.random.default_rng(63)
    prob = random_problem(rng, 4, 4)
    P1 = solve(prob, QParams(1.0, 3.0))[0].P
    P2 = solve(prob, QParams(1.001, 3.0))[0].P
    assert l1(P1, P2) < 1e-3


@pytest.mark.parametrize("eps", [1e-6, -1e-6])
def test_solve_near_q1_matches_sinkhorn(eps):
    rng = np.random.default_rng(64)
    prob = random_problem(rng, 4, 5)
    P1 = solve(prob, QParams(1.0, 2.0))[0].P
    P2 = solve(prob, QParams(1.0 + eps, 2.0))[0].P
    assert l1(P1, P2) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_small_q_approaches_lp_cost(seed):
    rng = np.random.default_rng(70 + seed)
    prob = random_problem(rng, 4, 4)
    lp = float(np.sum(solve_exact_lp(prob)[0].P * prob.M))
    plan, trace, _ = solve(prob, QParams(0.01, 100.0))
    assert trace.converged
    assert abs(np.sum(plan.P * prob.M) - lp) <= 0.02 * lp


def test_dual_polish_from_lp_start_at_large_lambda():
    rng = np.random.default_rng(80)
    prob = random_problem(rng, 6, 6)
    params = QParams(4.0, 1000.0)
    alpha, beta = _lp_dual_start(prob, params)
    a, b, W, its, ok = dual_polish(prob, params, alpha, beta)
    assert ok
    assert np.abs(W.sum(1) - prob.r).sum() < 1e-9
    assert np.abs(W.sum(0) - prob.c).sum() < 1e-9
    assert a[0] == 0.0


def test_zero_marginal_rows_are_kept_empty():
    prob = TransportProblem([0.0, 0.4, 0.6], [0.5, 0.0, 0.5],
                            [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]])
    for q in (0.0, 0.5, 1.0, 2.0):
        plan, trace, _ = solve(prob, QParams(q, 2.0))
        assert plan.P[0].sum() == 0.0 and plan.P[:, 1].sum() == 0.0
        assert plan.is_feasible(1e-9)


# ------------------------------------------------------------ all regimes

@pytest.mark.parametrize("q", Q_GRID)
def test_every_regime_converges_to_feasible_plan(q):
    rng = np.random.default_rng(int(q * 100) + 7)
    for _ in range(50):
        prob = random_problem(rng)
        plan, trace, cert = solve(prob, QParams(q, 1.0))
        assert trace.converged, trace.message
        assert plan.row_residual < 1e-9 and plan.col_residual < 1e-9
        if q > 0:
            assert cert.residual < 1e-5


def test_distinct_q_give_distinct_plans():
    rng = np.random.default_rng(90)
    X = rng.random((5, 2))
    M = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    prob = TransportProblem(rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5)), M)
    a = solve(prob, QParams(0.5, 1.0))[0].P
    b = solve(prob, QParams(2.0, 1.0))[0].P
    assert l1(a, b) > 10 * SolverConfig().marginal_tol


def test_non_convergence_is_reported_not_hidden():
    rng = np.random.default_rng(91)
    prob = random_problem(rng, 5, 5)
    cfg = SolverConfig(max_outer_iters=1, production_mods=False)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, trace, _ = solve(prob, QParams(0.5, 5.0), cfg)
    assert not trace.converged
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def test_trace_jsonl_records():
    rng = np.random.default_rng(92)
    prob = random_problem(rng, 3, 3)
    _, trace, _ = solve(prob, QParams(0.5, 1.0))
    lines = trace.to_jsonl().splitlines()
    assert len(lines) == trace.iterations
    rec = json.loads(lines[0])
    assert set(rec) == {"iter", "objective", "row_residual", "col_residual", "aux"}
    assert rec["iter"] == 1 and len(rec["aux"]) == 2
    assert trace.residual_history[-1] < SolverConfig().marginal_tol


def test_polish_resolves_cells_near_the_cutoff():
    # q = 4, small lam: the optimum is sparse and its small cells sit
    # ~p**3 below the cutoff, finer than the argument itself resolves
    rng = np.random.default_rng(340)
    for _ in range(2):
        n, m = rng.integers(1, 9, size=2)
        prob = TransportProblem(rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m)),
                                rng.random((n, m)))
        params = QParams(4.0, float(10 ** rng.uniform(-1, 1)))
    assert (n, m) == (7, 8) and params.lam < 0.11
    plan, trace = solve_kl_trot(prob, params)
    assert trace.converged and trace.polish_iterations < 100
    assert plan.row_residual < 1e-9 and plan.col_residual < 1e-9
    assert np.any((plan.P > 0) & (plan.P < 1e-3))
    cert = recover_duals(plan.P, prob, params)
    assert kkt_form_residual(plan.P, cert, prob, params) < 1e-6
