import numpy as np
import pytest

import qreforge.qre_sequence as qs
from oracles import fd_gradient, fixed_point_oracle, random_efg, rel_err
from qreforge.game_model import (
    InfoSet,
    NormalFormGame,
    Treeplex,
    realization_from_behavioral,
    reduced_normal_form_game,
    uniform_realization_plan,
)
from qreforge.param_games import poker_build, poker_treeplexes, security_build
from qreforge.qre_normal import SolverOptions, backward_normal, kkt_matrix, kkt_residual, solve_normal
from qreforge.qre_sequence import (
    backward_sequence,
    dilated_entropy,
    sequence_kkt_matrix,
    sequence_kkt_residual,
    smoothed_best_response,
    solve_game,
    solve_sequence,
    xi_blocks,
)

# reduced-normal-form fixed-point oracle for poker n=2 under a uniform deck, frozen
POKER2_U = np.array([0.6277657297739568, 0.6014831149310402, 0.37223427022604316, 0.39851688506895977,
                     0.35553721135180666, 0.19348564768773302, 0.2722285184221501, 0.40799746724330715])
POKER2_V = np.array([0.5026282472763653, 0.4660238755705902, 0.49737175272363465, 0.5339761244294098,
                     0.5496504427753452, 0.36392899845474624, 0.45034955722465464, 0.6360710015452538])


def tree():
    return Treeplex([InfoSet((0, 1)), InfoSet((2, 3), 0), InfoSet((4, 5, 6), 1), InfoSet((7, 8), 1)])


def test_entropy_single_set():
    assert dilated_entropy([0.5, 0.5], Treeplex.simplex(2)) == pytest.approx(-np.log(2))


def test_entropy_pure_plan_is_zero():
    tp = tree()
    assert dilated_entropy([1, 0, 1, 0, 0, 0, 0, 0, 0], tp) == 0.0


def test_entropy_matches_reduced_mixture_entropy():
    g = poker_build(np.ones(2) / 2)
    tp = g.row_treeplex
    sigma = np.array([0.3, 0.8, 0.7, 0.2, 0.6, 0.1, 0.4, 0.9])
    plan = realization_from_behavioral(sigma, tp)
    _, U, _ = reduced_normal_form_game(g)
    # product mixture over reduced strategies induced by the behavioral strategy
    x = np.array([np.prod(sigma[row > 0]) for row in U])
    assert x.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(x @ U, plan, atol=1e-12)
    assert dilated_entropy(plan, tp) == pytest.approx(float(np.sum(x * np.log(x))), abs=1e-12)


def test_xi_single_set():
    u = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(xi_blocks(u, Treeplex.simplex(3)), -np.diag(1 / u))


def test_xi_poker_check_diagonal():
    row, _ = poker_treeplexes(4)
    u = uniform_realization_plan(row)
    X = xi_blocks(u, row)
    for i in range(4):
        assert X[i, i] == pytest.approx(-2 / u[i])  # check has one follow-up set
        assert X[4 + i, 4 + i] == pytest.approx(-1 / u[4 + i])


def _entropy_gradient(u, tp):
    """d/du_a of sum u_a log(u_a / u_parent), written out term by term."""
    g = np.zeros(tp.n)
    for s in tp.info_sets:
        parent = 1.0 if s.parent is None else u[s.parent]
        for a in s.actions:
            g[a] += np.log(u[a] / parent) + 1.0
            if s.parent is not None:
                g[s.parent] -= u[a] / parent
    return g


def test_minus_xi_is_entropy_hessian():
    rng = np.random.default_rng(0)
    tp = tree()
    for _ in range(5):
        sigma = np.concatenate([rng.dirichlet(np.ones(len(s.actions))) for s in tp.info_sets])
        u = realization_from_behavioral(sigma, tp)
        e = np.eye(tp.n)
        H = np.column_stack([
            (_entropy_gradient(u + h * e[i], tp) - _entropy_gradient(u - h * e[i], tp)) / (2 * h)
            for i in range(tp.n) for h in [1e-4 * u[i]]])
        h = 1e-4 * u
        fd = [(dilated_entropy(u + h[i] * e[i], tp) - dilated_entropy(u - h[i] * e[i], tp)) / (2 * h[i])
              for i in range(tp.n)]
        np.testing.assert_allclose(fd, _entropy_gradient(u, tp), rtol=1e-6, atol=1e-8)
        assert rel_err(-xi_blocks(u, tp), H) <= 1e-5


def test_degenerates_to_normal_residual():
    rng = np.random.default_rng(1)
    P = rng.uniform(-5, 5, (3, 4))
    g = NormalFormGame(P).as_sequence_form()
    u, v = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
    seq = sequence_kkt_residual(g, u, v, [0.3], [-0.2])
    np.testing.assert_allclose(seq, kkt_residual(P, u, v, 0.3, -0.2), atol=1e-14)
    np.testing.assert_array_equal(sequence_kkt_matrix(g, u, v), kkt_matrix(P, u, v))


def test_residual_sensitivity():
    g = poker_build(np.ones(3) / 3)
    sol = solve_sequence(g)
    base = sequence_kkt_residual(g, sol.u, sol.v, sol.mu, sol.nu)
    a = 7
    u = sol.u.copy()
    u[a] += 1e-3
    moved = sequence_kkt_residual(g, u, sol.v, sol.mu, sol.nu)
    change = abs(moved[a] - base[a])
    assert 0.5 * 1e-3 / u[a] <= change <= 2 * 1e-3 / sol.u[a]


def test_kkt_matrix_symmetric():
    g = poker_build(np.array([0.1, 0.2, 0.3, 0.4]))
    sol = solve_sequence(g)
    K = sequence_kkt_matrix(g, sol.u, sol.v)
    assert np.array_equal(K, K.T)


def test_normal_game_wrapped_matches():
    rng = np.random.default_rng(2)
    for _ in range(5):
        P = rng.uniform(-5, 5, (4, 3))
        a = solve_normal(P)
        b = solve_sequence(NormalFormGame(P).as_sequence_form())
        np.testing.assert_allclose(b.u, a.u, atol=1e-9)
        np.testing.assert_allclose(b.v, a.v, atol=1e-9)
        assert b.mu[0] == pytest.approx(a.mu, abs=1e-9)


def test_poker2_frozen_oracle():
    sol = solve_sequence(poker_build(np.ones(2) / 2))
    np.testing.assert_allclose(sol.u, POKER2_U, atol=1e-6)
    np.testing.assert_allclose(sol.v, POKER2_V, atol=1e-6)


def _reduced_plans(game):
    nf, U, V = reduced_normal_form_game(game)
    x, y = fixed_point_oracle(nf.payoff)
    return x @ U, y @ V


@pytest.mark.parametrize("n", [2, 3])
def test_poker_realization_equivalence(n):
    g = poker_build(np.random.default_rng(n).dirichlet(np.ones(n)))
    sol = solve_sequence(g)
    u, v = _reduced_plans(g)
    np.testing.assert_allclose(sol.u, u, atol=1e-6)
    np.testing.assert_allclose(sol.v, v, atol=1e-6)


def test_random_efg_realization_equivalence():
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = random_efg(rng)
        sol = solve_sequence(g)
        nf, U, V = reduced_normal_form_game(g)
        ns = solve_normal(nf.payoff)
        np.testing.assert_allclose(sol.u, ns.u @ U, atol=1e-6)
        np.testing.assert_allclose(sol.v, ns.v @ V, atol=1e-6)


def test_post_solve_residual_and_flow():
    rng = np.random.default_rng(4)
    for _ in range(10):
        g = random_efg(rng, scale=5.0)
        sol = solve_sequence(g)
        assert np.max(np.abs(sequence_kkt_residual(g, sol.u, sol.v, sol.mu, sol.nu))) <= 1e-10
        assert np.all(np.diff(sol.history) < 0)


def test_flow_feasible_at_every_iterate(monkeypatch):
    seen = []
    original = qs._residual

    def spy(P, game, u, v, mu, nu):
        seen.append(max(np.abs(game.row_constraints.residual(u)).max(),
                        np.abs(game.col_constraints.residual(v)).max()))
        return original(P, game, u, v, mu, nu)

    monkeypatch.setattr(qs, "_residual", spy)
    solve_sequence(poker_build(np.array([0.4, 0.3, 0.2, 0.1])))
    assert len(seen) > 3 and max(seen) <= 1e-9


def test_smoothed_best_response_is_feasible_softmax():
    tp = Treeplex.simplex(3)
    x = smoothed_best_response(tp, [1.0, 2.0, 3.0], maximize=True)
    np.testing.assert_allclose(x, np.exp([1, 2, 3]) / np.exp([1, 2, 3]).sum())


def test_security_defender_symmetry():
    g = security_build(np.array([0.8, 0.8]), 5, 1)
    sol = solve_sequence(g)
    np.testing.assert_allclose(sol.v, sol.v[::-1], atol=1e-8)


def test_solve_game_dispatch():
    P = np.random.default_rng(5).uniform(-1, 1, (2, 3))
    a, b = solve_game(NormalFormGame(P)), solve_normal(P)
    np.testing.assert_array_equal(a.u, b.u)


def test_backward_zero_upstream():
    g = poker_build(np.ones(3) / 3)
    sol = solve_sequence(g)
    assert np.all(backward_sequence(g, sol, np.zeros(12), np.zeros(12)) == 0)


def test_backward_degenerates_to_normal():
    rng = np.random.default_rng(6)
    P = rng.uniform(-5, 5, (3, 3))
    g = NormalFormGame(P).as_sequence_form()
    sol = solve_sequence(g)
    gu, gv = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(backward_sequence(g, sol, gu, gv),
                               backward_normal(P, solve_normal(P), gu, gv), atol=1e-10)


def _fd_backward(game, wu, wv):
    sol = solve_sequence(game)
    G = backward_sequence(game, sol, wu / sol.u, wv / sol.v)

    def loss(P):
        s = solve_sequence(game.with_payoff(P), SolverOptions(tol=1e-13))
        return wu @ np.log(s.u) + wv @ np.log(s.v)

    return G, fd_gradient(loss, game.payoff)


def test_backward_poker3_log_terminal():
    g = poker_build(np.array([0.5, 0.3, 0.2]))
    wu = np.zeros(12)
    wu[10] = -1.0  # call after check-raise holding the middle card
    G, fd = _fd_backward(g, wu, np.zeros(12))
    assert rel_err(G, fd) <= 1e-4


def test_backward_random_efgs():
    rng = np.random.default_rng(7)
    for _ in range(10):
        g = random_efg(rng)
        G, fd = _fd_backward(g, rng.normal(size=g.shape[0]), rng.normal(size=g.shape[1]))
        assert rel_err(G, fd) <= 1e-4
