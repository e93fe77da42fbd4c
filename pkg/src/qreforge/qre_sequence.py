"""Dilated-entropy QRE of zero-sum sequence-form games.

Solves

    min_u max_v  u'Pv + h_row(u) - h_col(v)   s.t.  Eu = e, Fv = f

where ``h(x) = sum_a x_a log(x_a / x_parent(a))`` is the dilated entropy of
a realization plan.  The Newton matrix is the (symmetric) Hessian of the
Lagrangian::

    [ -Xi(u)  P      E'  0  ]
    [  P'     Xi(v)  0   F' ]
    [  E      0      0   0  ]
    [  0      F      0   0  ]

with ``-Xi`` the Hessian of ``h`` on the flow polytope.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from .errors import (
    DimensionMismatch,
    MaxItersExceeded,
    NonPositivePlan,
    NumericalBreakdown,
    SingularSystem,
)
from .game_model import (
    NormalFormGame,
    SequenceFormGame,
    Treeplex,
    as_sequence_game,
    realization_from_behavioral,
    uniform_realization_plan,
)
from .qre_normal import (
    LOG_FLOOR,
    QreSolution,
    SolverOptions,
    _factor,
    kkt_scaling,
    backward_normal,
    solve_normal,
)

log = logging.getLogger(__name__)

SeqQreSolution = QreSolution


def _parent_values(plan, tp: Treeplex):
    return np.where(tp.parent_seq >= 0, plan[np.maximum(tp.parent_seq, 0)], 1.0)


def dilated_entropy(plan, tp: Treeplex) -> float:
    plan = np.asarray(plan, dtype=float)
    if plan.shape != (tp.n,):
        raise DimensionMismatch(f"plan has shape {plan.shape}, treeplex has {tp.n} sequences")
    if np.any(plan < 0):
        raise NonPositivePlan("realization plan has negative entries")
    parent = _parent_values(plan, tp)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(plan > 0, plan * np.log(plan / parent), 0.0)
    return float(terms.sum())


def _log_ratio(plan, tp):
    safe = np.maximum(plan, LOG_FLOOR)
    return np.log(safe) - np.log(_parent_values(safe, tp))


def _residual(P, game: SequenceFormGame, u, v, mu, nu):
    rt, ct = game.row_treeplex, game.col_treeplex
    E, F = game.row_constraints, game.col_constraints
    gu = P @ v + 1.0 + _log_ratio(u, rt) - rt.child_count + E.E.T @ mu
    gv = P.T @ u - 1.0 - _log_ratio(v, ct) + ct.child_count + F.E.T @ nu
    return np.concatenate([gu, gv, E.residual(u), F.residual(v)])


def sequence_kkt_residual(game, u, v, mu, nu) -> np.ndarray:
    """Stationarity rows for both players followed by ``Eu - e`` and ``Fv - f``.

    Multipliers enter as ``E'mu`` (``+mu_i`` on the actions of set ``i``,
    ``-mu_c`` on the parent of each child set ``c``), which makes a single
    information set reduce exactly to the normal-form residual.
    """
    game = as_sequence_game(game)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if np.any(u <= 0) or np.any(v <= 0):
        raise NonPositivePlan("realization plans must be strictly positive")
    return _residual(game.payoff, game, u, v, np.asarray(mu, float), np.asarray(nu, float))


def xi_blocks(plan, tp: Treeplex) -> np.ndarray:
    """Symmetric matrix ``Xi``; ``-Xi`` is the Hessian of the dilated entropy."""
    plan = np.asarray(plan, dtype=float)
    X = np.diag(-(1.0 + tp.child_count) / plan)
    a = np.flatnonzero(tp.parent_seq >= 0)
    b = tp.parent_seq[a]
    X[a, b] = 1.0 / plan[b]
    X[b, a] = 1.0 / plan[b]
    return X


def sequence_kkt_matrix(game, u, v) -> np.ndarray:
    game = as_sequence_game(game)
    P = game.payoff
    n, m = P.shape
    E, F = game.row_constraints.E, game.col_constraints.E
    p, q = E.shape[0], F.shape[0]
    K = np.zeros((n + m + p + q, n + m + p + q))
    K[:n, :n] = -xi_blocks(u, game.row_treeplex)
    K[:n, n:n + m] = P
    K[:n, n + m:n + m + p] = E.T
    K[n:n + m, :n] = P.T
    K[n:n + m, n:n + m] = xi_blocks(v, game.col_treeplex)
    K[n:n + m, n + m + p:] = F.T
    K[n + m:n + m + p, :n] = E
    K[n + m + p:, n:n + m] = F
    return K


def smoothed_best_response(tp: Treeplex, values, maximize: bool) -> np.ndarray:
    """Entropy-smoothed best response plan against per-sequence ``values``.

    Solved bottom-up: each information set is a softmax over its actions'
    own value plus the log-partition values of the sets below them.
    """
    sign = 1.0 if maximize else -1.0
    z_all = sign * np.asarray(values, dtype=float)
    sigma = np.empty(tp.n)
    set_value = np.zeros(tp.num_info_sets)
    for i in reversed(tp.topo_order):
        acts = list(tp.info_sets[i].actions)
        z = np.array([z_all[a] + sum(set_value[c] for c in tp.child_sets[a]) for a in acts])
        set_value[i] = logsumexp(z)
        sigma[acts] = softmax(z)
    return realization_from_behavioral(sigma, tp)


def _retract(log_w, tp: Treeplex) -> np.ndarray:
    """Plan whose behavioral strategy is the per-set softmax of ``log_w``."""
    owner = tp.action_parent
    top = np.full(tp.num_info_sets, -np.inf)
    np.maximum.at(top, owner, log_w)
    z = np.exp(log_w - top[owner])
    sigma = z / np.bincount(owner, z, minlength=tp.num_info_sets)[owner]
    return np.maximum(realization_from_behavioral(sigma, tp), LOG_FLOOR)


def _restart(game, u, v, steps, step_size=0.5):
    P = game.payoff
    for _ in range(steps):
        un = (1 - step_size) * u + step_size * smoothed_best_response(game.row_treeplex, P @ v, False)
        vn = (1 - step_size) * v + step_size * smoothed_best_response(game.col_treeplex, P.T @ u, True)
        u, v = un, vn
    zero_mu = np.zeros(game.row_constraints.E.shape[0])
    zero_nu = np.zeros(game.col_constraints.E.shape[0])
    g = _residual(P, game, u, v, zero_mu, zero_nu)
    n, m = P.shape
    mu = np.linalg.lstsq(game.row_constraints.E.T, -g[:n], rcond=None)[0]
    nu = np.linalg.lstsq(game.col_constraints.E.T, -g[n:n + m], rcond=None)[0]
    return u, v, mu, nu


def solve_sequence(game, opts: SolverOptions | None = None, _x0=None) -> QreSolution:
    """Primal-dual Newton with a log-space primal step and Armijo backtracking."""
    opts = opts or SolverOptions()
    game = as_sequence_game(game)
    P = game.payoff
    n, m = P.shape
    p = game.row_constraints.E.shape[0]
    q = game.col_constraints.E.shape[0]
    npos = n + m

    if _x0 is None:
        u = uniform_realization_plan(game.row_treeplex)
        v = uniform_realization_plan(game.col_treeplex)
        x = np.concatenate([u, v, np.zeros(p + q)])
    else:
        x = np.array(_x0, dtype=float)

    def split(x):
        return x[:n], x[n:npos], x[npos:npos + p], x[npos + p:]

    g = _residual(P, game, *split(x))
    res = float(np.max(np.abs(g)))
    history = [res]
    restarts = 0
    it = 0
    while res > opts.tol and it < opts.max_iters:
        it += 1
        K = sequence_kkt_matrix(game, x[:n], x[n:npos])
        # deep plans make the raw diagonal span many decades
        d = kkt_scaling(K)
        try:
            dx = d * scipy.linalg.solve(K * d[:, None] * d[None, :], -g * d, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalBreakdown(f"singular Newton system at iteration {it}") from exc
        if not np.all(np.isfinite(dx)):
            raise NumericalBreakdown(f"non-finite Newton step at iteration {it}")

        xp, dp = x[:npos], dx[:npos]
        alpha = 1.0
        neg = dp < 0
        if opts.primal_step == "boundary" and np.any(neg):
            alpha = min(1.0, opts.boundary_fraction * float(np.min(-xp[neg] / dp[neg])))
        phi0 = float(g @ g)
        while True:
            trial = x + alpha * dx
            if opts.primal_step == "log":
                # multiplicative step retracted onto the treeplex keeps Eu = e exactly
                logs = np.log(xp) + alpha * dp / xp
                trial[:n] = _retract(logs[:n], game.row_treeplex)
                trial[n:npos] = _retract(logs[n:], game.col_treeplex)
            gt = _residual(P, game, *split(trial))
            phi = float(gt @ gt)
            if (np.isfinite(phi) and phi <= (1.0 - 2.0 * opts.armijo * alpha) * phi0
                    and np.max(np.abs(gt)) <= (1.0 - opts.armijo * alpha) * res):
                x, g = trial, gt
                break
            alpha *= 0.5
            if alpha < opts.min_step:
                if restarts >= opts.max_restarts:
                    raise NumericalBreakdown("line search keeps stalling")
                restarts += 1
                log.debug("line search stalled at iteration %d; fixed-point restart", it)
                x = np.concatenate(_restart(game, x[:n], x[n:npos], opts.restart_steps))
                g = _residual(P, game, *split(x))
                break
        res = float(np.max(np.abs(g)))
        history.append(res)

    if res > opts.tol:
        raise MaxItersExceeded(
            f"KKT residual {res:.3e} above tol {opts.tol:g} after {it} iterations",
            residual=res, iterations=it)
    u, v, mu, nu = split(x)
    return QreSolution(u.copy(), v.copy(), mu.copy(), nu.copy(), res, it, tuple(history))


def sequence_kkt_factor(game, sol: QreSolution):
    if sol._lu is None:
        sol._lu = _factor(sequence_kkt_matrix(game, sol.u, sol.v))
    return sol._lu


def backward_sequence(game, sol: QreSolution, grad_u, grad_v) -> np.ndarray:
    """Gradient of ``L(u*, v*)`` with respect to the sequence-form payoff."""
    game = as_sequence_game(game)
    n, m = game.payoff.shape
    grad_u = np.asarray(grad_u, dtype=float)
    grad_v = np.asarray(grad_v, dtype=float)
    if grad_u.shape != (n,) or grad_v.shape != (m,):
        raise DimensionMismatch("upstream gradients do not match the payoff shape")
    p = game.row_constraints.E.shape[0]
    q = game.col_constraints.E.shape[0]
    rhs = np.concatenate([-grad_u, -grad_v, np.zeros(p + q)])
    y = sequence_kkt_factor(game, sol).solve(rhs)
    if not np.all(np.isfinite(y)):
        raise SingularSystem("backward solve produced non-finite values")
    return np.outer(y[:n], sol.v) + np.outer(sol.u, y[n:n + m])


def solve_game(game, opts: SolverOptions | None = None) -> QreSolution:
    """Dispatch on the game type: simplex games go to the normal-form solver."""
    if isinstance(game, NormalFormGame):
        return solve_normal(game.payoff, opts)
    return solve_sequence(game, opts)


def backward_game(game, sol: QreSolution, grad_u, grad_v) -> np.ndarray:
    if isinstance(game, NormalFormGame):
        return backward_normal(game.payoff, sol, grad_u, grad_v)
    return backward_sequence(game, sol, grad_u, grad_v)
