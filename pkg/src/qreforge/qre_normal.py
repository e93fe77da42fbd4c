"""Logit QRE of zero-sum normal-form games by primal-dual Newton.

The equilibrium is the saddle point of

    min_u max_v  u'Pv + sum(u log u) - sum(v log v)   on the two simplices,

i.e. the fixed point ``u = softmax(-Pv)``, ``v = softmax(P'u)``.  The solver
works on the KKT system

    Pv  + log u + 1 + mu = 0
    P'u - log v - 1 + nu = 0
    1'u = 1,  1'v = 1

and everything here is vectorised over a leading batch axis so that many
small games (one per context) can be solved together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import softmax

from .errors import MaxItersExceeded, NonPositiveStrategy, NumericalBreakdown, SingularSystem

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iters: int = 200
    boundary_fraction: float = 0.9
    rationality: float = 1.0
    armijo: float = 1e-4
    min_step: float = 1e-12
    restart_steps: int = 50
    max_restarts: int = 5
    primal_step: str = "log"  # "log": multiplicative step + retraction; "boundary": additive step

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.boundary_fraction < 1:
            raise ValueError("boundary_fraction must lie in (0, 1)")
        if self.rationality != 1.0:
            raise ValueError("only rationality 1 is supported")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.primal_step not in ("log", "boundary"):
            raise ValueError("primal_step must be 'log' or 'boundary'")


@dataclass
class QreSolution:
    """Saddle point ``(u, v)`` with multipliers ``(mu, nu)``.

    ``history`` holds the KKT residual infinity-norm after every accepted
    iterate, starting with the initial point.
    """

    u: np.ndarray
    v: np.ndarray
    mu: float | np.ndarray
    nu: float | np.ndarray
    residual: float
    iterations: int
    history: tuple = ()
    _lu: object = field(default=None, repr=False, compare=False)


@dataclass
class BatchSolution:
    u: np.ndarray  # (B, n)
    v: np.ndarray  # (B, m)
    mu: np.ndarray  # (B,)
    nu: np.ndarray  # (B,)
    residual: np.ndarray
    iterations: np.ndarray
    history: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.u.shape[0]

    def __getitem__(self, b) -> QreSolution:
        return QreSolution(self.u[b], self.v[b], float(self.mu[b]), float(self.nu[b]),
                           float(self.residual[b]), int(self.iterations[b]),
                           tuple(float(h[b]) for h in self.history if np.isfinite(h[b])))


def _check_positive(u, v):
    if np.any(np.asarray(u) <= 0) or np.any(np.asarray(v) <= 0):
        raise NonPositiveStrategy("strategies must be strictly positive")


def _residual(P, u, v, mu, nu):
    lu = np.log(np.maximum(u, LOG_FLOOR))
    lv = np.log(np.maximum(v, LOG_FLOOR))
    gu = np.einsum("bij,bj->bi", P, v) + lu + 1.0 + mu[:, None]
    gv = np.einsum("bij,bi->bj", P, u) - lv - 1.0 + nu[:, None]
    return np.concatenate(
        [gu, gv, u.sum(1, keepdims=True) - 1.0, v.sum(1, keepdims=True) - 1.0], axis=1
    )


def kkt_residual(P, u, v, mu, nu) -> np.ndarray:
    """Stacked KKT residual ``(g_u, g_v, 1'u - 1, 1'v - 1)``."""
    P = np.asarray(P, dtype=float)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    _check_positive(u, v)
    return _residual(P[None], u[None], v[None], np.atleast_1d(float(mu)),
                     np.atleast_1d(float(nu)))[0]


def _kkt_matrices(P, u, v):
    B, n, m = P.shape
    N = n + m + 2
    K = np.zeros((B, N, N))
    idx_u, idx_v = np.arange(n), n + np.arange(m)
    K[:, idx_u, idx_u] = 1.0 / u
    K[:, idx_v, idx_v] = -1.0 / v
    K[:, :n, n:n + m] = P
    K[:, n:n + m, :n] = np.swapaxes(P, 1, 2)
    K[:, :n, n + m] = 1.0
    K[:, n + m, :n] = 1.0
    K[:, n:n + m, n + m + 1] = 1.0
    K[:, n + m + 1, n:n + m] = 1.0
    return K


def kkt_matrix(P, u, v) -> np.ndarray:
    """The symmetric Newton matrix (Hessian of the Lagrangian)."""
    P = np.asarray(P, dtype=float)
    return _kkt_matrices(P[None], np.asarray(u, float)[None], np.asarray(v, float)[None])[0]


def fixed_point_residual(P, u, v) -> float:
    P = np.asarray(P, dtype=float)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    du = np.max(np.abs(u - softmax(-P @ v)))
    dv = np.max(np.abs(v - softmax(P.T @ u)))
    return float(max(du, dv))


def _newton_directions(K, g):
    try:
        dx = np.linalg.solve(K, -g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        for b in range(K.shape[0]):
            try:
                np.linalg.solve(K[b], -g[b])
            except np.linalg.LinAlgError:
                raise NumericalBreakdown(f"singular Newton system in batch item {b}") from None
        raise
    bad = ~np.all(np.isfinite(dx), axis=1)
    if np.any(bad):
        raise NumericalBreakdown(f"non-finite Newton step in batch item {int(np.argmax(bad))}")
    return dx


def _least_squares_multipliers(P, u, v):
    lu, lv = np.log(u), np.log(v)
    mu = -np.mean(np.einsum("bij,bj->bi", P, v) + lu + 1.0, axis=1)
    nu = -np.mean(np.einsum("bij,bi->bj", P, u) - lv - 1.0, axis=1)
    return mu, nu


def damped_fixed_point(P, u, v, steps: int, step_size: float = 0.5):
    """Damped logit iteration; stays on the simplices for any step in (0, 1]."""
    for _ in range(steps):
        un = (1 - step_size) * u + step_size * softmax(-np.einsum("bij,bj->bi", P, v), axis=1)
        vn = (1 - step_size) * v + step_size * softmax(np.einsum("bij,bi->bj", P, u), axis=1)
        u, v = un, vn
    return u, v


def solve_normal_batch(P, opts: SolverOptions | None = None) -> BatchSolution:
    """Solve a stack of games ``P`` with shape ``(B, n, m)``."""
    opts = opts or SolverOptions()
    P = np.asarray(P, dtype=float)
    if P.ndim != 3 or min(P.shape) < 1:
        raise ValueError(f"expected a (B, n, m) stack of payoffs, got {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("payoff has non-finite entries")
    B, n, m = P.shape
    u = np.full((B, n), 1.0 / n)
    v = np.full((B, m), 1.0 / m)
    mu = np.zeros(B)
    nu = np.zeros(B)
    g = _residual(P, u, v, mu, nu)
    res = np.max(np.abs(g), axis=1)
    iters = np.zeros(B, dtype=int)
    restarts = np.zeros(B, dtype=int)
    history = [res.copy()]
    npos = n + m

    for _ in range(opts.max_iters):
        active = np.flatnonzero(res > opts.tol)
        if active.size == 0:
            break
        Pa, ua, va = P[active], u[active], v[active]
        ga = g[active]
        x = np.concatenate([ua, va, mu[active, None], nu[active, None]], axis=1)
        dx = _newton_directions(_kkt_matrices(Pa, ua, va), ga)

        xp, dp = x[:, :npos], dx[:, :npos]
        if opts.primal_step == "log":
            alpha = np.ones(active.size)
            rel = dp / xp
        else:
            # fraction-to-boundary cap keeps u, v strictly positive
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(dp < 0, -xp / dp, np.inf)
            alpha = np.minimum(1.0, opts.boundary_fraction * ratios.min(axis=1))

        phi0 = np.sum(ga * ga, axis=1)
        res0 = res[active]
        pending = np.ones(active.size, dtype=bool)
        x_new = x.copy()
        g_new = ga.copy()
        while np.any(pending):
            k = np.flatnonzero(pending)
            trial = x[k] + alpha[k, None] * dx[k]
            if opts.primal_step == "log":
                # u <- u exp(alpha du / u), renormalised: a Newton step in log u
                logs = np.log(xp[k]) + alpha[k, None] * rel[k]
                trial[:, :n] = np.maximum(softmax(logs[:, :n], axis=1), LOG_FLOOR)
                trial[:, n:npos] = np.maximum(softmax(logs[:, n:], axis=1), LOG_FLOOR)
            gt = _residual(Pa[k], trial[:, :n], trial[:, n:npos], trial[:, npos], trial[:, npos + 1])
            phi = np.sum(gt * gt, axis=1)
            # sufficient decrease in both the 2-norm and the inf-norm
            ok = (np.isfinite(phi)
                  & (phi <= (1.0 - 2.0 * opts.armijo * alpha[k]) * phi0[k])
                  & (np.max(np.abs(gt), axis=1) <= (1.0 - opts.armijo * alpha[k]) * res0[k]))
            x_new[k[ok]] = trial[ok]
            g_new[k[ok]] = gt[ok]
            pending[k[ok]] = False
            alpha[k[~ok]] *= 0.5
            stalled = pending & (alpha < opts.min_step)
            if np.any(stalled):
                pending &= ~stalled
                s = np.flatnonzero(stalled)
                if np.any(restarts[active[s]] >= opts.max_restarts):
                    b = int(active[s][np.argmax(restarts[active[s]] >= opts.max_restarts)])
                    raise NumericalBreakdown(f"line search keeps stalling in batch item {b}")
                restarts[active[s]] += 1
                log.debug("line search stalled for %d games; restarting with fixed-point steps", s.size)
                ur, vr = damped_fixed_point(Pa[s], x[s, :n], x[s, n:npos], opts.restart_steps)
                mr, nr = _least_squares_multipliers(Pa[s], ur, vr)
                x_new[s] = np.concatenate([ur, vr, mr[:, None], nr[:, None]], axis=1)
                g_new[s] = _residual(Pa[s], ur, vr, mr, nr)

        u[active], v[active] = x_new[:, :n], x_new[:, n:npos]
        mu[active], nu[active] = x_new[:, npos], x_new[:, npos + 1]
        g[active] = g_new
        res[active] = np.max(np.abs(g_new), axis=1)
        iters[active] += 1
        step_hist = np.full(B, np.nan)
        step_hist[active] = res[active]
        history.append(step_hist)

    if np.any(res > opts.tol):
        b = int(np.argmax(res))
        raise MaxItersExceeded(
            f"KKT residual {res[b]:.3e} above tol {opts.tol:g} after {opts.max_iters} "
            f"iterations (batch item {b})", residual=float(res[b]), iterations=int(iters[b]))
    return BatchSolution(u, v, mu, nu, res, iters, history)


def solve_normal(P, opts: SolverOptions | None = None) -> QreSolution:
    """Logit QRE of a single zero-sum game with row-minimizer payoff ``P``."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise ValueError(f"payoff must be a matrix, got shape {P.shape}")
    return solve_normal_batch(P[None], opts)[0]


def kkt_scaling(K) -> np.ndarray:
    """Symmetric diagonal scaling for a saddle-point KKT matrix.

    Primal rows get the Jacobi factor; constraint rows (zero diagonal) are then
    normalised by their largest scaled entry, which matters once deep
    realization weights shrink the scaled flow rows by many decades.
    """
    diag = np.abs(np.diag(K))
    d = 1.0 / np.sqrt(np.maximum(diag, 1.0))
    dual = diag == 0
    if np.any(dual):
        big = np.max(np.abs(K[dual][:, ~dual]) * d[~dual], axis=1)
        d[dual] = 1.0 / np.where(big > 0, big, 1.0)
    return d


class _Factor:
    """LU factors of a KKT matrix under symmetric Jacobi scaling."""

    def __init__(self, K):
        self.d = kkt_scaling(K)
        self.lu = scipy.linalg.lu_factor(K * self.d[:, None] * self.d[None, :], check_finite=False)
        piv = np.abs(np.diag(self.lu[0]))
        if not np.all(np.isfinite(self.lu[0])) or piv.min() <= 1e-14 * max(piv.max(), 1.0):
            raise SingularSystem("KKT matrix is singular at the solution")

    def solve(self, rhs):
        return self.d * scipy.linalg.lu_solve(self.lu, rhs * self.d, check_finite=False)


_factor = _Factor


def kkt_factor(P, sol: QreSolution):
    """LU factors of the KKT matrix at ``sol``, cached on the solution."""
    if sol._lu is None:
        sol._lu = _factor(kkt_matrix(P, sol.u, sol.v))
    return sol._lu


def backward_normal(P, sol: QreSolution, grad_u, grad_v) -> np.ndarray:
    """Gradient of a loss ``L(u*, v*)`` with respect to the payoff matrix."""
    P = np.asarray(P, dtype=float)
    n, m = P.shape
    grad_u = np.asarray(grad_u, dtype=float)
    grad_v = np.asarray(grad_v, dtype=float)
    if grad_u.shape != (n,) or grad_v.shape != (m,):
        raise ValueError("upstream gradients do not match the payoff shape")
    rhs = np.concatenate([-grad_u, -grad_v, [0.0, 0.0]])
    y = kkt_factor(P, sol).solve(rhs)
    return np.outer(y[:n], sol.v) + np.outer(sol.u, y[n:n + m])


def backward_normal_batch(P, u, v, grad_u, grad_v) -> np.ndarray:
    """Batched ``backward_normal``; returns ``(B, n, m)`` payoff gradients."""
    P = np.asarray(P, dtype=float)
    B, n, m = P.shape
    rhs = np.concatenate([-grad_u, -grad_v, np.zeros((B, 2))], axis=1)
    try:
        y = np.linalg.solve(_kkt_matrices(P, u, v), rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    return y[:, :n, None] * v[:, None, :] + u[:, :, None] * y[:, None, n:n + m]
