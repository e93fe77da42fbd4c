"""Sampling observed play, sequence log-loss, and end-to-end training.

The likelihood of an observation is the observed player's realization-plan
entry for the deepest sequence they played; chance and opponent terms are
constant in the model parameters and are left out of the loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.optimize

from .errors import (
    DivergenceDetected,
    ShapeMismatch,
    SolverError,
    SolverFailure,
)
from .param_games import GameFamily
from .qre_normal import (
    QreSolution,
    SolverOptions,
    backward_normal_batch,
    solve_normal_batch,
)
from .qre_sequence import backward_game, solve_game

log = logging.getLogger(__name__)

MASKS = ("row", "col", "both")


def _covers(mask: str, player: str) -> bool:
    return mask == "both" or mask == player


@dataclass(frozen=True)
class ObservationRecord:
    context: tuple | None
    mask: str
    row_obs: int | None
    col_obs: int | None
    chance: dict | None = None

    def __post_init__(self):
        if self.mask not in MASKS:
            raise ValueError(f"mask must be one of {MASKS}, not {self.mask!r}")
        if _covers(self.mask, "row") != (self.row_obs is not None):
            raise ValueError("row_obs must be present exactly when the row player is observed")
        if _covers(self.mask, "col") != (self.col_obs is not None):
            raise ValueError("col_obs must be present exactly when the column player is observed")

    def to_json(self) -> str:
        return json.dumps({
            "context": None if self.context is None else list(self.context),
            "mask": self.mask,
            "row_obs": self.row_obs,
            "col_obs": self.col_obs,
            "chance": self.chance,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ObservationRecord":
        d = json.loads(line)
        ctx = d.get("context")
        return cls(None if ctx is None else tuple(float(x) for x in ctx), d["mask"],
                   d.get("row_obs"), d.get("col_obs"), d.get("chance"))


def write_jsonl(records: Iterable[ObservationRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_jsonl(path) -> list[ObservationRecord]:
    with open(path) as fh:
        return [ObservationRecord.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class OptimizerConfig:
    """``method``: ``"gradient"`` (plain steps), ``"rms"`` (adaptive) or
    ``"adam"`` (adaptive with momentum, ``momentum`` as first-moment decay)."""

    method: str = "rms"
    lr: float = 0.002
    decay: float = 0.99
    momentum: float = 0.9
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    lr_decay: float = 1.0  # per-epoch multiplier on lr

    def __post_init__(self):
        if self.method not in ("gradient", "rms", "adam"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Optimizer:
    def __init__(self, cfg: OptimizerConfig, size: int):
        self.cfg = cfg
        self.lr = cfg.lr
        self.s = np.zeros(size)
        self.m = np.zeros(size)
        self.t = 0

    def end_epoch(self):
        self.lr *= self.cfg.lr_decay

    def step(self, theta, grad):
        cfg = self.cfg
        if cfg.method == "gradient":
            return theta - self.lr * grad
        self.s = cfg.decay * self.s + (1.0 - cfg.decay) * grad**2
        if cfg.method == "rms":
            return theta - self.lr * grad / (np.sqrt(self.s) + cfg.eps)
        self.t += 1
        self.m = cfg.momentum * self.m + (1.0 - cfg.momentum) * grad
        m_hat = self.m / (1.0 - cfg.momentum**self.t)
        s_hat = self.s / (1.0 - cfg.decay**self.t)
        return theta - self.lr * m_hat / (np.sqrt(s_hat) + cfg.eps)


# -- sampling & losses -------------------------------------------------------------

def sample_play(family: GameFamily, theta, sol: QreSolution, mask: str, rng,
                context=None) -> ObservationRecord:
    """Play the game once from the equilibrium and record what was observed."""
    row, col, chance = family.playout(theta, context, sol.u, sol.v, rng)
    ctx = None if context is None else tuple(float(x) for x in context)
    return ObservationRecord(ctx, mask,
                             int(row) if _covers(mask, "row") else None,
                             int(col) if _covers(mask, "col") else None,
                             chance)


def generate_dataset(family: GameFamily, theta, size: int, mask: str, rng,
                     opts: SolverOptions | None = None) -> list[ObservationRecord]:
    if family.contextual:
        X = family.draw_contexts(rng, size)
        if size == 0:
            return []
        sols = solve_normal_batch(family.build_batch(theta, X), opts)
        return [sample_play(family, theta, sols[b], mask, rng, X[b]) for b in range(size)]
    sol = solve_game(family.build(theta), opts)
    return [sample_play(family, theta, sol, mask, rng) for _ in range(size)]


def log_loss(sol: QreSolution, record: ObservationRecord):
    """Negative log-likelihood of one record and its gradients in ``(u, v)``."""
    loss = 0.0
    gu, gv = np.zeros_like(sol.u), np.zeros_like(sol.v)
    if record.row_obs is not None:
        a = record.row_obs
        loss -= math.log(sol.u[a])
        gu[a] = -1.0 / sol.u[a]
    if record.col_obs is not None:
        a = record.col_obs
        loss -= math.log(sol.v[a])
        gv[a] = -1.0 / sol.v[a]
    return loss, gu, gv


def terminal_distribution(u, v, leaves):
    """Probabilities that each sequence is the deepest one a player reaches."""
    rows, cols, w = leaves
    reach = np.asarray(u)[rows] * np.asarray(v)[cols] * w
    return (np.bincount(rows, reach, minlength=len(u)),
            np.bincount(cols, reach, minlength=len(v)))


def expected_log_loss(sol: QreSolution, truth_sol: QreSolution, mask: str, leaves):
    """Infinite-data log-loss of ``sol`` under play generated by ``truth_sol``.

    ``leaves`` are the truth game's terminal ``(row, col, chance weight)``
    triples.
    """
    if sol.u.shape != truth_sol.u.shape or sol.v.shape != truth_sol.v.shape:
        raise ShapeMismatch("model and truth solutions have different shapes")
    p_row, p_col = terminal_distribution(truth_sol.u, truth_sol.v, leaves)
    loss = 0.0
    gu, gv = np.zeros_like(sol.u), np.zeros_like(sol.v)
    if _covers(mask, "row"):
        loss -= float(p_row @ np.log(sol.u))
        gu = -p_row / sol.u
    if _covers(mask, "col"):
        loss -= float(p_col @ np.log(sol.v))
        gv = -p_col / sol.v
    return loss, gu, gv


# -- evaluation --------------------------------------------------------------------

def _solve_at(family, theta, contexts, opts):
    """Equilibria as ``(U, V)`` stacks, one row per context (or one row)."""
    if family.contextual:
        sols = solve_normal_batch(family.build_batch(theta, contexts), opts)
        return sols.u, sols.v
    sol = solve_game(family.build(theta), opts)
    return sol.u[None], sol.v[None]


def evaluate(params, truth_params, family: GameFamily, test_contexts=None,
             opts: SolverOptions | None = None, truth_strategies=None) -> dict:
    """Parameter MSE (on the family's interpretable parameters) and strategy MSE."""
    params = np.asarray(params, dtype=float)
    truth_params = np.asarray(truth_params, dtype=float)
    if params.shape != truth_params.shape:
        raise ShapeMismatch(f"params {params.shape} vs truth {truth_params.shape}")
    if family.contextual and test_contexts is None:
        raise ShapeMismatch("contextual families need test contexts")
    diff = family.interpretable(params) - family.interpretable(truth_params)
    U, V = _solve_at(family, params, test_contexts, opts)
    TU, TV = truth_strategies or _solve_at(family, truth_params, test_contexts, opts)
    err = np.concatenate([U - TU, V - TV], axis=1)
    return {"param_mse": float(np.mean(diff**2)),
            "strategy_mse": float(np.mean(np.mean(err**2, axis=1)))}


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: np.ndarray
    best_params: np.ndarray
    trajectory: list = field(default_factory=list)
    metrics: list = field(default_factory=list)


class _Data:
    """Dataset as arrays: contexts, observed indices (-1 when unobserved)."""

    def __init__(self, records: list[ObservationRecord], family: GameFamily):
        self.size = len(records)
        self.row = np.array([-1 if r.row_obs is None else r.row_obs for r in records], dtype=int)
        self.col = np.array([-1 if r.col_obs is None else r.col_obs for r in records], dtype=int)
        masks = {r.mask for r in records}
        self.mask = masks.pop() if len(masks) == 1 else "both"
        if family.contextual:
            if any(r.context is None for r in records):
                raise ShapeMismatch(f"{family.name} records need contexts")
            self.ctx = np.array([r.context for r in records], dtype=float).reshape(
                self.size, family.context_dim)
        else:
            self.ctx = None


class _Objective:
    """Batch loss and parameter gradient for one family and dataset."""

    def __init__(self, family, data: _Data, objective, truth_params, opts):
        self.family, self.data, self.opts = family, data, opts
        self.objective = objective
        self.p_row = self.p_col = None
        if objective == "expected":
            if truth_params is None:
                raise ValueError("the expected objective needs ground-truth parameters")
            if family.contextual:
                sols = solve_normal_batch(family.build_batch(truth_params, data.ctx), opts)
                leaves = family.leaves(truth_params)
                dist = [terminal_distribution(sols.u[b], sols.v[b], leaves) for b in range(data.size)]
                self.p_row = np.array([p for p, _ in dist]).reshape(data.size, -1)
                self.p_col = np.array([q for _, q in dist]).reshape(data.size, -1)
            else:
                sol = solve_game(family.build(truth_params), opts)
                p, q = terminal_distribution(sol.u, sol.v, family.leaves(truth_params))
                self.p_row = np.broadcast_to(p, (data.size, p.size))
                self.p_col = np.broadcast_to(q, (data.size, q.size))
        elif objective != "sampled":
            raise ValueError(f"objective must be 'sampled' or 'expected', not {objective!r}")

    def _targets(self, idx, n, m):
        """Per-record target weights on (u, v) sequences: one-hot or expected."""
        d = self.data
        has_row, has_col = d.row[idx] >= 0, d.col[idx] >= 0
        if self.objective == "expected":
            return self.p_row[idx] * has_row[:, None], self.p_col[idx] * has_col[:, None]
        tr, tc = np.zeros((idx.size, n)), np.zeros((idx.size, m))
        tr[np.flatnonzero(has_row), d.row[idx][has_row]] = 1.0
        tc[np.flatnonzero(has_col), d.col[idx][has_col]] = 1.0
        return tr, tc

    def __call__(self, theta, idx, need_grad=True):
        fam, B = self.family, idx.size
        if fam.contextual:
            X, inv = np.unique(self.data.ctx[idx], axis=0, return_inverse=True)
            inv = inv.ravel()
            P = fam.build_batch(theta, X)
            sols = solve_normal_batch(P, self.opts)
            U, V = sols.u, sols.v
            tr, tc = self._targets(idx, U.shape[1], V.shape[1])
            Ur, Vr = U[inv], V[inv]
            loss = -float(np.sum(tr * np.log(Ur)) + np.sum(tc * np.log(Vr))) / B
            if not need_grad:
                return loss, None
            GU = np.zeros_like(U)
            GV = np.zeros_like(V)
            np.add.at(GU, inv, -tr / Ur / B)
            np.add.at(GV, inv, -tc / Vr / B)
            G = backward_normal_batch(P, U, V, GU, GV)
            return loss, fam.vjp_batch(theta, X, G)
        game = fam.build(theta)
        sol = solve_game(game, self.opts)
        tr, tc = self._targets(idx, sol.u.size, sol.v.size)
        wr, wc = tr.sum(0) / B, tc.sum(0) / B
        loss = -(wr @ np.log(sol.u) + wc @ np.log(sol.v))
        if not need_grad:
            return float(loss), None
        G = backward_game(game, sol, -wr / sol.u, -wc / sol.v)
        return float(loss), fam.vjp(theta, None, G)


def full_loss_and_grad(family, records, theta, objective="sampled", truth_params=None,
                       opts=None):
    """Mean loss over ``records`` and its gradient in the raw parameters."""
    data = _Data(list(records), family)
    obj = _Objective(family, data, objective, truth_params, opts)
    return obj(np.asarray(theta, dtype=float), np.arange(data.size))


def train(family: GameFamily, init_params, dataset, opt: OptimizerConfig, *,
          truth_params=None, test_contexts=None, objective: str = "sampled",
          seed: int = 0, solver_opts: SolverOptions | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit family parameters to observed play by minibatch gradient descent.

    Each batch: build the game(s), solve forward, backpropagate the mean
    log-loss through the equilibrium and the payoff map, then step.  Metrics
    are emitted for epoch 0 (initial parameters) and after every epoch.
    """
    records = list(dataset)
    if not records:
        raise ValueError("dataset is empty")
    data = _Data(records, family)
    obj = _Objective(family, data, objective, truth_params, solver_opts)
    theta = np.array(init_params, dtype=float)
    if theta.shape != (family.num_params,):
        raise ShapeMismatch(f"{family.name} expects {family.num_params} parameters")
    optim = Optimizer(opt, theta.size)
    rng = np.random.default_rng(seed)

    truth_strats = None
    if truth_params is not None:
        truth_params = np.asarray(truth_params, dtype=float)
        if family.contextual and test_contexts is None:
            raise ShapeMismatch("contextual families need test contexts for evaluation")
        truth_strats = _solve_at(family, truth_params, test_contexts, solver_opts)
        test_family_leaves = family.leaves(truth_params)

    def metrics(epoch, train_loss):
        row = {"epoch": epoch, "train_loss": train_loss, "test_loss": math.nan,
               "param_mse": math.nan, "strategy_mse": math.nan}
        if truth_params is not None:
            row.update(evaluate(theta, truth_params, family, test_contexts, solver_opts, truth_strats))
            U, V = _solve_at(family, theta, test_contexts, solver_opts)
            TU, TV = truth_strats
            losses = [expected_log_loss(QreSolution(U[b], V[b], 0, 0, 0, 0),
                                        QreSolution(TU[b], TV[b], 0, 0, 0, 0),
                                        data.mask, test_family_leaves)[0]
                      for b in range(U.shape[0])]
            row["test_loss"] = float(np.mean(losses))
        return row

    def batch_eval(idx, b, need_grad=True):
        try:
            return obj(theta, idx, need_grad)
        except SolverError as exc:
            raise SolverFailure(f"solver failed on batch {b}: {exc}", batch=b) from exc

    initial_loss, _ = batch_eval(np.arange(data.size), -1, need_grad=False)
    result = TrainResult(theta.copy(), theta.copy(), [theta.copy()], [])
    row = metrics(0, initial_loss)
    result.metrics.append(row)
    if on_epoch:
        on_epoch(row)
    best_loss = initial_loss
    above = 0
    for epoch in range(1, opt.epochs + 1):
        order = rng.permutation(data.size)
        total = 0.0
        for b, start in enumerate(range(0, data.size, opt.batch_size)):
            idx = order[start:start + opt.batch_size]
            loss, grad = batch_eval(idx, b)
            total += loss * idx.size
            theta = optim.step(theta, grad)
        train_loss = total / data.size
        optim.end_epoch()
        row = metrics(epoch, train_loss)
        result.metrics.append(row)
        result.trajectory.append(theta.copy())
        result.params = theta.copy()
        if train_loss < best_loss:
            best_loss, result.best_params = train_loss, theta.copy()
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d train %.6f param_mse %.3e", epoch, train_loss, row["param_mse"])
        above = above + 1 if train_loss > 10.0 * initial_loss else 0
        if above >= 50:
            exc = DivergenceDetected(f"loss above 10x its initial value for 50 epochs (epoch {epoch})",
                                     epoch=epoch)
            exc.result = result
            raise exc
    return result


def fit_full_batch(family: GameFamily, init_params, dataset, *, objective: str = "expected",
                   truth_params=None, max_iter: int = 500, tol: float = 1e-12,
                   solver_opts: SolverOptions | None = None) -> TrainResult:
    """Full-batch L-BFGS on the same loss and analytic gradient as ``train``.

    The noiseless RPS objective is badly conditioned near the truth, so a
    quasi-Newton method reaches it in tens of iterations where first-order
    steps need thousands of epochs.
    """
    records = list(dataset)
    if not records:
        raise ValueError("dataset is empty")
    data = _Data(records, family)
    obj = _Objective(family, data, objective, truth_params, solver_opts)
    idx = np.arange(data.size)
    theta0 = np.array(init_params, dtype=float)
    if theta0.shape != (family.num_params,):
        raise ShapeMismatch(f"{family.name} expects {family.num_params} parameters")
    result = TrainResult(theta0.copy(), theta0.copy(), [theta0.copy()], [])

    def fun(theta):
        try:
            return obj(theta, idx)
        except SolverError as exc:
            raise SolverFailure(f"solver failed during full-batch fit: {exc}", batch=0) from exc

    def record(theta):
        result.trajectory.append(np.array(theta))

    res = scipy.optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B", callback=record,
                                  options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15})
    log.info("full-batch fit: %d iterations, loss %.8f (%s)", res.nit, res.fun, res.message)
    result.params = result.best_params = np.array(res.x)
    result.metrics.append({"iterations": int(res.nit), "train_loss": float(res.fun)})
    return result
