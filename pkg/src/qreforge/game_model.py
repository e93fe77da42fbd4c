"""Normal-form and sequence-form zero-sum games.

The row player is the minimizer throughout: the value of a profile is
``u @ P @ v``.  A player's sequences are indexed ``0..n-1``; a treeplex
groups them into information sets, each of which hangs below one parent
sequence of the same player (or below the root).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BrokenFlowStructure,
    CyclicTreeplex,
    DimensionMismatch,
    NegativeProbability,
    TooLarge,
)

ROOT = None
FLOW_TOL = 1e-9


def as_payoff(P) -> np.ndarray:
    """Validate a payoff matrix and return it as a read-only float array."""
    P = np.array(P, dtype=float)
    if P.ndim != 2 or min(P.shape) < 1:
        raise DimensionMismatch(f"payoff must be a non-empty matrix, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise DimensionMismatch("payoff has non-finite entries")
    P.setflags(write=False)
    return P


@dataclass(frozen=True)
class InfoSet:
    actions: tuple[int, ...]
    parent: int | None = ROOT


class Treeplex:
    """Sequence structure of one player.

    Attributes derived at construction:

    ``action_parent[a]``  info set owning sequence ``a``
    ``parent_seq[a]``     sequence preceding that info set, -1 at the root
    ``child_sets[a]``     info sets immediately following ``a``
    ``child_count[a]``    ``len(child_sets[a])``
    """

    def __init__(self, info_sets: Sequence[InfoSet | tuple | dict]):
        sets = []
        for s in info_sets:
            if isinstance(s, InfoSet):
                sets.append(s)
            elif isinstance(s, dict):
                sets.append(InfoSet(tuple(int(a) for a in s["actions"]), s.get("parent")))
            else:
                actions, parent = s
                sets.append(InfoSet(tuple(int(a) for a in actions), parent))
        if not sets:
            raise DimensionMismatch("treeplex needs at least one information set")
        self.info_sets: tuple[InfoSet, ...] = tuple(sets)

        all_actions = [a for s in sets for a in s.actions]
        n = max(all_actions, default=-1) + 1
        for i, s in enumerate(sets):
            if not s.actions:
                raise BrokenFlowStructure(f"information set {i} has no actions")
            if len(set(s.actions)) != len(s.actions):
                raise BrokenFlowStructure(
                    f"information set {i} lists a sequence twice (flow row entry +2)"
                )
        if min(all_actions) < 0 or sorted(set(all_actions)) != list(range(n)):
            raise DimensionMismatch("sequence ids must cover 0..n-1 without gaps")
        if len(all_actions) != n:
            raise BrokenFlowStructure("a sequence belongs to more than one information set")
        self.n = n

        owner = np.empty(n, dtype=int)
        for i, s in enumerate(sets):
            owner[list(s.actions)] = i
        children: list[list[int]] = [[] for _ in range(n)]
        for i, s in enumerate(sets):
            if s.parent is not ROOT:
                if not 0 <= s.parent < n:
                    raise DimensionMismatch(f"information set {i} has unknown parent {s.parent}")
                children[s.parent].append(i)

        # walk parent chains; a chain longer than the number of sets is a cycle
        depth = [-1] * len(sets)
        for i in range(len(sets)):
            chain, j = [], i
            while depth[j] < 0:
                chain.append(j)
                if len(chain) > len(sets):
                    raise CyclicTreeplex(f"parent chain from information set {i} loops")
                p = sets[j].parent
                if p is ROOT:
                    depth[j] = 0
                    break
                j = int(owner[p])
                if j in chain:
                    raise CyclicTreeplex(f"information set {j} is its own ancestor")
            for k in reversed(chain):
                if depth[k] < 0:
                    depth[k] = depth[int(owner[sets[k].parent])] + 1

        self.action_parent = owner
        self.parent_seq = np.array(
            [-1 if sets[owner[a]].parent is ROOT else sets[owner[a]].parent for a in range(n)],
            dtype=int,
        )
        self.child_sets = tuple(tuple(c) for c in children)
        self.child_count = np.array([len(c) for c in children], dtype=int)
        self.depth = tuple(depth)
        self.topo_order = tuple(sorted(range(len(sets)), key=lambda i: (depth[i], i)))
        for arr in (self.action_parent, self.parent_seq, self.child_count):
            arr.setflags(write=False)

    @classmethod
    def simplex(cls, k: int) -> "Treeplex":
        """One information set with ``k`` actions: the normal-form case."""
        return cls([InfoSet(tuple(range(k)))])

    @property
    def num_info_sets(self) -> int:
        return len(self.info_sets)

    @property
    def roots(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.info_sets) if s.parent is ROOT)

    @property
    def terminal(self) -> np.ndarray:
        """Boolean mask of sequences with no following information set."""
        return self.child_count == 0

    def constraints(self) -> "ConstraintSystem":
        E = np.zeros((self.num_info_sets, self.n))
        e = np.zeros(self.num_info_sets)
        for i, s in enumerate(self.info_sets):
            E[i, list(s.actions)] = 1.0
            if s.parent is ROOT:
                e[i] = 1.0
            else:
                E[i, s.parent] = -1.0
        return ConstraintSystem(E, e)

    def to_dict(self) -> dict:
        return {
            "info_sets": [{"actions": list(s.actions), "parent": s.parent} for s in self.info_sets]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Treeplex":
        return cls(d["info_sets"])

    def __eq__(self, other):
        return isinstance(other, Treeplex) and self.info_sets == other.info_sets

    def __hash__(self):
        return hash(self.info_sets)

    def __repr__(self):
        return f"Treeplex(n={self.n}, info_sets={self.num_info_sets})"


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    """Flow constraints ``E x = e`` of one player."""

    E: np.ndarray
    e: np.ndarray

    def residual(self, x) -> np.ndarray:
        return self.E @ x - self.e


def check_flow_structure(cs: ConstraintSystem) -> None:
    """Raise BrokenFlowStructure unless every row has the +1/-1 flow pattern."""
    E, e = np.asarray(cs.E), np.asarray(cs.e)
    if E.ndim != 2 or e.shape != (E.shape[0],):
        raise DimensionMismatch(f"flow matrix {E.shape} and rhs {e.shape} disagree")
    for i, row in enumerate(E):
        if not np.all(np.isin(row, (-1.0, 0.0, 1.0))):
            raise BrokenFlowStructure(f"flow row {i} has entries outside {{-1, 0, 1}}")
        n_minus = int(np.sum(row == -1.0))
        if not np.any(row == 1.0) or n_minus > 1:
            raise BrokenFlowStructure(f"flow row {i} needs >=1 entry +1 and at most one -1")
        if e[i] != (1.0 if n_minus == 0 else 0.0):
            raise BrokenFlowStructure(f"flow rhs {i} must be 1 exactly at root sets")
    if E.shape[1] and not np.all(np.sum(E == 1.0, axis=0) == 1):
        raise BrokenFlowStructure("every sequence must carry +1 in exactly one flow row")


@dataclass(frozen=True, eq=False)
class SequenceFormGame:
    payoff: np.ndarray
    row_treeplex: Treeplex
    col_treeplex: Treeplex
    row_constraints: ConstraintSystem = None
    col_constraints: ConstraintSystem = None

    def __post_init__(self):
        object.__setattr__(self, "payoff", as_payoff(self.payoff))
        if self.row_constraints is None:
            object.__setattr__(self, "row_constraints", self.row_treeplex.constraints())
        if self.col_constraints is None:
            object.__setattr__(self, "col_constraints", self.col_treeplex.constraints())

    @property
    def shape(self) -> tuple[int, int]:
        return self.payoff.shape

    def with_payoff(self, P) -> "SequenceFormGame":
        return SequenceFormGame(P, self.row_treeplex, self.col_treeplex,
                                self.row_constraints, self.col_constraints)

    def to_dict(self) -> dict:
        n, m = self.shape
        return {
            "rows": n,
            "cols": m,
            "payoff": self.payoff.tolist(),
            "row_treeplex": self.row_treeplex.to_dict(),
            "col_treeplex": self.col_treeplex.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class NormalFormGame:
    payoff: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "payoff", as_payoff(self.payoff))

    @property
    def shape(self) -> tuple[int, int]:
        return self.payoff.shape

    def as_sequence_form(self) -> SequenceFormGame:
        n, m = self.shape
        return SequenceFormGame(self.payoff, Treeplex.simplex(n), Treeplex.simplex(m))

    def to_dict(self) -> dict:
        n, m = self.shape
        return {"rows": n, "cols": m, "payoff": self.payoff.tolist()}


def validate_sequence_game(game: SequenceFormGame) -> SequenceFormGame:
    """Return ``game`` if its payoff, treeplexes and flow constraints agree."""
    n, m = game.payoff.shape
    if (n, m) != (game.row_treeplex.n, game.col_treeplex.n):
        raise DimensionMismatch(
            f"payoff is {n}x{m} but treeplexes have {game.row_treeplex.n} and "
            f"{game.col_treeplex.n} sequences"
        )
    for who, cs, tp in (("row", game.row_constraints, game.row_treeplex),
                        ("col", game.col_constraints, game.col_treeplex)):
        check_flow_structure(cs)
        ref = tp.constraints()
        if cs.E.shape != ref.E.shape:
            raise DimensionMismatch(f"{who} flow matrix is {cs.E.shape}, treeplex gives {ref.E.shape}")
        if not (np.array_equal(cs.E, ref.E) and np.array_equal(cs.e, ref.e)):
            raise BrokenFlowStructure(f"{who} flow constraints disagree with the treeplex")
    return game


def game_from_dict(d: dict) -> SequenceFormGame | NormalFormGame:
    P = as_payoff(d["payoff"])
    if "rows" in d and "cols" in d and P.shape != (d["rows"], d["cols"]):
        raise DimensionMismatch(f"declared {d['rows']}x{d['cols']} but payoff is {P.shape}")
    flows = [d.get("row_flow"), d.get("col_flow")]
    if "row_treeplex" not in d and "col_treeplex" not in d and flows == [None, None]:
        return NormalFormGame(P)
    row = Treeplex.from_dict(d["row_treeplex"]) if "row_treeplex" in d else Treeplex.simplex(P.shape[0])
    col = Treeplex.from_dict(d["col_treeplex"]) if "col_treeplex" in d else Treeplex.simplex(P.shape[1])
    for i, f in enumerate(flows):
        if f is not None:
            flows[i] = ConstraintSystem(np.asarray(f["E"], dtype=float), np.asarray(f["e"], dtype=float))
    return validate_sequence_game(SequenceFormGame(P, row, col, *flows))


def load_game(path) -> SequenceFormGame | NormalFormGame:
    with open(Path(path)) as fh:
        return game_from_dict(json.load(fh))


def as_sequence_game(game) -> SequenceFormGame:
    return game.as_sequence_form() if isinstance(game, NormalFormGame) else game


# -- strategy representations -------------------------------------------------

def behavioral_from_realization(plan, tp: Treeplex) -> np.ndarray:
    """Conditional action probabilities ``plan_a / plan_parent``.

    Information sets whose parent sequence has zero mass are unreachable;
    they get uniform conditionals.
    """
    plan = np.asarray(plan, dtype=float)
    if plan.shape != (tp.n,):
        raise DimensionMismatch(f"plan has shape {plan.shape}, treeplex has {tp.n} sequences")
    sigma = np.empty(tp.n)
    for s in tp.info_sets:
        acts = list(s.actions)
        parent = 1.0 if s.parent is ROOT else plan[s.parent]
        if parent > 0:
            sigma[acts] = plan[acts] / parent
        else:
            sigma[acts] = 1.0 / len(acts)
    return sigma


def realization_from_behavioral(sigma, tp: Treeplex) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (tp.n,):
        raise DimensionMismatch(f"sigma has shape {sigma.shape}, treeplex has {tp.n} sequences")
    if np.any(sigma < 0):
        raise NegativeProbability("behavioral probabilities must be non-negative")
    plan = np.empty(tp.n)
    for i in tp.topo_order:
        s = tp.info_sets[i]
        acts = list(s.actions)
        parent = 1.0 if s.parent is ROOT else plan[s.parent]
        plan[acts] = sigma[acts] * parent
    return plan


def uniform_realization_plan(tp: Treeplex) -> np.ndarray:
    sigma = np.empty(tp.n)
    for s in tp.info_sets:
        sigma[list(s.actions)] = 1.0 / len(s.actions)
    return realization_from_behavioral(sigma, tp)


def is_realization_plan(plan, tp: Treeplex, tol: float = FLOW_TOL) -> bool:
    plan = np.asarray(plan, dtype=float)
    if plan.shape != (tp.n,) or np.any(plan < 0):
        return False
    return bool(np.max(np.abs(tp.constraints().residual(plan))) <= tol)


def expected_payoff(game, u, v) -> float:
    P = game.payoff
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != (P.shape[0],) or v.shape != (P.shape[1],):
        raise DimensionMismatch(f"plans {u.shape}, {v.shape} do not fit payoff {P.shape}")
    return float(u @ P @ v)


# -- reduced normal form --------------------------------------------------------

def _count_strategies(tp: Treeplex, sets) -> int:
    total = 1
    for i in sets:
        total *= sum(_count_strategies(tp, tp.child_sets[a]) for a in tp.info_sets[i].actions)
    return total


def _enumerate(tp: Treeplex, sets) -> list[tuple[int, ...]]:
    per_set = []
    for i in sets:
        options = []
        for a in tp.info_sets[i].actions:
            for rest in _enumerate(tp, tp.child_sets[a]):
                options.append((a,) + rest)
        per_set.append(options)
    return [tuple(itertools.chain.from_iterable(combo)) for combo in itertools.product(*per_set)]


def reduced_strategies(tp: Treeplex, cap: int = 4096) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Reduced pure strategies of one player and their 0/1 realization plans.

    A pure strategy picks one action at every information set reachable
    through the player's own earlier picks.  Returns the strategies (as
    sorted tuples of chosen sequences) and a matrix whose rows are plans.
    """
    count = _count_strategies(tp, tp.roots)
    if count > cap:
        raise TooLarge(f"{count} reduced strategies exceed the cap of {cap}")
    strategies = [tuple(sorted(s)) for s in _enumerate(tp, tp.roots)]
    plans = np.zeros((len(strategies), tp.n))
    for k, s in enumerate(strategies):
        plans[k, list(s)] = 1.0
    return strategies, plans


def reduced_normal_form(game: SequenceFormGame, player: str, cap: int = 4096):
    if player not in ("row", "col"):
        raise ValueError(f"player must be 'row' or 'col', not {player!r}")
    tp = game.row_treeplex if player == "row" else game.col_treeplex
    return reduced_strategies(tp, cap)


def reduced_normal_form_game(game: SequenceFormGame, cap: int = 4096):
    """Payoff matrix over reduced pure strategies plus both plan maps."""
    _, U = reduced_normal_form(game, "row", cap)
    _, V = reduced_normal_form(game, "col", cap)
    return NormalFormGame(U @ game.payoff @ V.T), U, V

