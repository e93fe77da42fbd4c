"""Parametrized game families and their payoff vector-Jacobian products.

Three families are provided:

* contextual rock-paper-scissors, ``b_y = x . w_y``;
* one-card poker with a stacked deck, card weights ``d = softmax(z)``;
* security resource allocation with target values ``R = tanh(r) + 1``.

Each family maps a raw parameter vector ``theta`` (and, for RPS, a context)
to a game, pulls payoff gradients back to ``theta``, and knows how to play
the game out (chance included) so that observations can be sampled.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy.special import softmax

from .errors import DegenerateDeck, ShapeMismatch, UnsupportedStages
from .game_model import (
    InfoSet,
    NormalFormGame,
    SequenceFormGame,
    Treeplex,
    behavioral_from_realization,
)

# -- rock-paper-scissors --------------------------------------------------------

# P = b1*A1 + b2*A2 + b3*A3 for the table (rows/cols R, P, S)
RPS_BASIS = np.array([
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
], dtype=float)


def rps_payoff(b) -> np.ndarray:
    return np.tensordot(np.asarray(b, dtype=float), RPS_BASIS, axes=1)


def rps_build(weights, x) -> NormalFormGame:
    """Modified RPS whose ``b_y`` are linear in the context ``x``."""
    W = np.asarray(weights, dtype=float).reshape(3, -1)
    return NormalFormGame(rps_payoff(W @ np.asarray(x, dtype=float)))


# -- one-card poker ---------------------------------------------------------------

def deal_distribution(d) -> np.ndarray:
    """``D[i, j]``: probability the row player gets card i and the column player j."""
    d = np.asarray(d, dtype=float)
    if np.any(d >= 1 - 1e-12):
        raise DegenerateDeck("a card weight of 1 leaves nothing for the second player")
    D = d[:, None] * d[None, :] / (1.0 - d[:, None])
    np.fill_diagonal(D, 0.0)
    return D


def showdown_matrix(n: int) -> np.ndarray:
    """+1 where the row player (minimizer) holds the lower card."""
    i = np.arange(n)
    return np.sign(i[None, :] - i[:, None]).astype(float)


@lru_cache(maxsize=None)
def poker_treeplexes(n: int) -> tuple[Treeplex, Treeplex]:
    """Row: check/bet per card, then fold/call after check-raise.

    Column: check/raise after a check and fold/call after a bet, per card.
    Sequences come in blocks of ``n`` (one per card) in that order.
    """
    row = [InfoSet((c, n + c)) for c in range(n)]
    row += [InfoSet((2 * n + c, 3 * n + c), parent=c) for c in range(n)]
    col = [InfoSet((c, n + c)) for c in range(n)]
    col += [InfoSet((2 * n + c, 3 * n + c)) for c in range(n)]
    return Treeplex(row), Treeplex(col)


def _poker_blocks(n):
    # (row block, col block, coefficient on D): check/check showdown, bet/fold,
    # bet/call showdown, check-raise/fold, check-raise/call showdown
    S, ones = showdown_matrix(n), np.ones((n, n))
    return [(0, 0, S), (1, 2, -ones), (1, 3, 2 * S), (2, 1, ones), (3, 1, 2 * S)]


def poker_payoff(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    n = d.size
    D = deal_distribution(d)
    P = np.zeros((4 * n, 4 * n))
    for r, c, coef in _poker_blocks(n):
        P[r * n:(r + 1) * n, c * n:(c + 1) * n] = D * coef
    return P


def poker_build(d) -> SequenceFormGame:
    d = np.asarray(d, dtype=float)
    if d.ndim != 1 or d.size < 2:
        raise ShapeMismatch("poker needs at least two cards")
    row, col = poker_treeplexes(d.size)
    return SequenceFormGame(poker_payoff(d), row, col)


def poker_vjp_weights(d, upstream) -> np.ndarray:
    """Pull ``dL/dP`` back to the card weights ``d``."""
    d = np.asarray(d, dtype=float)
    n = d.size
    G = np.asarray(upstream, dtype=float)
    if G.shape != (4 * n, 4 * n):
        raise ShapeMismatch(f"upstream gradient {G.shape} does not match a {4 * n}x{4 * n} payoff")
    GD = np.zeros((n, n))
    for r, c, coef in _poker_blocks(n):
        GD += G[r * n:(r + 1) * n, c * n:(c + 1) * n] * coef
    np.fill_diagonal(GD, 0.0)
    one_minus = 1.0 - d
    # D_ij = d_i d_j / (1 - d_i)
    g_first = (GD * d[None, :]).sum(1) / one_minus**2
    g_second = (GD * (d / one_minus)[:, None]).sum(0)
    return g_first + g_second


# -- security resource allocation ----------------------------------------------

SUCCESS, FAIL = 0, 1


@lru_cache(maxsize=None)
def allocations(n: int, k: int) -> np.ndarray:
    """All splits of ``k`` resources over ``n`` targets, lexicographic."""
    return np.array([a for a in itertools.product(range(k + 1), repeat=n) if sum(a) == k])


def security_row_index(n: int, first: int, outcome: int, second: int) -> int:
    """Sequence index of attacking ``first``, seeing ``outcome``, then ``second``."""
    return n + (first * 2 + outcome) * n + second


@lru_cache(maxsize=None)
def security_treeplexes(n: int, k: int, t: int) -> tuple[Treeplex, Treeplex]:
    if t not in (1, 2):
        raise UnsupportedStages(f"only one or two attack stages are supported, got {t}")
    row = [InfoSet(tuple(range(n)))]
    if t == 2:
        for i in range(n):
            for o in (SUCCESS, FAIL):
                first = security_row_index(n, i, o, 0)
                row.append(InfoSet(tuple(range(first, first + n)), parent=i))
    return Treeplex(row), Treeplex.simplex(len(allocations(n, k)))


@lru_cache(maxsize=None)
def security_coefficients(n: int, k: int, t: int) -> np.ndarray:
    """``C[l]`` with ``P = sum_l R_l C[l]``; the payoff is linear in ``R``."""
    row_tp, col_tp = security_treeplexes(n, k, t)
    kappa = allocations(n, k)
    hit = 0.5 ** kappa  # (allocations, targets): success probability per attack
    C = np.zeros((n, row_tp.n, col_tp.n))
    if t == 1:
        for i in range(n):
            C[i, i, :] = -hit[:, i]
    else:
        for i in range(n):
            for o in (SUCCESS, FAIL):
                p_o = hit[:, i] if o == SUCCESS else 1.0 - hit[:, i]
                for j in range(n):
                    a = security_row_index(n, i, o, j)
                    if o == SUCCESS:
                        C[i, a, :] -= p_o
                    C[j, a, :] -= p_o * hit[:, j]
    C.setflags(write=False)
    return C


def security_payoff(R, k: int, t: int) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.tensordot(R, security_coefficients(R.size, k, t), axes=1)


def security_build(R, k: int, t: int) -> SequenceFormGame:
    """Attacker (row, minimizer) against a defender splitting ``k`` resources."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 1 or R.size < 2 or k < 1:
        raise ShapeMismatch("security game needs n >= 2 targets and k >= 1 resources")
    row, col = security_treeplexes(R.size, k, t)
    return SequenceFormGame(security_payoff(R, k, t), row, col)


# -- families -------------------------------------------------------------------

class GameFamily:
    """Common interface of the parametrized families."""

    name = "family"
    contextual = False
    context_dim = 0
    default_mask = "both"

    def build(self, theta, context=None):
        raise NotImplementedError

    def vjp(self, theta, context, upstream) -> np.ndarray:
        raise NotImplementedError

    def leaves(self, theta, context=None):
        """Terminal sequence pairs ``(row, col, chance weight)`` of the game tree."""
        raise NotImplementedError

    def playout(self, theta, context, u, v, rng):
        raise NotImplementedError

    def interpretable(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float)

    def raw_from_interpretable(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float)

    def initial_params(self) -> np.ndarray:
        return np.zeros(self.num_params)

    def draw_truth(self, rng) -> np.ndarray:
        raise NotImplementedError

    def draw_contexts(self, rng, size: int):
        return None

    def config(self) -> dict:
        return {"family": self.name}

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.num_params,):
            raise ShapeMismatch(f"{self.name} expects {self.num_params} parameters, got {theta.shape}")
        return theta


class RpsFamily(GameFamily):
    name = "rps"
    contextual = True
    context_dim = 2
    num_params = 6

    def weights(self, theta):
        return self._check(theta).reshape(3, self.context_dim)

    def build(self, theta, context=None):
        return rps_build(self.weights(theta), context)

    def build_batch(self, theta, contexts) -> np.ndarray:
        b = np.asarray(contexts, dtype=float) @ self.weights(theta).T
        return np.einsum("by,yij->bij", b, RPS_BASIS)

    def vjp(self, theta, context, upstream):
        G = np.asarray(upstream, dtype=float)
        if G.shape != (3, 3):
            raise ShapeMismatch(f"upstream gradient {G.shape} does not match a 3x3 payoff")
        return self.vjp_batch(theta, np.asarray(context, float)[None], G[None])

    def vjp_batch(self, theta, contexts, upstream) -> np.ndarray:
        """Gradient summed over a batch of contexts and payoff gradients."""
        self._check(theta)
        gb = np.einsum("bij,yij->by", upstream, RPS_BASIS)
        return np.einsum("by,bk->yk", gb, np.asarray(contexts, dtype=float)).ravel()

    def leaves(self, theta=None, context=None):
        r, c = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        return r.ravel(), c.ravel(), np.ones(9)

    def playout(self, theta, context, u, v, rng):
        return int(rng.choice(3, p=u / u.sum())), int(rng.choice(3, p=v / v.sum())), None

    def draw_truth(self, rng):
        return rng.uniform(0.0, 10.0, self.num_params)

    def draw_contexts(self, rng, size):
        return rng.uniform(0.0, 1.0, (size, self.context_dim))


class PokerFamily(GameFamily):
    name = "poker"

    def __init__(self, n: int = 4):
        if n < 2:
            raise ShapeMismatch("poker needs at least two cards")
        self.n = n
        self.num_params = n

    def weights(self, theta):
        return softmax(self._check(theta))

    def build(self, theta, context=None):
        return poker_build(self.weights(theta))

    def vjp(self, theta, context, upstream):
        d = self.weights(theta)
        g_d = poker_vjp_weights(d, upstream)
        return d * (g_d - d @ g_d)

    def leaves(self, theta, context=None):
        n = self.n
        D = deal_distribution(self.weights(theta))
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i, j, w = i.ravel(), j.ravel(), D.ravel()
        rows, cols = [], []
        # (row sequence block, col sequence block) of every terminal history
        for rb, cb in ((0, 0), (1, 2), (1, 3), (2, 1), (3, 1)):
            rows.append(rb * n + i)
            cols.append(cb * n + j)
        return np.concatenate(rows), np.concatenate(cols), np.tile(w, 5)

    def playout(self, theta, context, u, v, rng):
        n = self.n
        d = self.weights(theta)
        row_tp, col_tp = poker_treeplexes(n)
        su = behavioral_from_realization(u, row_tp)
        sv = behavioral_from_realization(v, col_tp)
        i = int(rng.choice(n, p=d))
        rest = d.copy()
        rest[i] = 0.0
        j = int(rng.choice(n, p=rest / rest.sum()))
        chance = {"cards": [i, j]}
        if rng.random() < su[n + i]:  # row bets
            call = rng.random() < sv[3 * n + j]
            return n + i, (3 * n + j if call else 2 * n + j), chance
        if rng.random() < sv[n + j]:  # column raises after the check
            call = rng.random() < su[3 * n + i]
            return (3 * n + i if call else 2 * n + i), n + j, chance
        return i, j, chance

    def interpretable(self, theta):
        return self.weights(theta)

    def raw_from_interpretable(self, values):
        return np.log(np.asarray(values, dtype=float))

    def draw_truth(self, rng):
        return self.raw_from_interpretable(rng.dirichlet(np.ones(self.n)))

    def config(self):
        return {"family": self.name, "n": self.n}


class SecurityFamily(GameFamily):
    name = "security"
    default_mask = "col"

    def __init__(self, n: int = 2, k: int = 5, t: int = 1):
        if t not in (1, 2):
            raise UnsupportedStages(f"only one or two attack stages are supported, got {t}")
        if n < 2 or k < 1:
            raise ShapeMismatch("security game needs n >= 2 targets and k >= 1 resources")
        self.n, self.k, self.t = n, k, t
        self.num_params = n

    def values(self, theta):
        return np.tanh(self._check(theta)) + 1.0

    def build(self, theta, context=None):
        return security_build(self.values(theta), self.k, self.t)

    def vjp(self, theta, context, upstream):
        theta = self._check(theta)
        C = security_coefficients(self.n, self.k, self.t)
        G = np.asarray(upstream, dtype=float)
        if G.shape != C.shape[1:]:
            raise ShapeMismatch(f"upstream gradient {G.shape} does not match payoff {C.shape[1:]}")
        g_R = np.tensordot(C, G, axes=([1, 2], [0, 1]))
        return g_R * (1.0 - np.tanh(theta) ** 2)

    def leaves(self, theta=None, context=None):
        n = self.n
        kappa = allocations(n, self.k)
        hit = 0.5 ** kappa
        cols_all = np.arange(len(kappa))
        if self.t == 1:
            r, c = np.meshgrid(np.arange(n), cols_all, indexing="ij")
            return r.ravel(), c.ravel(), np.ones(r.size)
        rows, cols, weights = [], [], []
        for i in range(n):
            for o in (SUCCESS, FAIL):
                p_o = hit[:, i] if o == SUCCESS else 1.0 - hit[:, i]
                for j in range(n):
                    rows.append(np.full(len(kappa), security_row_index(n, i, o, j)))
                    cols.append(cols_all)
                    weights.append(p_o)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)

    def playout(self, theta, context, u, v, rng):
        n = self.n
        kappa = allocations(n, self.k)
        row_tp, _ = security_treeplexes(n, self.k, self.t)
        su = behavioral_from_realization(u, row_tp)
        alloc = int(rng.choice(len(kappa), p=v / v.sum()))
        first = int(rng.choice(n, p=su[:n] / su[:n].sum()))
        outcome = SUCCESS if rng.random() < 0.5 ** kappa[alloc, first] else FAIL
        outcomes = [outcome]
        row_obs = first
        if self.t == 2:
            start = security_row_index(n, first, outcome, 0)
            probs = su[start:start + n]
            second = int(rng.choice(n, p=probs / probs.sum()))
            outcomes.append(SUCCESS if rng.random() < 0.5 ** kappa[alloc, second] else FAIL)
            row_obs = start + second
        return row_obs, alloc, {"outcomes": outcomes}

    def interpretable(self, theta):
        return self.values(theta)

    def raw_from_interpretable(self, values):
        return np.arctanh(np.clip(np.asarray(values, dtype=float) - 1.0, -1 + 1e-12, 1 - 1e-12))

    def draw_truth(self, rng):
        return self.raw_from_interpretable(rng.uniform(0.0, 2.0, self.n))

    def config(self):
        return {"family": self.name, "n": self.n, "k": self.k, "t": self.t}


def make_family(name: str, **kw) -> GameFamily:
    if name == "rps":
        return RpsFamily()
    if name == "poker":
        return PokerFamily(int(kw.get("n", 4)))
    if name == "security":
        return SecurityFamily(int(kw.get("n", 2)), int(kw.get("k", 5)), int(kw.get("t", 1)))
    raise ValueError(f"unknown game family {name!r}")


def payoff_vjp(family: GameFamily, params, context, upstream) -> np.ndarray:
    """``dL/dtheta`` from ``dL/dP`` through the family's payoff map."""
    return family.vjp(params, context, upstream)
