import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oracles import fd_gradient, rel_err
from qreforge.errors import DivergenceDetected, NumericalBreakdown, ShapeMismatch, SolverFailure
from qreforge.learning import (
    ObservationRecord,
    OptimizerConfig,
    evaluate,
    expected_log_loss,
    fit_full_batch,
    full_loss_and_grad,
    generate_dataset,
    log_loss,
    read_jsonl,
    sample_play,
    terminal_distribution,
    train,
    write_jsonl,
)
from qreforge.param_games import PokerFamily, RpsFamily, SecurityFamily
from qreforge.qre_normal import QreSolution, SolverOptions
from qreforge.qre_sequence import solve_game


def sol_of(u, v):
    return QreSolution(np.asarray(u, float), np.asarray(v, float), 0.0, 0.0, 0.0, 0)


def truth_solution(family, theta):
    return solve_game(family.build(theta))


# -- records -----------------------------------------------------------------------

def test_record_validation():
    with pytest.raises(ValueError):
        ObservationRecord(None, "row", None, 3)
    with pytest.raises(ValueError):
        ObservationRecord(None, "sideways", 1, 1)


def test_jsonl_round_trip(tmp_path):
    recs = [ObservationRecord((0.5, 0.25), "both", 1, 2),
            ObservationRecord(None, "col", None, 4, {"outcomes": [0]})]
    write_jsonl(recs, tmp_path / "d.jsonl")
    assert read_jsonl(tmp_path / "d.jsonl") == recs


# -- sampling ----------------------------------------------------------------------

def test_pure_plan_always_same_terminal():
    fam = RpsFamily()
    rng = np.random.default_rng(0)
    sol = sol_of([0, 1, 0], [0, 0, 1])
    recs = {(r.row_obs, r.col_obs) for r in
            (sample_play(fam, np.zeros(6), sol, "both", rng, np.ones(2)) for _ in range(200))}
    assert recs == {(1, 2)}


def test_same_seed_same_stream():
    fam = PokerFamily(4)
    theta = fam.raw_from_interpretable([0.1, 0.2, 0.3, 0.4])
    a = generate_dataset(fam, theta, 300, "both", np.random.default_rng(5))
    b = generate_dataset(fam, theta, 300, "both", np.random.default_rng(5))
    assert a == b


@pytest.fixture(scope="module")
def poker_samples():
    fam = PokerFamily(4)
    theta = fam.raw_from_interpretable([0.1, 0.2, 0.3, 0.4])
    sol = truth_solution(fam, theta)
    rng = np.random.default_rng(17)
    recs = [sample_play(fam, theta, sol, "both", rng) for _ in range(100_000)]
    return fam, theta, sol, recs


def test_dealt_card_frequencies(poker_samples):
    fam, theta, _, recs = poker_samples
    d = fam.interpretable(theta)
    first = np.bincount([r.chance["cards"][0] for r in recs], minlength=4) / len(recs)
    assert np.all(np.abs(first - d) <= 4 * np.sqrt(d * (1 - d) / len(recs)))


def test_terminal_frequencies_chi_square(poker_samples):
    fam, theta, sol, recs = poker_samples
    rows, cols, w = fam.leaves(theta)
    prob = sol.u[rows] * sol.v[cols] * w
    assert prob.sum() == pytest.approx(1.0)
    index = {(r, c): k for k, (r, c) in enumerate(zip(rows, cols))}
    counts = np.bincount([index[(r.row_obs, r.col_obs)] for r in recs], minlength=len(prob))
    keep = prob > 0
    assert chisquare(counts[keep], len(recs) * prob[keep]).pvalue > 0.001


def test_sampled_loss_matches_expected(poker_samples):
    fam, theta, sol, recs = poker_samples
    model = truth_solution(fam, fam.raw_from_interpretable([0.25, 0.25, 0.25, 0.25]))
    losses = np.array([log_loss(model, r)[0] for r in recs])
    exact = expected_log_loss(model, sol, "both", fam.leaves(theta))[0]
    assert abs(losses.mean() - exact) <= 3 * losses.std() / np.sqrt(losses.size)


# -- losses ------------------------------------------------------------------------

def test_log_loss_row_example():
    sol = sol_of([0.25, 0.75], [0.5, 0.5])
    loss, gu, gv = log_loss(sol, ObservationRecord(None, "row", 0, None))
    assert loss == pytest.approx(1.386294, abs=1e-6)
    assert gu[0] == -4.0 and gu[1] == 0.0
    assert np.all(gv == 0)


def test_log_loss_both_is_additive():
    sol = sol_of([0.25, 0.75], [0.2, 0.8])
    both = log_loss(sol, ObservationRecord(None, "both", 1, 0))[0]
    row = log_loss(sol, ObservationRecord(None, "row", 1, None))[0]
    col = log_loss(sol, ObservationRecord(None, "col", None, 0))[0]
    assert both == pytest.approx(row + col)


def test_expected_loss_row_mask_ignores_v():
    fam = PokerFamily(3)
    truth = fam.raw_from_interpretable([0.2, 0.3, 0.5])
    s = truth_solution(fam, truth)
    loss, gu, gv = expected_log_loss(s, s, "row", fam.leaves(truth))
    assert np.all(gv == 0) and np.any(gu != 0)


def test_expected_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        expected_log_loss(sol_of([0.5, 0.5], [1.0]), sol_of([1.0], [1.0]), "both", None)


def test_terminal_distribution_mass():
    fam = SecurityFamily(2, 5, 2)
    theta = np.array([0.3, -0.4])
    s = truth_solution(fam, theta)
    p, q = terminal_distribution(s.u, s.v, fam.leaves(theta))
    assert p.sum() == pytest.approx(1.0) and q.sum() == pytest.approx(1.0)


FAMS = {"rps": RpsFamily(), "poker": PokerFamily(4), "security1": SecurityFamily(2, 5, 1),
        "security2": SecurityFamily(2, 5, 2)}


def _records(fam, theta, size, seed, mask=None):
    return generate_dataset(fam, theta, size, mask or fam.default_mask, np.random.default_rng(seed))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["poker", "security1", "security2"]), st.sampled_from(["row", "col", "both"]),
       st.integers(0, 10_000))
def test_cross_entropy_gap_nonnegative(name, mask, seed):
    fam = FAMS[name]
    rng = np.random.default_rng(seed)
    truth, model = fam.draw_truth(rng), fam.draw_truth(rng)
    ts, ms = truth_solution(fam, truth), truth_solution(fam, model)
    leaves = fam.leaves(truth)
    gap = expected_log_loss(ms, ts, mask, leaves)[0] - expected_log_loss(ts, ts, mask, leaves)[0]
    assert gap >= -1e-12


@pytest.mark.parametrize("name", list(FAMS))
def test_stationary_at_truth(name):
    fam = FAMS[name]
    truth = fam.draw_truth(np.random.default_rng(3))
    recs = _records(fam, truth, 64, 4)
    _, grad = full_loss_and_grad(fam, recs, truth, "expected", truth)
    assert np.max(np.abs(grad)) <= 1e-6


@pytest.mark.parametrize("name", list(FAMS))
def test_end_to_end_gradient(name):
    fam = FAMS[name]
    rng = np.random.default_rng(6)
    truth = fam.draw_truth(rng)
    recs = _records(fam, truth, 40, 7, "both")
    tight = SolverOptions(tol=1e-13)
    for _ in range(3):
        theta = fam.draw_truth(rng)
        _, grad = full_loss_and_grad(fam, recs, theta, "sampled", opts=tight)
        fd = fd_gradient(lambda t: full_loss_and_grad(fam, recs, t, "sampled", opts=tight)[0], theta)
        assert rel_err(grad, fd) <= 1e-3


def test_defender_only_gradients():
    fam = SecurityFamily(2, 5, 2)
    truth = fam.draw_truth(np.random.default_rng(8))
    ts = truth_solution(fam, truth)
    _, gu, _ = expected_log_loss(ts, ts, "col", fam.leaves(truth))
    assert np.all(gu == 0)
    recs = _records(fam, truth, 200, 9, "col")
    assert all(r.row_obs is None for r in recs)
    _, grad = full_loss_and_grad(fam, recs, fam.initial_params())
    assert np.linalg.norm(grad) > 1e-6


# -- evaluation --------------------------------------------------------------------

def test_evaluate_at_truth_is_zero():
    fam = RpsFamily()
    truth = fam.draw_truth(np.random.default_rng(1))
    ctx = fam.draw_contexts(np.random.default_rng(2), 50)
    assert evaluate(truth, truth, fam, ctx) == {"param_mse": 0.0, "strategy_mse": 0.0}


class ShiftedRps(RpsFamily):
    def build_batch(self, theta, contexts):
        return super().build_batch(theta, contexts) + 3.5


def test_strategy_mse_shift_invariant():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 10, 6), rng.uniform(0, 10, 6)
    ctx = RpsFamily().draw_contexts(rng, 30)
    plain = evaluate(a, b, RpsFamily(), ctx)["strategy_mse"]
    shifted = evaluate(a, b, ShiftedRps(), ctx)["strategy_mse"]
    assert shifted == pytest.approx(plain, rel=1e-8)


def test_strategy_mse_is_quadratic_in_perturbation():
    rng = np.random.default_rng(4)
    fam = RpsFamily()
    truth, direction = rng.uniform(0, 10, 6), rng.normal(size=6)
    ctx = fam.draw_contexts(rng, 50)
    e1 = evaluate(truth + 1e-2 * direction, truth, fam, ctx)["strategy_mse"]
    e2 = evaluate(truth + 1e-3 * direction, truth, fam, ctx)["strategy_mse"]
    assert 70 < e1 / e2 < 130


# -- training ----------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters():
    fam = PokerFamily(4)
    truth = fam.draw_truth(np.random.default_rng(1))
    recs = _records(fam, truth, 256, 2)
    res = train(fam, fam.initial_params(), recs, OptimizerConfig(lr=0.0, epochs=3),
                truth_params=truth)
    assert all(np.array_equal(t, fam.initial_params()) for t in res.trajectory)
    first = res.metrics[0]
    for row in res.metrics[1:]:
        for k in ("test_loss", "param_mse", "strategy_mse"):
            assert row[k] == first[k]


def test_train_is_deterministic():
    fam = SecurityFamily(2, 3, 1)
    truth = fam.draw_truth(np.random.default_rng(3))
    recs = _records(fam, truth, 300, 4)
    cfg = OptimizerConfig(lr=0.01, epochs=5, batch_size=64)
    a = train(fam, fam.initial_params(), recs, cfg, truth_params=truth, seed=9)
    b = train(fam, fam.initial_params(), recs, cfg, truth_params=truth, seed=9)
    assert a.metrics == b.metrics
    np.testing.assert_array_equal(a.params, b.params)


def test_epoch_rows():
    fam = SecurityFamily(2, 3, 1)
    truth = fam.draw_truth(np.random.default_rng(3))
    recs = _records(fam, truth, 50, 4)
    res = train(fam, fam.initial_params(), recs, OptimizerConfig(epochs=0), truth_params=truth)
    assert [r["epoch"] for r in res.metrics] == [0]
    res = train(fam, fam.initial_params(), recs, OptimizerConfig(epochs=4), truth_params=truth)
    assert [r["epoch"] for r in res.metrics] == [0, 1, 2, 3, 4]


def test_monotone_descent_small_step():
    fam = PokerFamily(4)
    truth = fam.draw_truth(np.random.default_rng(5))
    recs = _records(fam, truth, 128, 6)
    res = train(fam, fam.initial_params(), recs,
                OptimizerConfig(method="gradient", lr=1e-4, epochs=100, batch_size=128),
                truth_params=truth, objective="expected")
    losses = [r["train_loss"] for r in res.metrics]
    assert np.all(np.diff(losses) <= 1e-15)
    assert losses[-1] < losses[0]


def test_rps_noiseless_rms_recovery():
    fam = RpsFamily()
    rng = np.random.default_rng(0)
    truth = fam.draw_truth(rng)
    recs = generate_dataset(fam, truth, 256, "both", rng)
    contexts = np.array([r.context for r in recs[:20]])
    res = train(fam, fam.initial_params(), recs, OptimizerConfig(lr=0.02, epochs=2000, batch_size=256),
                truth_params=truth, test_contexts=contexts, objective="expected")
    assert res.metrics[-1]["param_mse"] <= 1e-3


def test_poker_card_weight_mse_decreases():
    fam = PokerFamily(4)
    improved = 0
    for seed in range(5):
        truth = fam.draw_truth(np.random.default_rng(100 + seed))
        recs = _records(fam, truth, 2000, 200 + seed)
        res = train(fam, fam.initial_params(), recs, OptimizerConfig(lr=0.01, epochs=60),
                    truth_params=truth, seed=seed)
        improved += res.metrics[-1]["param_mse"] < res.metrics[0]["param_mse"]
    assert improved >= 4


def test_full_batch_fit_recovers_truth():
    fam = PokerFamily(4)
    truth = fam.draw_truth(np.random.default_rng(11))
    recs = _records(fam, truth, 16, 12)
    res = fit_full_batch(fam, fam.initial_params(), recs, truth_params=truth)
    assert evaluate(res.params, truth, fam)["param_mse"] <= 1e-10


class FailingPoker(PokerFamily):
    def __init__(self, fail_after):
        super().__init__(4)
        self.calls, self.fail_after = 0, fail_after

    def build(self, theta, context=None):
        self.calls += 1
        if self.calls > self.fail_after:
            raise NumericalBreakdown("injected")
        return super().build(theta, context)


def test_solver_failure_reports_batch():
    fam = PokerFamily(4)
    truth = fam.draw_truth(np.random.default_rng(1))
    recs = _records(fam, truth, 300, 2)
    failing = FailingPoker(fail_after=3)  # initial loss + batches 0 and 1 succeed
    with pytest.raises(SolverFailure) as info:
        train(failing, failing.initial_params(), recs, OptimizerConfig(epochs=2, batch_size=128))
    assert info.value.batch == 2


class AscendingRps(RpsFamily):
    def vjp_batch(self, theta, contexts, upstream):
        return -super().vjp_batch(theta, contexts, upstream)


def test_divergence_detected():
    fam = AscendingRps()
    rng = np.random.default_rng(2)
    truth = fam.draw_truth(rng)
    recs = generate_dataset(fam, truth, 64, "both", rng)
    with pytest.raises(DivergenceDetected) as info:
        train(fam, fam.initial_params(), recs,
              OptimizerConfig(method="gradient", lr=0.3, epochs=500, batch_size=64))
    epoch = info.value.epoch
    assert 50 <= epoch < 500
    assert len(info.value.result.metrics) == epoch + 1
    losses = [r["train_loss"] for r in info.value.result.metrics]
    assert all(x > 10 * losses[0] for x in losses[-50:])
