"""Differentiable logit quantal response equilibria for zero-sum games."""

from .errors import (
    BrokenFlowStructure,
    CyclicTreeplex,
    DegenerateDeck,
    DimensionMismatch,
    DivergenceDetected,
    GameError,
    MaxItersExceeded,
    NegativeProbability,
    NonPositivePlan,
    NonPositiveStrategy,
    NumericalBreakdown,
    QreError,
    ShapeMismatch,
    SingularSystem,
    SolverError,
    SolverFailure,
    TooLarge,
    UnsupportedStages,
)
from .game_model import (
    ROOT,
    ConstraintSystem,
    InfoSet,
    NormalFormGame,
    SequenceFormGame,
    Treeplex,
    behavioral_from_realization,
    expected_payoff,
    game_from_dict,
    load_game,
    realization_from_behavioral,
    reduced_normal_form,
    reduced_normal_form_game,
    uniform_realization_plan,
)
from .learning import (
    ObservationRecord,
    OptimizerConfig,
    evaluate,
    expected_log_loss,
    fit_full_batch,
    generate_dataset,
    log_loss,
    read_jsonl,
    sample_play,
    train,
    write_jsonl,
)
from .param_games import (
    PokerFamily,
    RpsFamily,
    SecurityFamily,
    make_family,
    payoff_vjp,
    poker_build,
    rps_build,
    rps_payoff,
    security_build,
)
from .qre_normal import (
    BatchSolution,
    QreSolution,
    SolverOptions,
    backward_normal,
    kkt_residual,
    solve_normal,
    solve_normal_batch,
)
from .qre_sequence import backward_game, backward_sequence, solve_game, solve_sequence

__version__ = "0.1.0"
