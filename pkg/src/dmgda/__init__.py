"""Decentralized momentum gradient descent ascent for nonconvex-PL minimax problems."""

__version__ = "0.1.0"

from .algorithm import (  # noqa: E402
    AlgoConfig, DivergenceError, FeasibilityWarning, NoiseStream, RunSummary, SwarmState,
    check_feasibility, expected_grad_calls, init_run, make_baseline_dsgda, run, schedule, step,
)
from .estimator import DMGDA  # noqa: E402
from .metrics import CSV_FIELDS, MetricsRecord, RateFit, measure, rate_fit, trajectory_mean  # noqa: E402
from .problems import (  # noqa: E402
    CustomProblem, OracleError, OracleResult, PLQuadratic, ProblemConstants, ProblemInstance, Sin2PL,
    best_response, draw_sample, grad, make_plquadratic, make_sin2pl, oracle_F,
)
from .topology import (  # noqa: E402
    DisconnectedGraphError, MixingMatrix, MixingValidationError, build_mixing, mix, spectral_gap,
    validate_mixing,
)
from .verify import VerificationReport, verify_run  # noqa: E402
