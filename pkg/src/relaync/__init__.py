"""Performance analysis of a slotted-ALOHA two-way relay with opportunistic XOR coding.

The analytic path solves coupled quasi-birth-death chains (``saturated``,
``unsaturated``); ``oracle`` solves the exact chain on a finite box and
``simulator`` runs the protocol slot by slot.
"""

from .exceptions import (DegenerateBlocksError, InstabilityError, RelayModelError,
                         SaturatedRelayError, StateSpaceTooLargeError, UndefinedDelayError,
                         UnsupportedModeError, ValidationError)
from .model import (ArrivalRates, CoefficientSet, Mode, NetworkState, ProtocolParams,
                    SlotOutcome, coefficients, slot_outcomes, validate_params)
from .oracle import build_truncated, oracle, oracle_metrics, solve_truncated
from .qbd import QbdBlocks, QbdSolution, solve, solve_rate_matrix, stationary
from .saturated import Metrics, fixed_point, metrics
from .simulator import SimConfig, SimMetrics, drift_test, replicate, simulate
from .unsaturated import (analytic_nonnc_chain, fixed_point_unsat, is_stable, metrics_unsat,
                          stability_boundary)

__version__ = "0.1.0"
