from .rounds import (
    IllegalPhase,
    Phase,
    RoundParams,
    RoundState,
    make_round_id,
    overselect_count,
    parse_round_id,
    reporting_tick,
    selection_tick,
)
from .session import (
    LEGEND,
    SESSION_PATTERN,
    IllegalTransition,
    SessionInput,
    SessionPhase,
    device_session_step,
    is_valid_shape,
)

__all__ = [
    "IllegalPhase",
    "IllegalTransition",
    "LEGEND",
    "Phase",
    "RoundParams",
    "RoundState",
    "SESSION_PATTERN",
    "SessionInput",
    "SessionPhase",
    "device_session_step",
    "is_valid_shape",
    "make_round_id",
    "overselect_count",
    "parse_round_id",
    "reporting_tick",
    "selection_tick",
]
