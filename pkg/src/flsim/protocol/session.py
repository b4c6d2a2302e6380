"""Device-side session state machine and its one-symbol-per-transition log alphabet."""

from __future__ import annotations

import enum
import re


class SessionPhase(str, enum.Enum):
    IDLE = "idle"
    CHECKED_IN = "checked_in"
    PLAN_DOWNLOADED = "plan_downloaded"
    TRAINING = "training"
    TRAINED = "trained"
    UPLOADING = "uploading"
    UPLOADED = "uploaded"
    REJECTED = "rejected"
    INTERRUPTED = "interrupted"
    ERRORED = "errored"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL


_TERMINAL = {SessionPhase.UPLOADED, SessionPhase.REJECTED, SessionPhase.INTERRUPTED, SessionPhase.ERRORED}


class SessionInput(str, enum.Enum):
    CHECKIN_ACCEPTED = "checkin_accepted"
    PLAN_DOWNLOADED = "plan_downloaded"
    TRAINING_STARTED = "training_started"
    TRAINING_DONE = "training_done"
    UPLOAD_STARTED = "upload_started"
    UPLOAD_ACCEPTED = "upload_accepted"
    UPLOAD_REJECTED = "upload_rejected"
    INTERRUPTED = "interrupted"
    ERROR = "error"


SYMBOLS = {
    SessionPhase.CHECKED_IN: "-",
    SessionPhase.PLAN_DOWNLOADED: "v",
    SessionPhase.TRAINING: "[",
    SessionPhase.TRAINED: "]",
    SessionPhase.UPLOADING: "+",
    SessionPhase.UPLOADED: "^",
    SessionPhase.REJECTED: "#",
    SessionPhase.INTERRUPTED: "!",
    SessionPhase.ERRORED: "*",
}

LEGEND = {
    "-": "checked in with the server",
    "v": "plan downloaded",
    "[": "training started",
    "]": "training completed",
    "+": "upload started",
    "^": "upload completed",
    "#": "upload rejected",
    "!": "interrupted",
    "*": "error",
}

TERMINAL_SYMBOLS = frozenset("^#!*")

# one of '!' or '*' after any prefix; '^' and '#' only after a started upload
SESSION_PATTERN = re.compile(r"^(?:-(?:v(?:\[(?:\]\+?)?)?)?[!*]|-v\[\]\+[\^#])$")

_FORWARD = {
    (SessionPhase.IDLE, SessionInput.CHECKIN_ACCEPTED): SessionPhase.CHECKED_IN,
    (SessionPhase.CHECKED_IN, SessionInput.PLAN_DOWNLOADED): SessionPhase.PLAN_DOWNLOADED,
    (SessionPhase.PLAN_DOWNLOADED, SessionInput.TRAINING_STARTED): SessionPhase.TRAINING,
    (SessionPhase.TRAINING, SessionInput.TRAINING_DONE): SessionPhase.TRAINED,
    (SessionPhase.TRAINED, SessionInput.UPLOAD_STARTED): SessionPhase.UPLOADING,
    (SessionPhase.UPLOADING, SessionInput.UPLOAD_ACCEPTED): SessionPhase.UPLOADED,
    (SessionPhase.UPLOADING, SessionInput.UPLOAD_REJECTED): SessionPhase.REJECTED,
}


class IllegalTransition(Exception):
    pass


def device_session_step(state: SessionPhase, event: SessionInput) -> tuple[SessionPhase, str]:
    state = SessionPhase(state)
    event = SessionInput(event)
    nxt = _FORWARD.get((state, event))
    if nxt is None and state is not SessionPhase.IDLE and not state.terminal:
        if event is SessionInput.INTERRUPTED:
            nxt = SessionPhase.INTERRUPTED
        elif event is SessionInput.ERROR:
            nxt = SessionPhase.ERRORED
    if nxt is None:
        raise IllegalTransition(f"{event.value} not valid in {state.value}")
    return nxt, SYMBOLS[nxt]


def is_valid_shape(shape: str) -> bool:
    return SESSION_PATTERN.match(shape) is not None
