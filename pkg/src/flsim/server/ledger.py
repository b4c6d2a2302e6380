"""Append-only record of committed rounds: the only state that outlives actors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

GENESIS = "0" * 64


class LedgerError(Exception):
    pass


class DuplicateRound(LedgerError):
    pass


def model_digest(weights) -> str:
    arr = np.ascontiguousarray(np.asarray(weights, dtype="<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class LedgerRecord:
    task: str
    kind: str
    round_number: int
    round_id: str
    base_digest: str
    model_digest: str
    weights: tuple
    metrics: dict
    prev_hash: str
    record_hash: str

    def to_json(self) -> str:
        return _canonical(self.__dict__)


class RoundLedger:
    """Committed rounds, one JSON object per line, hash-chained per write.

    ``base_digest`` is the digest of the model a round started from; for training
    tasks it must equal the previous record's ``model_digest`` for the same task.
    """

    def __init__(self):
        self.records: list[LedgerRecord] = []

    def latest(self, task: str) -> Optional[LedgerRecord]:
        for r in reversed(self.records):
            if r.task == task:
                return r
        return None

    def latest_model(self) -> Optional[LedgerRecord]:
        """Most recent training record across tasks."""
        for r in reversed(self.records):
            if r.kind == "training":
                return r
        return None

    def has_round(self, task: str, round_number: int) -> bool:
        return any(r.task == task and r.round_number == round_number for r in self.records)

    def commit(
        self,
        task: str,
        round_number: int,
        round_id: str,
        base_weights,
        weights,
        metrics: dict,
        kind: str = "training",
    ) -> LedgerRecord:
        if self.has_round(task, round_number):
            raise DuplicateRound(f"{task} round {round_number} already committed")
        last = self.latest(task)
        expected = last.round_number + 1 if last else 1
        if round_number != expected:
            raise LedgerError(f"{task}: expected round {expected}, got {round_number}")
        base = model_digest(base_weights)
        # evaluation rounds read whatever model is current, so only training chains
        if kind == "training" and last is not None and base != last.model_digest:
            raise LedgerError(f"{task} round {round_number} does not start from the last committed model")
        prev_hash = self.records[-1].record_hash if self.records else GENESIS
        w = tuple(float(x) for x in np.asarray(weights, dtype=np.float64))
        body = {
            "task": task,
            "kind": kind,
            "round_number": int(round_number),
            "round_id": round_id,
            "base_digest": base,
            "model_digest": model_digest(w),
            "weights": w,
            "metrics": {k: metrics[k] for k in sorted(metrics)},
            "prev_hash": prev_hash,
        }
        record_hash = hashlib.sha256((prev_hash + _canonical(body)).encode("utf-8")).hexdigest()
        rec = LedgerRecord(record_hash=record_hash, **body)
        self.records.append(rec)
        return rec

    def dumps(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def loads(cls, text: str) -> "RoundLedger":
        led = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                d["weights"] = tuple(d["weights"])
                led.records.append(LedgerRecord(**d))
        return led


def verify_chain(records: Iterable[LedgerRecord]) -> list[str]:
    """Problems found in a ledger: broken hashes, gaps, duplicates, base mismatches."""
    problems = []
    prev = GENESIS
    last: dict[str, LedgerRecord] = {}
    seen = set()
    for i, r in enumerate(records):
        body = {k: v for k, v in r.__dict__.items() if k != "record_hash"}
        body["weights"] = tuple(body["weights"])
        if r.prev_hash != prev:
            problems.append(f"record {i}: prev_hash mismatch")
        if hashlib.sha256((r.prev_hash + _canonical(body)).encode("utf-8")).hexdigest() != r.record_hash:
            problems.append(f"record {i}: hash mismatch")
        if model_digest(r.weights) != r.model_digest:
            problems.append(f"record {i}: model digest mismatch")
        key = (r.task, r.round_number)
        if key in seen:
            problems.append(f"record {i}: duplicate round {key}")
        seen.add(key)
        p = last.get(r.task)
        if p is not None:
            if r.round_number != p.round_number + 1:
                problems.append(f"record {i}: round {r.round_number} follows {p.round_number}")
            if r.kind == "training" and r.base_digest != p.model_digest:
                problems.append(f"record {i}: base model is not the previous result")
        elif r.round_number != 1:
            problems.append(f"record {i}: first round of {r.task} is {r.round_number}")
        last[r.task] = r
        prev = r.record_hash
    return problems
