"""Wire messages and their length-prefixed binary framing.

Frame layout: ``u32 body_length`` (big-endian) | ``u8 tag`` | body. The body is the
message's fields packed in declaration order:

====  =================  ====================================================
tag   message            fields
====  =================  ====================================================
0x01  CheckIn            population, device_id, runtime_version, attested
0x02  CheckInAccepted    population, round_id, device_id
0x03  RejectWithWindow   population, window_start, window_end
0x04  Configure          population, round_id, plan, checkpoint
0x05  Report             population, round_id, device_id, delta, weight, metrics
0x06  ReportAck          population, round_id, accepted, window_start, window_end
0x07  Abort              population, round_id, reason
0x10  AdvertiseKeys      population, round_id, device_id, public_key
0x11  ShareBundle        population, round_id, device_id, shares
0x12  MaskedInput        population, round_id, device_id, entries
0x13  RevealShares       population, round_id, device_id, shares
0x14  RevealRequest      population, round_id, dropped
====  =================  ====================================================

Field encodings: ``str`` u16 length + UTF-8; ``u8``/``u32``/``u64``/``i64`` fixed width;
``bytes`` u32 length + raw; ``vec`` u32 count + float64 values; ``ivec`` u32 count +
u64 values; ``metrics`` u16 count + (str, float64) pairs; ``shares`` u32 count +
(u64 owner, u32 x, u64 y) triples; ``ids`` u32 count + u64 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from typing import ClassVar

import numpy as np


class FrameError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Message:
    TAG: ClassVar[int] = 0
    SPEC: ClassVar[tuple[str, ...]] = ()

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not np.array_equal(np.asarray(a), np.asarray(b)):
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True, eq=False)
class CheckIn(Message):
    TAG = 0x01
    SPEC = ("str", "u64", "u32", "u8")
    population: str
    device_id: int
    runtime_version: int
    attested: bool = True


@dataclass(frozen=True, eq=False)
class CheckInAccepted(Message):
    TAG = 0x02
    SPEC = ("str", "str", "u64")
    population: str
    round_id: str
    device_id: int


@dataclass(frozen=True, eq=False)
class RejectWithWindow(Message):
    TAG = 0x03
    SPEC = ("str", "i64", "i64")
    population: str
    window_start: int
    window_end: int


@dataclass(frozen=True, eq=False)
class Configure(Message):
    TAG = 0x04
    SPEC = ("str", "str", "bytes", "vec")
    population: str
    round_id: str
    plan: bytes
    checkpoint: np.ndarray


@dataclass(frozen=True, eq=False)
class Report(Message):
    TAG = 0x05
    SPEC = ("str", "str", "u64", "vec", "u64", "metrics")
    population: str
    round_id: str
    device_id: int
    delta: np.ndarray
    weight: int
    metrics: tuple = ()


@dataclass(frozen=True, eq=False)
class ReportAck(Message):
    TAG = 0x06
    SPEC = ("str", "str", "u8", "i64", "i64")
    population: str
    round_id: str
    accepted: bool
    window_start: int
    window_end: int


@dataclass(frozen=True, eq=False)
class Abort(Message):
    TAG = 0x07
    SPEC = ("str", "str", "str")
    population: str
    round_id: str
    reason: str


@dataclass(frozen=True, eq=False)
class AdvertiseKeys(Message):
    TAG = 0x10
    SPEC = ("str", "str", "u64", "u64")
    population: str
    round_id: str
    device_id: int
    public_key: int


@dataclass(frozen=True, eq=False)
class ShareBundle(Message):
    TAG = 0x11
    SPEC = ("str", "str", "u64", "shares")
    population: str
    round_id: str
    device_id: int
    shares: tuple = ()


@dataclass(frozen=True, eq=False)
class MaskedInput(Message):
    TAG = 0x12
    SPEC = ("str", "str", "u64", "ivec")
    population: str
    round_id: str
    device_id: int
    entries: np.ndarray


@dataclass(frozen=True, eq=False)
class RevealShares(Message):
    TAG = 0x13
    SPEC = ("str", "str", "u64", "shares")
    population: str
    round_id: str
    device_id: int
    shares: tuple = ()


@dataclass(frozen=True, eq=False)
class RevealRequest(Message):
    TAG = 0x14
    SPEC = ("str", "str", "ids")
    population: str
    round_id: str
    dropped: tuple = ()


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TAG: cls
    for cls in (
        CheckIn,
        CheckInAccepted,
        RejectWithWindow,
        Configure,
        Report,
        ReportAck,
        Abort,
        AdvertiseKeys,
        ShareBundle,
        MaskedInput,
        RevealShares,
        RevealRequest,
    )
}

_HEADER = struct.Struct(">IB")
_FIXED = {"u8": struct.Struct(">B"), "u32": struct.Struct(">I"), "u64": struct.Struct(">Q"), "i64": struct.Struct(">q")}
_SHARE = struct.Struct(">QIQ")


def _pack_field(kind: str, value, out: list) -> None:
    if kind in _FIXED:
        out.append(_FIXED[kind].pack(int(value)))
    elif kind == "str":
        raw = value.encode("utf-8")
        out.append(struct.pack(">H", len(raw)))
        out.append(raw)
    elif kind == "bytes":
        out.append(struct.pack(">I", len(value)))
        out.append(bytes(value))
    elif kind == "vec":
        arr = np.asarray(value, dtype=">f8").reshape(-1)
        out.append(struct.pack(">I", arr.size))
        out.append(arr.tobytes())
    elif kind == "ivec":
        arr = np.asarray(value, dtype=">u8").reshape(-1)
        out.append(struct.pack(">I", arr.size))
        out.append(arr.tobytes())
    elif kind == "ids":
        out.append(struct.pack(">I", len(value)))
        out.append(np.asarray(value, dtype=">u8").tobytes())
    elif kind == "metrics":
        out.append(struct.pack(">H", len(value)))
        for name, v in value:
            _pack_field("str", name, out)
            out.append(struct.pack(">d", float(v)))
    elif kind == "shares":
        out.append(struct.pack(">I", len(value)))
        for owner, x, y in value:
            out.append(_SHARE.pack(owner, x, y))
    else:
        raise FrameError(f"unknown field kind {kind}")


def _unpack_field(kind: str, buf: memoryview, pos: int):
    try:
        if kind in _FIXED:
            s = _FIXED[kind]
            (v,) = s.unpack_from(buf, pos)
            return (bool(v) if kind == "u8" else v), pos + s.size
        if kind == "str":
            (n,) = struct.unpack_from(">H", buf, pos)
            pos += 2
            return bytes(buf[pos : pos + n]).decode("utf-8"), pos + n
        if kind == "bytes":
            (n,) = struct.unpack_from(">I", buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise FrameError("truncated bytes field")
            return bytes(buf[pos : pos + n]), pos + n
        if kind in ("vec", "ivec", "ids"):
            (n,) = struct.unpack_from(">I", buf, pos)
            pos += 4
            dt = ">f8" if kind == "vec" else ">u8"
            end = pos + 8 * n
            if end > len(buf):
                raise FrameError("truncated vector field")
            arr = np.frombuffer(buf[pos:end], dtype=dt)
            if kind == "vec":
                return arr.astype(np.float64), end
            if kind == "ivec":
                return arr.astype(np.int64), end
            return tuple(int(v) for v in arr), end
        if kind == "metrics":
            (n,) = struct.unpack_from(">H", buf, pos)
            pos += 2
            items = []
            for _ in range(n):
                name, pos = _unpack_field("str", buf, pos)
                (v,) = struct.unpack_from(">d", buf, pos)
                pos += 8
                items.append((name, v))
            return tuple(items), pos
        if kind == "shares":
            (n,) = struct.unpack_from(">I", buf, pos)
            pos += 4
            items = []
            for _ in range(n):
                items.append(_SHARE.unpack_from(buf, pos))
                pos += _SHARE.size
            return tuple(items), pos
    except struct.error as exc:
        raise FrameError(f"truncated {kind} field") from exc
    raise FrameError(f"unknown field kind {kind}")


def encode(msg: Message) -> bytes:
    parts: list = []
    for kind, f in zip(msg.SPEC, fields(msg)):
        _pack_field(kind, getattr(msg, f.name), parts)
    body = b"".join(parts)
    return _HEADER.pack(len(body), msg.TAG) + body


def decode(frame: bytes) -> Message:
    msg, used = decode_one(frame)
    if used != len(frame):
        raise FrameError(f"{len(frame) - used} trailing bytes after frame")
    return msg


def decode_one(buf: bytes) -> tuple[Message, int]:
    """Decode the first frame of ``buf``; returns the message and bytes consumed."""
    if len(buf) < _HEADER.size:
        raise FrameError("short header")
    length, tag = _HEADER.unpack_from(buf, 0)
    end = _HEADER.size + length
    if len(buf) < end:
        raise FrameError("truncated frame")
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise FrameError(f"unknown message tag 0x{tag:02x}")
    view = memoryview(buf)[:end]
    pos = _HEADER.size
    values = []
    for kind in cls.SPEC:
        v, pos = _unpack_field(kind, view, pos)
        values.append(v)
    if pos != end:
        raise FrameError("frame length does not match its fields")
    return cls(*values), end


def frame_size(msg: Message) -> int:
    return len(encode(msg))


def split_frames(stream: bytes) -> list[Message]:
    out = []
    pos = 0
    while pos < len(stream):
        msg, used = decode_one(stream[pos:])
        out.append(msg)
        pos += used
    return out
