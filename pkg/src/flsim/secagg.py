"""Simplified Secure Aggregation over groups of devices.

The protocol runs in four steps per group:

1. *advertise* -- each member draws a secret key and publishes ``g**sk mod M``.
2. *share keys* -- each member Shamir-shares its secret key to the other members.
   Members that drop before this completes are excluded from the masks.
3. *commit* -- each member uploads its fixed-point update plus pairwise masks
   ``+PRG(s_ij)`` for later members and ``-PRG(s_ij)`` for earlier ones.
4. *finalize* -- surviving members reveal their shares of the secret keys of members
   that prepared but never committed; the server rebuilds those keys, recomputes
   the unmatched masks and strips them from the masked sum.

Pairwise seeds come from a keyed PRG over ``(nonce, i, j)`` keyed by a toy
finite-field Diffie-Hellman agreement in the same prime field. This mirrors the
structure of the real protocol but is *not* cryptographically strong.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .fedavg import AggregateState, ModelUpdate

PRIME = (1 << 61) - 1
GENERATOR = 37
DEFAULT_SCALE = 1 << 20


class SecAggError(Exception):
    pass


class OverflowRisk(SecAggError):
    pass


class PrepareDropout(SecAggError):
    pass


class BelowThreshold(SecAggError):
    """Too few survivors to unmask; no partial sum is released."""


class GroupTooSmall(SecAggError):
    pass


# ---------------------------------------------------------------------------
# Fixed-point encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FixedVector:
    entries: np.ndarray
    scale: int = DEFAULT_SCALE

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.int64).reshape(-1)
        if arr.size and (arr.min() < 0 or arr.max() >= PRIME):
            raise ValueError("fixed-point entries must lie in [0, PRIME)")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return int(self.entries.size)

    def __add__(self, other: "FixedVector") -> "FixedVector":
        _check_compatible(self, other)
        return FixedVector((self.entries + other.entries) % PRIME, self.scale)

    def __sub__(self, other: "FixedVector") -> "FixedVector":
        _check_compatible(self, other)
        return FixedVector((self.entries - other.entries) % PRIME, self.scale)

    def __eq__(self, other):
        if not isinstance(other, FixedVector):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.entries, other.entries)

    def centered(self) -> list[int]:
        """Entries mapped to the signed range ``(-M/2, M/2]`` as Python ints."""
        half = PRIME // 2
        return [int(v) - PRIME if v > half else int(v) for v in self.entries]

    @classmethod
    def zeros(cls, dim: int, scale: int = DEFAULT_SCALE) -> "FixedVector":
        return cls(np.zeros(dim, dtype=np.int64), scale)


def _check_compatible(a: FixedVector, b: FixedVector) -> None:
    if a.dim != b.dim or a.scale != b.scale:
        raise ValueError("fixed vectors differ in dimension or scale")


def encode_vector(values, scale: int = DEFAULT_SCALE, group_size: int = 1) -> FixedVector:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    bound = PRIME / (2 * max(1, group_size))
    if x.size and not np.all(np.abs(x) * scale < bound):
        raise OverflowRisk(f"|value| * scale must stay below {bound:.3e} for group size {group_size}")
    q = np.rint(x * scale).astype(np.int64)
    return FixedVector(q % PRIME, scale)


def encode_fixed(update: ModelUpdate, scale: int = DEFAULT_SCALE, group_size: int = 1) -> FixedVector:
    """Encode ``delta`` followed by the update weight as one fixed-point vector."""
    return encode_vector(np.append(update.delta, float(update.weight)), scale, group_size)


def decode_vector(fv: FixedVector) -> np.ndarray:
    return np.array(fv.centered(), dtype=np.float64) / fv.scale


def decode_update(fv: FixedVector) -> ModelUpdate:
    values = decode_vector(fv)
    return ModelUpdate(values[:-1], int(round(values[-1])))


# ---------------------------------------------------------------------------
# Shamir secret sharing over GF(PRIME)
# ---------------------------------------------------------------------------


def shamir_split(secret: int, threshold: int, xs: Sequence[int], rng: np.random.Generator) -> dict[int, int]:
    if not 1 <= threshold <= len(xs):
        raise ValueError("threshold must be between 1 and the number of shares")
    coeffs = [secret % PRIME] + [int(c) for c in rng.integers(1, PRIME, size=threshold - 1)]
    shares = {}
    for x in xs:
        acc = 0
        for c in reversed(coeffs):
            acc = (acc * x + c) % PRIME
        shares[x] = acc
    return shares


def shamir_reconstruct(points: Mapping[int, int]) -> int:
    """Lagrange interpolation at zero."""
    secret = 0
    items = list(points.items())
    for i, (xi, yi) in enumerate(items):
        num, den = 1, 1
        for j, (xj, _) in enumerate(items):
            if i != j:
                num = num * (-xj) % PRIME
                den = den * (xi - xj) % PRIME
        secret = (secret + yi * num * pow(den, PRIME - 2, PRIME)) % PRIME
    return secret


# ---------------------------------------------------------------------------
# Key agreement and masks
# ---------------------------------------------------------------------------


def public_key(secret_key: int) -> int:
    return pow(GENERATOR, secret_key, PRIME)


def pair_seed(secret_key: int, peer_public: int, nonce: bytes, a: int, b: int) -> int:
    """128-bit seed shared by members ``a`` and ``b`` (order-insensitive)."""
    shared = pow(peer_public, secret_key, PRIME)
    lo, hi = (a, b) if a < b else (b, a)
    h = hashlib.blake2b(nonce + struct.pack(">qq", lo, hi), key=shared.to_bytes(8, "big"), digest_size=16)
    return int.from_bytes(h.digest(), "big")


def prg_mask(seed: int, dim: int) -> np.ndarray:
    """Uniform mask in ``[0, PRIME)``; the zero seed yields the zero mask."""
    if seed == 0:
        return np.zeros(dim, dtype=np.int64)
    return np.random.Generator(np.random.PCG64(seed)).integers(0, PRIME, size=dim, dtype=np.int64)


def seed_commitment(seed: int) -> bytes:
    return hashlib.sha256(seed.to_bytes(16, "big")).digest()


# ---------------------------------------------------------------------------
# Groups, bundles and the protocol steps
# ---------------------------------------------------------------------------


def default_threshold(n: int) -> int:
    return -(-2 * n // 3)


@dataclass(frozen=True)
class SecAggGroup:
    members: tuple[int, ...]
    threshold: int
    nonce: bytes
    k: int = 1

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        if len(set(members)) != len(members):
            raise ValueError("group members must be distinct")
        object.__setattr__(self, "members", members)
        n = len(members)
        if not 1 <= self.k <= n:
            raise GroupTooSmall(f"group of {n} is smaller than the minimum size k={self.k}")
        if not 1 <= self.threshold <= n:
            raise ValueError(f"threshold {self.threshold} outside [1, {n}]")

    @classmethod
    def create(cls, members: Iterable[int], nonce: bytes, k: int = 1, threshold: int | None = None) -> "SecAggGroup":
        members = tuple(members)
        return cls(members, threshold or default_threshold(len(members)), nonce, k)

    @property
    def size(self) -> int:
        return len(self.members)

    def index(self, member: int) -> int:
        return self.members.index(member)

    def share_x(self, member: int) -> int:
        return self.index(member) + 1


@dataclass(frozen=True)
class DeviceKeys:
    member: int
    secret_key: int
    public_key: int

    @classmethod
    def generate(cls, member: int, rng: np.random.Generator) -> "DeviceKeys":
        sk = int(rng.integers(2, PRIME - 1))
        return cls(member, sk, public_key(sk))


@dataclass
class MaskShareBundle:
    """Device-side state after Prepare: pair seeds and shares held for other members."""

    member: int
    secret_key: int
    active: tuple[int, ...]
    public_keys: dict[int, int]
    pair_seeds: dict[int, int]
    commitments: dict[int, bytes]
    shares_held: dict[int, tuple[int, int]] = field(default_factory=dict)


def share_keys(keys: DeviceKeys, group: SecAggGroup, recipients: Iterable[int], rng) -> dict[int, tuple[int, int]]:
    """Shamir shares of ``keys.secret_key``, one ``(x, y)`` per recipient (self included)."""
    recipients = list(recipients)
    xs = [group.share_x(r) for r in recipients]
    shares = shamir_split(keys.secret_key, group.threshold, xs, rng)
    return {r: (x, shares[x]) for r, x in zip(recipients, xs)}


def build_bundle(
    keys: DeviceKeys,
    group: SecAggGroup,
    public_keys: Mapping[int, int],
    shares_received: Mapping[int, tuple[int, int]],
) -> MaskShareBundle:
    active = tuple(m for m in group.members if m in public_keys)
    seeds = {
        j: pair_seed(keys.secret_key, public_keys[j], group.nonce, keys.member, j)
        for j in active
        if j != keys.member
    }
    return MaskShareBundle(
        member=keys.member,
        secret_key=keys.secret_key,
        active=active,
        public_keys=dict(public_keys),
        pair_seeds=seeds,
        commitments={j: seed_commitment(s) for j, s in seeds.items()},
        shares_held=dict(shares_received),
    )


@dataclass
class PreparedGroup:
    group: SecAggGroup
    active: tuple[int, ...]
    public_keys: dict[int, int]
    bundles: dict[int, MaskShareBundle]
    pair_seed_count: int


def prepare(
    group: SecAggGroup,
    rng: np.random.Generator | int = 0,
    dropped: Iterable[int] = (),
) -> PreparedGroup:
    """Run both Prepare rounds for every member in-process.

    Members listed in ``dropped`` disappear during Prepare and are excluded.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dropped = set(dropped)
    unknown = dropped - set(group.members)
    if unknown:
        raise PrepareDropout(f"unknown members dropped: {sorted(unknown)}")
    active = tuple(m for m in group.members if m not in dropped)
    if len(active) < group.threshold:
        raise PrepareDropout(f"{len(active)} members left after Prepare, threshold is {group.threshold}")
    keys = {m: DeviceKeys.generate(m, rng) for m in active}
    pks = {m: keys[m].public_key for m in active}
    received: dict[int, dict[int, tuple[int, int]]] = {m: {} for m in active}
    for m in active:
        for r, share in share_keys(keys[m], group, active, rng).items():
            received[r][m] = share
    bundles = {m: build_bundle(keys[m], group, pks, received[m]) for m in active}
    pairs = {(min(i, j), max(i, j)) for b in bundles.values() for i, j in ((b.member, x) for x in b.pair_seeds)}
    return PreparedGroup(group, active, pks, bundles, len(pairs))


def commit(group: SecAggGroup, bundle: MaskShareBundle, fixed: FixedVector) -> FixedVector:
    """Add the member's pairwise masks to its fixed-point input."""
    i = group.index(bundle.member)
    acc = fixed.entries.copy()
    for j, seed in bundle.pair_seeds.items():
        mask = prg_mask(seed, fixed.dim)
        if group.index(j) > i:
            acc = (acc + mask) % PRIME
        else:
            acc = (acc - mask) % PRIME
    return FixedVector(acc, fixed.scale)


def reveal_shares(bundle: MaskShareBundle, owners: Iterable[int]) -> dict[int, tuple[int, int]]:
    return {o: bundle.shares_held[o] for o in owners if o in bundle.shares_held}


@dataclass
class SecAggSession:
    """Server-side accumulator for one group: masked sum plus bookkeeping."""

    group: SecAggGroup
    active: tuple[int, ...]
    public_keys: dict[int, int]
    dim: int
    scale: int = DEFAULT_SCALE
    masked_sum: FixedVector | None = None
    committed: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.masked_sum is None:
            self.masked_sum = FixedVector.zeros(self.dim, self.scale)

    def add_masked(self, member: int, masked: FixedVector) -> None:
        if member not in self.active:
            raise SecAggError(f"member {member} did not complete Prepare")
        if member in self.committed:
            raise SecAggError(f"member {member} already committed")
        self.masked_sum = self.masked_sum + masked
        self.committed.append(member)

    @property
    def dropped(self) -> list[int]:
        done = set(self.committed)
        return [m for m in self.active if m not in done]


def finalize(session: SecAggSession, revealed: Mapping[int, Mapping[int, tuple[int, int]]]) -> FixedVector:
    """Unmask the group sum.

    ``revealed`` maps each surviving member to the shares it reveals, keyed by the
    member whose secret key the share belongs to. Raises ``BelowThreshold`` when
    fewer than ``threshold`` members survive; in that case nothing is returned.
    """
    group = session.group
    survivors = [m for m in revealed if m in session.committed]
    if len(survivors) < group.threshold:
        raise BelowThreshold(f"{len(survivors)} survivors, threshold is {group.threshold}")
    result = session.masked_sum.entries.copy()
    for j in session.dropped:
        points = {}
        for s in survivors:
            share = revealed[s].get(j)
            if share is not None:
                points[share[0]] = share[1]
        if len(points) < group.threshold:
            raise BelowThreshold(f"only {len(points)} shares revealed for dropped member {j}")
        sk_j = shamir_reconstruct(dict(list(points.items())[: group.threshold]))
        j_idx = group.index(j)
        for i in session.committed:
            mask = prg_mask(pair_seed(sk_j, session.public_keys[i], group.nonce, i, j), session.dim)
            # member i added +mask when j came after it, -mask otherwise
            if j_idx > group.index(i):
                result = (result - mask) % PRIME
            else:
                result = (result + mask) % PRIME
    return FixedVector(result, session.scale)


def run_group(
    group: SecAggGroup,
    inputs: Mapping[int, FixedVector],
    rng: np.random.Generator | int = 0,
    prepare_dropouts: Iterable[int] = (),
    commit_dropouts: Iterable[int] = (),
    finalize_dropouts: Iterable[int] = (),
) -> FixedVector:
    """Execute the whole protocol for one group in-process (used by tests and tools)."""
    prepared = prepare(group, rng, prepare_dropouts)
    dim = next(iter(inputs.values())).dim
    scale = next(iter(inputs.values())).scale
    session = SecAggSession(group, prepared.active, prepared.public_keys, dim, scale)
    no_commit = set(commit_dropouts)
    for m in prepared.active:
        if m not in no_commit:
            session.add_masked(m, commit(group, prepared.bundles[m], inputs[m]))
    gone = set(finalize_dropouts)
    revealed = {
        m: reveal_shares(prepared.bundles[m], session.dropped) for m in session.committed if m not in gone
    }
    return finalize(session, revealed)


@dataclass(frozen=True)
class GroupSum:
    vector: FixedVector
    members: int


def compose_hierarchical(group_sums: Sequence[GroupSum], k: int = 1) -> AggregateState:
    """Sum unmasked group results in the clear into a FedAvg aggregate.

    Each vector carries the weighted delta followed by the weight. Summation happens
    on exact integers, so the result equals flat summation of all committed inputs.
    """
    if not group_sums:
        raise ValueError("no group sums to compose")
    small = [g.members for g in group_sums if g.members < k]
    if small:
        raise GroupTooSmall(f"group sizes {small} below minimum k={k}")
    scale = group_sums[0].vector.scale
    total = [0] * group_sums[0].vector.dim
    for g in group_sums:
        if g.vector.scale != scale or g.vector.dim != len(total):
            raise ValueError("group sums differ in dimension or scale")
        total = [a + b for a, b in zip(total, g.vector.centered())]
    values = np.array([float(v) / scale for v in total])
    weight = int(round(values[-1]))
    return AggregateState(values[:-1], weight, sum(g.members for g in group_sums))


def flat_fixed_sum(vectors: Iterable[FixedVector]) -> list[int]:
    """Exact signed integer sum of fixed-point vectors (oracle for composition)."""
    total = None
    for v in vectors:
        c = v.centered()
        total = c if total is None else [a + b for a, b in zip(total, c)]
    return total or []
