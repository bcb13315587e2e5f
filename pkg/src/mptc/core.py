"""Shared domain types, participant-set ranking and leader selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Iterable, Optional, Sequence

ProcessId = int

PAXOS_VARIANT = "paxos-variant"
REGISTERED_PROTOCOLS = {PAXOS_VARIANT}

MAX_REJECTION_RETRIES = 64


class MptcError(Exception):
    """Base class for errors raised by this package."""


class InvalidParticipantSet(MptcError):
    pass


class InvalidParams(MptcError):
    pass


@dataclass(frozen=True)
class SystemParams:
    n: int
    f_c: int
    f_a: int
    p_f: int
    byzantine: bool = False

    @property
    def f(self) -> int:
        return self.f_c + self.f_a

    def validate(self) -> None:
        if min(self.n, self.f_c, self.f_a, self.p_f) < 0:
            raise InvalidParams("negative system parameter")
        if self.f >= self.n:
            raise InvalidParams(f"f = f_c + f_a = {self.f} must be < n = {self.n}")
        need = 3 * self.f + 1 if self.byzantine else 2 * self.f + 1
        if self.p_f < need:
            mode = "byzantine" if self.byzantine else "crash"
            raise InvalidParams(f"{mode} mode requires p_f >= {need}, got {self.p_f}")
        if self.n < self.p_f:
            raise InvalidParams(f"n = {self.n} must be >= p_f = {self.p_f}")

    @property
    def quorum(self) -> int:
        """Messages a phase waits for: p_f - f."""
        return self.p_f - self.f


class OutcomeTag(enum.Enum):
    D = "D"
    M = "M"
    U = "U"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Outcome:
    tag: OutcomeTag
    value: Optional[bytes] = None

    def __post_init__(self):
        if self.tag is OutcomeTag.UNKNOWN:
            if self.value is not None:
                raise ValueError("Unknown outcome carries no value")
        elif self.value is None:
            raise ValueError(f"outcome {self.tag.value} requires a value")

    @classmethod
    def unknown(cls) -> "Outcome":
        return cls(OutcomeTag.UNKNOWN)

    @property
    def is_decision(self) -> bool:
        return self.tag is OutcomeTag.D

    @property
    def is_unknown(self) -> bool:
        return self.tag is OutcomeTag.UNKNOWN

    def __repr__(self) -> str:
        if self.is_unknown:
            return "Outcome(Unknown)"
        return f"Outcome({self.tag.value}, {self.value!r})"


def rank_participant_set(members: Sequence[int], n: int, p_f: int) -> int:
    """Lexicographic rank of a sorted ``p_f``-combination of ``range(n)``."""
    members = list(members)
    if len(members) != p_f:
        raise InvalidParticipantSet(f"expected {p_f} members, got {len(members)}")
    prev = -1
    for m in members:
        if not (isinstance(m, int) and prev < m < n):
            raise InvalidParticipantSet(f"members must be strictly increasing ids < {n}: {members}")
        prev = m
    rank = 0
    start = 0
    for pos, m in enumerate(members):
        remaining = p_f - pos - 1
        # count combinations whose element at `pos` is smaller than m
        for smaller in range(start, m):
            rank += comb(n - smaller - 1, remaining)
        start = m + 1
    return rank


def unrank_participant_set(rank: int, n: int, p_f: int) -> tuple[int, ...]:
    total = comb(n, p_f)
    if not 0 <= rank < total:
        raise InvalidParticipantSet(f"rank {rank} outside [0, {total})")
    out = []
    start = 0
    for pos in range(p_f):
        remaining = p_f - pos - 1
        for candidate in range(start, n):
            block = comb(n - candidate - 1, remaining)
            if rank < block:
                out.append(candidate)
                start = candidate + 1
                break
            rank -= block
    return tuple(out)


@dataclass(frozen=True)
class ParticipantSet:
    members: tuple[int, ...]
    set_index: int

    @classmethod
    def of(cls, members: Iterable[int], n: int) -> "ParticipantSet":
        ms = tuple(members)
        return cls(ms, rank_participant_set(ms, n, len(ms)))

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, pid: object) -> bool:
        return pid in self.members

    def position(self, pid: int) -> int:
        """1-based evaluation point of ``pid`` in this set."""
        return self.members.index(pid) + 1


@dataclass(frozen=True)
class ProtocolSpec:
    protocol_id: str = PAXOS_VARIANT
    # opaque parameter block; the shipped variant only understands an
    # optional fixed leader position (used by the static-leader scenario)
    init_params: tuple = ()

    def __post_init__(self):
        if self.protocol_id not in REGISTERED_PROTOCOLS:
            raise InvalidParams(f"unregistered protocol {self.protocol_id!r}")

    def param(self, key: str, default=None):
        return dict(self.init_params).get(key, default)


@dataclass(frozen=True)
class Configuration:
    protocol: ProtocolSpec
    participants: ParticipantSet

    @property
    def members(self) -> tuple[int, ...]:
        return self.participants.members

    def encode(self) -> bytes:
        params = ";".join(f"{k}={v}" for k, v in self.protocol.init_params)
        return (f"{self.protocol.protocol_id}|{params}|"
                + ",".join(map(str, self.members))).encode()


@dataclass(frozen=True)
class ConfigSpace:
    configs: tuple[Configuration, ...]
    b: int = field(init=False)

    def __post_init__(self):
        if not self.configs:
            raise InvalidParams("configuration space must not be empty")
        if len(set(self.configs)) != len(self.configs):
            raise InvalidParams("duplicate configurations in space")
        object.__setattr__(self, "b", max(0, (len(self.configs) - 1).bit_length()))

    def __len__(self) -> int:
        return len(self.configs)

    def __getitem__(self, i: int) -> Configuration:
        return self.configs[i]

    def index(self, config: Configuration) -> int:
        return self.configs.index(config)

    def participant_sets(self) -> list[ParticipantSet]:
        seen: dict[int, ParticipantSet] = {}
        for c in self.configs:
            seen.setdefault(c.participants.set_index, c.participants)
        return list(seen.values())


def config_index_from_bits(bits: int, space: ConfigSpace,
                           retry: Callable[[], int]) -> tuple[int, bool]:
    """Map a b-bit draw onto ``space`` by rejection sampling.

    ``retry`` supplies the next b-bit draw. Returns ``(index, uniform)``; after
    ``MAX_REJECTION_RETRIES`` rejections the index falls back to
    ``bits % |C|`` and ``uniform`` is False.
    """
    size = len(space)
    if not 0 <= bits < (1 << space.b):
        raise ValueError(f"bits {bits} not a {space.b}-bit value")
    attempts = 0
    while bits >= size:
        if attempts >= MAX_REJECTION_RETRIES:
            return bits % size, False
        bits = retry()
        attempts += 1
    return bits, True


def leader_of(config: Configuration, round_: int) -> ProcessId:
    members = config.members
    fixed = config.protocol.param("leader")
    if fixed is not None:
        return members[int(fixed) % len(members)]
    return members[round_ % len(members)]
