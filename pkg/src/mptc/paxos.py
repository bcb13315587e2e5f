"""Single-decree Paxos round with a predetermined leader.

One ``PaxosRound`` lives per (process, instance, round). Handlers return the
messages to send; the caller owns the network and the timer. The leader skips
classic Paxos phase 1 and proposes directly; acceptors end their round as soon
as they accept (outcome ``(M, v)``), the leader ends it once ``quorum``
acceptors (itself included) acknowledged (outcome ``(D, v)``). Timeouts turn
an open round into ``(M, v)`` or ``Unknown``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import Configuration, Outcome, OutcomeTag, ProcessId, leader_of

PROPOSE = "PROPOSE"
ACCEPTED = "ACCEPTED"

DEFAULT_DEADLINE_BASE_US = 50_000


@dataclass(frozen=True)
class PaxosMsg:
    kind: str
    instance: int
    round: int
    value: bytes


def round_timeout(deadline_base: int, failed_rounds: int) -> int:
    return deadline_base * (2 ** failed_rounds)


@dataclass
class PaxosRound:
    me: ProcessId
    instance: int
    config: Configuration
    round: int
    proposal: bytes
    quorum: int
    deadline_base: int = DEFAULT_DEADLINE_BASE_US
    failed_rounds: int = 0
    accepted: Optional[bytes] = None
    accept_acks: set = field(default_factory=set)
    outcome: Optional[Outcome] = None

    @property
    def leader(self) -> ProcessId:
        return leader_of(self.config, self.round)

    @property
    def is_leader(self) -> bool:
        return self.me == self.leader

    @property
    def done(self) -> bool:
        return self.outcome is not None

    @property
    def timeout(self) -> int:
        return round_timeout(self.deadline_base, self.failed_rounds)

    def start(self) -> list[tuple[ProcessId, PaxosMsg]]:
        """Messages to send at round start; the caller arms ``self.timeout``."""
        if not self.is_leader:
            return []
        msg = PaxosMsg(PROPOSE, self.instance, self.round, self.proposal)
        return [(m, msg) for m in self.config.members]

    def on_propose(self, sender: ProcessId, msg: PaxosMsg) -> list[tuple[ProcessId, PaxosMsg]]:
        if msg.round != self.round or sender != self.leader:
            return []
        if self.accepted is not None or self.done:
            return []
        self.accepted = msg.value
        out = [(sender, PaxosMsg(ACCEPTED, self.instance, self.round, msg.value))]
        if not self.is_leader:
            self.outcome = Outcome(OutcomeTag.M, msg.value)
        return out

    def on_accepted(self, sender: ProcessId, msg: PaxosMsg) -> Optional[Outcome]:
        """Returns the round outcome the first time the ack quorum is reached."""
        if not self.is_leader or msg.round != self.round or self.done:
            return None
        if msg.value != self.proposal or sender not in self.config.members:
            return None
        self.accept_acks.add(sender)
        if len(self.accept_acks) >= self.quorum:
            self.outcome = Outcome(OutcomeTag.D, self.proposal)
            return self.outcome
        return None

    def on_timeout(self) -> Optional[Outcome]:
        if self.done:
            return None
        if self.is_leader:
            self.outcome = Outcome(OutcomeTag.M, self.proposal)
        elif self.accepted is not None:
            self.outcome = Outcome(OutcomeTag.M, self.accepted)
        else:
            self.outcome = Outcome.unknown()
        return self.outcome
