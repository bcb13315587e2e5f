"""Per-process, per-instance MPTC state machine.

``MptcInstance`` is driven by three entry points: ``begin``, ``handle`` (one
inbound message with its authenticated sender) and ``on_timer``. Each returns a
list of actions (``Send``, ``SetTimer``, ``Decide``, ``RoundDone``) for the host
to carry out. The host is either the standalone consensus harness, which lets
the engine run Phase 3 itself, or the SMR participant, which batches Phase 3
into RECONFIGURATION messages.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

from . import coin as coinmod
from .coin import CRASH, DealerOutput, EmuCoin, FunctionShare
from .core import (ConfigSpace, Configuration, MptcError, Outcome, OutcomeTag,
                   ProcessId, SystemParams, leader_of)
from .paxos import ACCEPTED, PROPOSE, PaxosMsg, PaxosRound

log = logging.getLogger(__name__)


class ConfigShareMissing(MptcError):
    pass


class AgreementViolation(MptcError):
    pass


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True)
class Phase2Msg:
    instance: int
    sender: ProcessId
    round: int
    outcome: Outcome
    fshare: Optional[FunctionShare]


@dataclass(frozen=True)
class Phase3Msg:
    instance: int
    sender: ProcessId
    round: int
    outcome: Outcome
    next_config: Configuration


@dataclass(frozen=True)
class DecisionNote:
    instance: int
    sender: ProcessId
    value: bytes


EngineMsg = Union[PaxosMsg, Phase2Msg, Phase3Msg, DecisionNote]


# -- actions ----------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    dst: ProcessId
    msg: object


@dataclass(frozen=True)
class SetTimer:
    delay: int
    key: tuple


@dataclass(frozen=True)
class Decide:
    instance: int
    value: bytes
    round: int


@dataclass(frozen=True)
class RoundDone:
    instance: int
    round: int
    outcome: Outcome
    next_config: Configuration


# -- coin backends ----------------------------------------------------------

class ThresholdBackend:
    """Real threshold coin: function shares, verification and combine."""

    def __init__(self, me: ProcessId, dealer: DealerOutput, space: ConfigSpace,
                 f: int, mode: str = CRASH):
        self.me = me
        self.dealer = dealer
        self.space = space
        self.f = f
        self.mode = mode
        self._cache: dict[tuple[int, int], Configuration] = {}

    def share(self, config: Configuration, round_: int) -> FunctionShare:
        sh = self.dealer.share_for(self.me, config.participants.set_index)
        if sh is None:
            raise ConfigShareMissing(
                f"process {self.me} holds no share for set {config.members}")
        return coinmod.gfs(sh, round_, self.dealer.group, self.mode)

    def valid(self, sender: ProcessId, config: Configuration, round_: int, fshare) -> bool:
        if not isinstance(fshare, FunctionShare):
            return False
        if fshare.owner != sender or fshare.set_index != config.participants.set_index:
            return False
        keys = self.dealer.per_set_keys[config.participants.set_index]
        try:
            return coinmod.verify(round_, fshare, keys, self.dealer.group, self.mode)
        except coinmod.UnknownShareOrigin:
            return False

    def next_config(self, shares: dict[ProcessId, FunctionShare], config: Configuration,
                    round_: int) -> Optional[Configuration]:
        if len(shares) < self.f + 1:
            return None
        key = (config.participants.set_index, round_)
        if key not in self._cache:
            chosen = [shares[s] for s in sorted(shares)[: self.f + 1]]
            self._cache[key] = coinmod.combine(chosen, round_, self.space, self.dealer.group,
                                               config.participants, threshold=self.f + 1)
        return self._cache[key]


class EmulatedBackend:
    """Emulated coin: a shared schedule, released only through ``gate``."""

    def __init__(self, me: ProcessId, coin: EmuCoin, space: ConfigSpace, gate=None):
        self.me = me
        self.coin = coin
        self.space = space
        self.gate = gate

    def share(self, config: Configuration, round_: int):
        return None

    def valid(self, sender, config, round_, fshare) -> bool:
        return fshare is None

    def next_config(self, shares, config: Configuration, round_: int) -> Configuration:
        nxt = coinmod.emu_next_config(self.coin, round_ + 1, self.space)
        if self.gate is not None:
            self.gate.release(self.me, round_, config, nxt, has_quorum=True)
        return nxt


# -- selection rules ----------------------------------------------------------

def _smallest_most_frequent(counts: Counter) -> bytes:
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def phase3_select(received: Sequence[tuple[ProcessId, Outcome]], f: int,
                  byzantine: bool = False) -> tuple[bool, bytes]:
    """Apply the Phase 3 cases to the received outcomes ``R``.

    Returns ``(decide, value)``. Crash mode: any ``(D, v)`` decides; an
    ``(M, v)`` adopts ``v`` (a round has one leader, so every M outcome of a
    round names the same value); otherwise the lowest sender's value. Byzantine
    mode: ``f + 1`` matching ``D`` decides; ``f + 1`` matching ``D``/``M``
    adopts; otherwise the most frequent value, ties to the smallest bytes.
    """
    known = sorted((s, o) for s, o in received if not o.is_unknown)
    if not known:
        raise ValueError("phase 3 quorum carries no outcome with a value")
    if not byzantine:
        for _, o in known:
            if o.is_decision:
                return True, o.value
        for _, o in known:
            if o.tag is OutcomeTag.M:
                return False, o.value
        return False, known[0][1].value
    decided = Counter(o.value for _, o in known if o.is_decision)
    strong = [v for v, c in decided.items() if c >= f + 1]
    if strong:
        return True, min(strong)
    maybe = Counter(o.value for _, o in known if o.tag in (OutcomeTag.D, OutcomeTag.M))
    backed = Counter({v: c for v, c in maybe.items() if c >= f + 1})
    if backed:
        return False, _smallest_most_frequent(backed)
    return False, _smallest_most_frequent(Counter(o.value for _, o in known))


# -- engine -------------------------------------------------------------------

IDLE = "idle"          # not in the current set; waiting to be handed a round
AWAIT3 = "await3"      # member of S_r waiting for the Phase 3 quorum
P1 = "phase1"
P2 = "phase2"
DONE = "round-done"    # Phase 2 resolved; host owns what happens next
HALTED = "halted"      # decision final; no further rounds


class MptcInstance:
    def __init__(self, me: ProcessId, instance: int, proposal: bytes, config: Configuration,
                 params: SystemParams, backend, *, round_: int = 0,
                 deadline_base: int = 50_000, failed_rounds: int = 0,
                 auto_handoff: bool = True, broadcast_notes: bool = True,
                 universe: Optional[Iterable[ProcessId]] = None):
        self.me = me
        self.instance = instance
        self.params = params
        self.byzantine = params.byzantine
        self.f = params.f
        self.quorum = params.quorum
        self.backend = backend
        self.deadline_base = deadline_base
        self.failed_rounds = failed_rounds
        self.auto_handoff = auto_handoff
        self.broadcast_notes = broadcast_notes
        self.universe = tuple(range(params.n)) if universe is None else tuple(universe)

        self.input = proposal
        self.r = round_
        self.proposal = proposal
        self.o: Optional[Outcome] = None
        self.c = config
        self.decided = False
        self.final = False
        self.phase = IDLE
        self.paxos: Optional[PaxosRound] = None
        self.timer_expired = False
        self.phase2_inbox: dict[ProcessId, tuple[Outcome, object]] = {}
        self.phase2_valid: set[ProcessId] = set()
        self.phase3_tally: dict[int, dict[Configuration, dict[ProcessId, Outcome]]] = \
            defaultdict(lambda: defaultdict(dict))
        self.future_buffer: dict[int, list] = defaultdict(list)
        self.pending_p1: list = []
        self.notes: dict[bytes, set[ProcessId]] = defaultdict(set)
        self.note_sent = False
        self.dropped = 0
        self.malformed = 0
        self.decided_round: Optional[int] = None
        self.next_config: Optional[Configuration] = None

    # -- helpers --------------------------------------------------------------
    @property
    def members(self) -> tuple[ProcessId, ...]:
        return self.c.members

    @property
    def leader(self) -> ProcessId:
        return leader_of(self.c, self.r)

    def _decide(self, value: bytes) -> list:
        if self.decided:
            if value != self.proposal:
                raise AgreementViolation(
                    f"p{self.me} instance {self.instance}: decided {self.proposal!r}, now {value!r}")
            return []
        self.decided = True
        self.decided_round = self.r
        self.proposal = value
        self.o = Outcome(OutcomeTag.D, value)
        out: list = [Decide(self.instance, value, self.r)]
        out += self.on_decide()
        return out

    def on_decide(self) -> list:
        """Broadcast the decision note once."""
        if self.note_sent or not self.decided:
            return []
        self.note_sent = True
        self.notes[self.proposal].add(self.me)
        self._check_final()
        if not self.broadcast_notes:
            return []
        note = DecisionNote(self.instance, self.me, self.proposal)
        return [Send(p, note) for p in self.universe if p != self.me]

    def _check_final(self) -> None:
        if not self.decided:
            return
        # 2f+1 notes include f+1 honest deciders, whose notes let every
        # other honest process decide even after this one stops
        need = 2 * self.f + 1 if self.byzantine else 1
        if len(self.notes[self.proposal]) >= need:
            self.final = True

    def abandon_outcome(self) -> Outcome:
        """Outcome to report when the host hands this instance off mid-round.

        Mirrors a Phase 1 timeout; a process that accepted nothing reports its
        own proposal as ``(U, proposal)`` so the value is not lost.
        """
        if self.decided:
            return Outcome(OutcomeTag.D, self.proposal)
        if self.o is not None and not self.o.is_unknown:
            return self.o
        if self.paxos is not None and self.o is None:
            if self.paxos.is_leader:
                return Outcome(OutcomeTag.M, self.proposal)
            if self.paxos.accepted is not None:
                return Outcome(OutcomeTag.M, self.paxos.accepted)
        return Outcome(OutcomeTag.U, self.proposal)

    # -- entry points ---------------------------------------------------------
    def begin(self) -> list:
        if self.me in self.members:
            return self.start_round()
        self.phase = IDLE
        return []

    def start_round(self) -> list:
        if self.final:
            self.phase = HALTED
            return []
        if self.me not in self.members:
            self.phase = IDLE
            return []
        self.phase = P1
        self.timer_expired = False
        self.phase2_inbox = {}
        self.phase2_valid = set()
        self.paxos = PaxosRound(self.me, self.instance, self.c, self.r, self.proposal,
                                self.quorum, self.deadline_base, self.failed_rounds)
        out: list = [Send(d, m) for d, m in self.paxos.start()]
        out.append(SetTimer(self.paxos.timeout, (self.instance, self.r)))
        pending, self.pending_p1 = self.pending_p1, []
        for src, msg in pending:
            out += self.handle(src, msg)
        return out

    def on_timer(self, key: tuple) -> list:
        if key != (self.instance, self.r):
            return []
        self.timer_expired = True
        if self.phase == P1 and self.paxos is not None:
            o = self.paxos.on_timeout()
            if o is not None:
                return self._phase1_done(o)
        if self.phase == P2:
            return self._try_phase2()
        return []

    def handle(self, src: ProcessId, msg) -> list:
        """Route one inbound message (old rounds dropped, future rounds queued)."""
        if isinstance(msg, DecisionNote):
            return self._on_note(src, msg)
        if not isinstance(msg, (PaxosMsg, Phase2Msg, Phase3Msg)) or msg.instance != self.instance:
            self.malformed += 1
            return []
        if isinstance(msg, (Phase2Msg, Phase3Msg)) and msg.sender != src:
            self.malformed += 1
            return []
        if self.phase == HALTED:
            return []
        eff = msg.round + 1 if isinstance(msg, Phase3Msg) else msg.round
        if eff < self.r:
            self.dropped += 1
            return []
        if eff > self.r:
            if isinstance(msg, Phase3Msg) and self.phase == IDLE:
                return self._on_phase3(src, msg, eff)
            self.future_buffer[eff].append((src, msg))
            return []
        if isinstance(msg, PaxosMsg):
            return self._on_paxos(src, msg)
        if isinstance(msg, Phase2Msg):
            return self._on_phase2(src, msg)
        return self._on_phase3(src, msg, eff)

    # -- phase 1 ----------------------------------------------------------------
    def _on_paxos(self, src: ProcessId, msg: PaxosMsg) -> list:
        if self.paxos is None or self.phase in (IDLE, AWAIT3):
            self.pending_p1.append((src, msg))
            return []
        out: list = []
        if msg.kind == PROPOSE:
            out += [Send(d, m) for d, m in self.paxos.on_propose(src, msg)]
            if self.phase == P1 and self.paxos.done:
                out += self._phase1_done(self.paxos.outcome)
        elif msg.kind == ACCEPTED:
            o = self.paxos.on_accepted(src, msg)
            if o is not None and self.phase == P1:
                out += self._phase1_done(o)
        else:
            self.malformed += 1
        return out

    def _phase1_done(self, o: Outcome) -> list:
        out: list = []
        if o.tag is OutcomeTag.U:
            raise AssertionError("paxos variant never yields a U outcome")
        if self.decided:
            self.o = Outcome(OutcomeTag.D, self.proposal)
        elif o.is_decision:
            out += self._decide(o.value)
        else:
            if o.tag is OutcomeTag.M:
                self.proposal = o.value
            self.o = o
        return out + self.phase2_send()

    # -- phase 2 ----------------------------------------------------------------
    def phase2_send(self) -> list:
        self.phase = P2
        fshare = self.backend.share(self.c, self.r)
        msg = Phase2Msg(self.instance, self.me, self.r, self.o, fshare)
        out: list = [Send(p, msg) for p in self.members]
        return out + self._try_phase2()

    def _on_phase2(self, src: ProcessId, msg: Phase2Msg) -> list:
        if self.phase in (IDLE, AWAIT3):
            self.future_buffer[self.r].append((src, msg))
            return []
        if src not in self.members or src in self.phase2_inbox:
            return []
        self.phase2_inbox[src] = (msg.outcome, msg.fshare)
        if self.backend.valid(src, self.c, self.r, msg.fshare):
            self.phase2_valid.add(src)
        return self._try_phase2() if self.phase == P2 else []

    def _resolve_unknown(self, valid: list) -> Optional[Outcome]:
        """Outcome for a process that left Phase 1 knowing nothing; None = wait."""
        informed = [(s, o) for s, o in valid if o.tag in (OutcomeTag.D, OutcomeTag.M)]
        if not self.byzantine:
            if informed:
                decided = [x for x in informed if x[1].is_decision]
                _, o = (decided or informed)[0]
                return Outcome(OutcomeTag.M, o.value)
            if all(o.is_unknown for _, o in valid):
                return Outcome(OutcomeTag.U, self.proposal)
            _, o = next(x for x in valid if not x[1].is_unknown)
            return Outcome(OutcomeTag.U, o.value)
        support = Counter(o.value for _, o in informed)
        lead = dict(valid).get(self.leader)
        backed = sorted((v for v, c in support.items() if c >= self.f + 1),
                        key=lambda v: (-support[v], v))
        if backed:
            # f+1 holders include an honest one, and honest processes only
            # hold D/M for the value the round leader proposed (or one decided earlier)
            if lead is not None and lead.value in backed:
                return Outcome(OutcomeTag.M, lead.value)
            return Outcome(OutcomeTag.M, backed[0])
        if sum(1 for _, o in valid if o.is_unknown) >= 2 * self.f + 1:
            return Outcome(OutcomeTag.U, self.proposal)
        if lead is not None and not lead.is_decision:
            # only the round leader decides in Phase 1; a leader that did not
            # report D means no honest process decided this round
            return Outcome(OutcomeTag.U, self.proposal)
        missing = len(self.c.members) - len(self.phase2_inbox)
        if max(support.values(), default=0) + missing < self.f + 1:
            # an honest leader's decision would be backed by f+1 reports; no
            # value can reach that any more, so nothing was decided this round
            return Outcome(OutcomeTag.U, self.proposal)
        return None

    def _try_phase2(self) -> list:
        if self.phase != P2:
            return []
        if len(self.phase2_valid) < self.quorum:
            return []
        valid = sorted(((s, self.phase2_inbox[s][0]) for s in self.phase2_valid), key=lambda item: item[0])
        waiting_for_leader = (self.me != self.leader and self.leader not in self.phase2_inbox
                              and not self.timer_expired and not self.decided)
        if waiting_for_leader:
            return []
        out: list = []
        # a (D, v) in the quorum means v was decided this round
        decided = Counter(o.value for _, o in valid if o.is_decision)
        need = self.f + 1 if self.byzantine else 1
        learnt = sorted(v for v, c in decided.items() if c >= need)
        if learnt and not self.decided:
            out += self._decide(learnt[0])
        if not self.decided:
            if self.o.is_unknown:
                new = self._resolve_unknown(valid)
                if new is None:
                    return out
                self.o = new
                self.proposal = new.value
            elif self.o.tag is OutcomeTag.U:
                values = [o.value for _, o in valid if not o.is_unknown]
                if self.byzantine:
                    counts = Counter(values)
                    backed = Counter({v: c for v, c in counts.items() if c >= self.f + 1})
                    if backed:
                        self.proposal = _smallest_most_frequent(backed)
                elif values:
                    self.proposal = values[0]
                self.o = Outcome(OutcomeTag.U, self.proposal)
        shares = {s: self.phase2_inbox[s][1] for s in self.phase2_valid}
        nxt = self.backend.next_config(shares, self.c, self.r)
        if nxt is None:
            return out
        self.phase = DONE
        self.next_config = nxt
        if not self.o.is_decision:
            self.failed_rounds += 1
        out.append(RoundDone(self.instance, self.r, self.o, nxt))
        if self.auto_handoff:
            out += self.phase3_handoff(nxt)
        return out

    # -- phase 3 ----------------------------------------------------------------
    def phase3_handoff(self, nxt: Configuration) -> list:
        msg = Phase3Msg(self.instance, self.me, self.r, self.o, nxt)
        out: list = [Send(p, msg) for p in nxt.members]
        self.r += 1
        self.c = nxt
        if not self.decided:
            self.o = None
        self.paxos = None
        if self.final or (self.decided and not self.byzantine):
            self.phase = HALTED
            return out
        self.phase = AWAIT3 if self.me in nxt.members else IDLE
        return out + self._replay()

    def _replay(self) -> list:
        out: list = []
        for src, msg in self.future_buffer.pop(self.r, []):
            out += self.handle(src, msg)
        return out

    def _on_phase3(self, src: ProcessId, msg: Phase3Msg, eff: int) -> list:
        if self.phase not in (IDLE, AWAIT3):
            return []
        tally = self.phase3_tally[eff]
        tally[msg.next_config][src] = msg.outcome
        votes = tally[msg.next_config]
        if not self.byzantine:
            assert len(tally) == 1, f"crash mode: conflicting next configs for round {eff}"
        if len(votes) < self.quorum or self.me not in msg.next_config.members:
            return []
        received = sorted(votes.items())
        out: list = []
        decide, value = phase3_select(received, self.f, self.byzantine)
        if decide:
            out += self._decide(value)
        elif not self.decided:
            self.proposal = value
        for r in [k for k in self.phase3_tally if k <= eff]:
            del self.phase3_tally[r]
        for r in [k for k in self.future_buffer if k < eff]:
            self.dropped += len(self.future_buffer.pop(r))
        self.r = eff
        self.c = msg.next_config
        if not self.decided:
            self.o = None
        if self.final or (self.decided and not self.byzantine):
            self.phase = HALTED
            return out
        out += self.start_round()
        return out + self._replay()

    # -- decision notes -----------------------------------------------------------
    def _on_note(self, src: ProcessId, note: DecisionNote) -> list:
        if note.instance != self.instance or note.sender != src:
            self.malformed += 1
            return []
        self.notes[note.value].add(src)
        out: list = []
        if not self.byzantine:
            if self.decided and note.value != self.proposal:
                raise AgreementViolation(
                    f"p{self.me} instance {self.instance}: note {note.value!r} "
                    f"conflicts with decision {self.proposal!r}")
            if not self.decided:
                out += self._decide(note.value)
        elif len(self.notes[note.value]) >= self.f + 1 and not self.decided:
            out += self._decide(note.value)
        self._check_final()
        if self.final and (self.phase in (IDLE, AWAIT3) or self.byzantine):
            self.phase = HALTED
            self.paxos = None
        return out
