"""State machine replication on top of MPTC: clients, participants, replicas.

Participants order client requests by running one MPTC instance per slot;
replicas execute decided slots in order. All three node kinds expose
``handle(src, msg, now)`` and ``on_timer(key, now)`` and return the same
``Send`` / ``SetTimer`` actions as the engine, so any event loop can host them.

Interpretation notes (the transition system leaves these open):

* only the round leader spawns instances eagerly; other active members
  create an instance when the leader's first message for it arrives, and
  spawn on their own only after hearing nothing from the leader for
  ``patience`` microseconds. This keeps instance ids aligned across members.
* RECONFIGURATION goes to every participant. An active member that receives
  one for the next round before finishing the round itself hands off its
  instances immediately (reporting what it knows, see
  ``MptcInstance.abandon_outcome``), so a round ends for the whole set.
* a reconfiguration report carries, besides open instances, the reporter's
  decided-slot watermark and the decisions above it. The receiving set
  recreates every slot below the highest ``next_instance`` that no reporter
  knows as decided; slots nobody holds get a no-op proposal so replicas never
  wait on a hole.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import Configuration, MptcError, OutcomeTag, ProcessId, SystemParams, leader_of
from .engine import (DONE, Decide, MptcInstance, Phase2Msg, RoundDone, Send, SetTimer,
                     phase3_select)
from .paxos import PROPOSE, PaxosMsg

log = logging.getLogger(__name__)

DEFAULT_W = 32
NOOP_CID = 0xFFFFFFFF
MAX_BACKOFF_EXP = 6


class ClosedLoopViolation(MptcError):
    pass


class DecisionWithoutRequest(MptcError):
    pass


# -- payloads -------------------------------------------------------------------

@dataclass(frozen=True)
class Request:
    cid: int
    rsn: int
    cmd: bytes

    @property
    def key(self) -> tuple[int, int]:
        return (self.cid, self.rsn)


@dataclass(frozen=True)
class Response:
    cid: int
    rsn: int
    result: bytes


@dataclass(frozen=True)
class Decision:
    instance: int
    cid: int
    rsn: int
    cmd: bytes
    config: Configuration

    @property
    def is_noop(self) -> bool:
        return self.cid == NOOP_CID


@dataclass(frozen=True)
class Reconfiguration:
    round: int
    config: Configuration
    # (instance, outcome, failed rounds) for every instance still open
    instances: tuple
    requests: tuple
    next_instance: int
    low: int                   # every slot below this is decided
    decided: tuple             # (instance, value) decided at or above ``low``


@dataclass(frozen=True)
class DecidedHint:
    """Reply to traffic for a slot the receiver already knows decided."""
    instance: int
    value: bytes


def encode_value(req: Request) -> bytes:
    return struct.pack("<IIH", req.cid, req.rsn, len(req.cmd)) + req.cmd


def decode_value(value: bytes) -> Request:
    try:
        cid, rsn, ln = struct.unpack_from("<IIH", value)
    except struct.error as e:
        raise DecisionWithoutRequest(f"undecodable value {value!r}") from e
    cmd = value[10:]
    if len(cmd) != ln:
        raise DecisionWithoutRequest(f"value length mismatch in {value!r}")
    return Request(cid, rsn, cmd)


NOOP = encode_value(Request(NOOP_CID, 0, b""))


# -- client -----------------------------------------------------------------------

@dataclass
class Client:
    cid: int
    attached: tuple[ProcessId, ...]
    node: ProcessId = -1                     # network address
    rsn: int = 0
    pending: dict = field(default_factory=dict)   # rsn -> issue time
    closed_loop: bool = True

    def issue(self, cmd: bytes, now: int) -> list:
        if self.closed_loop and self.pending:
            raise ClosedLoopViolation(f"client {self.cid} already waits on {set(self.pending)}")
        req = Request(self.cid, self.rsn, cmd)
        self.pending[self.rsn] = now
        self.rsn += 1
        return [Send(p, req) for p in self.attached]

    def on_response(self, resp: Response, now: int) -> Optional[int]:
        """Latency of the first matching response; duplicates give None."""
        if resp.cid != self.cid or resp.rsn not in self.pending:
            return None
        return now - self.pending.pop(resp.rsn)


# -- replica ----------------------------------------------------------------------

class Replica:
    def __init__(self, rid: ProcessId):
        self.rid = rid
        self.slot = 0
        self.decisions: dict[int, Decision] = {}
        self.executed_max: dict[int, int] = {}
        self.log: list[tuple[int, int, int]] = []     # (slot, cid, rsn); noops too
        self._digest = hashlib.sha256(b"mptc-app")
        self.executions = 0
        self.skips = 0

    @property
    def app_state(self) -> bytes:
        return self._digest.digest()

    def on_decision(self, d: Decision) -> list:
        if d.instance < self.slot or d.instance in self.decisions:
            return []
        self.decisions[d.instance] = d
        return self.execute_ready()

    def execute_ready(self) -> list:
        out: list = []
        while self.slot in self.decisions:
            d = self.decisions.pop(self.slot)
            self.log.append((self.slot, d.cid, d.rsn))
            if d.is_noop:
                pass
            elif d.rsn <= self.executed_max.get(d.cid, -1):
                self.skips += 1
            else:
                self.executed_max[d.cid] = d.rsn
                self._digest.update(struct.pack("<QII", self.slot, d.cid, d.rsn) + d.cmd)
                self.executions += 1
                resp = Response(d.cid, d.rsn, self._digest.digest()[:8])
                out += [Send(p, resp) for p in d.config.members]
            self.slot += 1
        return out

    def handle(self, src, msg, now: int) -> list:
        if isinstance(msg, Decision):
            return self.on_decision(msg)
        return []

    def on_timer(self, key, now: int) -> list:
        return []


# -- participant --------------------------------------------------------------------

@dataclass
class ParticipantStats:
    decided: int = 0
    dropped_responses: int = 0
    reconfigs: int = 0
    max_rounds: int = 0
    rounds: dict = field(default_factory=dict)     # instance -> rounds it took here


class Participant:
    def __init__(self, pid: ProcessId, params: SystemParams, config0: Configuration,
                 backend_factory: Callable[[ProcessId], object], replicas: Iterable[ProcessId],
                 participants: Iterable[ProcessId], *, W: int = DEFAULT_W,
                 deadline_base: int = 50_000, patience: Optional[int] = None):
        self.pid = pid
        self.params = params
        self.f = params.f
        self.backend = backend_factory(pid)
        self.replicas = tuple(replicas)
        self.participants = tuple(participants)
        self.W = W
        self.deadline_base = deadline_base
        self.patience = deadline_base if patience is None else patience

        self.next_instance = 0
        self.config = config0
        self.round = 0
        self.requests: OrderedDict[tuple, Request] = OrderedDict()
        self.first_seen: dict[tuple, int] = {}
        self.instances: dict[int, MptcInstance] = {}
        self.rstate = False
        self.responses: dict[tuple, set] = defaultdict(set)
        self.cached: dict[int, Response] = {}          # cid -> latest response
        self.decided_max: dict[int, int] = {}
        self.decided: dict[int, bytes] = {}
        self.low = 0
        self.created_round: dict[int, int] = {}
        self.pending_next: Optional[Configuration] = None
        self.t9_round = 0                              # last round we reported for
        self.reconf_inbox: dict[int, OrderedDict] = defaultdict(OrderedDict)
        self.engine_queue: dict[int, list] = defaultdict(list)
        self.hinted: set = set()
        self.last_leader_msg = 0
        self.patience_armed = False
        self.stats = ParticipantStats()
        self.decision_log: list[tuple[int, bytes]] = []

    # -- helpers ------------------------------------------------------------------
    @property
    def active(self) -> bool:
        return self.pid in self.config.members

    @property
    def leader(self) -> ProcessId:
        return leader_of(self.config, self.round)

    def _covered(self) -> set:
        return {i.proposal for i in self.instances.values()}

    def _new_instance(self, iid: int, proposal: bytes, failed: int = 0) -> list:
        inst = MptcInstance(self.pid, iid, proposal, self.config, self.params, self.backend,
                            round_=self.round, deadline_base=self.deadline_base,
                            failed_rounds=min(failed, MAX_BACKOFF_EXP), auto_handoff=False,
                            broadcast_notes=False, universe=self.participants)
        self.instances[iid] = inst
        self.created_round.setdefault(iid, self.round)
        self.next_instance = max(self.next_instance, iid + 1)
        out = self._engine_actions(inst.begin())
        for src, msg in self.engine_queue.pop(iid, []):
            if iid in self.instances:
                out += self._engine_actions(self.instances[iid].handle(src, msg))
        return out

    def _mark_decided(self, iid: int, value: bytes) -> None:
        self.decided[iid] = value
        while self.low in self.decided:
            self.low += 1
        if value != NOOP:
            req = decode_value(value)
            self.requests.pop(req.key, None)
            self.first_seen.pop(req.key, None)
            if req.rsn > self.decided_max.get(req.cid, -1):
                self.decided_max[req.cid] = req.rsn

    def _stale(self, key: tuple) -> bool:
        return key[1] <= self.decided_max.get(key[0], -1)

    # -- engine glue ------------------------------------------------------------------
    def _engine_actions(self, actions) -> list:
        out: list = []
        for a in actions:
            if isinstance(a, Send):
                out.append(a)
            elif isinstance(a, SetTimer):
                out.append(SetTimer(a.delay, ("eng",) + a.key))
            elif isinstance(a, Decide):
                out += self._on_decide(a.instance, a.value, a.round)
            elif isinstance(a, RoundDone):
                out += self._on_round_done(a)
        return out

    def _on_decide(self, iid: int, value: bytes, round_: int) -> list:
        """T6, run as soon as the instance decides."""
        inst = self.instances.pop(iid, None)
        if iid in self.decided:
            return []
        rounds = round_ - self.created_round.get(iid, round_) + 1
        self.stats.max_rounds = max(self.stats.max_rounds, rounds)
        self.stats.rounds[iid] = rounds
        self.stats.decided += 1
        req = decode_value(value)
        if value != NOOP and req.key not in self.requests and not self._stale(req.key):
            # the value carries the command, so a missing request is recovered from it
            self.requests[req.key] = req
        self._mark_decided(iid, value)
        self.decision_log.append((iid, value))
        d = Decision(iid, req.cid, req.rsn, req.cmd, self.config if inst is None else inst.c)
        out: list = [Send(r, d) for r in self.replicas]
        out += self._maybe_t9()
        return out + self._spawn(None)

    def _on_round_done(self, done: RoundDone) -> list:
        if done.outcome.is_decision:
            return []
        # T8: the round failed for this instance; stop spawning
        self.rstate = True
        self.pending_next = done.next_config
        return self._maybe_t9()

    def _maybe_t9(self) -> list:
        if not self.rstate or self.pending_next is None:
            return []
        if any(i.phase != DONE for i in self.instances.values()):
            return []
        return self._report(self.pending_next, forced=False)

    def _report(self, nxt: Configuration, forced: bool) -> list:
        """T9: hand every open instance to the next configuration."""
        new_round = self.round + 1
        entries = tuple((iid, inst.o if inst.phase == DONE else inst.abandon_outcome(),
                         inst.failed_rounds + (1 if inst.phase != DONE else 0))
                        for iid, inst in sorted(self.instances.items()))
        decided = tuple(sorted((i, v) for i, v in self.decided.items() if i >= self.low))
        msg = Reconfiguration(new_round, nxt, entries, tuple(self.requests.values()),
                              self.next_instance, self.low, decided)
        out: list = [Send(p, msg) for p in self.participants]
        self.t9_round = new_round
        self.instances = {}
        self.requests = OrderedDict()
        self.pending_next = None
        if self.pid in nxt.members:
            # adopt through T10 together with the rest of the new set
            self.rstate = True
        else:
            self._adopt(nxt, new_round)
        return out

    def _adopt(self, cfg: Configuration, round_: int) -> None:
        self.config = cfg
        self.round = round_
        self.rstate = False
        self.pending_next = None
        self.stats.reconfigs += 1
        for iid in [i for i, q in self.engine_queue.items()
                    if all(m.round < round_ for _, m in q)]:
            del self.engine_queue[iid]

    # -- spawning (T2 / T7) -----------------------------------------------------------------
    def _spawn(self, now: Optional[int]) -> list:
        if self.rstate or not self.active:
            return []
        is_leader = self.pid == self.leader
        if not is_leader:
            if now is None or now - self.last_leader_msg < self.patience:
                return []
        out: list = []
        covered = self._covered()
        for key, req in list(self.requests.items()):
            if len(self.instances) >= self.W:
                break
            value = encode_value(req)
            if value in covered:
                continue
            covered.add(value)
            out += self._new_instance(self.next_instance, value)
        return out

    def _arm_patience(self, now: int) -> list:
        if self.patience_armed or not self.active or self.pid == self.leader:
            return []
        self.patience_armed = True
        return [SetTimer(self.patience, ("patience",))]

    # -- message handling -------------------------------------------------------------------
    def handle(self, src: ProcessId, msg, now: int) -> list:
        if isinstance(msg, Request):
            return self.on_request(src, msg, now)
        if isinstance(msg, Response):
            return self.on_response(src, msg)
        if isinstance(msg, Reconfiguration):
            return self.on_reconfiguration(src, msg, now)
        if isinstance(msg, DecidedHint):
            return self.on_hint(msg)
        if isinstance(msg, (PaxosMsg, Phase2Msg)):
            if self.active and src == self.leader:
                self.last_leader_msg = now
            return self.on_engine(src, msg)
        return []

    def on_timer(self, key: tuple, now: int) -> list:
        if key[0] == "eng":
            inst = self.instances.get(key[1])
            if inst is None:
                return []
            return self._engine_actions(inst.on_timer(key[1:]))
        if key[0] == "patience":
            self.patience_armed = False
            out = self._spawn(now)
            if self.requests and self.active and not self.rstate:
                out += self._arm_patience(now)
            return out
        return []

    def on_request(self, src: ProcessId, req: Request, now: int) -> list:
        key = req.key
        if self._stale(key):
            # already decided: answer from the cache or wait for the replica
            cached = self.cached.get(req.cid)
            if cached is not None and cached.rsn == req.rsn:
                return [Send(src, cached)]
            self.responses[key].add(src)
            return []
        if src in self.responses.get(key, ()):
            return []
        self.responses[key].add(src)
        if self.rstate:
            # T4
            if key not in self.requests:
                self.requests[key] = req
                self.first_seen[key] = now
            return []
        if not self.active:
            # T1
            return [Send(p, req) for p in self.config.members]
        if key in self.requests:
            return []   # T3
        # T2: gossip first so every active member holds the request
        self.requests[key] = req
        self.first_seen[key] = now
        out: list = [Send(p, req) for p in self.config.members if p != self.pid]
        out += self._spawn(now)
        if self.pid != self.leader:
            out += self._arm_patience(now)
        return out

    def on_response(self, src: ProcessId, resp: Response) -> list:
        """T5: fan the response out to every recorded origin."""
        key = (resp.cid, resp.rsn)
        prev = self.cached.get(resp.cid)
        if prev is None or prev.rsn <= resp.rsn:
            self.cached[resp.cid] = resp
        origins = self.responses.pop(key, None)
        if not origins:
            self.stats.dropped_responses += 1
            return []
        return [Send(o, resp) for o in sorted(origins) if o != self.pid]

    def on_engine(self, src: ProcessId, msg) -> list:
        iid = msg.instance
        inst = self.instances.get(iid)
        if inst is not None:
            return self._engine_actions(inst.handle(src, msg))
        if iid in self.decided:
            # only a sender that is visibly stuck gets a hint; M outcomes
            # arriving after our decision resolve through the leader's message
            stuck = isinstance(msg, PaxosMsg) or msg.outcome.is_unknown \
                or msg.outcome.tag is OutcomeTag.U
            if not stuck or (src, iid) in self.hinted:
                return []
            self.hinted.add((src, iid))
            return [Send(src, DecidedHint(iid, self.decided[iid]))]
        if iid < self.low or msg.round < self.round:
            return []
        if msg.round == self.round and self.active and not self.rstate:
            proposal = self._lazy_proposal(msg)
            self.engine_queue[iid].append((src, msg))
            return self._new_instance(iid, proposal)
        self.engine_queue[iid].append((src, msg))
        return []

    def _lazy_proposal(self, msg) -> bytes:
        if isinstance(msg, PaxosMsg) and msg.kind == PROPOSE:
            return msg.value
        if isinstance(msg, Phase2Msg) and not msg.outcome.is_unknown:
            return msg.outcome.value
        return NOOP

    def on_hint(self, hint: DecidedHint) -> list:
        inst = self.instances.get(hint.instance)
        if inst is not None:
            return self._engine_actions(inst._decide(hint.value))
        if hint.instance not in self.decided:
            self._mark_decided(hint.instance, hint.value)
        return []

    # -- T10 ----------------------------------------------------------------------------------
    def on_reconfiguration(self, src: ProcessId, msg: Reconfiguration, now: int) -> list:
        out: list = []
        if msg.round == self.round + 1 and self.active and self.t9_round < msg.round:
            # the round ended elsewhere; report what we have right away
            out += self._report(msg.config, forced=True)
        if msg.round <= self.round:
            return out + self._merge_late(src, msg, now)
        inbox = self.reconf_inbox[msg.round]
        inbox.setdefault(src, msg)
        if len(inbox) < self.f + 1:
            return out
        quorum = list(inbox.items())[: self.f + 1]
        for r in [r for r in self.reconf_inbox if r <= msg.round]:
            del self.reconf_inbox[r]
        return out + self._install(quorum, now)

    def _merge_late(self, src: ProcessId, msg: Reconfiguration, now: int) -> list:
        if msg.round != self.round or not self.active:
            return []
        for req in msg.requests:
            if not self._stale(req.key):
                self.responses[req.key].add(src)
                if req.key not in self.requests:
                    self.requests[req.key] = req
                    self.first_seen[req.key] = now
        return self._spawn(now) + self._arm_patience(now)

    def _install(self, quorum: list, now: int) -> list:
        cfg = quorum[0][1].config
        new_round = quorum[0][1].round
        self.instances = {}
        self._adopt(cfg, new_round)
        self.next_instance = max([self.next_instance] + [m.next_instance for _, m in quorum])
        self.last_leader_msg = now
        top = max(m.low for _, m in quorum)
        if top > self.low:
            self.low = top
            while self.low in self.decided:
                self.low += 1
        for _, m in quorum:
            for iid, value in m.decided:
                if iid not in self.decided:
                    self._mark_decided(iid, value)
        for p, m in quorum:
            for req in m.requests:
                if self._stale(req.key):
                    continue
                self.responses[req.key].add(p)
                if req.key not in self.requests:
                    self.requests[req.key] = req
                    self.first_seen[req.key] = now
        if not self.active:
            return []
        reports: dict[int, list] = defaultdict(list)
        failures: dict[int, int] = defaultdict(int)
        for p, m in quorum:
            for iid, outcome, failed in m.instances:
                reports[iid].append((p, outcome))
                failures[iid] = max(failures[iid], failed)
        out: list = []
        for iid in range(self.low, self.next_instance):
            if iid in self.decided:
                continue
            known = [(p, o) for p, o in reports.get(iid, []) if not o.is_unknown]
            if not known:
                out += self._new_instance(iid, NOOP)
                continue
            decide, value = phase3_select(known, self.f)
            if decide:
                out += self._decide_carried(iid, value)
            else:
                out += self._new_instance(iid, value, failures[iid])
        out += self._spawn(now)
        if self.requests:
            out += self._arm_patience(now)
        return out

    def _decide_carried(self, iid: int, value: bytes) -> list:
        req = decode_value(value)
        self._mark_decided(iid, value)
        self.stats.decided += 1
        self.decision_log.append((iid, value))
        d = Decision(iid, req.cid, req.rsn, req.cmd, self.config)
        return [Send(r, d) for r in self.replicas]
