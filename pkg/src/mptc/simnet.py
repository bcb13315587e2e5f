"""Deterministic discrete-event network simulator and run harnesses.

Events are ordered by ``(time, sequence number)``, all randomness comes from
seeded ``random.Random`` instances, so a (scenario, seed) pair always produces
the same event sequence. Nodes are any objects with ``handle(src, msg, now)``
and ``on_timer(key, now)`` returning ``Send`` / ``SetTimer`` actions.

Two harnesses sit on top: ``run_smr`` (clients, participants and replicas
under a crash/DoS adversary) and ``run_consensus`` (one standalone MPTC
instance per process, optionally with a Byzantine member).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import statistics
import struct
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import coin as coinmod
from .coin import BYZANTINE, CRASH, DEFAULT_GROUP, EmuCoin, FunctionShare, GroupParams
from .core import (ConfigSpace, Configuration, InvalidParams, MptcError, Outcome, OutcomeTag,
                   ParticipantSet, ProcessId, ProtocolSpec, SystemParams)
from .engine import (HALTED, Decide, DecisionNote, EmulatedBackend, MptcInstance, Phase2Msg,
                     Phase3Msg, Send, SetTimer, ThresholdBackend)
from .paxos import PaxosMsg
from .smr import (NOOP, Client, DecidedHint, Decision, DecisionWithoutRequest, Participant,
                  Reconfiguration, Replica, Request, Response, decode_value)

log = logging.getLogger(__name__)

DOS_BLACKOUT = "blackout"
DOS_SATURATE = "saturate"

DELIVER, TIMER, CRASH_EVENT, START, WAKE = 0, 1, 2, 3, 4


class SafetyViolation(MptcError):
    def __init__(self, message: str, trace: Sequence = ()):
        super().__init__(message)
        self.trace = list(trace)


class CoinVisibilityError(MptcError):
    pass


# -- latency & adversary ----------------------------------------------------------------------

class LatencyModel:
    """``base`` plus uniform integer jitter in ``[0, jitter]`` microseconds."""

    def __init__(self, base: int = 500, jitter: int = 200, seed: int = 0):
        self.base = base
        self.jitter = jitter
        self._rng = random.Random(seed)

    def sample(self) -> int:
        if not self.jitter:
            return self.base
        return self.base + self._rng.randint(0, self.jitter)


@dataclass(frozen=True)
class DosWindow:
    start: int
    end: int
    targets: frozenset

    def covers(self, t: int) -> bool:
        return self.start <= t < self.end


@dataclass
class AdversarySpec:
    crash_schedule: tuple = ()          # (time, pid)
    dos_schedule: tuple = ()            # DosWindow
    compromised: frozenset = frozenset()
    dos_mode: str = DOS_BLACKOUT
    saturate_factor: int = 100

    def validate(self, params: SystemParams, attackable: Iterable[ProcessId]) -> None:
        attackable = set(attackable)
        crashed = {p for _, p in self.crash_schedule}
        if len(crashed) > params.f_c:
            raise InvalidParams(f"crash schedule hits {len(crashed)} processes, f_c = {params.f_c}")
        for w in self.dos_schedule:
            if w.end < w.start:
                raise InvalidParams(f"DoS window ends before it starts: {w}")
        for t in sorted({w.start for w in self.dos_schedule}):
            active = set().union(*[w.targets for w in self.dos_schedule if w.covers(t)] or [set()])
            if len(active) > params.f_a:
                raise InvalidParams(
                    f"{len(active)} DoS targets active at t={t}us, f_a = {params.f_a}")
        if len(self.compromised) > params.f:
            raise InvalidParams(f"{len(self.compromised)} compromised processes, f = {params.f}")
        bad = (crashed | set().union(*[w.targets for w in self.dos_schedule] or [set()])
               | set(self.compromised)) - attackable
        if bad:
            raise InvalidParams(f"adversary targets non-process nodes {sorted(bad)}")
        if self.dos_mode not in (DOS_BLACKOUT, DOS_SATURATE):
            raise InvalidParams(f"unknown DoS mode {self.dos_mode!r}")

    def targets_at(self, t: int) -> set:
        out: set = set()
        for w in self.dos_schedule:
            if w.covers(t):
                out |= w.targets
        return out

    def window_end(self, pid: ProcessId, t: int) -> int:
        """End of the (possibly chained) attack on ``pid`` covering ``t``."""
        end = t
        moved = True
        while moved:
            moved = False
            for w in self.dos_schedule:
                if pid in w.targets and w.covers(end):
                    end = w.end
                    moved = True
        return end


# -- coin visibility ------------------------------------------------------------------------------

def coin_visibility(requester: ProcessId, set_r: Iterable[ProcessId],
                    set_next: Iterable[ProcessId], has_quorum: bool) -> bool:
    """Whether the emulated coin may hand ``C_{r+1}`` to ``requester``."""
    return has_quorum and (requester in tuple(set_r) or requester in tuple(set_next))


class CoinGate:
    def __init__(self):
        self.released = 0

    def release(self, requester, round_, config: Configuration, nxt: Configuration,
                has_quorum: bool) -> None:
        if not coin_visibility(requester, config.members, nxt.members, has_quorum):
            raise CoinVisibilityError(
                f"process {requester} may not learn the round {round_ + 1} configuration")
        self.released += 1


def adversary_probe(compromised: Iterable[ProcessId], set_r: Iterable[ProcessId],
                    true_next: Configuration, space: ConfigSpace, f: int,
                    rng: random.Random, partial: Optional[int] = None) -> Configuration:
    """The adversary's guess of the next configuration.

    With at least ``f + 1`` compromised members of ``S_r`` it can combine
    shares itself. Otherwise it guesses: from ``partial`` (the product of the
    function shares it holds, pushed through the same hash the coin uses) when
    given, else uniformly at random.
    """
    if len(set(compromised) & set(set_r)) >= f + 1:
        return true_next
    if partial is not None:
        return coinmod.config_from_element(partial, space)
    return space[rng.randrange(len(space))]


# -- wire format --------------------------------------------------------------------------------

MSG_TAGS = {Request: 1, Response: 2, Decision: 3, Reconfiguration: 4, PaxosMsg: 5,
            Phase2Msg: 6, Phase3Msg: 7, DecisionNote: 8, DecidedHint: 9}
_HEADER = struct.Struct("<BIII")
_TS = struct.Struct("<Q")


def message_tag(msg) -> int:
    return MSG_TAGS.get(type(msg), 0)


def encode_envelope(tag: int, src: int, dst: int, payload: bytes) -> bytes:
    return _HEADER.pack(tag, src, dst, len(payload)) + payload


def decode_envelope(buf: bytes, offset: int = 0):
    """Returns ``(tag, src, dst, payload, next_offset)``."""
    tag, src, dst, ln = _HEADER.unpack_from(buf, offset)
    start = offset + _HEADER.size
    payload = bytes(buf[start:start + ln])
    if len(payload) != ln:
        raise ValueError("truncated envelope")
    return tag, src, dst, payload, start + ln


def encode_trace_record(at: int, src: int, dst: int, msg) -> bytes:
    return _TS.pack(at) + encode_envelope(message_tag(msg), src, dst, repr(msg).encode())


def decode_trace(buf: bytes) -> list:
    out, off = [], 0
    while off < len(buf):
        (at,) = _TS.unpack_from(buf, off)
        tag, src, dst, payload, off = decode_envelope(buf, off + _TS.size)
        out.append((at, tag, src, dst, payload))
    return out


# -- simulator ------------------------------------------------------------------------------------

@dataclass
class Metrics:
    completed_ops: int = 0
    latencies: list = field(default_factory=list)
    reconfigurations: int = 0
    rounds_per_instance: Counter = field(default_factory=Counter)
    messages_sent: int = 0
    dropped_to_crashed: int = 0
    issued: int = 0
    completed_total: int = 0
    pending_at_end: int = 0
    duration_us: int = 0
    end_time_us: int = 0
    max_rounds: int = 0

    @property
    def throughput(self) -> float:
        return self.completed_ops / (self.duration_us / 1e6) if self.duration_us else 0.0

    @property
    def mean_latency(self) -> float:
        return statistics.fmean(self.latencies) if self.latencies else 0.0

    @property
    def p99_latency(self) -> float:
        if not self.latencies:
            return 0.0
        xs = sorted(self.latencies)
        return float(xs[min(len(xs) - 1, int(0.99 * len(xs)))])


class Simulator:
    def __init__(self, latency: LatencyModel, adversary: Optional[AdversarySpec] = None,
                 service_us: int = 0, record_trace: bool = False, trace_ring: int = 256):
        self.latency = latency
        self.adversary = adversary or AdversarySpec()
        self.service_us = service_us
        self.now = 0
        self.nodes: dict[int, object] = {}
        self.crashed: set = set()
        self.metrics = Metrics()
        self._heap: list = []
        self._seq = 0
        self._free: dict[int, int] = {}
        self._backlog: dict[int, deque] = {}
        self._waking: set = set()
        self.depth: dict[int, int] = {}
        self.record_trace = record_trace
        self.trace: list = []
        self.ring = deque(maxlen=trace_ring)
        self.after_event = None          # callback(nid) run after every handled event
        self.stop = None                 # callback() -> bool checked between events
        for t, pid in self.adversary.crash_schedule:
            self._push(t, CRASH_EVENT, pid, None, None)

    def add_node(self, nid: int, node) -> None:
        self.nodes[nid] = node
        self._free[nid] = 0
        self._backlog[nid] = deque()
        self.depth[nid] = 0

    def _push(self, at: int, kind: int, target: int, src, payload) -> None:
        heapq.heappush(self._heap, (at, self._seq, kind, target, src, payload))
        self._seq += 1

    def start(self, nid: int, at: int = 0) -> None:
        self._push(at, START, nid, None, None)

    def _service(self, nid: int, t: int) -> int:
        if not self.service_us:
            return 0
        adv = self.adversary
        if adv.dos_mode == DOS_SATURATE and adv.dos_schedule and nid in adv.targets_at(t):
            return self.service_us * adv.saturate_factor
        return self.service_us

    def send(self, src: int, dst: int, msg) -> None:
        now = self.now
        self.metrics.messages_sent += 1
        adv = self.adversary
        depart = now
        if self.service_us:
            # each send occupies the sender's single server for one service slot
            depart = max(now, self._free[src]) + self._service(src, now)
            self._free[src] = depart
        at = depart + self.latency.sample()
        if adv.dos_mode == DOS_BLACKOUT and adv.dos_schedule:
            targets = adv.targets_at(now)
            if src in targets or dst in targets:
                end = max(adv.window_end(p, now) for p in (src, dst) if p in targets)
                at = max(at, end + self.latency.sample())
        self._push(at, DELIVER, dst, src, (msg, self.depth[src] + 1))

    def _apply(self, nid: int, actions) -> None:
        for a in actions:
            if type(a) is Send:
                self.send(nid, a.dst, a.msg)
            elif type(a) is SetTimer:
                self._push(self.now + a.delay, TIMER, nid, None, a.key)

    def step(self) -> bool:
        if not self._heap:
            return False
        at, _, kind, nid, src, payload = heapq.heappop(self._heap)
        self.now = at
        if kind == CRASH_EVENT:
            self.crashed.add(nid)
            return True
        if nid in self.crashed:
            if kind == DELIVER:
                self.metrics.dropped_to_crashed += 1
            return True
        node = self.nodes[nid]
        if kind == WAKE:
            if self._free[nid] > at:
                self._push(self._free[nid], WAKE, nid, None, None)
                return True
            self._waking.discard(nid)
            backlog = self._backlog[nid]
            if not backlog:
                return True
            src, payload = backlog.popleft()
            kind = DELIVER
        elif kind == DELIVER and self.service_us:
            # the receiver is a FIFO single server: queue behind earlier work
            if self._free[nid] > at or nid in self._waking:
                self._backlog[nid].append((src, payload))
                if nid not in self._waking:
                    self._waking.add(nid)
                    self._push(self._free[nid], WAKE, nid, None, None)
                return True
        if kind == DELIVER:
            msg, depth = payload
            if self.service_us:
                self._free[nid] = max(self._free[nid], at) + self._service(nid, at)
            if depth > self.depth[nid]:
                self.depth[nid] = depth
            self.ring.append((at, src, nid, msg))
            if self.record_trace:
                self.trace.append(encode_trace_record(at, src, nid, msg))
            self._apply(nid, node.handle(src, msg, at))
            if self._backlog[nid] and nid not in self._waking:
                self._waking.add(nid)
                self._push(max(at, self._free[nid]), WAKE, nid, None, None)
        elif kind == TIMER:
            self._apply(nid, node.on_timer(payload, at))
        elif kind == START:
            self._apply(nid, node.start(at))
        if self.after_event is not None:
            self.after_event(nid)
        return True

    def run(self, until: int) -> None:
        heap = self._heap
        while heap and heap[0][0] <= until:
            self.step()
            if self.stop is not None and self.stop():
                break
        self.now = max(self.now, min(until, heap[0][0]) if heap else until)

    def violation(self, message: str) -> SafetyViolation:
        return SafetyViolation(message, list(self.ring))

    def dump_trace(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(b"".join(self.trace))


# -- SMR harness ----------------------------------------------------------------------------------

class ClientNode:
    def __init__(self, client: Client, request_size: int, rng: random.Random,
                 metrics: Metrics, stop_issuing_at: int):
        self.client = client
        self.request_size = request_size
        self.rng = rng
        self.metrics = metrics
        self.stop_issuing_at = stop_issuing_at
        self.issued: set = set()

    def _issue(self, now: int) -> list:
        cmd = bytes(self.rng.getrandbits(8) for _ in range(self.request_size))
        self.issued.add((self.client.cid, self.client.rsn))
        self.metrics.issued += 1
        return self.client.issue(cmd, now)

    def start(self, now: int) -> list:
        return self._issue(now)

    def handle(self, src, msg, now: int) -> list:
        if not isinstance(msg, Response):
            return []
        lat = self.client.on_response(msg, now)
        if lat is None:
            return []
        self.metrics.completed_total += 1
        # latency counts every issued request, including those that only
        # finish while draining; throughput counts completions inside the run
        self.metrics.latencies.append(lat)
        if now <= self.stop_issuing_at:
            self.metrics.completed_ops += 1
            return self._issue(now)
        return []

    def on_timer(self, key, now: int) -> list:
        return []


class _ParticipantNode:
    """Adapter giving participants the node interface (start hook)."""

    def __init__(self, part: Participant):
        self.p = part

    def start(self, now: int) -> list:
        return []

    def handle(self, src, msg, now):
        return self.p.handle(src, msg, now)

    def on_timer(self, key, now):
        return self.p.on_timer(key, now)


class _ReplicaNode(_ParticipantNode):
    pass


@dataclass
class SmrSetup:
    params: SystemParams
    space: ConfigSpace
    coin_backend: str = "emulated"          # or "threshold"
    coin_seed: int = 0
    emu_sequence: Optional[tuple] = None
    group: GroupParams = DEFAULT_GROUP
    replicas: int = 2
    clients: int = 1
    request_size: int = 100
    duration_us: int = 1_000_000
    drain_us: int = 20_000_000
    W: int = 32
    timeout_base_us: int = 50_000
    patience_us: Optional[int] = None
    latency_base_us: int = 500
    latency_jitter_us: int = 200
    service_us: int = 0
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    seed: int = 0
    round_budget: int = 64


class SmrMonitor:
    """Agreement, validity and replica-convergence checks after every event."""

    def __init__(self, sim: Simulator, parts: dict, replicas: dict, clients: Sequence[ClientNode]):
        self.sim = sim
        self.parts = parts
        self.replicas = replicas
        self.clients = clients
        self.slot_value: dict[int, bytes] = {}
        self.slot_exec: dict[int, tuple] = {}
        self._seen_dec = {pid: 0 for pid in parts}
        self._seen_log = {rid: 0 for rid in replicas}

    def _issued(self, cid: int, rsn: int) -> bool:
        return any((cid, rsn) in c.issued for c in self.clients)

    def __call__(self, nid: int) -> None:
        part = self.parts.get(nid)
        if part is not None:
            dl = part.decision_log
            for iid, value in dl[self._seen_dec[nid]:]:
                prev = self.slot_value.setdefault(iid, value)
                if prev != value:
                    raise self.sim.violation(f"agreement: slot {iid} decided {prev!r} and {value!r}")
                if value != NOOP:
                    try:
                        req = decode_value(value)
                    except DecisionWithoutRequest:
                        raise self.sim.violation(f"validity: slot {iid} holds garbage {value!r}")
                    if not self._issued(req.cid, req.rsn):
                        raise self.sim.violation(f"validity: slot {iid} holds unknown request {req.key}")
            self._seen_dec[nid] = len(dl)
            return
        rep = self.replicas.get(nid)
        if rep is not None:
            for slot, cid, rsn in rep.log[self._seen_log[nid]:]:
                prev = self.slot_exec.setdefault(slot, (cid, rsn))
                if prev != (cid, rsn):
                    raise self.sim.violation(
                        f"replica divergence at slot {slot}: {prev} vs {(cid, rsn)}")
            self._seen_log[nid] = len(rep.log)

    def final_check(self) -> None:
        reps = list(self.replicas.values())
        for a in reps:
            for b in reps:
                n = min(len(a.log), len(b.log))
                if a.log[:n] != b.log[:n]:
                    raise self.sim.violation("replica logs diverge")
                if a.slot == b.slot and a.app_state != b.app_state:
                    raise self.sim.violation("replica states diverge at equal slots")
            keys = [(c, r) for _, c, r in a.log]
            executed = [k for k in keys if k[0] != 0xFFFFFFFF]
            if a.executions != len(set(executed)):
                raise self.sim.violation(f"replica {a.rid}: a request executed twice")


def _initial_config(setup: SmrSetup):
    if setup.coin_backend == "threshold":
        dealer = coinmod.dealer_init(setup.params, setup.space, setup.group, setup.coin_seed)
        return dealer.c0, dealer, None
    coin = EmuCoin(setup.coin_seed, setup.emu_sequence)
    return coinmod.emu_next_config(coin, 0, setup.space), None, coin


def build_smr(setup: SmrSetup, record_trace: bool = False):
    params = setup.params
    params.validate()
    n = params.n
    participants = tuple(range(n))
    replica_ids = tuple(range(n, n + setup.replicas))
    setup.adversary.validate(params, participants)
    rng = random.Random(setup.seed)
    sim = Simulator(LatencyModel(setup.latency_base_us, setup.latency_jitter_us, rng.getrandbits(32)),
                    setup.adversary, setup.service_us, record_trace=record_trace)
    c0, dealer, coin = _initial_config(setup)
    gate = CoinGate()
    mode = BYZANTINE if params.byzantine else CRASH

    def backend_factory(pid):
        if dealer is not None:
            return ThresholdBackend(pid, dealer, setup.space, params.f, mode)
        return EmulatedBackend(pid, coin, setup.space, gate)

    parts = {}
    for pid in participants:
        parts[pid] = Participant(pid, params, c0, backend_factory, replica_ids, participants,
                                 W=setup.W, deadline_base=setup.timeout_base_us,
                                 patience=setup.patience_us)
        sim.add_node(pid, _ParticipantNode(parts[pid]))
    replicas = {}
    for rid in replica_ids:
        replicas[rid] = Replica(rid)
        sim.add_node(rid, _ReplicaNode(replicas[rid]))
    clients = []
    base = n + setup.replicas
    for i in range(setup.clients):
        attached = tuple(sorted(rng.sample(participants, params.f + 1)))
        client = Client(cid=i, attached=attached, node=base + i)
        node = ClientNode(client, setup.request_size, random.Random(rng.getrandbits(32)),
                          sim.metrics, setup.duration_us)
        clients.append(node)
        sim.add_node(base + i, node)
        sim.start(base + i, at=rng.randint(0, 1000))
    monitor = SmrMonitor(sim, parts, replicas, clients)
    sim.after_event = monitor
    return sim, parts, replicas, clients, monitor


def run_smr(setup: SmrSetup, trace_path: Optional[str] = None) -> Metrics:
    sim, parts, replicas, clients, monitor = build_smr(setup, record_trace=trace_path is not None)
    m = sim.metrics
    m.duration_us = setup.duration_us

    def idle() -> bool:
        return sim.now >= setup.duration_us and all(not c.client.pending for c in clients)

    try:
        sim.run(setup.duration_us)
        if not idle():
            sim.stop = idle
            sim.run(setup.duration_us + setup.drain_us)
        monitor.final_check()
    finally:
        if trace_path is not None:
            sim.dump_trace(trace_path)
    m.end_time_us = sim.now
    m.pending_at_end = sum(len(c.client.pending) for c in clients
                           if c.client.node not in sim.crashed)
    m.reconfigurations = max(p.round for p in parts.values())
    m.max_rounds = max((p.stats.max_rounds for p in parts.values()), default=0)
    per_instance: dict = {}
    for p in parts.values():
        for iid, r in p.stats.rounds.items():
            per_instance[iid] = max(per_instance.get(iid, 0), r)
    m.rounds_per_instance = Counter(per_instance.values())
    if m.max_rounds > setup.round_budget:
        raise SafetyViolation(f"an instance needed {m.max_rounds} rounds (budget {setup.round_budget})")
    return m


# -- standalone consensus harness -------------------------------------------------------------------

class _EngineNode:
    def __init__(self, inst: MptcInstance, log: list):
        self.inst = inst
        self.log = log
        self.decide_depth: Optional[int] = None
        self.sim: Optional[Simulator] = None
        self.pid = inst.me

    def _wrap(self, actions) -> list:
        out = []
        for a in actions:
            if isinstance(a, Decide):
                self.log.append((self.pid, a.value, a.round))
                if self.decide_depth is None and self.sim is not None:
                    self.decide_depth = self.sim.depth[self.pid]
            elif isinstance(a, (Send, SetTimer)):
                out.append(a)
        return out

    def start(self, now):
        return self._wrap(self.inst.begin())

    def handle(self, src, msg, now):
        return self._wrap(self.inst.handle(src, msg))

    def on_timer(self, key, now):
        return self._wrap(self.inst.on_timer(key))


class ByzantineNode:
    """A faulty member: silent in Phase 1, equivocating in Phases 2 and 3.

    It sends each recipient a different outcome, mixes corrupted function
    shares with valid ones, proposes wrong next configurations and forges
    decision notes for values nobody proposed.
    """

    EVIL = (b"evil-a", b"evil-b")

    def __init__(self, pid: ProcessId, params: SystemParams, space: ConfigSpace, dealer,
                 rng: random.Random, universe: Sequence[ProcessId], instance: int = 0):
        self.pid = pid
        self.params = params
        self.space = space
        self.dealer = dealer
        self.rng = rng
        self.universe = tuple(universe)
        self.instance = instance
        self.acted: set = set()
        self.forgeries = 0

    def start(self, now):
        note = DecisionNote(self.instance, self.pid, self.EVIL[0])
        return [Send(p, note) for p in self.universe if p != self.pid]

    def _outcome(self, seen: Sequence[bytes]) -> Outcome:
        pool = list(self.EVIL) + list(seen)
        tag = self.rng.choice([OutcomeTag.D, OutcomeTag.M, OutcomeTag.U, OutcomeTag.UNKNOWN])
        if tag is OutcomeTag.UNKNOWN:
            return Outcome.unknown()
        return Outcome(tag, self.rng.choice(pool))

    def _share(self, config: Configuration, round_: int) -> Optional[FunctionShare]:
        sh = self.dealer.share_for(self.pid, config.participants.set_index)
        if sh is None:
            return None
        good = coinmod.gfs(sh, round_, self.dealer.group, BYZANTINE)
        kind = self.rng.randrange(4)
        if kind == 0:
            return good
        self.forgeries += 1
        p = self.dealer.group.p
        if kind == 1:
            return FunctionShare(good.owner, good.set_index, round_,
                                 pow(good.sigma, 2, p), good.dleq_proof)
        if kind == 2:
            c, z = good.dleq_proof
            return FunctionShare(good.owner, good.set_index, round_, good.sigma,
                                 (c, (z + 1) % self.dealer.group.q))
        return FunctionShare(good.owner, good.set_index, round_, self.rng.randrange(2, p), None)

    def handle(self, src, msg, now):
        if not isinstance(msg, (Phase2Msg, Phase3Msg, PaxosMsg)):
            return []
        key = (type(msg).__name__, msg.round)
        if key in self.acted:
            return []
        self.acted.add(key)
        out = []
        seen = [msg.value] if isinstance(msg, PaxosMsg) else (
            [] if msg.outcome.is_unknown else [msg.outcome.value])
        if isinstance(msg, Phase2Msg):
            members = [p for p in self.universe]
            cfg = self._config_of(msg)
            if cfg is None:
                return []
            for p in cfg.members:
                if p == self.pid:
                    continue
                m = Phase2Msg(self.instance, self.pid, msg.round, self._outcome(seen),
                              self._share(cfg, msg.round))
                out.append(Send(p, m))
            # Phase 3 towards a random next set, with a wrong configuration
            wrong = self.space[self.rng.randrange(len(self.space))]
            for p in members:
                if p != self.pid:
                    out.append(Send(p, Phase3Msg(self.instance, self.pid, msg.round,
                                                 self._outcome(seen), wrong)))
        return out

    def _config_of(self, msg: Phase2Msg) -> Optional[Configuration]:
        if msg.fshare is None:
            return None
        for c in self.space:
            if c.participants.set_index == msg.fshare.set_index:
                return c
        return None

    def on_timer(self, key, now):
        return []


@dataclass
class ConsensusResult:
    decisions: dict
    decide_round: dict
    rounds: dict
    decide_depth: dict
    halted: dict
    messages: int
    end_time_us: int
    forgeries: int = 0


def run_consensus(params: SystemParams, space: ConfigSpace, inputs: dict, *,
                  coin_backend: str = "threshold", seed: int = 0,
                  adversary: Optional[AdversarySpec] = None,
                  byzantine: Sequence[ProcessId] = (), c0: Optional[Configuration] = None,
                  group: GroupParams = DEFAULT_GROUP, emu_sequence: Optional[tuple] = None,
                  latency_base_us: int = 500, latency_jitter_us: int = 200,
                  timeout_base_us: int = 20_000, round_budget: int = 64,
                  max_time_us: int = 60_000_000) -> ConsensusResult:
    """One MPTC instance on every process in ``range(params.n)``."""
    params.validate()
    adversary = adversary or AdversarySpec()
    adversary.validate(params, range(params.n))
    rng = random.Random(seed)
    sim = Simulator(LatencyModel(latency_base_us, latency_jitter_us, rng.getrandbits(32)), adversary)
    mode = BYZANTINE if params.byzantine else CRASH
    dealer = coin = None
    if coin_backend == "threshold":
        dealer = coinmod.dealer_init(params, space, group, rng.getrandbits(32))
        start_cfg = c0 or dealer.c0
    else:
        coin = EmuCoin(seed, emu_sequence)
        start_cfg = c0 or coinmod.emu_next_config(coin, 0, space)
    gate = CoinGate()
    log: list = []
    nodes: dict = {}
    universe = tuple(range(params.n))
    for pid in universe:
        if pid in byzantine:
            node = ByzantineNode(pid, params, space, dealer, random.Random(rng.getrandbits(32)),
                                 universe)
        else:
            backend = (ThresholdBackend(pid, dealer, space, params.f, mode) if dealer
                       else EmulatedBackend(pid, coin, space, gate))
            inst = MptcInstance(pid, 0, inputs[pid], start_cfg, params, backend,
                                deadline_base=timeout_base_us, universe=universe)
            node = _EngineNode(inst, log)
            node.sim = sim
        nodes[pid] = node
        sim.add_node(pid, node)
        sim.start(pid)
    honest = [p for p in universe if p not in byzantine]
    seen = 0
    values: dict = {}
    input_values = set(inputs.values()) | set(ByzantineNode.EVIL if byzantine else ())

    def check(nid):
        nonlocal seen
        for pid, value, _ in log[seen:]:
            values.setdefault(value, set()).add(pid)
            if len(values) > 1:
                raise sim.violation(f"agreement: decisions {sorted(values)}")
            if value not in input_values:
                raise sim.violation(f"validity: {value!r} was never proposed")
        seen = len(log)
        node = nodes[nid]
        if isinstance(node, _EngineNode) and node.inst.r > round_budget:
            raise sim.violation(f"process {nid} exceeded the {round_budget}-round budget")

    def done() -> bool:
        crashed = sim.crashed
        return all(nodes[p].inst.phase == HALTED or p in crashed for p in honest)

    sim.after_event = check
    sim.stop = done
    sim.run(max_time_us)
    decisions = {pid: v for pid, v, _ in log}
    decide_round = {pid: r for pid, _, r in log}
    forgeries = sum(n.forgeries for n in nodes.values() if isinstance(n, ByzantineNode))
    return ConsensusResult(
        decisions=decisions, decide_round=decide_round,
        rounds={p: nodes[p].inst.r for p in honest},
        decide_depth={p: nodes[p].decide_depth for p in honest},
        halted={p: nodes[p].inst.phase == HALTED for p in honest},
        messages=sim.metrics.messages_sent, end_time_us=sim.now, forgeries=forgeries)


# -- randomized safety fuzzing ------------------------------------------------------------------------

def fuzz_setup(seed: int, *, n: int = 6, p_f: int = 3, duration_us: int = 300_000) -> SmrSetup:
    """A random crash-mode SMR run with ``f = 1``: either one crash or one DoS
    target, random configuration space, jitter, load and coin backend.

    Every attack stops by 80% of ``duration_us`` so the run must also drain.
    """
    rng = random.Random(seed)
    crash = rng.random() < 0.5
    params = SystemParams(n=n, f_c=1 if crash else 0, f_a=0 if crash else 1, p_f=p_f)
    sets = rng.sample(list(itertools.combinations(range(n), p_f)), rng.randint(2, 4))
    space = ConfigSpace(tuple(Configuration(ProtocolSpec(), ParticipantSet.of(s, n)) for s in sets))
    stop = int(duration_us * 0.8)
    victim = rng.randrange(n)
    if crash:
        adv = AdversarySpec(crash_schedule=((rng.randint(0, stop), victim),))
    else:
        windows = []
        t = rng.randint(0, stop // 2)
        while t < stop:
            end = min(stop, t + rng.randint(5_000, 80_000))
            windows.append(DosWindow(t, end, frozenset({rng.randrange(n)})))
            t = end + rng.randint(1_000, 40_000)
        adv = AdversarySpec(dos_schedule=tuple(windows), dos_mode=DOS_BLACKOUT)
    return SmrSetup(params=params, space=space,
                    coin_backend="threshold" if rng.random() < 0.25 else "emulated",
                    coin_seed=rng.getrandbits(32), clients=rng.randint(1, 4),
                    request_size=rng.choice((8, 100)), duration_us=duration_us,
                    W=rng.choice((1, 4, 8)), timeout_base_us=rng.choice((5_000, 20_000)),
                    latency_base_us=rng.randint(100, 800), latency_jitter_us=rng.randint(0, 2_000),
                    service_us=rng.choice((0, 0, 50)), adversary=adv, seed=rng.getrandbits(32))

