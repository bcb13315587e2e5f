from collections import deque

import pytest

from mptc.coin import BYZANTINE, DEFAULT_GROUP, EmuCoin, dealer_init, gfs
from mptc.core import (ConfigSpace, Configuration, Outcome, OutcomeTag, ParticipantSet,
                       ProtocolSpec, SystemParams)
from mptc.engine import (AWAIT3, HALTED, IDLE, P2, AgreementViolation, ConfigShareMissing,
                         Decide, DecisionNote, EmulatedBackend, MptcInstance, Phase2Msg,
                         Phase3Msg, RoundDone, Send, SetTimer, ThresholdBackend, phase3_select)
from mptc.paxos import PaxosMsg, PROPOSE

D, M, U = OutcomeTag.D, OutcomeTag.M, OutcomeTag.U
UNK = Outcome.unknown()


def cfg(members, n, **params):
    return Configuration(ProtocolSpec(init_params=tuple(params.items())),
                         ParticipantSet.of(members, n))


def emu_instance(me, proposal=b"x", members=(0, 1, 2), n=3, seq=(0,), **kw):
    space = ConfigSpace((cfg(members, n),))
    params = SystemParams(n, 1, 0, len(members))
    backend = EmulatedBackend(me, EmuCoin(0, seq), space)
    return MptcInstance(me, 0, proposal, space[0], params, backend, **kw)


class Driver:
    """FIFO network; pending timers fire (oldest first) only when it drains."""

    def __init__(self, insts, drop=lambda src, dst, msg: False):
        self.insts = insts
        self.q = deque()
        self.timers = deque()
        self.decisions = {}
        self.rounds = []
        self.drop = drop

    def apply(self, pid, actions):
        for a in actions:
            if isinstance(a, Send):
                if not self.drop(pid, a.dst, a.msg):
                    self.q.append((pid, a.dst, a.msg))
            elif isinstance(a, SetTimer):
                self.timers.append((pid, a.key))
            elif isinstance(a, Decide):
                self.decisions.setdefault(pid, []).append(a.value)
            elif isinstance(a, RoundDone):
                self.rounds.append((pid, a.round, a.outcome))

    def run(self, limit=100_000):
        for pid, inst in self.insts.items():
            self.apply(pid, inst.begin())
        steps = 0
        while (self.q or self.timers) and steps < limit:
            steps += 1
            if self.q:
                src, dst, msg = self.q.popleft()
                if dst in self.insts:
                    self.apply(dst, self.insts[dst].handle(src, msg))
            else:
                pid, key = self.timers.popleft()
                self.apply(pid, self.insts[pid].on_timer(key))
        return self


# -- start_round / phase 1 --------------------------------------------------

def test_leader_decision_still_runs_phase2():
    a = emu_instance(0, b"v")
    out = a.begin()
    assert any(isinstance(x, SetTimer) for x in out)
    # leader proposes to itself and accepts
    a.handle(0, PaxosMsg(PROPOSE, 0, 0, b"v"))
    a.handle(1, PaxosMsg("ACCEPTED", 0, 0, b"v"))
    assert not a.decided  # quorum 2 counts distinct acceptors
    out = a.handle(0, PaxosMsg("ACCEPTED", 0, 0, b"v"))
    assert a.decided and a.proposal == b"v" and a.o == Outcome(D, b"v")
    assert any(isinstance(x, Decide) for x in out)
    assert any(isinstance(x, Send) and isinstance(x.msg, Phase2Msg) for x in out)
    assert a.phase == P2


def test_acceptor_m_outcome_adopts_value():
    b = emu_instance(1, b"mine")
    b.begin()
    b.handle(0, PaxosMsg(PROPOSE, 0, 0, b"theirs"))
    assert b.o == Outcome(M, b"theirs") and b.proposal == b"theirs"
    assert not b.decided and b.phase == P2


def test_unknown_after_timeout_keeps_proposal():
    b = emu_instance(1, b"mine")
    b.begin()
    b.on_timer((0, 0))
    assert b.o.is_unknown and b.proposal == b"mine" and b.phase == P2


# -- phase 2 ----------------------------------------------------------------

def test_quorum_threshold_examples():
    assert SystemParams(3, 1, 0, 3).quorum == 2
    assert SystemParams(4, 1, 0, 4, byzantine=True).quorum == 3


def _in_phase2(me, o, proposal, members=(0, 1, 2), n=3):
    inst = emu_instance(me, proposal, members=members, n=n)
    inst.begin()
    inst.timer_expired = True
    inst.phase = P2
    inst.o = o
    return inst


def test_resolve_u_adopts_lowest_sender_value():
    # hand trace: p2 holds (U, a); p0 sent (M, b), p1 sent (U, c)
    p = _in_phase2(2, Outcome(U, b"a"), b"a")
    p.handle(0, Phase2Msg(0, 0, 0, Outcome(M, b"b"), None))
    out = p.handle(1, Phase2Msg(0, 1, 0, Outcome(U, b"c"), None))
    assert p.proposal == b"b"
    done = [x for x in out if isinstance(x, RoundDone)]
    assert done and done[0].outcome == Outcome(U, b"b")


def test_resolve_unknown_forced_by_m():
    p = _in_phase2(2, UNK, b"own")
    p.handle(2, Phase2Msg(0, 2, 0, UNK, None))
    p.handle(1, Phase2Msg(0, 1, 0, Outcome(M, b"v"), None))
    assert p.proposal == b"v"
    assert p.r == 1  # auto handoff advanced the round


def test_resolve_all_unknown_gives_u_own():
    p = _in_phase2(2, UNK, b"own")
    p.handle(2, Phase2Msg(0, 2, 0, UNK, None))
    out = p.handle(1, Phase2Msg(0, 1, 0, UNK, None))
    done = [x for x in out if isinstance(x, RoundDone)]
    assert done[0].outcome == Outcome(U, b"own")


def test_phase2_learns_decision_in_crash_mode():
    p = _in_phase2(2, Outcome(M, b"v"), b"v")
    p.handle(2, Phase2Msg(0, 2, 0, Outcome(M, b"v"), None))
    assert not p.decided
    p.handle(0, Phase2Msg(0, 0, 0, Outcome(D, b"v"), None))
    assert p.decided and p.proposal == b"v"


def test_non_leader_waits_for_leader_message_until_timer():
    p = emu_instance(2, b"own")
    p.begin()
    p.handle(1, PaxosMsg(PROPOSE, 0, 0, b"z"))  # not from leader: ignored
    p.phase, p.o = P2, UNK
    p.handle(2, Phase2Msg(0, 2, 0, UNK, None))
    p.handle(1, Phase2Msg(0, 1, 0, UNK, None))
    assert p.phase == P2  # quorum present, leader (p0) still silent
    p.on_timer((0, 0))
    assert p.r == 1


def test_missing_share_raises():
    space = ConfigSpace((cfg((0, 1, 2), 4),))
    params = SystemParams(4, 1, 0, 3)
    dealer = dealer_init(params, space, DEFAULT_GROUP, seed=1)
    inst = MptcInstance(3, 0, b"x", space[0], params, ThresholdBackend(3, dealer, space, 1))
    with pytest.raises(ConfigShareMissing):
        inst.backend.share(space[0], 0)


def test_byzantine_phase2_counts_only_verified_shares():
    space = ConfigSpace((cfg((0, 1, 2, 3), 4),))
    params = SystemParams(4, 1, 0, 4, byzantine=True)
    dealer = dealer_init(params, space, DEFAULT_GROUP, seed=2)
    be = ThresholdBackend(0, dealer, space, 1, BYZANTINE)
    good = gfs(dealer.share_for(1, space[0].participants.set_index), 0, DEFAULT_GROUP, BYZANTINE)
    assert be.valid(1, space[0], 0, good)
    bad = type(good)(good.owner, good.set_index, 0, good.sigma * 4 % DEFAULT_GROUP.p,
                     good.dleq_proof)
    assert not be.valid(1, space[0], 0, bad)
    assert not be.valid(2, space[0], 0, good)  # wrong claimed owner


# -- phase 3 ----------------------------------------------------------------

def test_phase3_select_examples():
    v, u = b"v", b"u"
    assert phase3_select([(0, Outcome(D, v)), (1, Outcome(M, v))], 1) == (True, v)
    assert phase3_select([(0, Outcome(M, v)), (1, Outcome(M, v))], 1) == (False, v)
    assert phase3_select([(2, Outcome(U, u)), (1, Outcome(M, v))], 1) == (False, v)
    byz = [(0, Outcome(D, v)), (1, Outcome(D, v)), (2, Outcome(M, u))]
    assert phase3_select(byz, 1, byzantine=True) == (True, v)
    # one D is not enough under byzantine faults, but D+M for v backs v
    byz = [(0, Outcome(D, v)), (1, Outcome(M, v)), (2, Outcome(M, u))]
    assert phase3_select(byz, 1, byzantine=True) == (False, v)
    # no backing: most frequent, then smallest bytes
    byz = [(0, Outcome(U, b"b")), (1, Outcome(U, b"a")), (2, Outcome(U, b"c"))]
    assert phase3_select(byz, 1, byzantine=True) == (False, b"a")


def test_handoff_to_disjoint_set_and_receive():
    space = ConfigSpace((cfg((0, 1, 2), 6), cfg((3, 4, 5), 6)))
    params = SystemParams(6, 1, 0, 3)
    insts = {p: MptcInstance(p, 0, b"in%d" % p, space[0], params,
                             EmulatedBackend(p, EmuCoin(0, (0, 1)), space))
             for p in range(6)}
    # the first set never reaches consensus: drop every phase 1 message
    drv = Driver(insts, drop=lambda s, d, m: isinstance(m, PaxosMsg) and m.round == 0)
    drv.run()
    crossing = [x for x in drv.rounds if x[1] == 0]
    assert len(crossing) == 3
    assert all(insts[p].r >= 1 for p in range(6))
    # set 2 ran round 1 and decided
    assert set(drv.decisions) == set(range(6))
    assert len({v[0] for v in drv.decisions.values()}) == 1


def test_decided_sender_keeps_d_outcome_in_phase3():
    p = _in_phase2(2, Outcome(D, b"v"), b"v")
    p.decided = True
    out = p.handle(0, Phase2Msg(0, 0, 0, Outcome(D, b"v"), None))
    out += p.handle(1, Phase2Msg(0, 1, 0, Outcome(M, b"v"), None))
    p3 = [x.msg for x in out if isinstance(x, Send) and isinstance(x.msg, Phase3Msg)]
    assert p3 and all(m.outcome == Outcome(D, b"v") for m in p3)


def test_idle_process_buffers_then_joins():
    space = ConfigSpace((cfg((0, 1, 2), 4), cfg((1, 2, 3), 4)))
    params = SystemParams(4, 1, 0, 3)
    q = MptcInstance(3, 0, b"q", space[0], params, EmulatedBackend(3, EmuCoin(0, (0, 1)), space))
    assert q.begin() == [] and q.phase == IDLE
    q.handle(0, Phase3Msg(0, 0, 0, Outcome(M, b"v"), space[1]))
    assert q.r == 0
    out = q.handle(1, Phase3Msg(0, 1, 0, Outcome(M, b"v"), space[1]))
    assert q.r == 1 and q.proposal == b"v" and q.phase == "phase1"
    assert any(isinstance(x, SetTimer) for x in out)


# -- decision notes / dispatch ----------------------------------------------

def test_failure_free_everyone_decides_leader_input():
    insts = {p: emu_instance(p, b"in%d" % p) for p in range(3)}
    drv = Driver(insts).run()
    assert drv.decisions == {0: [b"in0"], 1: [b"in0"], 2: [b"in0"]}
    assert all(i.phase == HALTED for i in insts.values())


def test_decision_notes_idempotent_and_conflict_detected():
    p = emu_instance(1)
    p.begin()
    out = p.handle(0, DecisionNote(0, 0, b"v"))
    assert p.decided and any(isinstance(x, Decide) for x in out)
    assert p.handle(2, DecisionNote(0, 2, b"v")) == []
    with pytest.raises(AgreementViolation):
        p.handle(2, DecisionNote(0, 2, b"w"))


def test_dispatch_old_future_current():
    p = emu_instance(1)
    p.r = 5
    p.phase = AWAIT3
    p.handle(0, PaxosMsg(PROPOSE, 0, 2, b"a"))
    assert p.dropped == 1
    p.handle(0, PaxosMsg(PROPOSE, 0, 7, b"a"))
    assert len(p.future_buffer[7]) == 1
    # advancing to round 7 replays the buffered message
    p.r, p.phase = 7, AWAIT3
    p._replay()
    assert not p.future_buffer.get(7)
    assert [m.round for _, m in p.pending_p1] == [7]


def test_malformed_dropped_and_counted():
    p = emu_instance(1)
    p.begin()
    p.handle(0, "garbage")
    p.handle(0, Phase2Msg(0, 2, 0, UNK, None))  # sender mismatch
    assert p.malformed == 2


def test_byzantine_unanimity_with_silent_leader():
    space = ConfigSpace((cfg((0, 1, 2, 3), 4),))
    params = SystemParams(4, 1, 0, 4, byzantine=True)
    dealer = dealer_init(params, space, DEFAULT_GROUP, seed=3)
    insts = {p: MptcInstance(p, 0, b"same", space[0], params,
                             ThresholdBackend(p, dealer, space, 1, BYZANTINE))
             for p in (1, 2, 3)}  # p0 (round-0 leader) is silent
    drv = Driver(insts).run()
    assert set(drv.decisions) == {1, 2, 3}
    assert all(v == [b"same"] for v in drv.decisions.values())
