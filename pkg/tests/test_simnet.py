import random

import pytest

from mptc.core import (ConfigSpace, Configuration, InvalidParams, ParticipantSet, ProtocolSpec,
                       SystemParams)
from mptc.engine import Send
from mptc.simnet import (DOS_SATURATE, AdversarySpec, CoinGate, CoinVisibilityError,
                         DosWindow, LatencyModel, SafetyViolation, Simulator, SmrSetup,
                         adversary_probe, build_smr, coin_visibility, decode_envelope,
                         decode_trace, encode_envelope, fuzz_setup, run_consensus, run_smr)
from mptc.smr import NOOP, Request, encode_value

PARAMS = SystemParams(6, 0, 1, 3)


def cfg(members, n=6, **kw):
    return Configuration(ProtocolSpec(init_params=tuple(kw.items())), ParticipantSet.of(members, n))


SPACE = ConfigSpace((cfg((0, 1, 2)), cfg((3, 4, 5))))


class Sink:
    def __init__(self):
        self.got = []

    def start(self, now):
        return []

    def handle(self, src, msg, now):
        self.got.append((now, src, msg))
        return []

    def on_timer(self, key, now):
        return []


class Sender(Sink):
    def __init__(self, dst, msg):
        super().__init__()
        self.dst, self.msg = dst, msg

    def start(self, now):
        return [Send(self.dst, self.msg)]


def two_nodes(adversary=None, base=1000, jitter=0, start=0, service_us=0):
    sim = Simulator(LatencyModel(base, jitter), adversary, service_us=service_us)
    sink = Sink()
    sim.add_node(0, Sender(1, "hi"))
    sim.add_node(1, sink)
    sim.start(0, at=start)
    return sim, sink


def test_plain_delivery_after_base_latency():
    sim, sink = two_nodes()
    sim.run(10_000)
    assert sink.got == [(1000, 0, "hi")]


def test_jitter_within_bounds_and_seeded():
    a = LatencyModel(500, 200, seed=3)
    b = LatencyModel(500, 200, seed=3)
    xs = [a.sample() for _ in range(200)]
    assert xs == [b.sample() for _ in range(200)]
    assert min(xs) >= 500 and max(xs) <= 700


def test_blackout_defers_to_window_end():
    adv = AdversarySpec(dos_schedule=(DosWindow(0, 5_000_000, frozenset({1})),))
    sim, sink = two_nodes(adv, start=1_000_000)
    sim.run(10_000_000)
    assert sink.got[0][0] >= 5_000_000


def test_chained_windows_extend_deferral():
    adv = AdversarySpec(dos_schedule=(DosWindow(0, 100, frozenset({1})),
                                      DosWindow(50, 300, frozenset({1}))))
    assert adv.window_end(1, 10) == 300


def test_saturation_slows_target():
    adv = AdversarySpec(dos_schedule=(DosWindow(0, 10**9, frozenset({0})),),
                        dos_mode=DOS_SATURATE, saturate_factor=100)
    sim, sink = two_nodes(adv, service_us=10)
    sim.run(10_000_000)
    # the sender pays 100x its service slot before the message leaves
    assert sink.got[0][0] == 10 * 100 + 1000


def test_message_to_crashed_node_dropped():
    adv = AdversarySpec(crash_schedule=((0, 1),))
    sim, sink = two_nodes(adv, start=10)
    sim.run(10_000)
    assert sink.got == [] and sim.metrics.dropped_to_crashed == 1


def test_crashed_node_emits_nothing():
    params = SystemParams(6, 1, 0, 3)
    adv = AdversarySpec(crash_schedule=((2_000_000, 3),))
    adv.validate(params, range(6))
    sim = Simulator(LatencyModel(1000, 0), adv)
    sink = Sink()
    sim.add_node(3, Sender(1, "late"))
    sim.add_node(1, sink)
    sim.start(3, at=2_500_000)
    sim.run(10**7)
    assert sink.got == []


def test_adversary_bounds_rejected():
    two_targets = AdversarySpec(dos_schedule=(DosWindow(0, 100, frozenset({0})),
                                              DosWindow(50, 150, frozenset({1}))))
    with pytest.raises(InvalidParams, match="f_a"):
        two_targets.validate(PARAMS, range(6))
    with pytest.raises(InvalidParams, match="f_c"):
        AdversarySpec(crash_schedule=((0, 1),)).validate(PARAMS, range(6))
    with pytest.raises(InvalidParams, match="non-process"):
        AdversarySpec(dos_schedule=(DosWindow(0, 1, frozenset({9})),)).validate(PARAMS, range(6))
    # back-to-back windows on different targets are fine
    AdversarySpec(dos_schedule=(DosWindow(0, 100, frozenset({0})),
                                DosWindow(100, 200, frozenset({1})))).validate(PARAMS, range(6))


def test_coin_visibility():
    assert coin_visibility(1, (0, 1, 2), (3, 4, 5), has_quorum=True)
    assert coin_visibility(4, (0, 1, 2), (3, 4, 5), has_quorum=True)
    assert not coin_visibility(1, (0, 1, 2), (3, 4, 5), has_quorum=False)
    assert not coin_visibility(7, (0, 1, 2), (3, 4, 5), has_quorum=True)
    gate = CoinGate()
    with pytest.raises(CoinVisibilityError):
        gate.release(7, 0, SPACE[0], SPACE[1], True)


def test_probe_with_enough_compromised_knows_next():
    rng = random.Random(0)
    assert adversary_probe({0, 1}, (0, 1, 2), SPACE[1], SPACE, 1, rng) == SPACE[1]


def test_envelope_roundtrip():
    buf = encode_envelope(5, 1, 2, b"abc") + encode_envelope(1, 3, 4, b"")
    tag, src, dst, payload, off = decode_envelope(buf)
    assert (tag, src, dst, payload) == (5, 1, 2, b"abc")
    assert decode_envelope(buf, off)[:4] == (1, 3, 4, b"")
    with pytest.raises(ValueError):
        decode_envelope(encode_envelope(5, 1, 2, b"abc")[:-1])


def small_setup(**kw):
    base = dict(params=PARAMS, space=SPACE, emu_sequence=(0, 1), clients=2,
                duration_us=200_000, timeout_base_us=20_000, seed=42)
    base.update(kw)
    return SmrSetup(**base)


def test_same_seed_same_metrics():
    a = run_smr(small_setup())
    b = run_smr(small_setup())
    assert a == b and a.completed_ops > 0


def test_trace_file_decodes(tmp_path):
    path = tmp_path / "t.bin"
    run_smr(small_setup(duration_us=20_000), trace_path=str(path))
    recs = decode_trace(path.read_bytes())
    assert recs and recs[0][1] == 1            # first delivery is a client REQUEST
    assert all(recs[i][0] <= recs[i + 1][0] for i in range(len(recs) - 1))


def test_agreement_monitor_aborts_with_trace():
    sim, parts, replicas, clients, monitor = build_smr(small_setup())
    sim.run(5_000)
    parts[0].decision_log.append((99, NOOP))
    parts[1].decision_log.append((99, encode_value(Request(0, 0, b"x"))))
    monitor(0)
    with pytest.raises(SafetyViolation, match="agreement") as exc:
        monitor(1)
    assert exc.value.trace


def test_validity_monitor_rejects_unissued_value():
    sim, parts, replicas, clients, monitor = build_smr(small_setup())
    parts[0].decision_log.append((0, encode_value(Request(77, 5, b"forged"))))
    with pytest.raises(SafetyViolation, match="validity"):
        monitor(0)
    parts[1].decision_log.append((1, b"junk"))
    with pytest.raises(SafetyViolation, match="validity"):
        monitor(1)


def test_replica_divergence_detected():
    sim, parts, replicas, clients, monitor = build_smr(small_setup())
    r6, r7 = replicas[6], replicas[7]
    r6.log.append((0, 1, 0))
    r7.log.append((0, 2, 0))
    monitor(6)
    with pytest.raises(SafetyViolation, match="divergence"):
        monitor(7)


def test_static_leader_attack_scenario_shape():
    attack = AdversarySpec(dos_schedule=(DosWindow(0, 300_000, frozenset({0})),),
                           dos_mode=DOS_SATURATE, saturate_factor=100)
    static = ConfigSpace((cfg((0, 1, 2), leader=0),))
    kw = dict(clients=8, duration_us=300_000, service_us=100, W=8, timeout_base_us=50_000)
    base = run_smr(small_setup(**kw))
    hit = run_smr(small_setup(space=static, emu_sequence=(0,), adversary=attack,
                              **dict(kw, timeout_base_us=60_000_000)))
    moved = run_smr(small_setup(adversary=attack, **kw))
    assert hit.throughput < 0.5 * base.throughput
    assert moved.throughput > 0.5 * base.throughput and moved.reconfigurations >= 1


def test_fuzz_setup_valid_and_varied():
    setups = [fuzz_setup(s) for s in range(20)]
    for st in setups:
        st.adversary.validate(st.params, range(st.params.n))
    assert {st.params.f_c for st in setups} == {0, 1}
    assert {st.coin_backend for st in setups} == {"emulated", "threshold"}


def test_consensus_failure_free_single_round():
    inputs = {p: bytes([p]) for p in range(6)}
    res = run_consensus(SystemParams(6, 1, 0, 3), SPACE, inputs, c0=SPACE[0], seed=4)
    assert len(set(res.decisions.values())) == 1
    assert res.decide_depth[0] == 2
    assert all(res.halted.values())
