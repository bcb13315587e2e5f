"""Scenario runner: JSON scenario files in, CSV metrics and plot data out.

Scenario schema (all times in microseconds unless the key says otherwise)::

    {
      "name": "no-attack",
      "mode": "crash" | "byzantine",
      "n": 6, "f_c": 0, "f_a": 1, "p_f": 3,
      "coin": {"backend": "emulated", "seed": 0, "sequence": [0, 1]}
            | {"backend": "threshold", "seed": 0, "group": "default" | {"p": .., "q": .., "g": ..}},
      "config_space": [{"members": [0, 1, 2], "leader": 0}, ...],   # "leader" optional
      "replicas": 2,
      "clients": [1, 2, 4] | 8,
      "request_size": 100,
      "duration_s": 3.0,
      "W": 8,
      "timeout_base_us": 50000,
      "patience_us": null,
      "latency": {"base_us": 500, "jitter_us": 200, "service_us": 100},
      "adversary": {
        "crash": [[time_us, pid], ...],
        "dos": [{"from_us": 0, "to_us": null, "targets": [0]}],      # null = end of run
        "dos_mode": "saturate" | "blackout",
        "saturate_factor": 100,
        "compromised": []
      },
      "seed": 0
    }
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional, Sequence

from .coin import DEFAULT_GROUP, GroupParams
from .core import (ConfigSpace, Configuration, InvalidParams, ParticipantSet, ProtocolSpec,
                   SystemParams)
from .simnet import AdversarySpec, DosWindow, SafetyViolation, SmrSetup, run_smr

log = logging.getLogger(__name__)

CSV_HEADER = ("scenario", "clients", "throughput_ops_s", "mean_latency_us", "p99_latency_us",
              "reconfigs", "seed")
BUILTINS = ("no-attack", "attack-leader-reconfig", "attack-leader-static")


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    clients: int
    throughput_ops_s: float
    mean_latency_us: float
    p99_latency_us: float
    reconfigs: int
    seed: int

    def cells(self) -> list[str]:
        return [self.scenario, str(self.clients), f"{self.throughput_ops_s:.3f}",
                f"{self.mean_latency_us:.1f}", f"{self.p99_latency_us:.1f}",
                str(self.reconfigs), str(self.seed)]


@dataclass
class ScenarioConfig:
    name: str
    params: SystemParams
    space: ConfigSpace
    coin_backend: str
    coin_seed: int
    emu_sequence: Optional[tuple]
    group: GroupParams
    replicas: int
    clients: tuple
    request_size: int
    duration_us: int
    W: int
    timeout_base_us: int
    patience_us: Optional[int]
    latency_base_us: int
    latency_jitter_us: int
    service_us: int
    adversary: AdversarySpec
    seed: int

    def setup(self, clients: int, seed: int) -> SmrSetup:
        return SmrSetup(params=self.params, space=self.space, coin_backend=self.coin_backend,
                        coin_seed=self.coin_seed, emu_sequence=self.emu_sequence,
                        group=self.group, replicas=self.replicas, clients=clients,
                        request_size=self.request_size, duration_us=self.duration_us,
                        W=self.W, timeout_base_us=self.timeout_base_us,
                        patience_us=self.patience_us, latency_base_us=self.latency_base_us,
                        latency_jitter_us=self.latency_jitter_us, service_us=self.service_us,
                        adversary=self.adversary, seed=seed)


def _require(d: dict, key: str):
    if key not in d:
        raise InvalidParams(f"scenario is missing required key {key!r}")
    return d[key]


def parse_scenario(data: dict, overrides: Optional[dict] = None) -> ScenarioConfig:
    """Build and validate a scenario; ``overrides`` replaces top-level keys."""
    data = dict(data)
    data.update(overrides or {})
    mode = data.get("mode", "crash")
    if mode not in ("crash", "byzantine"):
        raise InvalidParams(f"mode must be crash or byzantine, got {mode!r}")
    params = SystemParams(n=_require(data, "n"), f_c=_require(data, "f_c"),
                          f_a=_require(data, "f_a"), p_f=_require(data, "p_f"),
                          byzantine=mode == "byzantine")
    params.validate()
    configs = []
    for entry in _require(data, "config_space"):
        members = tuple(entry["members"])
        if len(members) != params.p_f:
            raise InvalidParams(f"participant set {members} does not have p_f = {params.p_f} members")
        if any(not 0 <= m < params.n for m in members) or len(set(members)) != len(members):
            raise InvalidParams(f"participant set {members} is not a subset of 0..{params.n - 1}")
        init = (("leader", entry["leader"]),) if "leader" in entry else ()
        if init and entry["leader"] not in members:
            raise InvalidParams(f"fixed leader {entry['leader']} is not in {members}")
        configs.append(Configuration(ProtocolSpec(init_params=init),
                                     ParticipantSet.of(members, params.n)))
    space = ConfigSpace(tuple(configs))
    coin = data.get("coin", {"backend": "emulated", "seed": 0})
    backend = coin.get("backend", "emulated")
    if backend not in ("emulated", "threshold"):
        raise InvalidParams(f"coin backend must be emulated or threshold, got {backend!r}")
    seq = coin.get("sequence")
    if seq is not None and any(not 0 <= i < len(space) for i in seq):
        raise InvalidParams("coin sequence indexes outside the configuration space")
    group = DEFAULT_GROUP
    if isinstance(coin.get("group"), dict):
        g = coin["group"]
        group = GroupParams(g["p"], g["q"], g["g"], insecure_test_params=g.get("insecure", False))
    clients = data.get("clients", [1])
    clients = tuple([clients] if isinstance(clients, int) else clients)
    if not clients or any(not 1 <= c <= 64 for c in clients):
        raise InvalidParams(f"client counts must lie in 1..64, got {list(clients)}")
    duration_us = int(round(float(_require(data, "duration_s")) * 1e6))
    if duration_us <= 0:
        raise InvalidParams("duration must be positive")
    adv = data.get("adversary", {})
    windows = tuple(DosWindow(w["from_us"], duration_us if w.get("to_us") is None else w["to_us"],
                              frozenset(w["targets"])) for w in adv.get("dos", ()))
    adversary = AdversarySpec(crash_schedule=tuple((t, p) for t, p in adv.get("crash", ())),
                              dos_schedule=windows,
                              compromised=frozenset(adv.get("compromised", ())),
                              dos_mode=adv.get("dos_mode", "blackout"),
                              saturate_factor=adv.get("saturate_factor", 100))
    adversary.validate(params, range(params.n))
    lat = data.get("latency", {})
    return ScenarioConfig(
        name=data.get("name", "scenario"), params=params, space=space, coin_backend=backend,
        coin_seed=coin.get("seed", 0), emu_sequence=None if seq is None else tuple(seq),
        group=group, replicas=data.get("replicas", 2), clients=clients,
        request_size=data.get("request_size", 100), duration_us=duration_us,
        W=data.get("W", 32), timeout_base_us=data.get("timeout_base_us", 50_000),
        patience_us=data.get("patience_us"), latency_base_us=lat.get("base_us", 500),
        latency_jitter_us=lat.get("jitter_us", 200), service_us=lat.get("service_us", 0),
        adversary=adversary, seed=data.get("seed", 0))


def load_builtin(name: str) -> dict:
    if name not in BUILTINS:
        raise InvalidParams(f"unknown builtin scenario {name!r}; choose from {', '.join(BUILTINS)}")
    text = resources.files("mptc").joinpath("scenarios", f"{name}.json").read_text()
    return json.loads(text)


def load_scenario(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def run_rows(cfg: ScenarioConfig, seeds: int = 1, clients: Optional[Iterable[int]] = None,
             trace_path: Optional[str] = None) -> list[MetricsRow]:
    """One row per (client count, seed); a trace, if asked for, covers the first run."""
    rows = []
    for c in (tuple(clients) if clients else cfg.clients):
        for k in range(seeds):
            seed = cfg.seed + k
            m = run_smr(cfg.setup(c, seed), trace_path=trace_path)
            trace_path = None
            rows.append(MetricsRow(cfg.name, c, m.throughput, m.mean_latency, m.p99_latency,
                                   m.reconfigurations, seed))
    return rows


def run_scenario(data: dict, overrides: Optional[dict] = None, seeds: int = 1,
                 trace_path: Optional[str] = None) -> list[MetricsRow]:
    return run_rows(parse_scenario(data, overrides), seeds=seeds, trace_path=trace_path)


def format_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(rows, key=lambda r: (r.scenario, r.clients, r.seed)):
        w.writerow(r.cells())
    return buf.getvalue()


def parse_csv(text: str) -> list[MetricsRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(MetricsRow(rec["scenario"], int(rec["clients"]), float(rec["throughput_ops_s"]),
                               float(rec["mean_latency_us"]), float(rec["p99_latency_us"]),
                               int(rec["reconfigs"]), int(rec["seed"])))
    return rows


def emit_plot_data(rows: Sequence[MetricsRow],
                   scenarios: Optional[Sequence[str]] = None) -> tuple[str, str]:
    """Throughput-vs-load and latency-vs-load tables, averaged over seeds.

    Columns: clients, then one per scenario. Returns the two file bodies.
    """
    if not rows:
        raise ValueError("no metrics rows to plot")
    names = list(scenarios) if scenarios else sorted({r.scenario for r in rows})
    acc: dict = defaultdict(list)
    for r in rows:
        acc[(r.scenario, r.clients)].append(r)
    loads = sorted({r.clients for r in rows})
    if len(loads) < 2:
        raise ValueError("plot data needs at least two client counts")
    out = []
    for attr in ("throughput_ops_s", "mean_latency_us"):
        lines = ["# clients " + " ".join(names)]
        for c in loads:
            cells = [str(c)]
            for s in names:
                got = acc.get((s, c))
                if not got:
                    raise ValueError(f"scenario {s!r} has no rows for {c} clients")
                cells.append(f"{sum(getattr(r, attr) for r in got) / len(got):.3f}")
            lines.append(" ".join(cells))
        out.append("\n".join(lines) + "\n")
    return out[0], out[1]


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="mptc-sim", description="Run MPTC SMR simulations.")
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", metavar="PATH", help="JSON scenario file")
    src.add_argument("--builtin", metavar="NAME",
                     help=f"builtin scenario ({', '.join(BUILTINS)}, or 'all')")
    ap.add_argument("--seeds", type=int, default=1, help="runs per client count (seeds seed..seed+K-1)")
    ap.add_argument("--clients", help="comma-separated client counts, overriding the scenario")
    ap.add_argument("--duration", type=float, help="simulated seconds, overriding the scenario")
    ap.add_argument("--trace", metavar="PATH", help="write the first run's message trace here")
    ap.add_argument("--out", metavar="PATH", help="write CSV here instead of standard output")
    ap.add_argument("--plot", metavar="PREFIX",
                    help="also write PREFIX_throughput.dat and PREFIX_latency.dat")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    overrides: dict = {}
    if args.clients:
        overrides["clients"] = [int(x) for x in args.clients.split(",")]
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    try:
        if args.builtin:
            names = BUILTINS if args.builtin == "all" else (args.builtin,)
            datas = [load_builtin(n) for n in names]
        else:
            datas = [load_scenario(args.scenario)]
        cfgs = [parse_scenario(d, overrides) for d in datas]
    except (InvalidParams, ValueError, KeyError, OSError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1
    if args.seeds < 1:
        print("invalid scenario: --seeds must be at least 1", file=sys.stderr)
        return 1

    rows: list[MetricsRow] = []
    trace = args.trace
    try:
        for cfg in cfgs:
            rows += run_rows(cfg, seeds=args.seeds, trace_path=trace)
            trace = None
    except SafetyViolation as exc:
        print(f"SAFETY VIOLATION: {exc}", file=sys.stderr)
        for at, s, d, msg in exc.trace[-20:]:
            print(f"  t={at}us {s}->{d} {msg!r}"[:200], file=sys.stderr)
        return 2
    text = format_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        try:
            tput, lat = emit_plot_data(rows, [c.name for c in cfgs])
        except ValueError as exc:
            print(f"plot data: {exc}", file=sys.stderr)
            return 1
        with open(f"{args.plot}_throughput.dat", "w") as fh:
            fh.write(tput)
        with open(f"{args.plot}_latency.dat", "w") as fh:
            fh.write(lat)
    return 0


if __name__ == "__main__":
    sys.exit(main())
