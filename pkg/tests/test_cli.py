import json

import pytest

from mptc.cli import (BUILTINS, CSV_HEADER, MetricsRow, emit_plot_data, format_csv, load_builtin,
                      main, parse_csv, parse_scenario, run_scenario)
from mptc.core import InvalidParams


def test_builtins_load_and_validate():
    for name in BUILTINS:
        cfg = parse_scenario(load_builtin(name))
        assert cfg.params.n == 6 and cfg.params.f == 1 and cfg.replicas == 2
        assert cfg.clients == (1, 2, 4, 8, 16, 32, 64)
        assert cfg.duration_us == 60_000_000
    two = parse_scenario(load_builtin("no-attack")).space
    assert len(two) == 2 and not set(two[0].members) & set(two[1].members)
    static = parse_scenario(load_builtin("attack-leader-static"))
    assert static.space[0].protocol.param("leader") == 0
    # the DoS window runs to the end of the run
    w = static.adversary.dos_schedule[0]
    assert (w.start, w.end, w.targets) == (0, 60_000_000, frozenset({0}))


def test_unknown_builtin():
    with pytest.raises(InvalidParams, match="unknown builtin"):
        load_builtin("nope")


def test_invalid_scenarios_name_the_invariant():
    good = load_builtin("no-attack")
    with pytest.raises(InvalidParams, match="p_f"):
        parse_scenario(good, {"p_f": 2})
    with pytest.raises(InvalidParams, match="1..64"):
        parse_scenario(good, {"clients": [0]})
    with pytest.raises(InvalidParams, match="f_a"):
        parse_scenario(good, {"adversary": {"dos": [
            {"from_us": 0, "to_us": 10, "targets": [0]},
            {"from_us": 5, "to_us": 20, "targets": [1]}]}})
    with pytest.raises(InvalidParams, match="p_f = 3"):
        parse_scenario(good, {"config_space": [{"members": [0, 1]}]})
    with pytest.raises(InvalidParams, match="duration_s"):
        parse_scenario({k: v for k, v in good.items() if k != "duration_s"})


def test_csv_is_canonical_and_roundtrips():
    rows = [MetricsRow("b", 2, 1.5, 10.0, 20.0, 0, 1), MetricsRow("a", 4, 2.0, 5.0, 6.0, 1, 0),
            MetricsRow("a", 1, 3.0, 5.0, 6.0, 1, 0)]
    text = format_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["a", "1"], ["a", "4"], ["b", "2"]]
    assert format_csv(parse_csv(text)) == text


def test_plot_data_averages_over_seeds():
    rows = []
    for s in ("x", "y", "z"):
        for c in (1, 2, 4, 8, 16, 32, 64):
            for seed in range(10):
                rows.append(MetricsRow(s, c, float(seed), 100.0 + seed, 0.0, 0, seed))
    tput, lat = emit_plot_data(rows)
    t_lines = tput.splitlines()
    assert t_lines[0] == "# clients x y z"
    assert len(t_lines) == 8 and all(len(ln.split()) == 4 for ln in t_lines[1:])
    assert t_lines[1] == "1 4.500 4.500 4.500"
    assert lat.splitlines()[1].split()[1] == "104.500"


def test_plot_data_single_scenario_and_errors():
    rows = [MetricsRow("x", c, 1.0, 1.0, 1.0, 0, 0) for c in (1, 2)]
    tput, _ = emit_plot_data(rows)
    assert all(len(ln.split()) == 2 for ln in tput.splitlines()[1:])
    with pytest.raises(ValueError):
        emit_plot_data([])
    with pytest.raises(ValueError, match="no rows"):
        emit_plot_data(rows, ["x", "missing"])
    with pytest.raises(ValueError, match="two client counts"):
        emit_plot_data(rows[:1])


def test_run_scenario_rows_per_client_and_seed():
    rows = run_scenario(load_builtin("no-attack"), {"clients": [1, 2], "duration_s": 0.1}, seeds=2)
    assert [(r.clients, r.seed) for r in rows] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert all(r.throughput_ops_s > 0 and r.reconfigs == 0 for r in rows)


def test_main_writes_csv_plot_and_trace(tmp_path, capsys):
    out = tmp_path / "m.csv"
    code = main(["--builtin", "no-attack", "--clients", "1,2", "--duration", "0.05",
                 "--out", str(out), "--plot", str(tmp_path / "p"), "--trace",
                 str(tmp_path / "t.bin")])
    assert code == 0
    assert out.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert (tmp_path / "p_throughput.dat").read_text().startswith("# clients no-attack")
    assert (tmp_path / "t.bin").stat().st_size > 0


def test_main_rejects_bad_config(tmp_path, capsys):
    bad = dict(load_builtin("no-attack"), p_f=2)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["--scenario", str(path)]) == 1
    assert "p_f" in capsys.readouterr().err


def test_main_reports_safety_violation(monkeypatch, capsys):
    import mptc.cli as cli
    from mptc.simnet import SafetyViolation

    def boom(*a, **k):
        raise SafetyViolation("agreement: slot 0", [(1, 0, 1, "m")])
    monkeypatch.setattr(cli, "run_smr", boom)
    assert main(["--builtin", "no-attack", "--clients", "1", "--duration", "0.01"]) == 2
    assert "SAFETY VIOLATION" in capsys.readouterr().err
