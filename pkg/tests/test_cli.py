import csv
import dataclasses
import itertools
import json
import re
from pathlib import Path

import numpy as np
import pytest

from bbqram.cli import CSV_COLUMNS, main, verify_program
from bbqram.program import MemoryTable, Program, Routing, TimeStep
from bbqram.protocols import PROTOCOLS, compile_protocol
from bbqram.topology import TreeSpec

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_compile_emits_program_json(capsys):
    code, out, err = run(capsys, "compile", "--protocol", "parallel", "--n", 4, "--k", 3)
    assert code == 0
    prog = Program.from_json(out)
    assert prog == compile_protocol("parallel", TreeSpec(4, 3))
    assert "address_setting=" in err and "data_fetch=" in err


def test_compile_step_report(capsys, tmp_path):
    code, out, _ = run(capsys, "compile", "--protocol", "nonparallel", "--n", 2, "--k", 1,
                       "--out", tmp_path / "p.json")
    assert code == 0 and "address_setting=5" in out
    assert Program.from_json((tmp_path / "p.json").read_text()).protocol == "nonparallel"


@pytest.mark.parametrize("argv", [
    ["compile", "--protocol", "hb-parallel", "--n", 4, "--k", 8, "--c", 3],
    ["compile", "--protocol", "bogus", "--n", 2, "--k", 2],
    ["compile", "--protocol", "parallel", "--n", 2],
    ["compile", "--protocol", "parallel", "--n", 2, "--k", 2, "--c", 2],
    ["simulate", "--protocol", "parallel", "--n", 2, "--k", 2, "--trajectories", 10],
    ["simulate", "--protocol", "parallel", "--n", 2, "--k", 2, "--gamma", 2],
    ["sweep", "--protocol", "parallel", "--n", "x-y", "--k", 2],
    ["cost", "--n", 4, "--k", 8, "--c", 3],
    ["nonsense"],
])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and "error" in err


@pytest.mark.parametrize("scheme", ["qutrit", "qubit"])
def test_verify_passes_at_n2_k2(capsys, scheme):
    code, out, _ = run(capsys, "verify", "--n", 2, "--k", 2, "--scheme", scheme, "--c", 2)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == len(PROTOCOLS) and all(l.startswith("PASS") for l in lines)


def test_verify_hybrid_all_addresses(capsys):
    code, out, _ = run(capsys, "verify", "--protocol", "hybrid-parallel", "--n", 2, "--m", 1,
                       "--k", 1, "--scheme", "qutrit")
    assert code == 0
    # 8 addresses with word 0 (plus a random word when nonzero) and 20 superpositions
    inputs = int(re.search(r"inputs=(\d+)", out).group(1))
    assert 8 + 20 <= inputs <= 16 + 20


def _drop_first_routing(program: Program) -> Program:
    steps = list(program.steps)
    for t, step in enumerate(steps):
        ops = [op for op in step.ops if not isinstance(op, Routing)]
        if len(ops) < len(step.ops):
            idx = next(i for i, op in enumerate(step.ops) if isinstance(op, Routing))
            steps[t] = TimeStep(step.ops[:idx] + step.ops[idx + 1:], step.phase)
            break
    return dataclasses.replace(program, steps=tuple(steps))


@pytest.mark.parametrize("mode", ["dense", "branch"])
def test_verify_negative_control(mode):
    prog = _drop_first_routing(compile_protocol("parallel", TreeSpec(2, 2)))
    mem = MemoryTable.random(4, 2, np.random.default_rng(0))
    rep = verify_program(prog, mem, np.random.default_rng(1), mode)
    assert not rep.passed and rep.max_deviation > 0.1


def test_verify_negative_control_cli(capsys, tmp_path):
    prog = _drop_first_routing(compile_protocol("parallel", TreeSpec(2, 2)))
    path = tmp_path / "bad.json"
    path.write_text(prog.to_json())
    code, out, _ = run(capsys, "verify", "--program", path, "--n", 2, "--k", 2)
    assert code == 1 and out.startswith("FAIL") and "address=" in out


def test_simulate_csv_schema_matches_golden(capsys):
    code, out, _ = run(capsys, "simulate", "--protocol", "parallel", "--n", 2, "--k", 2,
                       "--gamma", 1e-3, "--p", 1e-3, "--trajectories", 100, "--seed", 7)
    assert code == 0
    header = out.splitlines()[0].split(",")
    assert tuple(header) == CSV_COLUMNS
    assert out == (GOLDEN / "simulate_parallel_n2_k2.csv").read_text()


def test_sweep_is_byte_identical(capsys, tmp_path):
    argv = ["sweep", "--protocol", "parallel,nonparallel", "--n", "2-3", "--k", "1,2",
            "--gamma", 1e-3, "--p", 1e-3, "--trajectories", 100, "--seed", 3]
    run(capsys, *argv, "--out", tmp_path / "a.csv")
    run(capsys, *argv, "--out", tmp_path / "b.csv", "--threads", 4)
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert [(r["protocol"], r["n"], r["k"]) for r in rows] == [
        (p, n, k) for p, n, k in itertools.product(["parallel", "nonparallel"], "23", "12")]
    assert all(not r["error"] for r in rows)


def test_noiseless_sweep_gives_unit_fidelity(capsys):
    code, out, _ = run(capsys, "sweep", "--protocol", "parallel", "--n", "2-3", "--k", "2-3",
                       "--trajectories", 100)
    assert code == 0
    for row in csv.DictReader(out.splitlines()):
        assert row["fidelity_mean"] == "1.0" and row["fidelity_stderr"] == "0.0"


def test_sweep_records_point_errors(capsys):
    code, out, _ = run(capsys, "sweep", "--protocol", "hb-parallel", "--c", 2, "--n", 2,
                       "--k", "2-3", "--trajectories", 100)
    assert code == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert rows[0]["error"] == "" and rows[1]["error"] != "" and rows[1]["fidelity_mean"] == ""


def _write_sweep(path, A=2.0, C=1.5, eps=1e-5):
    lines = [",".join(CSV_COLUMNS)]
    for n, k in itertools.product(range(3, 7), range(3, 7)):
        F = 1 - A * (C * n * n + n * k) * eps
        lines.append(f"{n},{k},qutrit,parallel,1,0,{eps / 2!r},{eps / 2!r},100,1,{F!r},0.0,1.0,0,")
    path.write_text("\n".join(lines) + "\n")


def test_fit_recovers_synthetic_model(capsys, tmp_path):
    _write_sweep(tmp_path / "s.csv")
    code, out, _ = run(capsys, "fit", tmp_path / "s.csv")
    res = json.loads(out)
    assert code == 0
    assert res["A"] == pytest.approx(2.0, abs=1e-6) and res["C"] == pytest.approx(1.5, abs=1e-6)
    assert res["r_squared"] == pytest.approx(1.0) and res["points"] == 16


def test_fit_failures_exit_1(capsys, tmp_path):
    (tmp_path / "empty.csv").write_text("")
    assert run(capsys, "fit", tmp_path / "empty.csv")[0] == 1
    (tmp_path / "header.csv").write_text(",".join(CSV_COLUMNS) + "\n")
    assert run(capsys, "fit", tmp_path / "header.csv")[0] == 1
    assert run(capsys, "fit", tmp_path / "missing.csv")[0] == 1


def test_cost_output(capsys):
    code, out, _ = run(capsys, "cost", "--n", 32, "--k", 32)
    assert code == 0
    rows = {l.split(",")[0]: l.split(",")[-1] for l in out.splitlines()[1:]}
    assert rows["parallel"] == "4096" and rows["nonparallel"] == "1048576"
    assert rows["hb-parallel"] == rows["parallel"]


def test_cost_with_hybrid_baselines(capsys):
    code, out, _ = run(capsys, "cost", "--n", 8, "--k", 8, "--m", 3)
    assert code == 0
    lines = out.strip().splitlines()
    head, vals = lines[-2].split(","), lines[-1].split(",")
    table = dict(zip(head, vals))
    assert table["hybrid_qrom_time"] == "128" and table["hybrid_parallel_time"] == "72"
