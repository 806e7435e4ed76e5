"""Command-line harness: compile, verify, simulate, sweep, fit and cost."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import sim_branch as SB
from . import sim_dense as SD
from .metrics import (
    COST_PROTOCOLS, FitError, analytic_baselines, cost_factor, fit_error_model,
)
from .noise import NoiseModel
from .program import MemoryTable, Program, validate
from .protocols import PROTOCOLS, compile_protocol, step_report
from .topology import Scheme, TreeSpec

DEFAULT_SEED = 20240607
DEFAULT_TRAJECTORIES = 10_000
MIN_TRAJECTORIES = 100
CSV_COLUMNS = ("n", "k", "scheme", "protocol", "c", "m", "gamma", "p", "trajectories", "seed",
               "fidelity_mean", "fidelity_stderr", "lambda_mean", "steps_total", "error")
VERIFY_TOL = 1e-9
RESTORE_TOL = 1e-10
DENSE_VERIFY_LIMIT = 1 << 18  # auto mode switches to the branch simulator above this
DENSE_FORCE_LIMIT = 1 << 22
RANDOM_SUPERPOSITIONS = 20


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def build_program(protocol: str, n: int, k: int, scheme: str = "qutrit", c: int = 1,
                  m: int = 0) -> Program:
    """Compile with argument errors raised as UsageError."""
    if protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
    if protocol != "hb-parallel" and c != 1:
        raise UsageError(f"--c applies only to hb-parallel, got c={c} for {protocol}")
    if protocol != "hybrid-parallel" and m != 0:
        raise UsageError(f"--m applies only to hybrid-parallel, got m={m} for {protocol}")
    try:
        spec = TreeSpec(n, k, Scheme(scheme), c)
        return compile_protocol(protocol, spec, m)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def point_seeds(seed: int, n: int, k: int, m: int, protocol: str, scheme: str,
                c: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(memory rng, trajectory rng) for one grid point.

    The memory depends only on (seed, n, k, m) so protocols are compared on the
    same data; trajectories also depend on the protocol, scheme and bandwidth.
    """
    mem_rng = np.random.default_rng([seed, n, k, m])
    tag = [PROTOCOLS.index(protocol), 0 if scheme == "qutrit" else 1, c]
    return mem_rng, np.random.default_rng([seed, n, k, m, *tag])


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _parse_range(text: str) -> List[int]:
    """'3-8', '3:8', '4,8' or '5' to a list of ints."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        sep = "-" if "-" in part else (":" if ":" in part else None)
        try:
            if sep:
                lo, hi = (int(x) for x in part.split(sep, 1))
                if hi < lo:
                    raise UsageError(f"empty range {part!r}")
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise UsageError(f"bad range {part!r}") from exc
    if not out:
        raise UsageError(f"empty range {text!r}")
    return out


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerifyReport:
    mode: str
    inputs: int
    max_deviation: float
    max_restoration_error: float
    max_involution_deviation: float
    failures: Tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.failures


def _dense_size(program: Program) -> int:
    spec = program.spec
    tree = (spec.address_levels * 2 ** spec.bandwidth) ** spec.node_count
    return (1 << (program.address_width + spec.k)) * tree


class _Query:
    """Noiseless query map on bus vectors via either simulator."""

    def __init__(self, program: Program, memory: MemoryTable, mode: str):
        self.program, self.memory, self.mode = program, memory, mode
        self.compiled = SD.CompiledDense(program, memory) if mode == "dense" else None

    def __call__(self, bus: np.ndarray) -> Tuple[np.ndarray, float]:
        if self.mode == "dense":
            r = SD.run_noiseless(self.program, self.memory, bus, self.compiled)
            return r.bus, r.restoration_error
        norm = np.linalg.norm(bus)
        if norm == 0:
            return np.zeros_like(bus), 0.0
        sim = SB.BranchSimulator(self.program, self.memory, SB.branches_from_bus(self.program, bus))
        out, rest = sim.bus_output(sim.clean)
        return out * norm, rest * norm ** 2


def verify_program(program: Program, memory: MemoryTable, rng: np.random.Generator,
                   mode: str = "auto", superpositions: int = RANDOM_SUPERPOSITIONS) -> VerifyReport:
    """Basis-input, random-superposition, restoration and involution checks."""
    if mode == "auto":
        mode = "dense" if _dense_size(program) <= DENSE_VERIFY_LIMIT else "branch"
    if mode not in ("dense", "branch"):
        raise UsageError(f"unknown verify mode {mode!r}")
    if mode == "dense" and _dense_size(program) > DENSE_FORCE_LIMIT:
        raise UsageError("state vector too large for dense verification; use --mode branch")
    query = _Query(program, memory, mode)
    k = program.spec.k
    size = 1 << (program.address_width + k)
    failures: List[str] = []
    worst = [0.0, 0.0, 0.0]

    def check(label: str, bus: np.ndarray) -> None:
        ideal = SD.ideal_output(program, memory, bus)
        out, rest = query(bus)
        dev = float(np.max(np.abs(out - ideal)))
        back, rest2 = query(out)
        inv = float(np.max(np.abs(back - bus)))
        rest = max(rest, rest2)
        worst[0], worst[1], worst[2] = max(worst[0], dev), max(worst[1], rest), max(worst[2], inv)
        if dev >= VERIFY_TOL or rest >= RESTORE_TOL or inv >= VERIFY_TOL:
            failures.append(f"{label}: deviation={dev:.3e} restoration={rest:.3e} involution={inv:.3e}")

    # every address, with word 0 and with a random word
    count = 0
    for a in range(1 << program.address_width):
        for word in sorted({0, int(rng.integers(0, 1 << k))}):
            bus = np.zeros(size, dtype=complex)
            bus[(a << k) | word] = 1.0
            check(f"basis address={a} word={word}", bus)
            count += 1
    for j in range(superpositions):
        bus = rng.normal(size=size) + 1j * rng.normal(size=size)
        bus /= np.linalg.norm(bus)
        check(f"superposition #{j}", bus)
        count += 1
    return VerifyReport(mode, count, worst[0], worst[1], worst[2], tuple(failures))


# ---------------------------------------------------------------------------
# simulate / sweep
# ---------------------------------------------------------------------------

def simulate_point(protocol: str, scheme: str, n: int, k: int, c: int, m: int, gamma: float,
                   p: float, trajectories: int, seed: int) -> dict:
    """One CSV row; failures are recorded in the ``error`` field."""
    row = {"n": n, "k": k, "scheme": scheme, "protocol": protocol, "c": c, "m": m,
           "gamma": float(gamma), "p": float(p), "trajectories": trajectories, "seed": seed,
           "fidelity_mean": "", "fidelity_stderr": "", "lambda_mean": "", "steps_total": "",
           "error": ""}
    try:
        program = build_program(protocol, n, k, scheme, c, m)
        row["steps_total"] = program.n_ticks
        mem_rng, traj_rng = point_seeds(seed, n, k, m, protocol, scheme, c)
        memory = MemoryTable.random(1 << (n + m), k, mem_rng)
        est = SB.estimate_fidelity(program, memory, None, NoiseModel(gamma, p), trajectories, traj_rng)
        row["fidelity_mean"] = est.mean
        row["fidelity_stderr"] = est.stderr
        row["lambda_mean"] = est.lambda_mean
    except (UsageError, ValueError, RuntimeError, MemoryError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[col]) for col in CSV_COLUMNS])
    return buf.getvalue()


def sweep(protocols: Sequence[str], scheme: str, ns: Sequence[int], ks: Sequence[int], c: int,
          m: int, gamma: float, p: float, trajectories: int, seed: int,
          progress=None) -> List[dict]:
    """Rows in grid order: protocol-major, then n, then k."""
    rows = []
    for protocol in protocols:
        for n in ns:
            for k in ks:
                row = simulate_point(protocol, scheme, n, k, c, m, gamma, p, trajectories, seed)
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def read_sweep_csv(path: str) -> List[Tuple[float, float, float, float]]:
    """(n, k, eps = gamma + p, F) for rows without errors."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            if row.get("error") or not row.get("fidelity_mean"):
                continue
            out.append((float(row["n"]), float(row["k"]), float(row["gamma"]) + float(row["p"]),
                        float(row["fidelity_mean"])))
    return out


# ---------------------------------------------------------------------------
# argparse plumbing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--threads", type=int, default=1, help="accepted; runs are sequential")


def _program_args(p: argparse.ArgumentParser, multi: bool = False) -> None:
    p.add_argument("--protocol", required=True,
                   help=("comma-separated list of " if multi else "") + "|".join(PROTOCOLS))
    p.add_argument("--scheme", default="qutrit", choices=["qutrit", "qubit"])
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--m", type=int, default=0)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bbqram", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("compile", help="compile a protocol to program JSON")
    _program_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--indent", type=int, default=None)
    _common(p)

    p = sub.add_parser("verify", help="check the noiseless query map")
    p.add_argument("--protocol", default="all", help="protocol or 'all'")
    p.add_argument("--scheme", default="all", choices=["qutrit", "qubit", "all"])
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--m", type=int, default=None, help="high bits for hybrid (default 1)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", default="auto", choices=["auto", "dense", "branch"])
    p.add_argument("--program", default=None, help="verify a program JSON file instead")
    _common(p)

    for name in ("simulate", "sweep"):
        p = sub.add_parser(name, help="estimate fidelity and write CSV rows")
        _program_args(p, multi=name == "sweep")
        if name == "simulate":
            p.add_argument("--n", type=int, required=True)
            p.add_argument("--k", type=int, required=True)
        else:
            p.add_argument("--n", required=True, help="range such as 3-8 or list 4,8")
            p.add_argument("--k", required=True, help="range such as 3-8 or list 4,8")
        p.add_argument("--gamma", type=float, default=0.0)
        p.add_argument("--p", type=float, default=0.0)
        p.add_argument("--trajectories", type=int, default=DEFAULT_TRAJECTORIES)
        _common(p)

    p = sub.add_parser("fit", help="fit the error model to a sweep CSV")
    p.add_argument("input")
    _common(p)

    p = sub.add_parser("cost", help="cost factors and hybrid baselines")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--scheme", default="qutrit", choices=["qutrit", "qubit"])
    _common(p)
    return parser


def cmd_compile(args) -> int:
    program = build_program(args.protocol, args.n, args.k, args.scheme, args.c, args.m)
    problems = validate(program)
    if problems:
        print("invalid program: " + "; ".join(problems), file=sys.stderr)
        return 1
    rep = step_report(program)
    text = program.to_json(indent=args.indent) + "\n"
    report = (f"steps total={rep.total} address_setting={rep.address_setting} "
              f"data_fetch={rep.data_fetch} uncomputing={rep.uncomputing}\n")
    if args.out:
        _emit(text, args.out)
        sys.stdout.write(report)
    else:
        sys.stdout.write(text)
        sys.stderr.write(report)
    return 0


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.program:
        with open(args.program) as fh:
            programs = [Program.from_json(fh.read())]
    else:
        protocols = PROTOCOLS if args.protocol == "all" else [args.protocol]
        schemes = ("qutrit", "qubit") if args.scheme == "all" else (args.scheme,)
        programs = []
        for scheme in schemes:
            for proto in protocols:
                c = args.c if proto == "hb-parallel" else 1
                m = (1 if args.m is None else args.m) if proto == "hybrid-parallel" else 0
                programs.append(build_program(proto, args.n, args.k, scheme, c, m))
    lines, ok = [], True
    for program in programs:
        spec = program.spec
        memory = MemoryTable.random(1 << program.address_width, spec.k, rng)
        rep = verify_program(program, memory, rng, args.mode)
        ok &= rep.passed
        lines.append(f"{'PASS' if rep.passed else 'FAIL'} {program.protocol} {spec.scheme.value} "
                     f"n={spec.n} k={spec.k} c={spec.bandwidth} m={program.m} mode={rep.mode} "
                     f"inputs={rep.inputs} max_deviation={rep.max_deviation:.3e} "
                     f"restoration={rep.max_restoration_error:.3e} "
                     f"involution={rep.max_involution_deviation:.3e}")
        lines.extend("  " + f for f in rep.failures)
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if ok else 1


def cmd_simulate(args, grid: bool) -> int:
    if args.trajectories < MIN_TRAJECTORIES:
        raise UsageError(f"--trajectories must be at least {MIN_TRAJECTORIES}")
    try:
        NoiseModel(args.gamma, args.p)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if grid:
        protocols = [s.strip() for s in args.protocol.split(",") if s.strip()]
        ns, ks = _parse_range(args.n), _parse_range(args.k)
    else:
        protocols, ns, ks = [args.protocol], [args.n], [args.k]
    for proto in protocols:
        if proto not in PROTOCOLS:
            raise UsageError(f"unknown protocol {proto!r}")
    progress = (lambda r: print(f"{r['protocol']} n={r['n']} k={r['k']} F={r['fidelity_mean']} "
                                f"{r['error']}", file=sys.stderr, flush=True)) if args.out else None
    rows = sweep(protocols, args.scheme, ns, ks, args.c, args.m, args.gamma, args.p,
                 args.trajectories, args.seed, progress)
    _emit(rows_to_csv(rows), args.out)
    return 1 if any(r["error"] for r in rows) and not grid else 0


def cmd_fit(args) -> int:
    try:
        samples = read_sweep_csv(args.input)
        res = fit_error_model(samples)
    except (OSError, FitError, KeyError, ValueError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 1
    _emit(json.dumps(asdict(res), sort_keys=True) + "\n", args.out)
    return 0


def cmd_cost(args) -> int:
    lines = ["protocol,n,k,c,cost_factor"]
    for proto in COST_PROTOCOLS:
        c = args.c if proto in ("high-bandwidth", "hb-parallel") else 1
        try:
            rep = cost_factor(proto, args.n, args.k, c, Scheme(args.scheme))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        lines.append(f"{proto},{args.n},{args.k},{c},{rep.value:.12g}")
    if args.m is not None:
        base = analytic_baselines(args.n, args.m, args.k)
        lines.append("")
        lines.append("m," + ",".join(base))
        lines.append(f"{args.m}," + ",".join(str(v) for v in base.values()))
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        if args.command == "compile":
            return cmd_compile(args)
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "simulate":
            return cmd_simulate(args, grid=False)
        if args.command == "sweep":
            return cmd_simulate(args, grid=True)
        if args.command == "fit":
            return cmd_fit(args)
        return cmd_cost(args)
    except UsageError as exc:
        print(f"bbqram: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"bbqram: failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
