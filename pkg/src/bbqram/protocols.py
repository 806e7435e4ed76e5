"""Protocol compilers: nonparallel, parallel, high-bandwidth and hybrid-parallel.

All protocols share one scheduler. Every payload (an address bit or a batch of
data digits) follows a fixed train of moves, one per tick; the scheduler places
each train at the earliest start tick where it neither shares qudits with ops
already placed nor overlaps another payload in the same slot. Two collisions are
resolved by merging instead of delaying: opposite routings on the same layer
become one bidirectional routing, and an exit at the root followed by an entry
at the same tick becomes one bus exchange.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .program import (
    AddressBusInput, ControlledDataBusInput, DataBusExchange, DataBusInput, DataCopy, Direction,
    InternalSwap, LayeredOp, Phase, Program, Routing, TimeStep, validate,
)
from .topology import Scheme, TreeSpec

PROTOCOLS = ("nonparallel", "parallel", "hb-parallel", "hybrid-parallel")

INF = 1 << 30
Slot = Tuple[str, int]  # ("d", layer) data slot or ("a", layer) address slot


@dataclass(frozen=True)
class StepCountReport:
    total: int
    address_setting: int
    data_fetch: int
    uncomputing: int


@dataclass(frozen=True)
class _Move:
    kind: str          # "A", "R", "I", "Din", "M", "Dout"
    layer: int = 0
    direction: Direction = Direction.DOWN
    src: Optional[Slot] = None
    dst: Optional[Slot] = None


@dataclass
class _Entry:
    kind: str
    layer: int
    resources: frozenset
    members: list  # (payload tag, move)


class _Scheduler:
    def __init__(self, spec: TreeSpec):
        self.spec = spec
        self.ticks: Dict[int, List[_Entry]] = {}
        self.residency: Dict[Slot, List[Tuple[int, int]]] = {}
        self.installed: Dict[int, int] = {}  # layer -> tick of its internal swap

    # resources are layer-level keys; they coarsen qudit supports exactly
    def _resources(self, move: _Move, tag) -> frozenset:
        n = self.spec.n
        if move.kind == "A":
            return frozenset({("busA", tag[1]), ("d", 0)})
        if move.kind in ("Din", "Dout"):
            return frozenset({("busD", tag[1], tag[2]), ("d", 0)})
        if move.kind == "R":
            l = move.layer
            return frozenset({("a", l), ("d", l), ("d", l + 1)})
        if move.kind == "I":
            l = move.layer
            res = {("a", l), ("d", l)}
            if self.spec.scheme is Scheme.QUTRIT and l >= 1:
                res.add(("a", l - 1))
            return frozenset(res)
        assert move.kind == "M"
        return frozenset({("a", n - 1), ("d", n - 1)})

    @staticmethod
    def _mergeable(entry: _Entry, move: _Move) -> bool:
        if len(entry.members) != 1:
            return False
        other = entry.members[0][1]
        if move.kind == "R" and entry.kind == "R":
            return (other.layer == move.layer
                    and {other.direction, move.direction} == {Direction.DOWN, Direction.UP})
        return {entry.kind, move.kind} == {"Din", "Dout"}

    def _ready(self, move: _Move, t: int) -> bool:
        def installed_before(l: int) -> bool:
            return self.installed.get(l, INF) < t

        if move.kind == "R":
            return installed_before(move.layer)
        if move.kind == "I" and self.spec.scheme is Scheme.QUTRIT and move.layer >= 1:
            return installed_before(move.layer - 1)
        if move.kind == "M":
            return installed_before(self.spec.n - 1)
        return True

    @staticmethod
    def _intervals(train: List[_Move], start: int) -> List[Tuple[Slot, int, int]]:
        out = []
        for idx, move in enumerate(train):
            if move.dst is None:
                continue
            arrive = start + idx
            depart = INF
            for j in range(idx + 1, len(train)):
                if train[j].src is not None and train[j].src == move.dst and train[j].kind != "M":
                    depart = start + j
                    break
            if move.kind == "M":
                continue
            out.append((move.dst, arrive, depart))
        return out

    def fits(self, train: List[_Move], tag, start: int) -> bool:
        for idx, move in enumerate(train):
            t = start + idx
            if not self._ready(move, t):
                return False
            res = self._resources(move, tag)
            for entry in self.ticks.get(t, []):
                if entry.resources & res and not self._mergeable(entry, move):
                    return False
        for slot, a1, b1 in self._intervals(train, start):
            for a2, b2 in self.residency.get(slot, []):
                if a1 < b2 and a2 < b1:
                    return False
        return True

    def place(self, train: List[_Move], tag, start: int) -> None:
        for idx, move in enumerate(train):
            t = start + idx
            res = self._resources(move, tag)
            entries = self.ticks.setdefault(t, [])
            for entry in entries:
                if entry.resources & res:
                    entry.members.append((tag, move))
                    entry.resources = entry.resources | res
                    break
            else:
                entries.append(_Entry(move.kind, move.layer, res, [(tag, move)]))
            if move.kind == "I":
                self.installed[move.layer] = t
        for slot, a, b in self._intervals(train, start):
            self.residency.setdefault(slot, []).append((a, b))

    def earliest(self, train: List[_Move], tag, lower: int) -> int:
        s = lower
        while not self.fits(train, tag, s):
            s += 1
        return s


def _address_train(i: int) -> List[_Move]:
    train = [_Move("A", dst=("d", 0))]
    for l in range(i):
        train.append(_Move("R", l, Direction.DOWN, ("d", l), ("d", l + 1)))
    train.append(_Move("I", i, src=("d", i), dst=("a", i)))
    return train


def _data_train(n: int) -> List[_Move]:
    train = [_Move("Din", dst=("d", 0))]
    for l in range(n - 1):
        train.append(_Move("R", l, Direction.DOWN, ("d", l), ("d", l + 1)))
    train.append(_Move("M", n - 1, src=("d", n - 1), dst=("d", n - 1)))
    for l in reversed(range(n - 1)):
        train.append(_Move("R", l, Direction.UP, ("d", l + 1), ("d", l)))
    train.append(_Move("Dout", src=("d", 0)))
    return train


def _emit(entry: _Entry) -> LayeredOp:
    tag, move = entry.members[0]
    if entry.kind == "R":
        direction = Direction.BI if len(entry.members) > 1 else move.direction
        return Routing(move.layer, direction)
    if entry.kind == "I":
        return InternalSwap(move.layer)
    if entry.kind == "A":
        return AddressBusInput(tag[1])
    if entry.kind == "M":
        return DataCopy(tag[1], tag[2])
    if len(entry.members) == 2:
        (t_out, _), (t_in, _) = sorted(entry.members, key=lambda mm: mm[1].kind != "Dout")
        return DataBusExchange(t_out[1], t_in[1], t_out[2], t_in[2])
    direction = "in" if move.kind == "Din" else "out"
    if tag[2] is None:
        return DataBusInput(tag[1], direction)
    return ControlledDataBusInput(tag[1], tag[2], direction)


def _sorted_ops(entries: List[_Entry]) -> Tuple[LayeredOp, ...]:
    order = {"A": 0, "Din": 1, "Dout": 1, "R": 2, "I": 3, "M": 4}
    entries = sorted(entries, key=lambda e: (order[e.kind], e.layer))
    return tuple(_emit(e) for e in entries)


def _schedule(spec: TreeSpec, protocol: str, m: int, pipelined: bool) -> Program:
    n, c = spec.n, spec.bandwidth
    highs: List[Optional[int]] = [None] if m == 0 else list(range(1 << m))

    # address setting: bit i is pushed as soon as the tree admits it
    sched = _Scheduler(spec)
    start = 0
    for i in range(n):
        train = _address_train(i)
        start = sched.earliest(train, ("A", i), start)
        sched.place(train, ("A", i), start)
        start += 1
    t_as = max(sched.ticks) + 1
    as_steps = [_sorted_ops(sched.ticks.get(t, [])) for t in range(t_as)]

    # data fetch: one payload per batch of c digits (per high value for hybrid)
    train = _data_train(n)
    lower = t_as
    for h in highs:
        for digit in range(0, spec.k, c):
            tag = ("D", digit, h)
            s = sched.earliest(train, tag, lower)
            sched.place(train, tag, s)
            lower = s + 1 if pipelined else s + len(train) - 1
    t_end = max(sched.ticks) + 1
    df_steps = [_sorted_ops(sched.ticks.get(t, [])) for t in range(t_as, t_end)]

    # uncomputing: the address-setting steps replayed backwards
    def reverse(op: LayeredOp) -> LayeredOp:
        if isinstance(op, Routing):
            return Routing(op.layer, Direction.UP)
        return op

    uc_steps = [tuple(reverse(op) for op in ops) for ops in reversed(as_steps)]
    steps = ([TimeStep(ops, Phase.ADDRESS_SETTING) for ops in as_steps]
             + [TimeStep(ops, Phase.DATA_FETCH) for ops in df_steps]
             + [TimeStep(ops, Phase.UNCOMPUTING) for ops in uc_steps])
    program = Program(spec, protocol, tuple(steps), m)
    problems = validate(program)
    if problems:
        raise RuntimeError("scheduler produced an invalid program: " + "; ".join(problems[:5]))
    return program


def compile_nonparallel(spec: TreeSpec) -> Program:
    if spec.bandwidth != 1:
        raise ValueError("nonparallel protocol needs bandwidth 1")
    return _schedule(spec, "nonparallel", 0, pipelined=False)


def compile_parallel(spec: TreeSpec) -> Program:
    if spec.bandwidth != 1:
        raise ValueError("parallel protocol needs bandwidth 1; use compile_high_bandwidth")
    return _schedule(spec, "parallel", 0, pipelined=True)


def compile_high_bandwidth(spec: TreeSpec) -> Program:
    """Parallel protocol moving batches of c digits on c data banks per node.

    c = 1 is accepted and reproduces the parallel schedule.
    """
    if spec.k % spec.bandwidth:
        raise ValueError(f"bandwidth c={spec.bandwidth} must divide k={spec.k}")
    return _schedule(spec, "hb-parallel", 0, pipelined=True)


def compile_hybrid_parallel(spec: TreeSpec, m: int) -> Program:
    """Parallel fetch of 2^m series over a tree addressed by the low n bits."""
    if m < 1:
        raise ValueError(f"hybrid protocol needs m >= 1, got {m}")
    if spec.bandwidth != 1:
        raise ValueError("hybrid protocol needs bandwidth 1")
    return _schedule(spec, "hybrid-parallel", m, pipelined=True)


def compile_protocol(protocol: str, spec: TreeSpec, m: int = 0) -> Program:
    if protocol == "nonparallel":
        return compile_nonparallel(spec)
    if protocol == "parallel":
        return compile_parallel(spec)
    if protocol == "hb-parallel":
        return compile_high_bandwidth(spec)
    if protocol == "hybrid-parallel":
        return compile_hybrid_parallel(spec, m)
    raise ValueError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")


def step_report(program: Program) -> StepCountReport:
    counts = {phase: 0 for phase in Phase}
    for step in program.steps:
        counts[step.phase] += 1
    return StepCountReport(
        total=len(program.steps),
        address_setting=counts[Phase.ADDRESS_SETTING],
        data_fetch=counts[Phase.DATA_FETCH],
        uncomputing=counts[Phase.UNCOMPUTING],
    )
