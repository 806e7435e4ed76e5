"""Operation vocabulary, symbolic semantics, time steps and schedule validation."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, fields
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .topology import (
    Addr, AddressBus, Data, DataBus, HighAddress, NodeId, QuditId, Role, Scheme, TreeSpec,
    address_bits, bits_to_int, enumerate_layer,
)

PROGRAM_VERSION = 1


class Direction(str, Enum):
    DOWN = "down"
    UP = "up"
    BI = "bi"


class Phase(str, Enum):
    ADDRESS_SETTING = "address_setting"
    DATA_FETCH = "data_fetch"
    UNCOMPUTING = "uncomputing"


# ---------------------------------------------------------------------------
# Layered operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AddressBusInput:
    """CNOT from address bus qubit ``index`` into the root data qubit."""
    index: int


@dataclass(frozen=True)
class DataBusInput:
    """SWAP of data bus qubits digit..digit+c-1 with the root data banks.

    ``direction`` is "in" (entering the tree) or "out"; in the qubit scheme the
    bus qubit is Hadamard-rotated before entry and after exit.
    """
    digit: int
    direction: str = "in"


@dataclass(frozen=True)
class ControlledDataBusInput:
    """DataBusInput conditioned on the high-address register equal to ``high``."""
    digit: int
    high: int
    direction: str = "in"


@dataclass(frozen=True)
class DataBusExchange:
    """Exit of one payload immediately followed by entry of the next, in one tick.

    ``out_high``/``in_high`` are set for controlled (hybrid) bus inputs.
    """
    out_digit: int
    in_digit: int
    out_high: Optional[int] = None
    in_high: Optional[int] = None


@dataclass(frozen=True)
class Routing:
    layer: int
    direction: Direction = Direction.DOWN

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))


@dataclass(frozen=True)
class InternalSwap:
    layer: int


@dataclass(frozen=True)
class DataCopy:
    """Classical-controlled write of memory digits into the leaf-layer payload.

    ``high`` restricts the copy to branches whose high-address register equals
    it (hybrid series); None for plain queries.
    """
    digit: int
    high: Optional[int] = None


LayeredOp = Union[AddressBusInput, DataBusInput, ControlledDataBusInput, DataBusExchange,
                  Routing, InternalSwap, DataCopy]

OP_TYPES = {cls.__name__: cls for cls in (AddressBusInput, DataBusInput, ControlledDataBusInput,
                                          DataBusExchange, Routing, InternalSwap, DataCopy)}


@dataclass(frozen=True)
class TimeStep:
    ops: Tuple[LayeredOp, ...]
    phase: Phase

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "phase", Phase(self.phase))


@dataclass(frozen=True)
class Program:
    spec: TreeSpec
    protocol: str
    steps: Tuple[TimeStep, ...] = ()
    m: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def n_ticks(self) -> int:
        return len(self.steps)

    @property
    def address_width(self) -> int:
        return self.m + self.spec.n

    def phase_of(self, tick: int) -> Phase:
        return self.steps[tick].phase

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": PROGRAM_VERSION,
            "n": self.spec.n,
            "k": self.spec.k,
            "scheme": self.spec.scheme.value,
            "protocol": self.protocol,
            "bandwidth": self.spec.bandwidth,
            "m": self.m,
            "steps": [{"phase": s.phase.value, "ops": [op_to_dict(op) for op in s.ops]}
                      for s in self.steps],
        }

    def to_json(self, indent: Optional[int] = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc: Mapping) -> Program:
        if doc.get("version") != PROGRAM_VERSION:
            raise ValueError(f"unsupported program version {doc.get('version')!r}")
        spec = TreeSpec(int(doc["n"]), int(doc["k"]), Scheme(doc["scheme"]), int(doc["bandwidth"]))
        steps = [TimeStep(tuple(op_from_dict(o) for o in s["ops"]), Phase(s["phase"]))
                 for s in doc["steps"]]
        return cls(spec, str(doc["protocol"]), tuple(steps), int(doc.get("m", 0)))

    @classmethod
    def from_json(cls, text: str) -> Program:
        return cls.from_dict(json.loads(text))


def op_to_dict(op: LayeredOp) -> dict:
    out = {"type": type(op).__name__}
    for f in fields(op):
        v = getattr(op, f.name)
        out[f.name] = v.value if isinstance(v, Enum) else v
    return out


def op_from_dict(doc: Mapping) -> LayeredOp:
    doc = dict(doc)
    cls = OP_TYPES.get(doc.pop("type", None))
    if cls is None:
        raise ValueError(f"unknown op type in {doc!r}")
    return cls(**doc)


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryTable:
    """Classical memory: ``bits[cell, j]`` is digit j of word m_cell."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits, dtype=np.uint8)
        if arr.ndim != 2 or arr.size == 0 or np.any(arr > 1):
            raise ValueError("memory must be a nonempty 2-D 0/1 array")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def cells(self) -> int:
        return self.bits.shape[0]

    @property
    def k(self) -> int:
        return self.bits.shape[1]

    def word(self, cell: int) -> int:
        return bits_to_int(self.bits[cell])

    @classmethod
    def from_words(cls, words: Sequence[int], k: int) -> MemoryTable:
        return cls(np.array([address_bits(int(w), k) for w in words], dtype=np.uint8))

    @classmethod
    def random(cls, cells: int, k: int, rng: np.random.Generator) -> MemoryTable:
        return cls(rng.integers(0, 2, size=(cells, k), dtype=np.uint8))


def check_memory(memory: MemoryTable, spec: TreeSpec, m: int = 0) -> None:
    if memory.cells != 1 << (spec.n + m) or memory.k != spec.k:
        raise ValueError(f"memory shape {memory.bits.shape} does not match "
                         f"2^{spec.n + m} cells of {spec.k} bits")


# ---------------------------------------------------------------------------
# Supports and index checks
# ---------------------------------------------------------------------------

def _check_digit(digit: int, spec: TreeSpec) -> None:
    c = spec.bandwidth
    if not (0 <= digit and digit + c <= spec.k and digit % c == 0):
        raise ValueError(f"digit {digit} is not a batch start for k={spec.k}, c={c}")


def _check_high(high: Optional[int], m: int) -> None:
    if high is not None and not 0 <= high < (1 << m):
        raise ValueError(f"high value {high} outside [0, 2^{m})")


def check_op(op: LayeredOp, spec: TreeSpec, m: int = 0) -> None:
    """Raise ValueError if the op's indices are invalid for ``spec``."""
    n = spec.n
    if isinstance(op, AddressBusInput):
        if not 0 <= op.index < n:
            raise ValueError(f"address index {op.index} outside [0, {n})")
    elif isinstance(op, (DataBusInput, ControlledDataBusInput)):
        _check_digit(op.digit, spec)
        if op.direction not in ("in", "out"):
            raise ValueError(f"bad direction {op.direction!r}")
        if isinstance(op, ControlledDataBusInput):
            if m < 1:
                raise ValueError("controlled bus input needs a high-address register")
            _check_high(op.high, m)
    elif isinstance(op, DataBusExchange):
        _check_digit(op.out_digit, spec)
        _check_digit(op.in_digit, spec)
        _check_high(op.out_high, m)
        _check_high(op.in_high, m)
    elif isinstance(op, Routing):
        if not 0 <= op.layer <= n - 2:
            raise ValueError(f"routing layer {op.layer} outside [0, {n - 2}]")
    elif isinstance(op, InternalSwap):
        if not 0 <= op.layer < n:
            raise ValueError(f"internal swap layer {op.layer} outside [0, {n})")
    elif isinstance(op, DataCopy):
        _check_digit(op.digit, spec)
        _check_high(op.high, m)
    else:
        raise TypeError(f"not a layered op: {op!r}")


def support_keys(op: LayeredOp, spec: TreeSpec, m: int = 0) -> frozenset:
    """Compressed support: every op touches whole layers, so the support is a
    union of ("a", layer), ("d", layer, bank) blocks plus single bus qudits.

    The hybrid high-address register is a read-only classical control and is
    not part of any support.
    """
    check_op(op, spec, m)
    banks = range(spec.bandwidth)
    if isinstance(op, AddressBusInput):
        return frozenset({("busA", op.index), ("d", 0, 0)})
    if isinstance(op, (DataBusInput, ControlledDataBusInput)):
        return frozenset([("busD", op.digit + b) for b in banks] + [("d", 0, b) for b in banks])
    if isinstance(op, DataBusExchange):
        return frozenset([("busD", op.out_digit + b) for b in banks]
                         + [("busD", op.in_digit + b) for b in banks]
                         + [("d", 0, b) for b in banks])
    if isinstance(op, Routing):
        l = op.layer
        return frozenset([("a", l)] + [("d", l, b) for b in banks] + [("d", l + 1, b) for b in banks])
    if isinstance(op, InternalSwap):
        l = op.layer
        out = [("a", l), ("d", l, 0)]
        if spec.scheme is Scheme.QUTRIT and l >= 1:
            out.append(("a", l - 1))
        return frozenset(out)
    assert isinstance(op, DataCopy)
    leaf = spec.n - 1
    return frozenset([("a", leaf)] + [("d", leaf, b) for b in banks])


def _expand_key(key: tuple, spec: TreeSpec) -> List[QuditId]:
    if key[0] == "busA":
        return [AddressBus(key[1])]
    if key[0] == "busD":
        return [DataBus(key[1])]
    nodes = enumerate_layer(key[1], spec)
    if key[0] == "a":
        return [Addr(node) for node in nodes]
    return [Data(node, key[2]) for node in nodes]


def support(op: LayeredOp, spec: TreeSpec, m: int = 0) -> frozenset:
    """The set of qudits the op reads or writes."""
    return frozenset(q for key in support_keys(op, spec, m) for q in _expand_key(key, spec))


# ---------------------------------------------------------------------------
# Symbolic semantics on basis configurations
# ---------------------------------------------------------------------------

# A configuration maps qudits to symbols. Address qutrits use "W", "L", "R";
# address qubits "0"/"1"; data qubits "0", "1", "+", "-". Qudits missing from
# the mapping are idle ("W" or "0").
Config = Dict[QuditId, str]
Terms = List[Tuple[complex, Config]]

_SQ = 1 / np.sqrt(2)
_X_DATA = {"0": (1, "1"), "1": (1, "0"), "+": (1, "+"), "-": (-1, "-")}
_Z_DATA = {"0": (1, "0"), "1": (-1, "1"), "+": (1, "-"), "-": (1, "+")}
_H_DATA = {"0": (1, "+"), "1": (1, "-"), "+": (1, "0"), "-": (1, "1")}
# intSwap on (address qutrit, data qubit): (W,0)<->(L,0), (W,1)<->(R,0).
_INT_SWAP = {("W", "0"): ("L", "0"), ("L", "0"): ("W", "0"),
             ("W", "1"): ("R", "0"), ("R", "0"): ("W", "1")}


def idle_symbol(q: QuditId, scheme: Scheme) -> str:
    return "W" if (q.role is Role.ADDRESS and Scheme(scheme) is Scheme.QUTRIT) else "0"


def _get(cfg: Config, q: QuditId, scheme: Scheme) -> str:
    return cfg.get(q, idle_symbol(q, scheme))


def _expand_controls(terms: Terms, qudits: Iterable[QuditId], scheme: Scheme) -> Terms:
    """Rewrite +/- symbols on control qubits in the computational basis."""
    qudits = list(qudits)
    out: Terms = []
    for amp, cfg in terms:
        stack = [(amp, cfg)]
        for q in qudits:
            nxt = []
            for a, c in stack:
                s = _get(c, q, scheme)
                if s in "+-":
                    c0, c1 = dict(c), dict(c)
                    c0[q], c1[q] = "0", "1"
                    nxt.append((a * _SQ, c0))
                    nxt.append((a * _SQ * (1 if s == "+" else -1), c1))
                else:
                    nxt.append((a, c))
            stack = nxt
        out.extend(stack)
    return out


def _high_value(cfg: Config, m: int) -> int:
    return bits_to_int([int(cfg.get(HighAddress(i), "0")) for i in range(m)])


def _bus_move(amp: complex, cfg: Config, spec: TreeSpec, digit: int, direction: str) -> complex:
    root = NodeId(0, 0)
    qubit = spec.scheme is Scheme.QUBIT
    for b in range(spec.bandwidth):
        bus, tree = DataBus(digit + b), Data(root, b)
        if qubit and direction == "in":
            ph, cfg[bus] = _H_DATA[_get(cfg, bus, spec.scheme)]
            amp *= ph
        cfg[bus], cfg[tree] = _get(cfg, tree, spec.scheme), _get(cfg, bus, spec.scheme)
        if qubit and direction == "out":
            ph, cfg[bus] = _H_DATA[_get(cfg, bus, spec.scheme)]
            amp *= ph
    return amp


def _apply_one(op: LayeredOp, amp: complex, cfg: Config, spec: TreeSpec,
               memory: Optional[MemoryTable], m: int) -> Tuple[complex, Config]:
    scheme = spec.scheme
    qutrit = scheme is Scheme.QUTRIT
    cfg = dict(cfg)
    root = NodeId(0, 0)
    if isinstance(op, AddressBusInput):
        if _get(cfg, AddressBus(op.index), scheme) == "1":
            ph, cfg[Data(root)] = _X_DATA[_get(cfg, Data(root), scheme)]
            amp *= ph
    elif isinstance(op, DataBusInput):
        amp = _bus_move(amp, cfg, spec, op.digit, op.direction)
    elif isinstance(op, ControlledDataBusInput):
        if _high_value(cfg, m) == op.high:
            amp = _bus_move(amp, cfg, spec, op.digit, op.direction)
    elif isinstance(op, DataBusExchange):
        if op.out_high is None or _high_value(cfg, m) == op.out_high:
            amp = _bus_move(amp, cfg, spec, op.out_digit, "out")
        if op.in_high is None or _high_value(cfg, m) == op.in_high:
            amp = _bus_move(amp, cfg, spec, op.in_digit, "in")
    elif isinstance(op, Routing):
        for node in enumerate_layer(op.layer, spec):
            a = _get(cfg, Addr(node), scheme)
            left, right = node.children
            child = ({"L": left, "R": right} if qutrit else {"0": left, "1": right}).get(a)
            if child is None:
                continue
            for b in range(spec.bandwidth):
                p, c = Data(node, b), Data(child, b)
                cfg[p], cfg[c] = _get(cfg, c, scheme), _get(cfg, p, scheme)
    elif isinstance(op, InternalSwap):
        for node in enumerate_layer(op.layer, spec):
            a_q, d_q = Addr(node), Data(node, 0)
            if qutrit:
                parent = node.parent
                if parent is not None:
                    need = "L" if node.pos % 2 == 0 else "R"
                    if _get(cfg, Addr(parent), scheme) != need:
                        continue
                key = (_get(cfg, a_q, scheme), _get(cfg, d_q, scheme))
                if key in _INT_SWAP:
                    cfg[a_q], cfg[d_q] = _INT_SWAP[key]
                elif key[1] not in "01":
                    raise ValueError("qutrit scheme data qubits never leave the computational basis")
            else:
                cfg[a_q], cfg[d_q] = _get(cfg, d_q, scheme), _get(cfg, a_q, scheme)
    elif isinstance(op, DataCopy):
        if op.high is not None and _high_value(cfg, m) != op.high:
            return amp, cfg
        if memory is None:
            raise ValueError("data copy needs a memory table")
        offset = (op.high or 0) << spec.n
        for node in enumerate_layer(spec.n - 1, spec):
            a = _get(cfg, Addr(node), scheme)
            side = ({"L": 0, "R": 1} if qutrit else {"0": 0, "1": 1}).get(a)
            if side is None:
                continue
            cell = offset + 2 * node.pos + side
            for b in range(spec.bandwidth):
                if memory.bits[cell, op.digit + b]:
                    d_q = Data(node, b)
                    table = _X_DATA if qutrit else _Z_DATA
                    ph, cfg[d_q] = table[_get(cfg, d_q, scheme)]
                    amp *= ph
    else:
        raise TypeError(f"not a layered op: {op!r}")
    return amp, cfg


def _layer_addr(spec: TreeSpec, layer: int) -> List[QuditId]:
    return [Addr(node) for node in enumerate_layer(layer, spec)]


def _control_qudits(op: LayeredOp, spec: TreeSpec) -> List[QuditId]:
    if spec.scheme is Scheme.QUTRIT:
        return []
    if isinstance(op, Routing):
        return _layer_addr(spec, op.layer)
    if isinstance(op, DataCopy):
        return _layer_addr(spec, spec.n - 1)
    return []


def apply_op(op: LayeredOp, state: Union[Config, Terms], spec: TreeSpec,
             memory: Optional[MemoryTable] = None, m: int = 0) -> Terms:
    """Apply ``op`` to a basis configuration (or a list of weighted ones).

    Returns a list of (amplitude, configuration) terms. A single input
    configuration gives a single term unless a qubit-scheme control holds a
    +/- symbol, in which case the control is expanded in the 0/1 basis.
    """
    check_op(op, spec, m)
    terms: Terms = [(1.0 + 0j, dict(state))] if isinstance(state, Mapping) else list(state)
    terms = _expand_controls(terms, _control_qudits(op, spec), spec.scheme)
    return [_apply_one(op, amp, cfg, spec, memory, m) for amp, cfg in terms]


def normalize_terms(terms: Terms, spec: TreeSpec) -> Dict[tuple, complex]:
    """Merge terms into {sorted non-idle (qudit, symbol) items: amplitude}."""
    out: Dict[tuple, complex] = {}
    for amp, cfg in terms:
        key = tuple(sorted((q, s) for q, s in cfg.items() if s != idle_symbol(q, spec.scheme)))
        out[key] = out.get(key, 0) + amp
    return {k: v for k, v in out.items() if abs(v) > 1e-12}


# ---------------------------------------------------------------------------
# Validation and cost
# ---------------------------------------------------------------------------

def _payload_key(digit: int, high: Optional[int]) -> Tuple[int, Optional[int]]:
    return digit, high


def validate(program: Program) -> List[str]:
    """Return a list of human-readable problems; empty means the program is valid."""
    spec, m = program.spec, program.m
    problems: List[str] = []
    addr_counts = {Phase.ADDRESS_SETTING: Counter(), Phase.UNCOMPUTING: Counter()}
    entries: Counter = Counter()
    exits: Counter = Counter()
    copies: Counter = Counter()
    phase_order = [Phase.ADDRESS_SETTING, Phase.DATA_FETCH, Phase.UNCOMPUTING]
    last_phase = 0
    for t, step in enumerate(program.steps):
        idx = phase_order.index(step.phase)
        if idx < last_phase:
            problems.append(f"tick {t}: phase {step.phase.value} out of order")
        last_phase = max(last_phase, idx)
        owner: Dict[tuple, int] = {}
        for j, op in enumerate(step.ops):
            try:
                keys = support_keys(op, spec, m)
            except (ValueError, TypeError) as exc:
                problems.append(f"tick {t}: op {j} {op!r}: {exc}")
                continue
            for key in sorted(keys, key=str):
                if key in owner:
                    shared = _expand_key(key, spec)
                    problems.append(f"tick {t}: ops {owner[key]} and {j} share "
                                    f"{len(shared)} qudit(s), e.g. {shared[0]!r}")
                else:
                    owner[key] = j
            if isinstance(op, AddressBusInput):
                if step.phase is Phase.DATA_FETCH:
                    problems.append(f"tick {t}: address bus input during data fetch")
                else:
                    addr_counts[step.phase][op.index] += 1
            elif isinstance(op, (DataBusInput, ControlledDataBusInput, DataBusExchange, DataCopy)):
                if step.phase is not Phase.DATA_FETCH:
                    problems.append(f"tick {t}: {type(op).__name__} outside data fetch")
                if isinstance(op, DataBusInput):
                    (entries if op.direction == "in" else exits)[_payload_key(op.digit, None)] += 1
                elif isinstance(op, ControlledDataBusInput):
                    (entries if op.direction == "in" else exits)[_payload_key(op.digit, op.high)] += 1
                elif isinstance(op, DataBusExchange):
                    exits[_payload_key(op.out_digit, op.out_high)] += 1
                    entries[_payload_key(op.in_digit, op.in_high)] += 1
                else:
                    copies[_payload_key(op.digit, op.high)] += 1
    for phase, counts in addr_counts.items():
        for i in range(spec.n):
            if counts[i] != 1:
                problems.append(f"{phase.value}: AddressBusInput({i}) applied {counts[i]} times")
    highs = [None] if m == 0 else list(range(1 << m))
    expected = {_payload_key(d, h) for h in highs for d in range(0, spec.k, spec.bandwidth)}
    for name, counts in (("entry", entries), ("exit", exits), ("data copy", copies)):
        for key in sorted(expected, key=lambda x: (x[1] or 0, x[0])):
            if counts[key] != 1:
                problems.append(f"data_fetch: {name} of digit {key[0]}"
                                + (f" (high={key[1]})" if key[1] is not None else "")
                                + f" applied {counts[key]} times")
        for key in counts:
            if key not in expected:
                problems.append(f"data_fetch: unexpected {name} for {key}")
    return problems


def is_valid(program: Program) -> bool:
    return not validate(program)


def gate_cost(program: Program) -> Dict[str, int]:
    """Elementary gate counts per node instance.

    Unidirectional routing = SWAP + controlled SWAP per node, bidirectional =
    two controlled SWAPs. Bus moves count as SWAPs (controlled SWAPs when
    conditioned on the high register); CNOT/CZ/intSwap/H are ``other``.
    """
    spec = program.spec
    c = spec.bandwidth
    qubit = spec.scheme is Scheme.QUBIT
    cost = {"swaps": 0, "controlled_swaps": 0, "other": 0}
    for step in program.steps:
        for op in step.ops:
            if isinstance(op, Routing):
                width = 1 << op.layer
                if op.direction is Direction.BI:
                    cost["controlled_swaps"] += 2 * width
                else:
                    cost["swaps"] += width
                    cost["controlled_swaps"] += width
            elif isinstance(op, InternalSwap):
                cost["other"] += 1 << op.layer
            elif isinstance(op, DataCopy):
                cost["other"] += (1 << (spec.n - 1)) * c
            elif isinstance(op, AddressBusInput):
                cost["other"] += 1
            elif isinstance(op, DataBusInput):
                cost["swaps"] += c
                cost["other"] += c if qubit else 0
            elif isinstance(op, ControlledDataBusInput):
                cost["controlled_swaps"] += c
                cost["other"] += c if qubit else 0
            elif isinstance(op, DataBusExchange):
                for h in (op.out_high, op.in_high):
                    cost["controlled_swaps" if h is not None else "swaps"] += c
                cost["other"] += 2 * c if qubit else 0
    return cost
