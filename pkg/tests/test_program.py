import itertools
import json

import numpy as np
import pytest

from bbqram.program import (
    AddressBusInput, ControlledDataBusInput, DataBusExchange, DataBusInput, DataCopy, Direction,
    InternalSwap, MemoryTable, Phase, Program, Routing, TimeStep, apply_op, gate_cost, normalize_terms,
    support, validate,
)
from bbqram.protocols import compile_protocol
from bbqram.topology import Addr, AddressBus, Data, DataBus, NodeId, Scheme, TreeSpec, tree_qudits

ROOT = NodeId(0, 0)


def test_support_examples():
    spec = TreeSpec(3, 2)
    assert support(AddressBusInput(2), spec) == {AddressBus(2), Data(ROOT)}
    assert support(Routing(0, Direction.DOWN), spec) == {
        Addr(ROOT), Data(ROOT), Data(NodeId(1, 0)), Data(NodeId(1, 1))}
    assert support(DataCopy(0), TreeSpec(1, 1)) == {Addr(ROOT), Data(ROOT)}
    assert support(DataBusInput(1), spec) == {DataBus(1), Data(ROOT)}


def test_support_internal_swap_conditions_on_parent_for_qutrits():
    spec = TreeSpec(3, 1)
    layer1 = [NodeId(1, 0), NodeId(1, 1)]
    expect = {Addr(v) for v in layer1} | {Data(v) for v in layer1}
    assert support(InternalSwap(1), spec) == expect | {Addr(ROOT)}
    assert support(InternalSwap(1), TreeSpec(3, 1, Scheme.QUBIT)) == expect
    assert support(InternalSwap(0), spec) == {Addr(ROOT), Data(ROOT)}


@pytest.mark.parametrize("op", [AddressBusInput(3), DataBusInput(2), DataCopy(5), Routing(2),
                                Routing(-1), InternalSwap(3)])
def test_support_rejects_bad_indices(op):
    with pytest.raises(ValueError):
        support(op, TreeSpec(3, 2))


def _one(terms):
    assert len(terms) == 1
    return terms[0]


def test_qutrit_routing_examples():
    spec = TreeSpec(2, 1)
    left, right = NodeId(1, 0), NodeId(1, 1)
    cfg = {Addr(ROOT): "L", Data(ROOT): "1", Data(left): "0", Data(right): "0"}
    amp, out = _one(apply_op(Routing(0), cfg, spec))
    assert (out[Data(ROOT)], out[Data(left)], out[Data(right)]) == ("0", "1", "0")
    cfg[Addr(ROOT)] = "W"
    amp, out = _one(apply_op(Routing(0), cfg, spec))
    assert out == cfg and amp == 1


def test_qutrit_internal_swap_mapping():
    spec = TreeSpec(2, 1)
    child = NodeId(1, 1)  # right child: active when the parent holds R
    cfg = {Addr(ROOT): "R", Addr(child): "W", Data(child): "1"}
    _, out = _one(apply_op(InternalSwap(1), cfg, spec))
    assert (out[Addr(child)], out[Data(child)]) == ("R", "0")
    # inactive parent: untouched
    cfg[Addr(ROOT)] = "L"
    _, out = _one(apply_op(InternalSwap(1), cfg, spec))
    assert (out[Addr(child)], out[Data(child)]) == ("W", "1")
    # root layer is unconditioned
    _, out = _one(apply_op(InternalSwap(0), {Data(ROOT): "0"}, spec))
    assert out[Addr(ROOT)] == "L"


def test_qubit_data_copy_phase_flip():
    spec = TreeSpec(1, 1, Scheme.QUBIT)
    mem = MemoryTable.from_words([1, 0], 1)
    amp, out = _one(apply_op(DataCopy(0), {Addr(ROOT): "0", Data(ROOT): "+"}, spec, mem))
    assert out[Data(ROOT)] == "-" and amp == 1
    _, out = _one(apply_op(DataCopy(0), {Addr(ROOT): "1", Data(ROOT): "+"}, spec, mem))
    assert out[Data(ROOT)] == "+"


def test_qutrit_data_copy_is_cnot():
    spec = TreeSpec(1, 2)
    mem = MemoryTable.from_words([0b01, 0b10], 2)
    _, out = _one(apply_op(DataCopy(0), {Addr(ROOT): "R", Data(ROOT): "0"}, spec, mem))
    assert out[Data(ROOT)] == "1"
    _, out = _one(apply_op(DataCopy(1), {Addr(ROOT): "R", Data(ROOT): "0"}, spec, mem))
    assert out[Data(ROOT)] == "0"
    _, out = _one(apply_op(DataCopy(0), {Addr(ROOT): "W", Data(ROOT): "0"}, spec, mem))
    assert out[Data(ROOT)] == "0"


def test_qubit_bus_input_applies_hadamard():
    spec = TreeSpec(1, 1, Scheme.QUBIT)
    _, out = _one(apply_op(DataBusInput(0, "in"), {DataBus(0): "1"}, spec))
    assert out[Data(ROOT)] == "-" and out[DataBus(0)] == "0"
    _, back = _one(apply_op(DataBusInput(0, "out"), out, spec))
    assert back[DataBus(0)] == "1" and back[Data(ROOT)] == "0"


def test_controlled_bus_input_respects_high_register():
    from bbqram.topology import HighAddress
    spec = TreeSpec(1, 1)
    cfg = {HighAddress(0): "1", DataBus(0): "1"}
    _, out = _one(apply_op(ControlledDataBusInput(0, 0), cfg, spec, m=1))
    assert out[DataBus(0)] == "1"
    _, out = _one(apply_op(ControlledDataBusInput(0, 1), cfg, spec, m=1))
    assert out[Data(ROOT)] == "1" and out[DataBus(0)] == "0"


def _local_configs(spec, qudits):
    alph = {q: (["W", "L", "R"] if q.dim(spec.scheme) == 3 else ["0", "1"]) for q in qudits}
    for combo in itertools.product(*(alph[q] for q in qudits)):
        yield dict(zip(qudits, combo))


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("direction", list(Direction))
def test_routing_is_an_involution(scheme, direction):
    spec = TreeSpec(2, 1, scheme)
    op = Routing(0, direction)
    for cfg in _local_configs(spec, sorted(support(op, spec))):
        terms = apply_op(op, apply_op(op, cfg, spec), spec)
        assert normalize_terms(terms, spec) == normalize_terms([(1, cfg)], spec)


def test_qubit_internal_swap_is_an_involution():
    spec = TreeSpec(2, 1, Scheme.QUBIT)
    for cfg in _local_configs(spec, sorted(support(InternalSwap(1), spec))):
        terms = apply_op(InternalSwap(1), apply_op(InternalSwap(1), cfg, spec), spec)
        assert normalize_terms(terms, spec) == normalize_terms([(1, cfg)], spec)


def test_bidirectional_moves_both_payloads_on_collisions():
    # payload A moving down from layer 1 meets payload B moving up from layer 2
    spec = TreeSpec(3, 1)
    a1, c2 = NodeId(1, 1), NodeId(2, 2)
    for pa, pb in itertools.product("01", repeat=2):
        cfg = {Addr(ROOT): "R", Addr(a1): "L", Data(a1): pa, Data(c2): pb}
        moved = dict(cfg)
        moved[Data(a1)], moved[Data(c2)] = pb, pa
        bi = apply_op(Routing(1, Direction.BI), cfg, spec)
        assert normalize_terms(bi, spec) == normalize_terms([(1, moved)], spec)
        for d in (Direction.DOWN, Direction.UP):
            assert normalize_terms(apply_op(Routing(1, d), cfg, spec), spec) == normalize_terms(bi, spec)


def test_data_copies_commute_across_leaves():
    spec = TreeSpec(2, 1)
    mem = MemoryTable.from_words([1, 0, 1, 1], 1)
    cfg = {Addr(NodeId(1, 0)): "L", Addr(NodeId(1, 1)): "R", Data(NodeId(1, 0)): "0",
           Data(NodeId(1, 1)): "1"}
    once = apply_op(DataCopy(0), cfg, spec, mem)
    assert normalize_terms(once, spec)
    twice = apply_op(DataCopy(0), once, spec, mem)
    assert normalize_terms(twice, spec) == normalize_terms([(1, cfg)], spec)


def _prog(spec, steps):
    return Program(spec, "test", tuple(TimeStep(ops, Phase.DATA_FETCH) for ops in steps))


def test_validate_detects_conflicts():
    spec = TreeSpec(4, 1)
    bad = validate(_prog(spec, [(Routing(0, Direction.DOWN), Routing(0, Direction.UP))]))
    assert any("conflict" in p or "share" in p for p in bad)
    ok = validate(_prog(spec, [(Routing(0, Direction.DOWN), Routing(2, Direction.DOWN))]))
    assert not any("conflict" in p or "share" in p for p in ok)
    assert validate(compile_protocol("parallel", TreeSpec(4, 3))) == []


def test_validate_counts_required_ops():
    prog = compile_protocol("parallel", TreeSpec(3, 2))
    steps = list(prog.steps)
    for t, step in enumerate(steps):
        if any(isinstance(op, DataCopy) for op in step.ops):
            steps[t] = TimeStep(tuple(op for op in step.ops if not isinstance(op, DataCopy)), step.phase)
            break
    assert validate(Program(prog.spec, prog.protocol, tuple(steps), prog.m))


def test_step_order_within_tick_is_irrelevant():
    rng = np.random.default_rng(4)
    prog = compile_protocol("parallel", TreeSpec(3, 2))
    mem = MemoryTable.random(8, 2, rng)
    spec = prog.spec
    addr_cfg = {AddressBus(i): str(b) for i, b in enumerate([1, 0, 1])}
    addr_cfg[DataBus(0)] = "1"
    fwd = [(1 + 0j, addr_cfg)]
    rev = [(1 + 0j, addr_cfg)]
    for step in prog.steps:
        for op in step.ops:
            fwd = apply_op(op, fwd, spec, mem)
        for op in reversed(step.ops):
            rev = apply_op(op, rev, spec, mem)
        assert normalize_terms(fwd, spec) == normalize_terms(rev, spec)


def test_gate_cost_examples():
    spec = TreeSpec(4, 1)
    for l in range(3):
        down = gate_cost(_prog(spec, [(Routing(l, Direction.DOWN),)]))
        assert down == {"swaps": 2 ** l, "controlled_swaps": 2 ** l, "other": 0}
        bi = gate_cost(_prog(spec, [(Routing(l, Direction.BI),)]))
        assert bi == {"swaps": 0, "controlled_swaps": 2 ** (l + 1), "other": 0}
    assert gate_cost(_prog(spec, [])) == {"swaps": 0, "controlled_swaps": 0, "other": 0}


@pytest.mark.parametrize("protocol,c,m", [("parallel", 1, 0), ("hb-parallel", 2, 0), ("hybrid-parallel", 1, 2)])
def test_json_roundtrip(protocol, c, m):
    prog = compile_protocol(protocol, TreeSpec(3, 4, Scheme.QUBIT, c), m)
    doc = json.loads(prog.to_json())
    assert set(doc) == {"version", "n", "k", "scheme", "protocol", "bandwidth", "m", "steps"}
    assert Program.from_json(prog.to_json()) == prog


def test_exchange_op_semantics():
    spec = TreeSpec(1, 2)
    cfg = {Data(ROOT): "1", DataBus(1): "1"}
    _, out = _one(apply_op(DataBusExchange(0, 1), cfg, spec))
    assert out[DataBus(0)] == "1" and out[Data(ROOT)] == "1" and out[DataBus(1)] == "0"


def test_memory_table():
    mem = MemoryTable.from_words([5, 2], 3)
    assert mem.word(0) == 5 and mem.word(1) == 2 and mem.cells == 2 and mem.k == 3
    with pytest.raises(ValueError):
        MemoryTable(np.array([[2]]))
