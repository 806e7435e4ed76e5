import itertools

import numpy as np
import pytest

from bbqram import sim_branch as B
from bbqram import sim_dense as D
from bbqram.noise import Channel, KrausOutcome, NoiseModel, weyl_labels, weyl_operator
from bbqram.program import MemoryTable
from bbqram.protocols import compile_protocol
from bbqram.topology import Addr, NodeId, Role, Scheme, TreeSpec, tree_qudits

from conftest import ALL_CONFIGS, make

QUTRIT_VECS = [np.eye(3)[i] for i in range(3)]
QUBIT_VECS = [np.array([1, 0]), np.array([0, 1]),
              np.array([1, 1]) / np.sqrt(2), np.array([1, -1]) / np.sqrt(2)]


@pytest.mark.parametrize("gamma", [0.0, 0.3])
def test_transition_tables_are_closed_and_exact(gamma):
    _, weyl_new, weyl_ph, jump_new, jump_amp = B.symbol_tables(gamma)
    for typ, (dim, vecs) in enumerate(((3, QUTRIT_VECS), (2, QUBIT_VECS))):
        for a, b in [(0, 0)] + weyl_labels(dim):
            U = weyl_operator(dim, a, b)
            for s, v in enumerate(vecs):
                t = weyl_new[typ, a * dim + b, s]
                assert 0 <= t < len(vecs)
                assert np.allclose(U @ v, weyl_ph[typ, a * dim + b, s] * vecs[t])
        for j in range(1, dim):
            J = np.zeros((dim, dim))
            J[0, j] = 1
            for s, v in enumerate(vecs):
                t = jump_new[typ, j, s]
                assert 0 <= t < len(vecs)
                assert np.allclose(J @ v, jump_amp[typ, j, s] * vecs[t])


def test_no_jump_factors():
    g = 0.19
    delta, *_ = B.symbol_tables(g)
    assert np.allclose(np.exp(delta[0, :3]), [1, np.sqrt(1 - g), np.sqrt(1 - g)])
    assert np.allclose(np.exp(delta[1, :2]), [1, np.sqrt(1 - g)])
    # +/- keep only their own component under diag(1, sqrt(1-g))
    K0 = np.diag([1, np.sqrt(1 - g)])
    for s in (2, 3):
        assert np.isclose(QUBIT_VECS[s] @ K0 @ QUBIT_VECS[s], np.exp(delta[1, s]))


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("protocol,c,m", ALL_CONFIGS)
@pytest.mark.parametrize("n,k", [(1, 1), (2, 1), (2, 2)])
def test_noiseless_matches_dense_on_basis_inputs(scheme, protocol, c, m, n, k):
    if c > k:
        pytest.skip("bandwidth exceeds word length")
    prog, mem = make(protocol, n, k, scheme.value, c, m, seed=7)
    comp = D.CompiledDense(prog, mem)
    rng = np.random.default_rng(1)
    for i in range(1 << prog.address_width):
        z = int(rng.integers(1 << k))
        sim = B.BranchSimulator(prog, mem, [(i, z, 1.0)])
        bus, rest = sim.bus_output(sim.clean)
        ref = D.run_noiseless(prog, mem, D.bus_state(prog, [(i, z, 1.0)]), comp)
        assert np.allclose(bus, ref.bus, atol=1e-12)
        assert rest < 1e-20
        tab = B.run_branch_noiseless(prog, mem, [(i, z, 1.0)])
        assert np.all(tab.symbols == 0)
        assert tab.word_out[0] == z ^ mem.word(i)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_uniform_input_ends_good_with_unit_amplitudes(scheme):
    prog, mem = make("parallel", 3, 2, scheme.value, seed=2)
    br = B.uniform_branches(prog)
    tab = B.run_branch_noiseless(prog, mem, br)
    assert len(tab) == 8 and tab.good.all()
    assert np.allclose(tab.amplitude, 8 ** -0.5)
    assert np.all(tab.symbols == 0)
    assert np.array_equal(tab.word_out, [mem.word(a) for a in tab.address])


def test_pipelined_data_in_three_layers():
    prog = compile_protocol("parallel", TreeSpec(4, 3))
    mem = MemoryTable.from_words([0] * 16, 3)
    sim = B.BranchSimulator(prog, mem, [(0b1001, 0b111, 1.0)])
    path = {(l, 0b1001 >> (4 - l)) for l in range(4)}
    best = 0
    for tab in sim.trace():
        held = {q.node.layer for q, s in tab.non_idle(0).items() if q.role is Role.DATA}
        assert all((q.node.layer, q.node.pos) in path for q in tab.non_idle(0))
        best = max(best, len(held))
    assert best == 3


def _dense_with_weyl(prog, mem, bus, tick, qudit, a, b):
    comp = D.CompiledDense(prog, mem)
    sim = D.DenseTrajectorySimulator(prog, mem, bus, NoiseModel())
    psi = comp.initial_state(bus)
    for t in range(prog.n_ticks):
        psi = comp.step(psi, t)
        if t == tick:
            psi = D.apply_local(psi.reshape(comp.layout.dims), [comp.layout.axis[qudit]],
                                weyl_operator(qudit.dim(prog.spec.scheme), a, b)).reshape(-1)
    return sim.fidelity(psi)


def test_weyl_x_on_installed_address_qutrit():
    prog, mem = make("parallel", 2, 1, seed=0)
    br = B.uniform_branches(prog)
    q = Addr(NodeId(1, 0))
    slots = B.slot_trace(prog)
    # a tick during the fetch where (1,0) holds its address symbol
    tick = int(np.nonzero(slots.addr[0, :, 1] & (slots.data[0, :, 1] == 2))[0][0])
    ev = [KrausOutcome(tick, Channel.DEPOLARIZING, q, 3)]  # X on the qutrit
    traj = B.run_branch_trajectory(prog, mem, br, NoiseModel(0, 0.1), events=ev)
    dense = _dense_with_weyl(prog, mem, D.bus_state(prog, br), tick, q, 1, 0)
    assert traj.fidelity == pytest.approx(dense, abs=1e-12)
    assert traj.fidelity <= 0.25 + 1e-12
    assert traj.lam == 0.5
    good = B.classify_good_branches(prog, ev, br)
    assert good.lam == 0.5 and list(good.good) == [False, False, True, True]


def test_zero_events_leave_state_ideal():
    prog, mem = make("parallel", 2, 2, seed=4)
    br = B.uniform_branches(prog)
    traj = B.run_branch_trajectory(prog, mem, br, NoiseModel(0.0, 0.01), events=[])
    assert traj.fidelity == pytest.approx(1.0, abs=1e-12)
    assert traj.lam == 1.0
    assert np.allclose(np.abs(traj.table.amplitude), 0.5)
    assert B.classify_good_branches(prog, [], br).lam == 1.0


def test_active_set_name_checked():
    prog, _ = make("parallel", 1, 1)
    ev = [KrausOutcome(0, Channel.DEPOLARIZING, Addr(NodeId(0, 0)), 1)]
    with pytest.raises(ValueError):
        B.classify_good_branches(prog, ev, B.uniform_branches(prog), active="bogus")


@pytest.mark.parametrize("scheme", list(Scheme))
def test_reach_bound_holds_for_every_single_weyl_event(scheme):
    prog, mem = make("parallel", 2, 1, scheme.value, seed=1)
    br = B.uniform_branches(prog)
    sim = B.BranchSimulator(prog, mem, br, NoiseModel(0, 0.1))
    for t, q in itertools.product(range(prog.n_ticks), tree_qudits(prog.spec)):
        dim = q.dim(scheme)
        for a, b in weyl_labels(dim):
            ev = [KrausOutcome(t, Channel.DEPOLARIZING, q, a * dim + b)]
            traj = B.run_branch_trajectory(prog, mem, br, sim.model, events=ev, simulator=sim,
                                           active="reach")
            if traj.lam > 0.5:
                assert traj.fidelity >= (2 * traj.lam - 1) ** 2 - 1e-9


def test_weyl_replay_matches_dense_oracle():
    prog, mem = make("parallel", 2, 1, "qubit", seed=3)
    br = B.uniform_branches(prog)
    bus = D.bus_state(prog, br)
    sim = B.BranchSimulator(prog, mem, br, NoiseModel(0, 0.1))
    rng = np.random.default_rng(0)
    qs = tree_qudits(prog.spec)
    for _ in range(20):
        t = int(rng.integers(prog.n_ticks))
        q = qs[int(rng.integers(len(qs)))]
        a, b = weyl_labels(2)[int(rng.integers(3))]
        ev = [KrausOutcome(t, Channel.DEPOLARIZING, q, 2 * a + b)]
        traj = B.run_branch_trajectory(prog, mem, br, sim.model, events=ev, simulator=sim)
        assert traj.fidelity == pytest.approx(_dense_with_weyl(prog, mem, bus, t, q, a, b), abs=1e-12)


def test_noiseless_estimate_is_exact():
    prog, mem = make("parallel", 3, 2, seed=0)
    est = B.estimate_fidelity(prog, mem, None, NoiseModel(), 100, np.random.default_rng(0))
    assert est.mean == 1.0 and est.stderr == 0.0 and est.lambda_mean == 1.0


def test_estimate_is_deterministic():
    prog, mem = make("parallel", 3, 2, seed=0)
    model = NoiseModel(1e-3, 1e-3)
    a = B.estimate_fidelity(prog, mem, None, model, 200, np.random.default_rng(9))
    b = B.estimate_fidelity(prog, mem, None, model, 200, np.random.default_rng(9))
    assert a == b
    assert 0 <= a.mean <= 1 and a.stderr > 0 and 0 <= a.lambda_mean <= 1


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("model", [NoiseModel(0.03, 0.0), NoiseModel(0.0, 0.03), NoiseModel(0.02, 0.02)])
def test_estimate_matches_density_evolution(scheme, model):
    prog, mem = make("parallel", 1, 2, scheme.value, seed=5)
    br = B.uniform_branches(prog)
    bus = D.bus_state(prog, br)
    rho = D.evolve_density(prog, mem, np.outer(bus, bus.conj()), model)
    ideal = D.ideal_output(prog, mem, bus)
    exact = float(np.real(ideal.conj() @ rho @ ideal))
    est = B.estimate_fidelity(prog, mem, br, model, 3000, np.random.default_rng(11))
    assert abs(est.mean - exact) <= 3 * est.stderr + 1e-6


def test_bad_inputs_rejected():
    prog, mem = make("parallel", 2, 1)
    with pytest.raises(ValueError):
        B.BranchSimulator(prog, mem, [(4, 0, 1.0)])
    with pytest.raises(ValueError):
        B.BranchSimulator(prog, mem, [(0, 2, 1.0)])
    with pytest.raises(ValueError):
        B.BranchSimulator(prog, mem, [(0, 0, 1.0), (0, 0, 1.0)])
    with pytest.raises(ValueError):
        B.BranchSimulator(prog, mem, [(0, 0, 0.0)])
