"""Full state-vector simulation over bus and tree qudits for tiny instances.

Ops are expanded into local gates written directly from their operator
definitions (projectors on the control level times SWAP / intSwap / X / Z).
Within a tick, consecutive monomial gates (permutation times phase) are fused
into one index map; the qubit-scheme bus Hadamards stay dense.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .noise import (
    EventArrays, NoiseModel, damping_kraus, depolarizing_kraus, sample_event_arrays, to_outcomes,
    weyl_operator,
)
from .program import (
    AddressBusInput, ControlledDataBusInput, DataBusExchange, DataBusInput, DataCopy, InternalSwap,
    LayeredOp, MemoryTable, Program, Routing, check_memory,
)
from .topology import (
    Addr, AddressBus, Data, DataBus, HighAddress, NodeId, QuditId, Role, Scheme, enumerate_layer,
    qudit_order, tree_qudits,
)

MAX_AMPLITUDES = 1 << 26

Gate = Tuple[Tuple[int, ...], np.ndarray]  # (axes, local matrix)

_I2 = np.eye(2, dtype=complex)
_X2 = np.array([[0, 1], [1, 0]], dtype=complex)
_Z2 = np.diag([1, -1]).astype(complex)
_H2 = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_SWAP = np.eye(4, dtype=complex)[[0, 2, 1, 3]]
_CNOT = np.eye(4, dtype=complex)[[0, 1, 3, 2]]


def _proj(dim: int, level: int) -> np.ndarray:
    P = np.zeros((dim, dim), dtype=complex)
    P[level, level] = 1
    return P


def _kron(*ms: np.ndarray) -> np.ndarray:
    return reduce(np.kron, ms)


def _int_swap_matrix() -> np.ndarray:
    """intSwap on (address qutrit, data qubit), index = 2*a + d."""
    perm = np.arange(6)
    W, L, R = 0, 1, 2
    for (a1, d1), (a2, d2) in (((W, 0), (L, 0)), ((W, 1), (R, 0))):
        i, j = 2 * a1 + d1, 2 * a2 + d2
        perm[i], perm[j] = j, i
    return np.eye(6, dtype=complex)[perm]


class DenseLayout:
    """Axis bookkeeping: bus qudits first, then tree qudits in canonical order."""

    def __init__(self, program: Program):
        spec = program.spec
        self.spec = spec
        self.m = program.m
        self.qudits: List[QuditId] = qudit_order(spec, program.m)
        self.dims = tuple(q.dim(spec.scheme) for q in self.qudits)
        self.axis: Dict[QuditId, int] = {q: i for i, q in enumerate(self.qudits)}
        self.n_bus = program.m + spec.n + spec.k
        self.bus_dim = 1 << self.n_bus
        self.tree_dim = int(np.prod(self.dims[self.n_bus:], dtype=np.int64))
        self.size = self.bus_dim * self.tree_dim
        if self.size > MAX_AMPLITUDES:
            raise MemoryError(f"dense state needs {self.size} amplitudes (> 2^26)")


def _controlled_on_high(gate: Gate, layout: DenseLayout, high: Optional[int]) -> Gate:
    if high is None:
        return gate
    axes, U = gate
    m = layout.m
    hi_axes = tuple(layout.axis[HighAddress(i)] for i in range(m))
    P = np.zeros((1 << m, 1 << m), dtype=complex)
    P[high, high] = 1
    Id = np.eye(U.shape[0], dtype=complex)
    return hi_axes + axes, np.kron(P, U) + np.kron(np.eye(1 << m) - P, Id)


def _bus_gates(layout: DenseLayout, digit: int, direction: str, high: Optional[int]) -> List[Gate]:
    spec = layout.spec
    root = NodeId(0, 0)
    out: List[Gate] = []
    for b in range(spec.bandwidth):
        bus, tree = layout.axis[DataBus(digit + b)], layout.axis[Data(root, b)]
        seq: List[Gate] = [((bus, tree), _SWAP)]
        if spec.scheme is Scheme.QUBIT:
            seq = [((bus,), _H2)] + seq if direction == "in" else seq + [((bus,), _H2)]
        out.extend(_controlled_on_high(g, layout, high) for g in seq)
    return out


def op_gates(op: LayeredOp, layout: DenseLayout, memory: MemoryTable) -> List[Gate]:
    spec = layout.spec
    ax = layout.axis
    qutrit = spec.scheme is Scheme.QUTRIT
    da = 3 if qutrit else 2
    root = NodeId(0, 0)
    if isinstance(op, AddressBusInput):
        return [((ax[AddressBus(op.index)], ax[Data(root, 0)]), _CNOT)]
    if isinstance(op, DataBusInput):
        return _bus_gates(layout, op.digit, op.direction, None)
    if isinstance(op, ControlledDataBusInput):
        return _bus_gates(layout, op.digit, op.direction, op.high)
    if isinstance(op, DataBusExchange):
        return (_bus_gates(layout, op.out_digit, "out", op.out_high)
                + _bus_gates(layout, op.in_digit, "in", op.in_high))
    gates: List[Gate] = []
    if isinstance(op, Routing):
        # |W><W| x I + |L><L| x SWAP(parent, left) + |R><R| x SWAP(parent, right)
        swap_left = _kron(_SWAP, _I2)
        swap_right = np.eye(8, dtype=complex)[[0, 4, 2, 6, 1, 5, 3, 7]]
        if qutrit:
            U = (_kron(_proj(3, 0), np.eye(8)) + _kron(_proj(3, 1), swap_left)
                 + _kron(_proj(3, 2), swap_right))
        else:
            U = _kron(_proj(2, 0), swap_left) + _kron(_proj(2, 1), swap_right)
        for node in enumerate_layer(op.layer, spec):
            left, right = node.children
            for b in range(spec.bandwidth):
                gates.append(((ax[Addr(node)], ax[Data(node, b)], ax[Data(left, b)],
                               ax[Data(right, b)]), U))
        return gates
    if isinstance(op, InternalSwap):
        for node in enumerate_layer(op.layer, spec):
            a, d = ax[Addr(node)], ax[Data(node, 0)]
            if not qutrit:
                gates.append(((a, d), _SWAP))
            elif node.parent is None:
                gates.append(((a, d), _int_swap_matrix()))
            else:
                need = 1 if node.pos % 2 == 0 else 2
                U = sum(_kron(_proj(3, lv), _int_swap_matrix() if lv == need else np.eye(6))
                        for lv in range(3))
                gates.append(((ax[Addr(node.parent)], a, d), U))
        return gates
    if isinstance(op, DataCopy):
        offset = (op.high or 0) << spec.n
        flip = _X2 if qutrit else _Z2
        left_level, right_level = (1, 2) if qutrit else (0, 1)
        for node in enumerate_layer(spec.n - 1, spec):
            for b in range(spec.bandwidth):
                mL = memory.bits[offset + 2 * node.pos, op.digit + b]
                mR = memory.bits[offset + 2 * node.pos + 1, op.digit + b]
                U = np.zeros((2 * da, 2 * da), dtype=complex)
                for lv in range(da):
                    bit = mL if lv == left_level else (mR if lv == right_level else 0)
                    U += _kron(_proj(da, lv), flip if bit else _I2)
                gate = ((ax[Addr(node)], ax[Data(node, b)]), U)
                gates.append(_controlled_on_high(gate, layout, op.high))
        return gates
    raise TypeError(f"not a layered op: {op!r}")


def apply_local(psi: np.ndarray, axes: Sequence[int], U: np.ndarray) -> np.ndarray:
    """Apply a local matrix on ``axes`` of a tensor-shaped state."""
    k = len(axes)
    front = list(range(k))
    moved = np.moveaxis(psi, list(axes), front)
    shape = moved.shape
    out = (U @ moved.reshape(U.shape[1], -1)).reshape(shape)
    return np.moveaxis(out, front, list(axes))


def _is_monomial(U: np.ndarray) -> bool:
    nz = np.abs(U) > 1e-12
    return bool(np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1)
                and np.allclose(np.abs(U[nz]), 1.0))


@dataclass
class _Stage:
    perm: Optional[np.ndarray] = None
    phase: Optional[np.ndarray] = None
    gate: Optional[Gate] = None


def _fuse(gates: List[Gate], dims: Tuple[int, ...]) -> List[_Stage]:
    """Fuse runs of monomial gates into (perm, phase) maps on the flat state."""
    size = int(np.prod(dims))
    stages: List[_Stage] = []
    run: List[Gate] = []

    def flush() -> None:
        if not run:
            return
        probe = np.arange(1, size + 1, dtype=complex).reshape(dims)
        for axes, U in run:
            probe = apply_local(probe, axes, U)
        flat = probe.reshape(-1)
        mag = np.abs(flat)
        stages.append(_Stage(perm=np.rint(mag).astype(np.int64) - 1, phase=flat / mag))
        run.clear()

    for g in gates:
        if _is_monomial(g[1]):
            run.append(g)
        else:
            flush()
            stages.append(_Stage(gate=g))
    flush()
    return stages


def _run_stages(psi_flat: np.ndarray, stages: List[_Stage], dims: Tuple[int, ...]) -> np.ndarray:
    for st in stages:
        if st.perm is not None:
            psi_flat = st.phase * psi_flat[st.perm]
        else:
            axes, U = st.gate
            psi_flat = apply_local(psi_flat.reshape(dims), axes, U).reshape(-1)
    return psi_flat


class CompiledDense:
    """A program lowered to per-tick fused stages for one memory table."""

    def __init__(self, program: Program, memory: MemoryTable):
        check_memory(memory, program.spec, program.m)
        self.program = program
        self.memory = memory
        self.layout = DenseLayout(program)
        self.ticks: List[List[_Stage]] = []
        cache: Dict[Tuple[LayeredOp, ...], List[_Stage]] = {}
        for step in program.steps:
            if step.ops not in cache:
                gates = [g for op in step.ops for g in op_gates(op, self.layout, memory)]
                cache[step.ops] = _fuse(gates, self.layout.dims)
            self.ticks.append(cache[step.ops])

    def initial_state(self, bus: np.ndarray) -> np.ndarray:
        bus = np.asarray(bus, dtype=complex).reshape(-1)
        if bus.size != self.layout.bus_dim:
            raise ValueError(f"bus state must have {self.layout.bus_dim} amplitudes")
        psi = np.zeros((self.layout.bus_dim, self.layout.tree_dim), dtype=complex)
        psi[:, 0] = bus
        return psi.reshape(-1)

    def step(self, psi_flat: np.ndarray, tick: int) -> np.ndarray:
        return _run_stages(psi_flat, self.ticks[tick], self.layout.dims)


# ---------------------------------------------------------------------------
# Bus states and the ideal query map
# ---------------------------------------------------------------------------

def bus_state(program: Program, branches: Sequence[Tuple[int, int, complex]]) -> np.ndarray:
    """Bus vector from (address, data word, amplitude) triples.

    The address spans m + n bits (high bits first); words are MSB-first.
    """
    k = program.spec.k
    vec = np.zeros(1 << (program.address_width + k), dtype=complex)
    for address, word, amp in branches:
        vec[(address << k) | word] += amp
    return vec


def uniform_branches(program: Program) -> List[Tuple[int, int, complex]]:
    count = 1 << program.address_width
    amp = 1 / np.sqrt(count)
    return [(i, 0, amp) for i in range(count)]


def ideal_output(program: Program, memory: MemoryTable, bus: np.ndarray) -> np.ndarray:
    """|i>|d> -> |i>|d xor m_i> applied directly to a bus vector."""
    k = program.spec.k
    words = np.array([memory.word(i) for i in range(memory.cells)], dtype=np.int64)
    idx = np.arange(bus.size)
    addr, word = idx >> k, idx & ((1 << k) - 1)
    out = np.zeros_like(bus)
    out[(addr << k) | (word ^ words[addr])] = bus
    return out


# ---------------------------------------------------------------------------
# Noiseless runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiselessResult:
    bus: np.ndarray          # reduced bus state (tree projected on idle)
    restoration_error: float  # 1 - probability that every tree qudit is idle
    state: np.ndarray        # full final state, flat


def run_noiseless(program: Program, memory: MemoryTable, bus: np.ndarray,
                  compiled: Optional[CompiledDense] = None) -> NoiselessResult:
    comp = compiled or CompiledDense(program, memory)
    psi = comp.initial_state(bus)
    for t in range(program.n_ticks):
        psi = comp.step(psi, t)
    mat = psi.reshape(comp.layout.bus_dim, comp.layout.tree_dim)
    out = mat[:, 0].copy()
    restoration = float(abs(np.vdot(psi, psi) - np.vdot(out, out)))
    return NoiselessResult(out, restoration, psi)


# ---------------------------------------------------------------------------
# Noisy trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenseTrajectory:
    state: np.ndarray   # normalized final state, flat
    weight: float       # probability of the sampled outcome record
    fidelity: float     # <ideal| rho_bus |ideal>
    outcomes: list      # realized non-trivial Kraus outcomes


def _tree_axes(layout: DenseLayout) -> List[int]:
    return list(range(layout.n_bus, len(layout.dims)))


def _no_jump_weights(layout: DenseLayout, gamma: float) -> np.ndarray:
    """Flat tensor of prod_q K0(level_q) over tree qudits (bus factors are 1)."""
    w = np.ones(layout.dims)
    for axis in _tree_axes(layout):
        d = layout.dims[axis]
        diag = np.diag(damping_kraus(d, gamma)[0]).real
        shape = [1] * len(layout.dims)
        shape[axis] = d
        w = w * diag.reshape(shape)
    return w.reshape(-1)


def _sampler_axes(layout: DenseLayout) -> List[int]:
    """Axes of tree qudits in the event sampler's order (addresses, then data)."""
    tq = tree_qudits(layout.spec)
    order = [q for q in tq if q.role is Role.ADDRESS] + [q for q in tq if q.role is Role.DATA]
    return [layout.axis[q] for q in order]


def _marginal(psi_flat: np.ndarray, dims: Tuple[int, ...], axis: int) -> np.ndarray:
    probs = np.abs(psi_flat.reshape(dims)) ** 2
    other = tuple(i for i in range(len(dims)) if i != axis)
    return probs.sum(axis=other)


def _lower(psi_flat: np.ndarray, dims: Tuple[int, ...], axis: int, level: int) -> np.ndarray:
    """|0><level| on one axis (unnormalized)."""
    psi = psi_flat.reshape(dims)
    out = np.zeros_like(psi)
    src = [slice(None)] * len(dims)
    dst = [slice(None)] * len(dims)
    src[axis], dst[axis] = level, 0
    out[tuple(dst)] = psi[tuple(src)]
    return out.reshape(-1)


def _scale_axis(psi_flat: np.ndarray, dims: Tuple[int, ...], axis: int, diag: np.ndarray) -> np.ndarray:
    shape = [1] * len(dims)
    shape[axis] = len(diag)
    return (psi_flat.reshape(dims) * diag.reshape(shape)).reshape(-1)


class DenseTrajectorySimulator:
    """Renormalize-and-weight trajectories with exact jump probabilities."""

    def __init__(self, program: Program, memory: MemoryTable, bus: np.ndarray, model: NoiseModel):
        self.program = program
        self.model = model
        self.comp = CompiledDense(program, memory)
        self.layout = self.comp.layout
        self.psi0 = self.comp.initial_state(bus)
        self.ideal = ideal_output(program, memory, np.asarray(bus, dtype=complex))
        self.axes = _sampler_axes(self.layout)
        self.w0 = _no_jump_weights(self.layout, model.gamma) if model.gamma > 0 else None
        self.weyl = {d: {a * d + b: weyl_operator(d, a, b) for a in range(d) for b in range(d)}
                     for d in (2, 3)}
        self.k0 = {d: np.diag(damping_kraus(d, model.gamma)[0]).real for d in (2, 3)}
        self.depol_only = NoiseModel(0.0, model.p)

    def fidelity(self, psi_flat: np.ndarray) -> float:
        mat = psi_flat.reshape(self.layout.bus_dim, self.layout.tree_dim)
        v = self.ideal.conj() @ mat
        return float(np.vdot(v, v).real)

    def _damp_tick(self, psi: np.ndarray, rng: np.random.Generator, tick: int,
                   realized: List[Tuple[int, int, int, int]]) -> Tuple[np.ndarray, float]:
        """One damping layer on all tree qudits; returns (state, outcome probability)."""
        dims = self.layout.dims
        gamma = self.model.gamma
        phi = self.w0 * psi
        p_none = float(np.vdot(phi, phi).real)
        u = rng.random()
        if u < p_none:
            return phi / np.sqrt(p_none), p_none
        # walk the qudits for the first jump, then sample the rest sequentially
        u -= p_none
        prefix = 1.0
        prob = 1.0
        jumped = False
        for pos, axis in enumerate(self.axes):
            d = dims[axis]
            pi = _marginal(psi, dims, axis)
            jumps = gamma * pi[1:]
            if not jumped:
                for j, pj in enumerate(jumps, start=1):
                    mass = prefix * pj
                    if u < mass:
                        psi = _lower(psi, dims, axis, j)
                        psi /= np.sqrt(np.vdot(psi, psi).real)
                        prob *= pj
                        realized.append((tick, 1, pos, j))
                        jumped = True
                        break
                    u -= mass
                if jumped:
                    continue
                p0 = 1.0 - jumps.sum()
                prefix *= p0
                prob *= p0
                psi = _scale_axis(psi, dims, axis, self.k0[d])
                psi /= np.sqrt(np.vdot(psi, psi).real)
            else:
                r = rng.random()
                cum = 0.0
                choice = 0
                for j, pj in enumerate(jumps, start=1):
                    cum += pj
                    if r < cum:
                        choice = j
                        break
                if choice:
                    psi = _lower(psi, dims, axis, choice)
                    prob *= jumps[choice - 1]
                    realized.append((tick, 1, pos, choice))
                else:
                    psi = _scale_axis(psi, dims, axis, self.k0[d])
                    prob *= 1.0 - jumps.sum()
                psi /= np.sqrt(np.vdot(psi, psi).real)
        if not jumped:
            # numerical corner: u landed beyond the jump masses
            psi = phi / np.sqrt(p_none)
            prob = p_none
        return psi, prob

    def run(self, rng: np.random.Generator) -> DenseTrajectory:
        program, layout = self.program, self.layout
        dims = layout.dims
        weyl_events = (sample_event_arrays(program, self.depol_only, rng)
                       if self.model.p > 0 else None)
        psi = self.psi0
        weight = 1.0
        realized: List[Tuple[int, int, int, int]] = []
        ptr = 0
        n_sites = len(self.axes)
        for t in range(program.n_ticks):
            psi = self.comp.step(psi, t)
            if self.model.p > 0:
                hits = 0
                while ptr < len(weyl_events) and weyl_events.tick[ptr] == t:
                    q, idx = int(weyl_events.qudit[ptr]), int(weyl_events.index[ptr])
                    axis = self.axes[q]
                    psi = apply_local(psi.reshape(dims), (axis,), self.weyl[dims[axis]][idx]).reshape(-1)
                    realized.append((t, 0, q, idx))
                    weight *= self.model.p / (dims[axis] ** 2 - 1)
                    hits += 1
                    ptr += 1
                weight *= (1 - self.model.p) ** (n_sites - hits)
            if self.w0 is not None:
                psi, prob = self._damp_tick(psi, rng, t, realized)
                weight *= prob
        outcomes = _realized_outcomes(program, realized)
        return DenseTrajectory(psi, weight, self.fidelity(psi), outcomes)


def _realized_outcomes(program: Program, realized: List[Tuple[int, int, int, int]]) -> list:
    if not realized:
        empty = np.empty(0, dtype=np.int64)
        return to_outcomes(program, EventArrays(empty, empty, empty, empty))
    arr = np.array(sorted(realized), dtype=np.int64)
    return to_outcomes(program, EventArrays(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]))


def run_trajectory(program: Program, memory: MemoryTable, bus: np.ndarray, model: NoiseModel,
                   rng: np.random.Generator) -> DenseTrajectory:
    return DenseTrajectorySimulator(program, memory, bus, model).run(rng)


def estimate_fidelity_dense(program: Program, memory: MemoryTable, bus: np.ndarray,
                            model: NoiseModel, trajectories: int, rng: np.random.Generator):
    """Monte-Carlo fidelity over dense trajectories (also reports mean good-branch fraction).

    Trajectory j uses the j-th stream spawned from ``rng``.
    """
    from .sim_branch import FidelityEstimate, classify_good_branches, branches_from_bus

    sim = DenseTrajectorySimulator(program, memory, bus, model)
    if model.is_noiseless:
        # deterministic; rounding noise of the unitary evolution is snapped away
        f0 = sim.run(rng).fidelity
        return FidelityEstimate(1.0 if abs(f0 - 1) < 1e-12 else min(f0, 1.0), 0.0, trajectories, 1.0)
    branches = branches_from_bus(program, bus)
    f = np.empty(trajectories)
    lam = np.empty(trajectories)
    for j, r in enumerate(rng.spawn(trajectories)):
        traj = sim.run(r)
        f[j] = traj.fidelity
        lam[j] = classify_good_branches(program, traj.outcomes, branches).lam
    stderr = float(f.std(ddof=1) / np.sqrt(trajectories)) if trajectories > 1 else 0.0
    return FidelityEstimate(float(np.clip(f.mean(), 0.0, 1.0)), stderr, trajectories, float(lam.mean()))


# ---------------------------------------------------------------------------
# Density-matrix oracle
# ---------------------------------------------------------------------------

def evolve_density(program: Program, memory: MemoryTable, rho_bus: np.ndarray,
                   model: NoiseModel) -> np.ndarray:
    """Exact channel evolution of the full density matrix; returns the reduced bus state."""
    comp = CompiledDense(program, memory)
    layout = comp.layout
    if layout.size ** 2 > MAX_AMPLITUDES:
        raise MemoryError("density matrix too large")
    dims = layout.dims
    nd = len(dims)
    D = layout.size
    rho = np.zeros((layout.bus_dim, layout.tree_dim, layout.bus_dim, layout.tree_dim), dtype=complex)
    rho[:, 0, :, 0] = rho_bus
    rho = rho.reshape(D, D)
    gates_per_tick = [[g for op in step.ops for g in op_gates(op, layout, memory)]
                      for step in program.steps]
    tree_axes = _tree_axes(layout)

    def sandwich(mat: np.ndarray, axes, U) -> np.ndarray:
        t = apply_local(mat.reshape(dims + dims), axes, U)
        t = apply_local(t, tuple(a + nd for a in axes), U.conj())
        return t.reshape(D, D)

    for gates in gates_per_tick:
        for axes, U in gates:
            rho = sandwich(rho, axes, U)
        for axis in tree_axes:
            d = dims[axis]
            if model.p > 0:
                rho = sum(sandwich(rho, (axis,), K) for K in depolarizing_kraus(d, model.p))
            if model.gamma > 0:
                rho = sum(sandwich(rho, (axis,), K) for K in damping_kraus(d, model.gamma))
    full = rho.reshape(layout.bus_dim, layout.tree_dim, layout.bus_dim, layout.tree_dim)
    return np.einsum("atbt->ab", full)


def trajectory_bus_density(traj_state: np.ndarray, layout: DenseLayout) -> np.ndarray:
    mat = traj_state.reshape(layout.bus_dim, layout.tree_dim)
    return mat @ mat.conj().T
