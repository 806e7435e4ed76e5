"""Branch-tracking trajectory simulator.

Each address branch is one row of a symbol table over bus and tree qudits,
carrying a complex amplitude and a damping log-weight. Every op and every
sampled Weyl/jump operator maps basis symbols to basis symbols, so a
trajectory costs O(branches x tree) per tick. A qubit-scheme control holding
+/- splits its row into the 0 and 1 components.

Noise is unravelled with importance weights. Depolarizing events are sampled
independently of the state. Damping jumps at a site are proposed with
probability gamma times the branch weight currently excited there, so sites
idle in every branch never jump; each trajectory carries the matching
likelihood ratio. The no-jump operator multiplies each branch by its exact
per-symbol factor, except that for +/- symbols only the component along the
symbol is kept (first order in gamma).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _branch_kernel as K
from .noise import EventArrays, KrausOutcome, NoiseModel, from_outcomes, weyl_labels, weyl_operator
from .program import (
    AddressBusInput, ControlledDataBusInput, DataBusExchange, DataBusInput, DataCopy, InternalSwap,
    MemoryTable, Program, Routing, check_memory,
)
from .topology import QuditId, Role, Scheme, tree_qudits

Branches = Sequence[Tuple[int, int, complex]]  # (address, data word, amplitude)

CHECKPOINT_BYTES = 1 << 28
ACTIVE_SETS = ("occupied", "reach")

_SQ = 1 / np.sqrt(2)
# symbol vectors per column type: 0 = address qutrit (W, L, R), 1 = qubit (0, 1, +, -)
_QUTRIT_VECS = [np.eye(3)[i] for i in range(3)]
_QUBIT_VECS = [np.array([1.0, 0.0]), np.array([0.0, 1.0]),
               np.array([_SQ, _SQ]), np.array([_SQ, -_SQ])]
SYMBOL_NAMES = ("WLR", "01+-")


@dataclass(frozen=True)
class FidelityEstimate:
    mean: float
    stderr: float
    trajectories: int
    lambda_mean: float


@dataclass(frozen=True)
class GoodBranches:
    good: np.ndarray  # bool per input branch
    lam: float


@dataclass(frozen=True)
class BranchTable:
    """Branch rows: bus values, amplitudes and tree symbols."""

    address: np.ndarray
    word_in: np.ndarray
    word_out: np.ndarray
    amplitude: np.ndarray
    symbols: np.ndarray          # int8 codes, one column per tree qudit
    qudits: Tuple[QuditId, ...]  # tree qudits in canonical order
    good: np.ndarray
    scheme: Scheme

    def __len__(self) -> int:
        return len(self.address)

    def symbol(self, row: int, qudit: QuditId) -> str:
        col = self.qudits.index(qudit)
        return _symbol_name(qudit, self.scheme, int(self.symbols[row, col]))

    def non_idle(self, row: int) -> dict:
        return {q: _symbol_name(q, self.scheme, int(s))
                for q, s in zip(self.qudits, self.symbols[row]) if s != 0}


@dataclass(frozen=True)
class BranchTrajectory:
    table: BranchTable
    fidelity: float      # normalized overlap with the ideal output
    weight: float        # importance weight (squared norm of the weighted state)
    lam: float
    events: EventArrays  # realized Weyl events and damping jumps


def _symbol_name(q: QuditId, scheme: Scheme, code: int) -> str:
    qutrit_addr = q.role is Role.ADDRESS and Scheme(scheme) is Scheme.QUTRIT
    return SYMBOL_NAMES[0 if qutrit_addr else 1][code]


# ---------------------------------------------------------------------------
# Transition tables derived from the operator matrices
# ---------------------------------------------------------------------------

def _image(U: np.ndarray, vecs: List[np.ndarray], s: int) -> Tuple[int, complex]:
    v = U @ vecs[s]
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return s, 0.0
    for t, w in enumerate(vecs):
        ov = np.vdot(w, v)
        if abs(abs(ov) - norm) < 1e-9:
            return t, complex(ov)
    raise ValueError("operator leaves the tracked symbol alphabet")


def symbol_tables(gamma: float):
    """(delta, weyl_new, weyl_ph, jump_new, jump_amp) for both column types.

    delta[type, s] is the log no-jump factor of symbol s; the jump tables give
    the image of each symbol under |0><j|.
    """
    weyl_new = np.zeros((2, 9, 4), dtype=np.int8)
    weyl_ph = np.ones((2, 9, 4), dtype=np.complex128)
    jump_new = np.zeros((2, 3, 4), dtype=np.int8)
    jump_amp = np.zeros((2, 3, 4), dtype=np.complex128)
    for typ, (dim, vecs) in enumerate(((3, _QUTRIT_VECS), (2, _QUBIT_VECS))):
        for a in range(dim):
            for b in range(dim):
                U = weyl_operator(dim, a, b)
                for s in range(len(vecs)):
                    weyl_new[typ, a * dim + b, s], weyl_ph[typ, a * dim + b, s] = _image(U, vecs, s)
        for j in range(1, dim):
            J = np.zeros((dim, dim))
            J[0, j] = 1.0
            for s in range(len(vecs)):
                jump_new[typ, j, s], jump_amp[typ, j, s] = _image(J, vecs, s)
    delta = np.zeros((2, 4))
    if gamma > 0:
        h = 0.5 * np.log1p(-gamma)
        delta[0, 1:3] = h
        delta[1, 1] = h
        delta[1, 2:4] = np.log((1 + np.sqrt(1 - gamma)) / 2)
    return delta, weyl_new, weyl_ph, jump_new, jump_amp


# ---------------------------------------------------------------------------
# Layout and op encoding
# ---------------------------------------------------------------------------

def _encode_ops(program: Program) -> Tuple[np.ndarray, np.ndarray]:
    rows: List[Tuple[int, int, int, int, int]] = []
    ptr = [0]

    def hv(h: Optional[int]) -> int:
        return -1 if h is None else h

    for step in program.steps:
        for op in step.ops:
            if isinstance(op, AddressBusInput):
                rows.append((K.OP_ADDR_IN, op.index, 0, 0, 0))
            elif isinstance(op, DataBusInput):
                rows.append((K.OP_BUS, op.digit, -1, 0 if op.direction == "in" else 1, 0))
            elif isinstance(op, ControlledDataBusInput):
                rows.append((K.OP_BUS, op.digit, op.high, 0 if op.direction == "in" else 1, 0))
            elif isinstance(op, DataBusExchange):
                rows.append((K.OP_EXCH, op.out_digit, hv(op.out_high), op.in_digit, hv(op.in_high)))
            elif isinstance(op, Routing):
                rows.append((K.OP_ROUTE, op.layer, 0, 0, 0))
            elif isinstance(op, InternalSwap):
                rows.append((K.OP_ISWAP, op.layer, 0, 0, 0))
            elif isinstance(op, DataCopy):
                rows.append((K.OP_COPY, op.digit, hv(op.high), 0, 0))
            else:
                raise TypeError(f"not a layered op: {op!r}")
        ptr.append(len(rows))
    ops = np.array(rows, dtype=np.int64).reshape(-1, 5)
    return ops, np.array(ptr, dtype=np.int64)


class BranchLayout:
    """Column bookkeeping: high bits, address bus, data bus, then the tree."""

    def __init__(self, program: Program):
        spec = program.spec
        self.spec = spec
        self.n_bus = program.m + spec.n + spec.k
        self.tree = tuple(tree_qudits(spec))
        self.n_cols = self.n_bus + len(self.tree)
        self.dbus0 = program.m + spec.n
        c = spec.bandwidth
        self.coltype = np.full(self.n_cols, -1, dtype=np.int64)
        nodes = spec.node_count
        addr_cols = self.n_bus + np.arange(nodes) * (1 + c)
        self.coltype[addr_cols] = 0 if spec.scheme is Scheme.QUTRIT else 1
        data_cols = (addr_cols[:, None] + 1 + np.arange(c)[None, :]).reshape(-1)
        self.coltype[data_cols] = 1
        # sampler order: all address qudits, then data qudits node-major
        self.sampler_col = np.concatenate([addr_cols, data_cols]).astype(np.int64)
        self.site_dims = np.where(self.coltype[self.sampler_col] == 0, 3, 2)
        # columns whose symbols are qubits (bus data and tree qubits)
        self.qubit_cols = np.concatenate([np.arange(self.dbus0, self.n_bus),
                                          np.nonzero(self.coltype == 1)[0]]).astype(np.int64)


# ---------------------------------------------------------------------------
# Mutable branch state
# ---------------------------------------------------------------------------

_ROW_FIELDS = ("S", "amp", "logw", "rate", "high", "origin", "omega")


@dataclass
class _State:
    S: np.ndarray
    amp: np.ndarray
    logw: np.ndarray
    rate: np.ndarray
    high: np.ndarray
    origin: np.ndarray
    omega: np.ndarray  # proposal weight per row
    W: np.ndarray      # proposal weight per (column, symbol)
    glog: np.ndarray   # shape (1,): global log amplitude factor
    nb: int

    def copy(self) -> _State:
        nb = self.nb
        rows = [getattr(self, f)[:nb].copy() for f in _ROW_FIELDS]
        return _State(*rows, self.W.copy(), self.glog.copy(), nb)

    def _grow(self) -> None:
        cap = max(2 * len(self.amp), 4)
        for name in _ROW_FIELDS:
            arr = getattr(self, name)
            new = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
            new[:self.nb] = arr[:self.nb]
            setattr(self, name, new)

    def split(self, b: int, col: int, delta: np.ndarray) -> None:
        """Rewrite a +/- qubit of row b as its 0 and 1 components."""
        if self.nb == len(self.amp):
            self._grow()
        new = self.nb
        s = int(self.S[b, col])
        sign = 1.0 if s == 2 else -1.0
        for name in _ROW_FIELDS:
            arr = getattr(self, name)
            arr[new] = arr[b]
        self.amp[new] = self.amp[b] * _SQ * sign
        self.amp[b] *= _SQ
        half = self.omega[b] / 2
        self.omega[b] = self.omega[new] = half
        self.W[col, s] -= 2 * half
        self.W[col, 0] += half
        self.W[col, 1] += half
        self.S[b, col] = 0
        self.S[new, col] = 1
        self.rate[b] += delta[1, 0] - delta[1, s]
        self.rate[new] += delta[1, 1] - delta[1, s]
        self.nb += 1


_EMPTY = np.empty(0, dtype=np.int64)
_EMPTY_EVENTS = EventArrays(_EMPTY, _EMPTY, _EMPTY, _EMPTY)


def _as_events(program: Program, events) -> EventArrays:
    if events is None:
        return _EMPTY_EVENTS
    if isinstance(events, EventArrays):
        return events
    events = list(events)
    return from_outcomes(program, events) if events else _EMPTY_EVENTS


def _merge_events(*parts: EventArrays) -> EventArrays:
    parts = [p for p in parts if len(p)]
    if not parts:
        return _EMPTY_EVENTS
    cat = [np.concatenate([getattr(p, f) for p in parts]) for f in ("tick", "channel", "qudit", "index")]
    order = np.lexsort((cat[2], cat[1], cat[0]))
    return EventArrays(*(a[order] for a in cat))


class BranchSimulator:
    """Program encoding, event-free trace and checkpoints for one input state."""

    def __init__(self, program: Program, memory: MemoryTable, branches: Optional[Branches] = None,
                 model: Optional[NoiseModel] = None):
        check_memory(memory, program.spec, program.m)
        self.program = program
        self.memory = memory
        self.model = model or NoiseModel()
        spec = program.spec
        self.layout = BranchLayout(program)
        self.ops, self.tick_ptr = _encode_ops(program)
        (self.delta, self.weyl_new, self.weyl_ph, self.jump_new,
         self.jump_amp) = symbol_tables(self.model.gamma)
        self.mem_bits = np.ascontiguousarray(memory.bits, dtype=np.uint8)
        self.words = np.array([memory.word(i) for i in range(memory.cells)], dtype=np.int64)
        self.weyl_labels = {d: np.array([a * d + b for a, b in weyl_labels(d)]) for d in (2, 3)}

        if branches is None:
            branches = uniform_branches(program)
        addr = np.array([b[0] for b in branches], dtype=np.int64)
        word = np.array([b[1] for b in branches], dtype=np.int64)
        amp = np.array([b[2] for b in branches], dtype=np.complex128)
        norm = np.sqrt(np.sum(np.abs(amp) ** 2))
        if len(amp) == 0 or norm == 0:
            raise ValueError("input branches have zero norm")
        if np.any(addr < 0) or np.any(addr >= 1 << program.address_width):
            raise ValueError("branch address out of range")
        if np.any(word < 0) or np.any(word >= 1 << spec.k):
            raise ValueError("branch data word out of range")
        keys = (addr << spec.k) | word
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate input branches")
        self.addr, self.word, self.alpha = addr, word, amp / norm
        order = np.argsort(keys)
        self._keys, self._key_amp = keys[order], self.alpha[order]
        self.slots = slot_trace(program)
        self._build_trace()

    # -- kernel driver -------------------------------------------------------

    def initial_state(self) -> _State:
        spec, lay = self.program.spec, self.layout
        nb = len(self.addr)
        S = np.zeros((nb, lay.n_cols), dtype=np.int8)
        width = self.program.address_width
        for j in range(width):
            S[:, j] = (self.addr >> (width - 1 - j)) & 1
        for j in range(spec.k):
            S[:, lay.dbus0 + j] = (self.word >> (spec.k - 1 - j)) & 1
        st = _State(S, self.alpha.copy(), np.zeros(nb), np.zeros(nb), self.addr >> spec.n,
                    np.arange(nb, dtype=np.int64), np.zeros(nb), np.zeros((lay.n_cols, 4)),
                    np.zeros(1), nb)
        K.reweigh(st.S, st.amp, st.logw, st.omega, st.W, lay.coltype, nb)
        return st

    def _advance(self, st: _State, t_start: int, t_stop: int, events: EventArrays = _EMPTY_EVENTS,
                 dynamic: bool = True, jump_from: Optional[int] = None, force_pos: int = -1,
                 qbuf: Optional[np.ndarray] = None, hazard: Optional[np.ndarray] = None) -> np.ndarray:
        """Run ticks [t_start, t_stop); returns realized jumps as rows (tick, site, level)."""
        spec, lay = self.program.spec, self.layout
        if len(events):
            ev = (events.tick, events.channel, lay.sampler_col[events.qudit], events.index)
        else:
            ev = (_EMPTY, _EMPTY, _EMPTY, _EMPTY)
        n_sites = len(lay.sampler_col)
        qbuf = np.zeros(n_sites) if qbuf is None else qbuf
        hazard = np.zeros(self.program.n_ticks) if hazard is None else hazard
        jrec = np.zeros((n_sites + 16, 3), dtype=np.int64)
        jn = np.zeros(1, dtype=np.int64)
        jump_from = self.program.n_ticks if jump_from is None else jump_from
        ctl = np.array([t_start, self.tick_ptr[t_start], 0, 0, t_stop, jump_from, force_pos],
                       dtype=np.int64)
        state_out = np.zeros(4, dtype=np.int64)
        split_out = np.zeros(2, dtype=np.int64)
        while True:
            code = K.run_kernel(st.S, st.amp, st.logw, st.rate, st.high, st.omega, st.W, st.glog,
                                st.nb, self.ops, self.tick_ptr, self.mem_bits, spec.n,
                                spec.bandwidth, self.program.m, spec.k,
                                spec.scheme is Scheme.QUTRIT, lay.coltype, self.delta,
                                self.weyl_new, self.weyl_ph, self.jump_new, self.jump_amp,
                                *ev, lay.sampler_col, ctl, self.model.gamma, dynamic, jrec, jn,
                                qbuf, hazard, state_out, split_out)
            if code == K.DONE:
                return jrec[:jn[0]].copy()
            if code == K.NEED_SPLIT:
                st.split(int(split_out[0]), int(split_out[1]), self.delta)
            else:
                grown = np.zeros((2 * len(jrec), 3), dtype=np.int64)
                grown[:len(jrec)] = jrec
                jrec = grown
            ctl[:4] = state_out

    def _build_trace(self) -> None:
        """Event-free run: checkpoints, per-tick jump hazards and site probabilities."""
        T = self.program.n_ticks
        st = self.initial_state()
        per = st.S.nbytes + 64 * st.nb + st.W.nbytes
        stride = max(1, int(np.ceil(per * (T + 1) / CHECKPOINT_BYTES)))
        n_sites = len(self.layout.sampler_col)
        self.checkpoints = {}
        self.hazard = np.zeros(T)
        damping = self.model.gamma > 0
        self.site_q = np.zeros((T, n_sites)) if damping else None
        qbuf = np.zeros(n_sites)
        for t in range(T):
            if t % stride == 0:
                self.checkpoints[t] = st.copy()
            self._advance(st, t, t + 1, qbuf=qbuf, hazard=self.hazard)
            if damping:
                self.site_q[t] = qbuf
        self.clean = st
        self.clean_fidelity, _ = self.overlap(st)
        p = self.model.p
        self.log_none = n_sites * np.log1p(-p) + self.hazard if p < 1 else np.full(T, -np.inf)
        self.p_any = float(-np.expm1(self.log_none.sum()))

    # -- trajectories ------------------------------------------------------

    def _restore(self, t: int) -> Tuple[int, _State]:
        tc = max(c for c in self.checkpoints if c <= t)
        return tc, self.checkpoints[tc].copy()

    def _weyl_events(self, rng: np.random.Generator, t_from: int, forced: bool) -> EventArrays:
        """Depolarizing events at ticks >= t_from; at least one at t_from if forced."""
        p = self.model.p
        T = self.program.n_ticks
        N = len(self.layout.sampler_col)
        if p <= 0:
            return _EMPTY_EVENTS
        pos = []
        lo = t_from * N
        if forced:
            v = rng.random()
            frac = -np.expm1(N * np.log1p(-p)) if p < 1 else 1.0
            i0 = int(np.floor(np.log1p(-v * frac) / np.log1p(-p))) if p < 1 else 0
            i0 = min(max(i0, 0), N - 1)
            pos.append(np.array([lo + i0]))
            lo = lo + i0 + 1
        avail = T * N - lo
        if avail > 0:
            count = rng.binomial(avail, p)
            if count:
                pos.append(lo + np.sort(rng.choice(avail, size=count, replace=False)))
        if not pos:
            return _EMPTY_EVENTS
        pos = np.concatenate(pos).astype(np.int64)
        site = pos % N
        dims = self.layout.site_dims[site]
        idx = np.empty(len(pos), dtype=np.int64)
        for d in (2, 3):
            sel = dims == d
            if np.any(sel):
                labels = self.weyl_labels[d]
                idx[sel] = labels[rng.integers(0, len(labels), size=int(sel.sum()))]
        return EventArrays(pos // N, np.zeros(len(pos), dtype=np.int64), site, idx)

    def _first_jump_site(self, rng: np.random.Generator, t: int) -> int:
        q = self.site_q[t]
        surv = np.exp(np.concatenate([[0.0], np.cumsum(np.log1p(-q))[:-1]]))
        mass = np.cumsum(surv * q)
        i = int(np.searchsorted(mass, rng.random() * mass[-1], side="right"))
        i = min(i, len(q) - 1)
        while q[i] == 0.0 and i > 0:
            i -= 1
        return i

    def sample(self, rng: np.random.Generator, conditioned: bool = False) -> Tuple[_State, EventArrays]:
        """One trajectory; with ``conditioned`` it is drawn given at least one event."""
        T = self.program.n_ticks
        K.seed(int(rng.integers(0, 2 ** 62)))
        if not conditioned:
            weyl = self._weyl_events(rng, 0, False)
            st = self.checkpoints[0].copy()
            jumps = self._advance(st, 0, T, weyl, jump_from=0)
            return st, _merge_events(weyl, self._jump_events(jumps))
        if self.p_any <= 0:
            raise ValueError("noise model produces no events")
        # tick of the first event, from the event-free hazards
        cum = np.cumsum(self.log_none)
        first_mass = -np.expm1(cum)
        t0 = int(np.searchsorted(first_mass, rng.random() * first_mass[-1], side="right"))
        t0 = min(t0, T - 1)
        a = -np.expm1(len(self.layout.sampler_col) * np.log1p(-self.model.p)) if self.model.p < 1 else 1.0
        b = -np.expm1(self.hazard[t0])
        weyl_first = rng.random() * (a + (1 - a) * b) < a
        if weyl_first:
            weyl = self._weyl_events(rng, t0, True)
            force = -1
        else:
            force = self._first_jump_site(rng, t0)
            weyl = self._weyl_events(rng, t0 + 1, False)
        tc, st = self._restore(t0)
        jumps = self._advance(st, tc, T, weyl, jump_from=t0, force_pos=force)
        return st, _merge_events(weyl, self._jump_events(jumps))

    def replay(self, events) -> Tuple[_State, EventArrays]:
        """Apply a fixed list of Weyl events and damping jumps (no sampling)."""
        events = _as_events(self.program, events)
        if len(events) == 0:
            st = self.initial_state()
            self._advance(st, 0, self.program.n_ticks, dynamic=False)
            return st, events
        tc, st = self._restore(int(events.tick[0]))
        if self.model.gamma > 0:
            st = self.initial_state()
            tc = 0
        self._advance(st, tc, self.program.n_ticks, events, dynamic=False)
        return st, events

    def _jump_events(self, jumps: np.ndarray) -> EventArrays:
        if len(jumps) == 0:
            return _EMPTY_EVENTS
        return EventArrays(jumps[:, 0].copy(), np.ones(len(jumps), dtype=np.int64),
                           jumps[:, 1].copy(), jumps[:, 2].copy())

    def overlap(self, st: _State) -> Tuple[float, float]:
        """(<ideal|rho_bus|ideal>, squared norm) of the weighted trajectory state."""
        spec, lay = self.program.spec, self.layout
        nb = st.nb
        coef = st.amp[:nb] * np.exp(st.logw[:nb] + st.glog[0])
        S, coef = _expand_pm(st.S[:nb], coef, lay.qubit_cols)
        keep = coef != 0
        S, coef = S[keep], coef[keep]
        if len(coef) == 0:
            return 0.0, 0.0
        width = self.program.address_width
        bits = S[:, :lay.n_bus].astype(np.int64)
        address = bits[:, :width] @ (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
        word = bits[:, lay.dbus0:lay.n_bus] @ (1 << np.arange(spec.k - 1, -1, -1, dtype=np.int64))
        key = (address << spec.k) | (word ^ self.words[address])
        pos = np.clip(np.searchsorted(self._keys, key), 0, len(self._keys) - 1)
        ideal = np.where(self._keys[pos] == key, self._key_amp[pos], 0)
        w = np.conj(ideal) * coef
        tree = np.ascontiguousarray(S[:, lay.n_bus:])
        _, inv = np.unique(tree.view(np.dtype((np.void, tree.shape[1]))).reshape(-1),
                           return_inverse=True)
        g = np.bincount(inv, w.real) + 1j * np.bincount(inv, w.imag)
        fid = float(np.sum(np.abs(g) ** 2))
        full = np.ascontiguousarray(S)
        _, inv = np.unique(full.view(np.dtype((np.void, full.shape[1]))).reshape(-1),
                           return_inverse=True)
        h = np.bincount(inv, coef.real) + 1j * np.bincount(inv, coef.imag)
        return fid, float(np.sum(np.abs(h) ** 2))

    def bus_output(self, st: _State) -> Tuple[np.ndarray, float]:
        """(bus vector with the tree projected on idle, norm outside the idle tree)."""
        spec, lay = self.program.spec, self.layout
        nb = st.nb
        coef = st.amp[:nb] * np.exp(st.logw[:nb] + st.glog[0])
        S, coef = _expand_pm(st.S[:nb], coef, lay.qubit_cols)
        width = self.program.address_width
        bits = S[:, :lay.n_bus].astype(np.int64)
        address = bits[:, :width] @ (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
        word = bits[:, lay.dbus0:lay.n_bus] @ (1 << np.arange(spec.k - 1, -1, -1, dtype=np.int64))
        idle = ~np.any(S[:, lay.n_bus:] != 0, axis=1)
        bus = np.zeros(1 << (width + spec.k), dtype=np.complex128)
        np.add.at(bus, (address[idle] << spec.k) | word[idle], coef[idle])
        full = np.ascontiguousarray(S[~idle])
        rest = 0.0
        if len(full):
            _, inv = np.unique(full.view(np.dtype((np.void, full.shape[1]))).reshape(-1),
                               return_inverse=True)
            c = coef[~idle]
            h = np.bincount(inv, c.real) + 1j * np.bincount(inv, c.imag)
            rest = float(np.sum(np.abs(h) ** 2))
        return bus, rest

    def table(self, st: _State, good: Optional[np.ndarray] = None) -> BranchTable:
        spec, lay = self.program.spec, self.layout
        nb = st.nb
        S = st.S[:nb]
        width = self.program.address_width
        bits = S[:, :lay.n_bus].astype(np.int64)
        address = bits[:, :width] @ (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
        word_out = bits[:, lay.dbus0:lay.n_bus] @ (1 << np.arange(spec.k - 1, -1, -1, dtype=np.int64))
        origin = st.origin[:nb]
        flags = np.ones(nb, dtype=bool) if good is None else good[origin]
        coef = st.amp[:nb] * np.exp(st.logw[:nb])
        return BranchTable(address, self.word[origin], word_out, coef, S[:, lay.n_bus:].copy(),
                           lay.tree, flags, spec.scheme)

    def trace(self) -> List[BranchTable]:
        """Noiseless snapshots: entry t is the state after the ops of tick t."""
        st = self.initial_state()
        out = []
        for t in range(self.program.n_ticks):
            self._advance(st, t, t + 1, dynamic=False)
            out.append(self.table(st))
        return out


def _expand_pm(S: np.ndarray, coef: np.ndarray, qubit_cols: np.ndarray):
    """Rewrite +/- symbols in the computational basis (rows may multiply)."""
    cols = qubit_cols[np.any(S[:, qubit_cols] >= 2, axis=0)]
    for col in cols:
        rows = S[:, col] >= 2
        if not np.any(rows):
            continue
        sign = np.where(S[rows, col] == 2, 1.0, -1.0)
        S0 = S[rows].copy()
        S1 = S[rows].copy()
        S0[:, col] = 0
        S1[:, col] = 1
        S = np.concatenate([S[~rows], S0, S1])
        coef = np.concatenate([coef[~rows], coef[rows] * _SQ, coef[rows] * _SQ * sign])
    return S, coef


# ---------------------------------------------------------------------------
# Good-branch classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlotTrace:
    """Per high value, which path slots hold a payload after each tick's ops.

    ``addr[h, t, l]`` marks the layer-l address qudit of the path as installed;
    ``data[h, t, l]`` is 0 (empty), 1 (address payload, bank 0 only) or 2 (data
    payload on all banks). ``last_*[h, l]`` is the last tick a slot is occupied
    (-1 if never): bank 0 counts every payload, other banks only data payloads.
    """

    addr: np.ndarray
    data: np.ndarray
    last_addr: np.ndarray
    last_bank0: np.ndarray
    last_banks: np.ndarray


def _last_true(mask: np.ndarray) -> np.ndarray:
    """Last index along axis 1 where mask holds, -1 if none."""
    T = mask.shape[1]
    rev = np.argmax(mask[:, ::-1], axis=1)
    return np.where(mask.any(axis=1), T - 1 - rev, -1)


@lru_cache(maxsize=16)
def slot_trace(program: Program) -> SlotTrace:
    spec = program.spec
    n, T = spec.n, program.n_ticks
    highs: List[Optional[int]] = [None] if program.m == 0 else list(range(1 << program.m))
    occ_a = np.zeros((len(highs), T, n), dtype=bool)
    occ_d = np.zeros((len(highs), T, n), dtype=np.int8)

    def bus(d: List[int], direction: str, high: Optional[int], h: Optional[int]) -> None:
        if high is None or high == h:
            d[0] = 2 if direction == "in" else 0

    for hi, h in enumerate(highs):
        a = [False] * n
        d = [0] * n
        for t, step in enumerate(program.steps):
            for op in step.ops:
                if isinstance(op, AddressBusInput):
                    d[0] = 0 if d[0] == 1 else 1
                elif isinstance(op, DataBusInput):
                    bus(d, op.direction, None, h)
                elif isinstance(op, ControlledDataBusInput):
                    bus(d, op.direction, op.high, h)
                elif isinstance(op, DataBusExchange):
                    bus(d, "out", op.out_high, h)
                    bus(d, "in", op.in_high, h)
                elif isinstance(op, Routing):
                    l = op.layer
                    if a[l]:
                        d[l], d[l + 1] = d[l + 1], d[l]
                elif isinstance(op, InternalSwap):
                    l = op.layer
                    if d[l] == 1 and not a[l]:
                        a[l], d[l] = True, 0
                    elif a[l] and d[l] == 0:
                        a[l], d[l] = False, 1
            occ_a[hi, t] = a
            occ_d[hi, t] = d
    H = len(highs)
    last = lambda mask: np.stack([_last_true(mask[h].T) for h in range(H)])  # noqa: E731
    return SlotTrace(occ_a, occ_d, last(occ_a), last(occ_d > 0), last(occ_d == 2))


def _bad_mask(program: Program, events: EventArrays, address: np.ndarray, slots: SlotTrace,
              active: str = "occupied") -> np.ndarray:
    """Branches whose active set contains some event's qudit at the event's tick.

    ``occupied``: path qudits holding a payload (or a non-idle ideal symbol).
    ``reach``: path qudits from the start until their last occupied tick.
    """
    if active not in ACTIVE_SETS:
        raise ValueError(f"active set must be one of {ACTIVE_SETS}")
    spec = program.spec
    n, c = spec.n, spec.bandwidth
    nodes = spec.node_count
    low = address & ((1 << n) - 1)
    hidx = address >> n if program.m else np.zeros_like(address)
    bad = np.zeros(len(address), dtype=bool)
    for t, q in zip(events.tick, events.qudit):
        t, q = int(t), int(q)
        if q < nodes:
            v, bank, is_addr = q, 0, True
        else:
            v, bank, is_addr = (q - nodes) // c, (q - nodes) % c, False
        l = (v + 1).bit_length() - 1
        p = v - ((1 << l) - 1)
        if active == "reach":
            if is_addr:
                last = slots.last_addr[:, l]
            else:
                last = (slots.last_bank0 if bank == 0 else slots.last_banks)[:, l]
            hit = t <= last
        elif is_addr:
            hit = slots.addr[:, t, l]
        else:
            occ = slots.data[:, t, l]
            hit = (occ == 2) | ((occ == 1) & (bank == 0))
        bad |= ((low >> (n - l)) == p) & hit[hidx]
    return bad


def classify_good_branches(program: Program, events: Union[EventArrays, Sequence[KrausOutcome]],
                           branches: Branches, active: str = "occupied") -> GoodBranches:
    """Good flags per input branch and Lambda = total weight of the good ones."""
    events = _as_events(program, events)
    address = np.array([b[0] for b in branches], dtype=np.int64)
    weight = np.abs(np.array([b[2] for b in branches], dtype=np.complex128)) ** 2
    weight = weight / weight.sum()
    if len(events) == 0:
        return GoodBranches(np.ones(len(address), dtype=bool), 1.0)
    good = ~_bad_mask(program, events, address, slot_trace(program), active)
    return GoodBranches(good, float(weight[good].sum()))


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def uniform_branches(program: Program) -> List[Tuple[int, int, complex]]:
    count = 1 << program.address_width
    amp = 1 / np.sqrt(count)
    return [(i, 0, amp) for i in range(count)]


def branches_from_bus(program: Program, bus: np.ndarray) -> List[Tuple[int, int, complex]]:
    """(address, word, amplitude) triples for the nonzero entries of a bus vector."""
    k = program.spec.k
    bus = np.asarray(bus, dtype=np.complex128).reshape(-1)
    idx = np.nonzero(np.abs(bus) > 1e-15)[0]
    return [(int(i) >> k, int(i) & ((1 << k) - 1), complex(bus[i])) for i in idx]


def run_branch_noiseless(program: Program, memory: MemoryTable,
                         branches: Optional[Branches] = None) -> BranchTable:
    sim = BranchSimulator(program, memory, branches)
    return sim.table(sim.clean)


def run_branch_trajectory(program: Program, memory: MemoryTable, branches: Optional[Branches],
                          model: NoiseModel, rng: Optional[np.random.Generator] = None,
                          events: Union[EventArrays, Sequence[KrausOutcome], None] = None,
                          simulator: Optional[BranchSimulator] = None,
                          active: str = "occupied") -> BranchTrajectory:
    """One trajectory: sampled from ``model`` with ``rng``, or replaying ``events``.

    A replayed trajectory applies exactly the given operators (no-jump factors
    elsewhere) and reports its normalized fidelity with weight = squared norm.
    """
    sim = simulator or BranchSimulator(program, memory, branches, model)
    if events is not None:
        st, ev = sim.replay(events)
    elif rng is not None:
        st, ev = sim.sample(rng)
    else:
        raise ValueError("need an rng or an explicit event list")
    fid, norm = sim.overlap(st)
    good = _bad_mask(program, ev, sim.addr, sim.slots, active) if len(ev) else np.zeros(len(sim.addr), bool)
    weight = np.abs(sim.alpha) ** 2
    lam = float(weight[~good].sum())
    f = fid / norm if norm > 0 else 0.0
    return BranchTrajectory(sim.table(st, ~good), f, norm, lam, ev)


def estimate_fidelity(program: Program, memory: MemoryTable, branches: Optional[Branches],
                      model: NoiseModel, trajectories: int, rng: np.random.Generator,
                      simulator: Optional[BranchSimulator] = None,
                      active: str = "occupied") -> FidelityEstimate:
    """Stratified Monte-Carlo estimate of the query fidelity and of Lambda.

    The event-free outcome (probability 1 - P) is deterministic and evaluated
    once; trajectories sample the complementary stratum conditioned on at least
    one event, so F = (1 - P) f_0 + P mean(f | events). Trajectory j uses the
    j-th stream spawned from ``rng``.
    """
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    sim = simulator or BranchSimulator(program, memory, branches, model)
    f0 = sim.clean_fidelity
    P = sim.p_any
    if model.is_noiseless or P <= 0:
        f0 = 1.0 if abs(f0 - 1) < 1e-12 else float(np.clip(f0, 0.0, 1.0))
        return FidelityEstimate(f0, 0.0, trajectories, 1.0)
    fs = np.empty(trajectories)
    lams = np.empty(trajectories)
    weight = np.abs(sim.alpha) ** 2
    for j, r in enumerate(rng.spawn(trajectories)):
        st, ev = sim.sample(r, conditioned=True)
        fs[j], _ = sim.overlap(st)
        lams[j] = weight[~_bad_mask(program, ev, sim.addr, sim.slots, active)].sum()
    mean = (1 - P) * f0 + P * fs.mean()
    lam = (1 - P) + P * lams.mean()
    stderr = P * fs.std(ddof=1) / np.sqrt(trajectories) if trajectories > 1 else 0.0
    return FidelityEstimate(float(np.clip(mean, 0.0, 1.0)), float(stderr), trajectories, float(lam))
