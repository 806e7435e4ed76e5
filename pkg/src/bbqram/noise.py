"""Damping and depolarizing channels on tree qudits and their event samplers.

Events are drawn per (tree qudit, tick) site, independently for the two
channels: a depolarizing event with probability p picks one of the d^2-1
non-identity Weyl operators uniformly; a damping jump with probability
(d-1)*gamma picks one of the d-1 lowering operators uniformly. Bus qudits and
the high-address register are never noised.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .program import Program
from .topology import QuditId, Role, Scheme, tree_qudits


class Channel(str, Enum):
    DEPOLARIZING = "depolarizing"
    DAMPING = "damping"


@dataclass(frozen=True)
class NoiseModel:
    gamma: float = 0.0
    p: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.p <= 1.0:
            raise ValueError(f"rates must lie in [0, 1], got gamma={self.gamma}, p={self.p}")
        if 2 * self.gamma > 1.0:
            raise ValueError("qutrit damping needs gamma <= 1/2")

    @property
    def is_noiseless(self) -> bool:
        return self.gamma == 0.0 and self.p == 0.0

    def jump_probability(self, dim: int) -> float:
        return (dim - 1) * self.gamma


@dataclass(frozen=True, order=True)
class KrausOutcome:
    """One sampled non-trivial Kraus/Weyl operator.

    For depolarizing events ``index`` = a*d + b for the Weyl operator X^a Z^b
    (never 0). For damping, index j in 1..d-1 is the jump |0><j| (qutrit: 1 is
    L -> W, 2 is R -> W).
    """

    tick: int
    channel: Channel
    target: QuditId
    index: int


def weyl_operator(dim: int, a: int, b: int) -> np.ndarray:
    """X^a Z^b with X|j> = |j+1 mod d> and Z|j> = w^j |j>."""
    omega = np.exp(2j * np.pi / dim)
    X = np.roll(np.eye(dim), 1, axis=0)
    Z = np.diag(omega ** np.arange(dim))
    return np.linalg.matrix_power(X, a) @ np.linalg.matrix_power(Z, b)


def weyl_labels(dim: int) -> List[Tuple[int, int]]:
    return [(a, b) for a in range(dim) for b in range(dim) if (a, b) != (0, 0)]


def depolarizing_unraveling(dim: int, p: float) -> List[Tuple[Tuple[int, int], float]]:
    """[((a, b), probability)] with the identity (0, 0) first."""
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    labels = weyl_labels(dim)
    return [((0, 0), 1.0 - p)] + [(ab, p / len(labels)) for ab in labels]


def damping_kraus(dim: int, gamma: float) -> List[np.ndarray]:
    """Amplitude damping towards level 0 (W for address qutrits)."""
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    ops = [np.diag([1.0] + [np.sqrt(1.0 - gamma)] * (dim - 1)).astype(complex)]
    for j in range(1, dim):
        K = np.zeros((dim, dim), dtype=complex)
        K[0, j] = np.sqrt(gamma)
        ops.append(K)
    return ops


def depolarizing_kraus(dim: int, p: float) -> List[np.ndarray]:
    return [np.sqrt(prob) * weyl_operator(dim, a, b) for (a, b), prob in depolarizing_unraveling(dim, p)]


def apply_channel(rho: np.ndarray, kraus: List[np.ndarray]) -> np.ndarray:
    return sum(K @ rho @ K.conj().T for K in kraus)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventArrays:
    """Sampled events as parallel arrays sorted by (tick, channel, qudit).

    ``qudit`` indexes :func:`tree_qudits` order; ``channel`` is 0 for
    depolarizing and 1 for damping.
    """

    tick: np.ndarray
    channel: np.ndarray
    qudit: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.tick)


def _site_classes(n_addr: int, n_data: int, addr_dim: int, model: NoiseModel, ticks: int):
    """(channel, qudit offset, qudit count, dim, per-site probability, slots)."""
    out = []
    for channel, rate in ((0, lambda d: model.p), (1, model.jump_probability)):
        for offset, count, dim in ((0, n_addr, addr_dim), (n_addr, n_data, 2)):
            out.append((channel, offset, count, dim, rate(dim), count * ticks))
    return out


def _positions(rng: np.random.Generator, slots: int, q: float, skip: int = 0) -> np.ndarray:
    """Random subset of range(skip, slots), each element included with probability q."""
    avail = slots - skip
    if avail <= 0 or q <= 0.0:
        return np.empty(0, dtype=np.int64)
    count = rng.binomial(avail, q)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return skip + np.sort(rng.choice(avail, size=count, replace=False)).astype(np.int64)


def probability_any_event(program: Program, model: NoiseModel) -> float:
    spec = program.spec
    n_addr = spec.node_count
    classes = _site_classes(n_addr, spec.node_count * spec.bandwidth, spec.address_levels,
                            model, program.n_ticks)
    log_none = sum(slots * np.log1p(-q) if q < 1 else -np.inf for *_, q, slots in classes if slots)
    return float(-np.expm1(log_none))


def sample_event_arrays(program: Program, model: NoiseModel, rng: np.random.Generator,
                        at_least_one: bool = False) -> EventArrays:
    """Sample events for one trajectory.

    With ``at_least_one`` the draw is conditioned on a nonempty outcome (the
    caller reweights by :func:`probability_any_event`). The first event is then
    drawn from its exact distribution and later slots are sampled freely.
    """
    spec = program.spec
    ticks = program.n_ticks
    n_addr = spec.node_count
    n_data = spec.node_count * spec.bandwidth
    classes = _site_classes(n_addr, n_data, spec.address_levels, model, ticks)
    first_class, first_slot = -1, -1
    if at_least_one:
        # P(first event lands in class c at slot j), classes laid end to end
        log_prefix = 0.0
        weights = []
        for *_, q, slots in classes:
            none_c = slots * np.log1p(-q) if q < 1 else (-np.inf if slots else 0.0)
            weights.append(np.exp(log_prefix) * -np.expm1(none_c) if q > 0 else 0.0)
            log_prefix += none_c
        total = float(sum(weights))
        if total <= 0.0:
            raise ValueError("noise model produces no events")
        u = rng.random() * total
        first_class = int(np.searchsorted(np.cumsum(weights), u, side="right"))
        first_class = min(first_class, len(classes) - 1)
        q, slots = classes[first_class][4], classes[first_class][5]
        # truncated geometric over [0, slots)
        v = rng.random()
        if q >= 1.0:
            first_slot = 0
        else:
            frac = -np.expm1(slots * np.log1p(-q))
            first_slot = int(np.floor(np.log1p(-v * frac) / np.log1p(-q)))
            first_slot = min(max(first_slot, 0), slots - 1)

    ticks_out, chans, quds, idxs = [], [], [], []
    for c_idx, (channel, offset, count, dim, q, slots) in enumerate(classes):
        if c_idx < first_class:
            continue
        if c_idx == first_class:
            pos = np.concatenate([[first_slot], _positions(rng, slots, q, first_slot + 1)]).astype(np.int64)
        else:
            pos = _positions(rng, slots, q)
        if len(pos) == 0:
            continue
        ticks_out.append(pos // count)
        quds.append(offset + pos % count)
        chans.append(np.full(len(pos), channel, dtype=np.int64))
        if channel == 0:
            labels = np.array([a * dim + b for a, b in weyl_labels(dim)], dtype=np.int64)
            idxs.append(labels[rng.integers(0, len(labels), size=len(pos))])
        else:
            idxs.append(rng.integers(1, dim, size=len(pos)).astype(np.int64))
    if not ticks_out:
        empty = np.empty(0, dtype=np.int64)
        return EventArrays(empty, empty, empty, empty)
    tick = np.concatenate(ticks_out)
    chan = np.concatenate(chans)
    qud = np.concatenate(quds)
    idx = np.concatenate(idxs)
    order = np.lexsort((qud, chan, tick))
    return EventArrays(tick[order], chan[order], qud[order], idx[order])


def _tree_index_qudits(program: Program) -> List[QuditId]:
    """Tree qudits in sampler order: all address qudits, then all data qudits."""
    qs = tree_qudits(program.spec)
    return [q for q in qs if q.role is Role.ADDRESS] + [q for q in qs if q.role is Role.DATA]


def to_outcomes(program: Program, events: EventArrays) -> List[KrausOutcome]:
    qs = _tree_index_qudits(program)
    chans = (Channel.DEPOLARIZING, Channel.DAMPING)
    return [KrausOutcome(int(t), chans[int(c)], qs[int(q)], int(i))
            for t, c, q, i in zip(events.tick, events.channel, events.qudit, events.index)]


def from_outcomes(program: Program, outcomes: List[KrausOutcome]) -> EventArrays:
    lookup = {q: i for i, q in enumerate(_tree_index_qudits(program))}
    rows = sorted((o.tick, 0 if Channel(o.channel) is Channel.DEPOLARIZING else 1,
                   lookup[o.target], o.index) for o in outcomes)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventArrays(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())


def sample_error_events(program: Program, model: NoiseModel,
                        rng: np.random.Generator) -> List[KrausOutcome]:
    """Sample one trajectory's non-trivial Kraus outcomes on the tree qudits."""
    return to_outcomes(program, sample_event_arrays(program, model, rng))


def scheme_dims(scheme: Scheme) -> Tuple[int, int]:
    """(address dim, data dim)."""
    return (3 if Scheme(scheme) is Scheme.QUTRIT else 2), 2
