"""Tree geometry, node and qudit identities, and address paths."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Union


class Scheme(str, Enum):
    QUTRIT = "qutrit"
    QUBIT = "qubit"


class Role(str, Enum):
    ADDRESS = "address"
    DATA = "data"
    ADDRESS_BUS = "address_bus"
    DATA_BUS = "data_bus"
    HIGH_ADDRESS = "high_address"


# Address qutrit levels. In the qubit scheme level 0 plays L and level 1 plays R.
W, L, R = 0, 1, 2


@dataclass(frozen=True, order=True)
class NodeId:
    layer: int
    pos: int

    def __post_init__(self) -> None:
        if self.layer < 0 or not 0 <= self.pos < (1 << self.layer):
            raise ValueError(f"invalid node ({self.layer}, {self.pos})")

    @property
    def children(self) -> tuple[NodeId, NodeId]:
        return NodeId(self.layer + 1, 2 * self.pos), NodeId(self.layer + 1, 2 * self.pos + 1)

    @property
    def parent(self) -> Optional[NodeId]:
        if self.layer == 0:
            return None
        return NodeId(self.layer - 1, self.pos // 2)

    @property
    def linear(self) -> int:
        """Breadth-first index of the node (root is 0)."""
        return (1 << self.layer) - 1 + self.pos

    def __repr__(self) -> str:
        return f"({self.layer},{self.pos})"


@dataclass(frozen=True)
class TreeSpec:
    """An n-layer bucket-brigade tree serving 2^n cells of k-bit words.

    Attributes:
        n: address length, i.e. number of tree layers.
        k: word length in bits.
        scheme: qutrit or qubit address encoding.
        bandwidth: number of data qubits (banks) per node.
    """

    n: int
    k: int
    scheme: Scheme = Scheme.QUTRIT
    bandwidth: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n < 1 or self.k < 1:
            raise ValueError(f"need n >= 1 and k >= 1, got n={self.n}, k={self.k}")
        if not 1 <= self.bandwidth <= self.k:
            raise ValueError(f"bandwidth must lie in [1, k={self.k}], got {self.bandwidth}")

    @property
    def c(self) -> int:
        return self.bandwidth

    @property
    def node_count(self) -> int:
        return (1 << self.n) - 1

    @property
    def memory_cells(self) -> int:
        return 1 << self.n

    @property
    def address_levels(self) -> int:
        return 3 if self.scheme is Scheme.QUTRIT else 2

    @property
    def tree_qudit_count(self) -> int:
        return self.node_count * (1 + self.bandwidth)


@dataclass(frozen=True, order=True)
class QuditId:
    """Identity of one physical qudit.

    Tree qudits carry a node (and a bank for data qubits); bus qudits carry
    an index instead.
    """

    role: Role
    node: Optional[NodeId] = None
    bank: int = 0
    index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        tree = self.role in (Role.ADDRESS, Role.DATA)
        if tree != (self.node is not None):
            raise ValueError("tree qudits need a node, bus qudits must not have one")
        if self.role is Role.ADDRESS and self.bank != 0:
            raise ValueError("address qudits have a single bank")

    @property
    def is_tree(self) -> bool:
        return self.node is not None

    def dim(self, scheme: Scheme) -> int:
        if self.role is Role.ADDRESS and Scheme(scheme) is Scheme.QUTRIT:
            return 3
        return 2

    def __repr__(self) -> str:
        if self.role is Role.ADDRESS:
            return f"Addr@{self.node!r}"
        if self.role is Role.DATA:
            suffix = f"[{self.bank}]" if self.bank else ""
            return f"Data@{self.node!r}{suffix}"
        name = {Role.ADDRESS_BUS: "AddressBus", Role.DATA_BUS: "DataBus",
                Role.HIGH_ADDRESS: "HighAddress"}[self.role]
        return f"{name}({self.index})"


def Addr(node: NodeId) -> QuditId:
    return QuditId(Role.ADDRESS, node)


def Data(node: NodeId, bank: int = 0) -> QuditId:
    return QuditId(Role.DATA, node, bank)


def AddressBus(i: int) -> QuditId:
    return QuditId(Role.ADDRESS_BUS, index=i)


def DataBus(i: int) -> QuditId:
    return QuditId(Role.DATA_BUS, index=i)


def HighAddress(i: int) -> QuditId:
    return QuditId(Role.HIGH_ADDRESS, index=i)


def address_bits(value: int, width: int) -> List[int]:
    """MSB-first bits of ``value``; bit 0 is the one routed at layer 0."""
    if not 0 <= value < (1 << width):
        raise ValueError(f"value {value} does not fit in {width} bits")
    return [(value >> (width - 1 - j)) & 1 for j in range(width)]


def bits_to_int(bits: Sequence[int]) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def path_of(address: Union[str, Sequence[int]], spec: TreeSpec) -> List[NodeId]:
    """Root-to-leaf nodes visited by ``address`` (bit i chooses the child below layer i)."""
    bits = [int(ch) for ch in address] if isinstance(address, str) else [int(b) for b in address]
    if len(bits) != spec.n or any(b not in (0, 1) for b in bits):
        raise ValueError(f"address must be {spec.n} bits, got {address!r}")
    path = [NodeId(0, 0)]
    pos = 0
    for b in bits[:-1]:
        pos = 2 * pos + b
        path.append(NodeId(len(path), pos))
    return path


def enumerate_layer(l: int, spec: TreeSpec) -> List[NodeId]:
    if not 0 <= l < spec.n:
        raise ValueError(f"layer {l} outside [0, {spec.n})")
    return [NodeId(l, p) for p in range(1 << l)]


def all_nodes(spec: TreeSpec) -> List[NodeId]:
    return [node for l in range(spec.n) for node in enumerate_layer(l, spec)]


def tree_qudits(spec: TreeSpec) -> List[QuditId]:
    """Tree qudits in (layer, pos, role, bank) order."""
    out: List[QuditId] = []
    for node in all_nodes(spec):
        out.append(Addr(node))
        out.extend(Data(node, b) for b in range(spec.bandwidth))
    return out


def bus_qudits(spec: TreeSpec, m: int = 0) -> List[QuditId]:
    return ([HighAddress(i) for i in range(m)]
            + [AddressBus(i) for i in range(spec.n)]
            + [DataBus(i) for i in range(spec.k)])


def qudit_order(spec: TreeSpec, m: int = 0) -> List[QuditId]:
    """Canonical ordering: bus qudits first, then the tree."""
    return bus_qudits(spec, m) + tree_qudits(spec)
