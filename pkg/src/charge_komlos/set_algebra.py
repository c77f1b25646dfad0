"""Finite set algebras generated by an atom partition.

Events are stored as sets of atom indices rather than point sets, so any
set function defined atomwise is additive by construction.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

ENUMERATION_CAP = 10
GROUND_CAP = 1 << 16


class AlgebraError(ValueError):
    """Raised for malformed algebras, foreign events and refused enumerations."""


@dataclass(frozen=True, eq=False)
class SetAlgebra:
    ground_size: int
    blocks: tuple[frozenset[int], ...]
    point_atom: np.ndarray = field(repr=False)

    @property
    def n_atoms(self) -> int:
        return len(self.blocks)

    def event(self, atoms: Iterable[int]) -> EventSet:
        atoms = frozenset(int(a) for a in atoms)
        bad = [a for a in atoms if not 0 <= a < self.n_atoms]
        if bad:
            raise AlgebraError(f"atom indices out of range: {sorted(bad)}")
        return EventSet(self, atoms)

    def omega(self) -> EventSet:
        return EventSet(self, frozenset(range(self.n_atoms)))

    def empty(self) -> EventSet:
        return EventSet(self, frozenset())

    def atom_event(self, a: int) -> EventSet:
        return self.event([a])

    def event_from_points(self, points: Iterable[int]) -> EventSet:
        """The event whose point set is exactly ``points``; errors if it is not a union of atoms."""
        pts = frozenset(int(p) for p in points)
        ev = self.cover(RawSubset(self.ground_size, pts))
        if ev.points() != pts:
            raise AlgebraError("point set is not a union of atoms")
        return ev

    def cover(self, subset: RawSubset) -> EventSet:
        """Smallest event containing an arbitrary subset of the ground set."""
        if subset.ground_size != self.ground_size:
            raise AlgebraError("subset lives on a different ground set")
        return EventSet(self, frozenset(int(self.point_atom[p]) for p in subset.points))

    def all_events(self) -> Iterator[EventSet]:
        for mask in range(1 << self.n_atoms):
            yield EventSet(self, frozenset(a for a in range(self.n_atoms) if mask >> a & 1))

    def descriptor(self) -> dict:
        return {"ground": self.ground_size, "blocks": [sorted(b) for b in self.blocks]}

    @classmethod
    def from_descriptor(cls, desc: dict) -> SetAlgebra:
        ground = int(desc["ground"])
        blocks = desc.get("blocks")
        if blocks is None:
            blocks = [[p] for p in range(ground)]
        return make_algebra(ground, blocks)

    def same_as(self, other: SetAlgebra) -> bool:
        return self is other or (
            self.ground_size == other.ground_size and self.blocks == other.blocks
        )


@dataclass(frozen=True)
class EventSet:
    algebra: SetAlgebra = field(compare=False, repr=False)
    atoms: frozenset[int]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.algebra.n_atoms, dtype=bool)
        m[list(self.atoms)] = True
        return m

    def points(self) -> frozenset[int]:
        return frozenset().union(*(self.algebra.blocks[a] for a in self.atoms))

    def complement(self) -> EventSet:
        return EventSet(self.algebra, frozenset(range(self.algebra.n_atoms)) - self.atoms)

    def _check(self, other: EventSet) -> None:
        if not self.algebra.same_as(other.algebra):
            raise AlgebraError("events belong to different algebras")

    def __and__(self, other: EventSet) -> EventSet:
        self._check(other)
        return EventSet(self.algebra, self.atoms & other.atoms)

    def __or__(self, other: EventSet) -> EventSet:
        self._check(other)
        return EventSet(self.algebra, self.atoms | other.atoms)

    def __sub__(self, other: EventSet) -> EventSet:
        self._check(other)
        return EventSet(self.algebra, self.atoms - other.atoms)

    def __le__(self, other: EventSet) -> bool:
        self._check(other)
        return self.atoms <= other.atoms

    def is_empty(self) -> bool:
        return not self.atoms

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class RawSubset:
    """Arbitrary subset of the ground set; need not be an event."""

    ground_size: int
    points: frozenset[int]

    def __post_init__(self):
        bad = [p for p in self.points if not 0 <= p < self.ground_size]
        if bad:
            raise AlgebraError(f"points outside the ground set: {sorted(bad)}")

    @classmethod
    def from_mask(cls, mask: Sequence[bool]) -> RawSubset:
        mask = np.asarray(mask, dtype=bool)
        return cls(len(mask), frozenset(np.flatnonzero(mask).tolist()))


@dataclass(frozen=True)
class Partition:
    algebra: SetAlgebra = field(compare=False, repr=False)
    blocks: frozenset[frozenset[int]]

    def __post_init__(self):
        seen: set[int] = set()
        for b in self.blocks:
            if not b:
                raise AlgebraError("partition blocks must be non-empty")
            if seen & b:
                raise AlgebraError("partition blocks overlap")
            seen |= b
        if seen != set(range(self.algebra.n_atoms)):
            raise AlgebraError("partition blocks do not cover the ground set")

    @classmethod
    def of(cls, algebra: SetAlgebra, blocks: Iterable[EventSet | Iterable[int]]) -> Partition:
        out = []
        for b in blocks:
            if isinstance(b, EventSet):
                if not b.algebra.same_as(algebra):
                    raise AlgebraError("block from a foreign algebra")
                out.append(b.atoms)
            else:
                out.append(frozenset(int(a) for a in b))
        return cls(algebra, frozenset(out))

    @classmethod
    def finest(cls, algebra: SetAlgebra) -> Partition:
        return cls(algebra, frozenset(frozenset([a]) for a in range(algebra.n_atoms)))

    @classmethod
    def coarsest(cls, algebra: SetAlgebra) -> Partition:
        return cls(algebra, frozenset([frozenset(range(algebra.n_atoms))]))

    def events(self) -> list[EventSet]:
        return [EventSet(self.algebra, b) for b in sorted(self.blocks, key=min)]

    def refines(self, other: Partition) -> bool:
        """True when every block of ``self`` sits inside a block of ``other``."""
        return all(any(b <= c for c in other.blocks) for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)


def make_algebra(ground_size: int, atom_blocks: Iterable[Iterable[int]]) -> SetAlgebra:
    if ground_size <= 0:
        raise AlgebraError("ground_size must be positive")
    blocks = [frozenset(int(p) for p in b) for b in atom_blocks]
    point_atom = np.full(ground_size, -1, dtype=np.int64)
    for i, b in enumerate(blocks):
        if not b:
            raise AlgebraError(f"atom block {i} is empty")
        for p in b:
            if not 0 <= p < ground_size:
                raise AlgebraError(f"point {p} outside ground set of size {ground_size}")
            if point_atom[p] >= 0:
                raise AlgebraError(f"atom blocks overlap at point {p}")
            point_atom[p] = i
    missing = np.flatnonzero(point_atom < 0)
    if missing.size:
        raise AlgebraError(f"atom blocks do not cover points {missing.tolist()}")
    point_atom.flags.writeable = False
    return SetAlgebra(ground_size, tuple(blocks), point_atom)


def power_set_algebra(ground_size: int) -> SetAlgebra:
    return make_algebra(ground_size, [[p] for p in range(ground_size)])


def _set_partitions(items: list[int]) -> Iterator[list[list[int]]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def enumerate_partitions(algebra: SetAlgebra, cap: int = ENUMERATION_CAP) -> Iterator[Partition]:
    """Every partition of the ground set into events, each exactly once."""
    if algebra.n_atoms > cap:
        raise AlgebraError(
            f"refusing to enumerate partitions of {algebra.n_atoms} atoms (cap={cap})"
        )
    for part in _set_partitions(list(range(algebra.n_atoms))):
        yield Partition(algebra, frozenset(frozenset(b) for b in part))


def refine(p: Partition, q: Partition) -> Partition:
    """Coarsest common refinement of two partitions."""
    if not p.algebra.same_as(q.algebra):
        raise AlgebraError("partitions belong to different algebras")
    blocks = frozenset(b & c for b in p.blocks for c in q.blocks if b & c)
    return Partition(p.algebra, blocks)


@dataclass(frozen=True, eq=False)
class ProductStructure:
    """Finite product of coordinate spaces; points are row-major coordinate tuples.

    Coordinates are numbered from 0.  ``coordinate_algebras[n]`` lists the
    cylinder events {x_n = v} for each value v of coordinate n.
    """

    algebra: SetAlgebra = field(repr=False)
    factor_sizes: tuple[int, ...]
    coordinates: np.ndarray = field(repr=False)  # (ground, m) table of coordinate values
    coordinate_algebras: tuple[tuple[EventSet, ...], ...] = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.factor_sizes)

    def cylinder(self, n: int, value: int) -> EventSet:
        return self.coordinate_algebras[n][value]

    def join_atoms(self, coords: Iterable[int]) -> list[EventSet]:
        """Atoms of the algebra generated by the given coordinates (joint cylinders)."""
        coords = sorted(set(coords))
        if not coords:
            return [self.algebra.omega()]
        keys = self.coordinates[:, coords]
        groups: dict[tuple, list[int]] = {}
        for p, key in enumerate(map(tuple, keys)):
            groups.setdefault(key, []).append(p)
        return [self.algebra.event(v) for _, v in sorted(groups.items())]


def make_product(factor_sizes: Sequence[int], cap: int = GROUND_CAP) -> tuple[SetAlgebra, ProductStructure]:
    sizes = tuple(int(s) for s in factor_sizes)
    if not sizes or any(s < 2 for s in sizes):
        raise AlgebraError("every factor needs at least 2 points")
    ground = int(np.prod(sizes))
    if ground > cap:
        raise AlgebraError(f"product ground size {ground} exceeds cap {cap}")
    algebra = power_set_algebra(ground)
    coords = np.array(list(itertools.product(*(range(s) for s in sizes))), dtype=np.int64)
    coords.flags.writeable = False
    cyl = tuple(
        tuple(algebra.event(np.flatnonzero(coords[:, n] == v).tolist()) for v in range(s))
        for n, s in enumerate(sizes)
    )
    return algebra, ProductStructure(algebra, sizes, coords, cyl)
