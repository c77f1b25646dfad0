"""Charges (bounded additive set functions) on a finite set algebra.

A charge is determined by its atom values.  Values are float64 by default;
``exact=True`` stores ``fractions.Fraction`` objects so oracle tests can
compare without rounding.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .set_algebra import AlgebraError, EventSet, Partition, ProductStructure, RawSubset, SetAlgebra

TAU_ZERO = 1e-12
TAU_CONV = 1e-6
TAU_MASS = 1e-12
TAU_INDEP = 1e-9


class ChargeError(ValueError):
    pass


def _values(values, exact: bool) -> np.ndarray:
    if exact:
        arr = np.array([Fraction(v) for v in values], dtype=object)
    else:
        arr = np.asarray(values, dtype=float).copy()
        if not np.all(np.isfinite(arr)):
            raise ChargeError("charge values must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Charge:
    algebra: SetAlgebra = field(repr=False)
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.algebra.n_atoms,):
            raise ChargeError(
                f"expected {self.algebra.n_atoms} atom values, got shape {self.values.shape}"
            )

    @property
    def exact(self) -> bool:
        return self.values.dtype == object

    def __call__(self, event: EventSet):
        self._own(event)
        return sum((self.values[a] for a in event.atoms), Fraction(0) if self.exact else 0.0)

    def _own(self, event: EventSet) -> None:
        if not event.algebra.same_as(self.algebra):
            raise AlgebraError("event does not belong to this charge's algebra")

    def _same(self, other: Charge) -> None:
        if not self.algebra.same_as(other.algebra):
            raise AlgebraError("charges live on different algebras")

    def _new(self, values) -> Charge:
        return Charge(self.algebra, _values(values, self.exact))

    def __add__(self, other: Charge) -> Charge:
        self._same(other)
        return self._new(self.values + other.values)

    def __sub__(self, other: Charge) -> Charge:
        self._same(other)
        return self._new(self.values - other.values)

    def __neg__(self) -> Charge:
        return self._new(-self.values)

    def __mul__(self, c) -> Charge:
        if self.exact:
            c = Fraction(c)
        return self._new(self.values * c)

    __rmul__ = __mul__

    def __truediv__(self, c) -> Charge:
        if self.exact:
            return self._new(self.values / Fraction(c))
        return self._new(self.values / c)

    @property
    def norm(self):
        return variation_norm(self)

    def total(self):
        return self(self.algebra.omega())

    def is_nonnegative(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= -tol))

    def le(self, other: Charge, tol: float = 0.0) -> bool:
        """Atomwise order ``self <= other``."""
        self._same(other)
        return bool(np.all(self.values <= other.values + tol))

    def as_float(self) -> Charge:
        return Charge(self.algebra, _values(self.values.astype(float), False))

    def as_exact(self) -> Charge:
        return Charge(self.algebra, _values(self.values, True))

    def to_json(self) -> dict:
        return {"atoms": [float(v) for v in self.values], "algebra": self.algebra.descriptor()}

    @classmethod
    def from_json(cls, obj: dict, algebra: SetAlgebra | None = None) -> Charge:
        if algebra is None:
            algebra = SetAlgebra.from_descriptor(obj["algebra"])
        return charge(algebra, obj["atoms"])


class ProbabilityCharge(Charge):
    """Non-negative charge with total mass 1."""

    def __init__(self, algebra: SetAlgebra, values: np.ndarray, tol: float = TAU_MASS):
        super().__init__(algebra, values)
        if not self.is_nonnegative():
            raise ChargeError("probability charge has a negative atom")
        total = sum(values)
        if abs(float(total) - 1.0) > tol:
            raise ChargeError(f"probability charge has mass {float(total)!r}, expected 1")


def charge(algebra: SetAlgebra, values: Sequence, exact: bool = False) -> Charge:
    return Charge(algebra, _values(values, exact))


def zero(algebra: SetAlgebra, exact: bool = False) -> Charge:
    return charge(algebra, [0] * algebra.n_atoms, exact)


def probability(algebra: SetAlgebra, values: Sequence, exact: bool = False,
                tol: float = TAU_MASS) -> ProbabilityCharge:
    return ProbabilityCharge(algebra, _values(values, exact), tol)


def uniform(algebra: SetAlgebra) -> ProbabilityCharge:
    """Uniform on points (so an atom's mass is proportional to its size)."""
    return probability(algebra, [len(b) / algebra.ground_size for b in algebra.blocks])


def variation_norm(f: Charge):
    return sum(np.abs(f.values)) if f.exact else float(np.abs(f.values).sum())


def partition_sum(f: Charge, p: Partition):
    """sum of |f(A)| over the blocks of ``p``."""
    return sum(abs(f(e)) for e in p.events())


def meet(f: Charge, g: Charge) -> Charge:
    f._same(g)
    return f._new(np.minimum(f.values, g.values))


def join(f: Charge, g: Charge) -> Charge:
    f._same(g)
    return f._new(np.maximum(f.values, g.values))


def absolute(f: Charge) -> Charge:
    return f._new(np.abs(f.values))


def pos_part(f: Charge) -> Charge:
    return f._new(np.where(f.values > 0, f.values, 0 * f.values))


def neg_part(f: Charge) -> Charge:
    return f._new(np.where(f.values < 0, -f.values, 0 * f.values))


def restrict(f: Charge, B: EventSet) -> Charge:
    """f_B(A) = f(A & B)."""
    f._own(B)
    return f._new(np.where(B.mask, f.values, 0 * f.values))


def outer_measure(l: Charge, B: RawSubset):
    """Infimum of l over events covering B; the covering event is B's atom hull."""
    if not l.is_nonnegative():
        raise ChargeError("outer measure needs a non-negative charge")
    return l(l.algebra.cover(B))


def is_abs_continuous(f: Charge, l: Charge, tol: float = TAU_ZERO) -> bool:
    f._same(l)
    null = np.abs(l.values) <= tol
    return bool(np.all(np.abs(f.values[null]) <= tol))


def is_singular(f: Charge, g: Charge, tol: float = TAU_ZERO) -> bool:
    return variation_norm(meet(absolute(f), absolute(g))) <= tol


def lebesgue_decompose(l: Charge, m: Charge, tol: float = TAU_ZERO) -> tuple[Charge, Charge]:
    """Split ``l`` into a part absolutely continuous w.r.t. ``m`` and a part singular to it."""
    if not (l.is_nonnegative() and m.is_nonnegative()):
        raise ChargeError("lebesgue_decompose needs non-negative charges")
    l._same(m)
    charged = m.values > tol
    zero_ = 0 * l.values
    return l._new(np.where(charged, l.values, zero_)), l._new(np.where(charged, zero_, l.values))


@dataclass(frozen=True)
class OrthogonalLadder:
    """parts[0] is singular to every F_j; parts[j] is carried where F_j first charges."""

    parts: tuple[Charge, ...]
    anchors: tuple[Charge, ...] = field(repr=False)

    def total(self) -> Charge:
        out = self.parts[0]
        for p in self.parts[1:]:
            out = out + p
        return out


def orthogonal_ladder(l: Charge, F: Sequence[Charge], tol: float = TAU_ZERO) -> OrthogonalLadder:
    if any(not f.is_nonnegative() for f in F):
        raise ChargeError("orthogonal_ladder needs non-negative anchors")
    d = l.algebra.n_atoms
    owner = np.zeros(d, dtype=np.int64)  # 0 means null for every F_j
    for j, f in enumerate(F, start=1):
        l._same(f)
        owner[(owner == 0) & (f.values > tol)] = j
    zero_ = 0 * l.values
    parts = tuple(l._new(np.where(owner == j, l.values, zero_)) for j in range(len(F) + 1))
    return OrthogonalLadder(parts, tuple(F))


def product_charge(ps: ProductStructure, factors: Sequence[Sequence[float]],
                   tol: float = TAU_MASS) -> ProbabilityCharge:
    if len(factors) != ps.m:
        raise ChargeError(f"need {ps.m} factor vectors, got {len(factors)}")
    probs = []
    for n, (vec, size) in enumerate(zip(factors, ps.factor_sizes)):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (size,):
            raise ChargeError(f"factor {n} must have {size} entries")
        if np.any(vec < 0) or abs(vec.sum() - 1.0) > tol:
            raise ChargeError(f"factor {n} is not a probability vector")
        probs.append(vec)
    values = np.ones(ps.algebra.ground_size)
    for n, vec in enumerate(probs):
        values = values * vec[ps.coordinates[:, n]]
    return probability(ps.algebra, values, tol=1e-9)


def independence_violation(l: Charge, ps: ProductStructure, blocks: Sequence[Iterable[int]],
                           tol: float = TAU_INDEP):
    """First witness against product factorisation across coordinate blocks, or None.

    Returns ``(i, j, gap)`` for a violated pair of blocks, or
    ``("all", None, gap)`` when pairs factorise but the joint product does not.
    """
    blocks = [sorted(set(b)) for b in blocks]
    flat = sorted(c for b in blocks for c in b)
    if flat != list(range(ps.m)):
        raise ChargeError("blocks must partition the coordinate indices")
    if len(blocks) < 2:
        return None
    vals = np.asarray(l.values, dtype=float)
    # label each point by its atom in each block's join algebra
    labels = []
    for b in blocks:
        _, lab = np.unique(ps.coordinates[:, b], axis=0, return_inverse=True)
        labels.append(lab.reshape(-1))
    margins = [np.bincount(lab, weights=vals) for lab in labels]

    def joint_gap(idx: Sequence[int]) -> float:
        keys = np.stack([labels[i] for i in idx], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        joint = np.bincount(inv.reshape(-1), weights=vals, minlength=len(uniq))
        prod = np.ones(len(uniq))
        for col, i in enumerate(idx):
            prod = prod * margins[i][uniq[:, col]]
        return float(np.max(np.abs(joint - prod)))

    for i, j in itertools.combinations(range(len(blocks)), 2):
        gap = joint_gap([i, j])
        if gap > tol:
            return i, j, gap
    gap = joint_gap(list(range(len(blocks))))
    if gap > tol:
        return "all", None, gap
    return None


def check_independence(l: Charge, ps: ProductStructure, blocks: Sequence[Iterable[int]],
                       tol: float = TAU_INDEP) -> bool:
    return independence_violation(l, ps, blocks, tol) is None


def check_property_P(seq: Sequence[Charge], tol: float = TAU_CONV,
                     supremum: Charge | None = None) -> tuple[bool, Charge]:
    """Monotone norm convergence of an increasing sequence to its supremum.

    Without ``supremum`` the atomwise supremum of the window is used.  Returns
    the verdict and the supremum.
    """
    if not seq:
        raise ChargeError("empty sequence")
    for a, b in zip(seq, seq[1:]):
        if not a.le(b, tol=TAU_ZERO):
            raise ChargeError("sequence is not increasing")
    s = seq[-1] if supremum is None else supremum
    if not all(f.le(s, tol=TAU_ZERO) for f in seq):
        raise ChargeError("supremum does not dominate the sequence")
    gaps = [variation_norm(s - f) for f in seq]
    monotone = all(x >= y - TAU_ZERO for x, y in zip(gaps, gaps[1:]))
    return bool(monotone and gaps[-1] <= tol), s
