"""Additive set functions valued in L^1 of a finite probability space.

A ``VectorCharge`` is an (atom x sample) table: F(A)(w) is the sum of
table[a, w] over the atoms a of A.  The norm is the sup over partitions
of || sum_{A in pi} |F(A)| ||_{L^1(P)}, which the finest partition attains.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .charge import TAU_CONV, TAU_ZERO, Charge, ChargeError
from .komlos import ExtractionError, KomlosConfig, WeightMatrix, run_core
from .set_algebra import (
    ENUMERATION_CAP,
    AlgebraError,
    EventSet,
    Partition,
    SetAlgebra,
    enumerate_partitions,
    make_algebra,
)


class RBoundError(ExtractionError):
    pass


@dataclass(frozen=True, eq=False)
class SampleSpace:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ChargeError("sample weights must be a probability vector")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, m: int) -> SampleSpace:
        return cls(np.full(m, 1.0 / m))


@dataclass(frozen=True, eq=False)
class LOneVector:
    space: SampleSpace = field(repr=False)
    values: np.ndarray

    @property
    def norm(self) -> float:
        return float((self.space.weights * np.abs(self.values)).sum())


@dataclass(frozen=True, eq=False)
class VectorCharge:
    algebra: SetAlgebra = field(repr=False)
    space: SampleSpace = field(repr=False)
    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.shape != (self.algebra.n_atoms, self.space.size):
            raise ChargeError(f"table must have shape {(self.algebra.n_atoms, self.space.size)}")
        t.flags.writeable = False
        object.__setattr__(self, "table", t)

    def __call__(self, event: EventSet) -> LOneVector:
        if not event.algebra.same_as(self.algebra):
            raise AlgebraError("event does not belong to this algebra")
        return LOneVector(self.space, self.table[event.mask].sum(axis=0))

    def __sub__(self, other: VectorCharge) -> VectorCharge:
        return VectorCharge(self.algebra, self.space, self.table - other.table)

    def __add__(self, other: VectorCharge) -> VectorCharge:
        return VectorCharge(self.algebra, self.space, self.table + other.table)

    def __mul__(self, c: float) -> VectorCharge:
        return VectorCharge(self.algebra, self.space, self.table * c)

    __rmul__ = __mul__

    def slice(self, w: int) -> Charge:
        """The scalar charge A -> F(A)(w)."""
        return Charge(self.algebra, self.table[:, w].copy())

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.table >= 0))

    def le(self, other: VectorCharge, tol: float = 0.0) -> bool:
        return bool(np.all(self.table <= other.table + tol))

    def to_json(self) -> dict:
        return {"atoms": self.algebra.n_atoms, "samples": self.space.size,
                "P": self.space.weights.tolist(), "table": self.table.tolist(),
                "algebra": self.algebra.descriptor()}

    @classmethod
    def from_json(cls, obj: dict, algebra: SetAlgebra | None = None) -> VectorCharge:
        if algebra is None:
            algebra = (SetAlgebra.from_descriptor(obj["algebra"]) if "algebra" in obj
                       else make_algebra(obj["atoms"], [[a] for a in range(obj["atoms"])]))
        return cls(algebra, SampleSpace(np.asarray(obj["P"])), np.asarray(obj["table"]))

    @classmethod
    def embed(cls, f: Charge, space: SampleSpace) -> VectorCharge:
        """f(A) taken as the constant function on W."""
        vals = np.asarray(f.values, dtype=float)
        return cls(f.algebra, space, np.repeat(vals[:, None], space.size, axis=1))


def ba0_norm(F: VectorCharge) -> float:
    return float((F.space.weights * np.abs(F.table).sum(axis=0)).sum())


def partition_value(F: VectorCharge, p: Partition) -> float:
    """|| sum_{A in p} |F(A)| ||_X for one partition."""
    acc = np.zeros(F.space.size)
    for e in p.events():
        acc += np.abs(F(e).values)
    return float((F.space.weights * acc).sum())


def f_pi_value(F: VectorCharge, p: Partition, A: EventSet) -> LOneVector:
    """F_pi(A) = sum over blocks E of |F(A & E)|; subadditive on the whole algebra."""
    if not p.algebra.same_as(F.algebra):
        raise AlgebraError("partition from a foreign algebra")
    acc = np.zeros(F.space.size)
    for e in p.events():
        acc += np.abs(F(A & e).values)
    return LOneVector(F.space, acc)


def f_pi(F: VectorCharge, p: Partition) -> VectorCharge:
    """F_pi as an additive function on the sub-algebra generated by ``p``.

    The returned charge lives on the algebra whose atoms are the blocks of
    ``p`` (block order: by smallest atom index).
    """
    if not p.algebra.same_as(F.algebra):
        raise AlgebraError("partition from a foreign algebra")
    events = p.events()
    sub = make_algebra(F.algebra.ground_size, [sorted(e.points()) for e in events])
    table = np.array([np.abs(F(e).values) for e in events])
    return VectorCharge(sub, F.space, table)


def absolute(F: VectorCharge) -> VectorCharge:
    return VectorCharge(F.algebra, F.space, np.abs(F.table))


def check_vector_property_P(seq: Sequence[VectorCharge], tol: float = TAU_CONV,
                            supremum: VectorCharge | None = None) -> bool:
    if not seq:
        raise ChargeError("empty sequence")
    for a, b in zip(seq, seq[1:]):
        if not a.le(b, TAU_ZERO):
            raise ChargeError("sequence is not increasing")
    s = seq[-1] if supremum is None else supremum
    if not all(f.le(s, TAU_ZERO) for f in seq):
        raise ChargeError("supremum does not dominate the sequence")
    gaps = [ba0_norm(s - f) for f in seq]
    monotone = all(x >= y - TAU_ZERO for x, y in zip(gaps, gaps[1:]))
    return bool(monotone and gaps[-1] <= tol)


@dataclass
class RBoundReport:
    bounded: bool
    level: float
    bound: float | None
    strict: bool
    heuristic: bool
    quantile_by_n: np.ndarray  # P-quantile of the largest ratio generated by F_n
    hull_quantile: float
    worst: dict  # generator attaining the largest ratio: n, atoms, sample, value


def _ratios(table: np.ndarray, ref: np.ndarray, p_blocks: list[np.ndarray]) -> np.ndarray:
    """F(A)(w)/l(A) for every block A, shape (blocks, samples); l-null blocks give inf or 0."""
    num = np.array([table[b].sum(axis=0) for b in p_blocks])
    den = np.array([ref[b].sum() for b in p_blocks])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den[:, None] > 0, num / den[:, None], np.where(num > 0, np.inf, 0.0))
    return r


def _quantile(values: np.ndarray, P: np.ndarray, level: float) -> float:
    """Smallest c with P(values > c) <= level."""
    order = np.argsort(values)
    v, p = values[order], P[order]
    tail = np.cumsum(p[::-1])[::-1]  # P(values >= v_i)
    for i in range(len(v)):
        above = tail[i + 1] if i + 1 < len(v) else 0.0
        if above <= level and p[i] > 0:
            return float(v[i])
    return float(v[-1])


def check_R_bounded(F: Sequence[VectorCharge], l: Charge, bound: float | None = None,
                    level: float = 1e-6, strict: bool = False,
                    cap: int = 6) -> RBoundReport:
    """Probability-boundedness of the ratios sup_{A in pi} F_n(A)/l(A).

    Convex combinations of generators are dominated by their pointwise max, so
    the hull is controlled by the max over generators.  Partitions are swept
    exhaustively up to ``cap`` atoms; above that only the finest partition is
    used and the report is marked heuristic.
    """
    algebra = l.algebra
    ref = np.asarray(l.values, dtype=float)
    P = F[0].space.weights
    heuristic = algebra.n_atoms > min(cap, ENUMERATION_CAP)
    if heuristic:
        partitions = [Partition.finest(algebra)]
    else:
        partitions = list(enumerate_partitions(algebra, cap=max(cap, 1)))
    blocks = [[np.array(sorted(b)) for b in sorted(p.blocks, key=min)] for p in partitions]
    live = P > 0
    per_n = []
    best = {"value": -np.inf}
    for n, f in enumerate(F):
        top = np.full(len(P), -np.inf)
        for pb in blocks:
            r = _ratios(f.table, ref, pb)
            i = r.argmax(axis=0)
            val = r[i, np.arange(len(P))]
            better = val > top
            top = np.where(better, val, top)
            cand = np.where(live, val, -np.inf)
            w = int(cand.argmax())
            if cand[w] > best["value"]:
                best = {"n": n, "atoms": pb[i[w]].tolist(), "sample": w, "value": float(cand[w])}
        per_n.append(top)
    per_n = np.array(per_n)
    sup_gen = per_n.max(axis=0)
    eff_level = 0.0 if strict else level
    q_by_n = np.array([_quantile(row, P, eff_level) for row in per_n])
    hull_q = _quantile(sup_gen, P, eff_level)
    ok = bool(np.isfinite(hull_q) and (bound is None or hull_q <= bound))
    return RBoundReport(ok, eff_level, bound, strict, heuristic, q_by_n, hull_q, best)


@dataclass
class VectorExtraction:
    xi: VectorCharge
    weights: WeightMatrix
    G: list[VectorCharge]
    ba0_residual: np.ndarray  # || G_n ^ 2^n l - xi || per row
    P_B: np.ndarray  # P(B_n) per row
    partial_sum: np.ndarray  # sum_{j >= n} P(B_j^c)
    H: np.ndarray  # sample mask of the convergence set
    P_H: float
    N_H: int
    sample_residual: np.ndarray  # |G_n - xi|(Omega)(w) at the last row
    failures: list[dict]
    r_report: RBoundReport

    @property
    def passed(self) -> bool:
        return not self.failures


def extract_vector(F: Sequence[VectorCharge], l: Charge, W: SampleSpace,
                   cfg: KomlosConfig = KomlosConfig(), bound: float | None = None,
                   strict: bool = False) -> VectorExtraction:
    """One weight sequence for all sample points, then per-sample convergence diagnostics."""
    if not F:
        raise ExtractionError("empty sequence")
    F = list(F)[: cfg.horizon]
    if any(not f.is_nonnegative() for f in F):
        raise ExtractionError("extract_vector needs non-negative charges")
    rep = check_R_bounded(F, l, bound=bound, strict=strict)
    if not rep.bounded:
        raise RBoundError(f"ratio set is not bounded in probability; offending generator {rep.worst}")
    algebra = l.algebra
    d, m = algebra.n_atoms, W.size
    ref_atoms = np.asarray(l.values, dtype=float)
    X = np.array([f.table.reshape(-1) for f in F])
    ref = np.repeat(ref_atoms, m)
    nw = np.tile(W.weights, d)
    core = run_core(X, ref, nw, cfg)
    xi = core.ladder.levels[-1].reshape(d, m)
    G = core.G.reshape(-1, d, m)
    R = G.shape[0]
    n = np.arange(1, R + 1)
    caps = 2.0 ** n[:, None, None] * ref_atoms[None, :, None]
    # finest partition: B_n^i = {w : G_n(a_i)(w) <= 2^n l(a_i)}
    B = np.all(G <= caps, axis=1)
    P_B = (B * W.weights).sum(axis=1)
    partial = np.cumsum((1 - P_B)[::-1])[::-1]
    ba0_res = (np.abs(np.minimum(G, caps) - xi).sum(axis=1) * W.weights).sum(axis=1)
    N_H = R
    for N in range(R + 1):
        if W.weights[np.all(B[N:], axis=0)].sum() >= 1 - TAU_ZERO:
            N_H = N
            break
    H = np.all(B[N_H:], axis=0)
    P_H = float(W.weights[H].sum())
    sample_res = np.abs(G[-1] - xi).sum(axis=0)
    failures = []
    for name, ok in core.weights.check().items():
        if not ok:
            failures.append({"name": f"weights_{name}", "value": 0.0, "bound": 1.0})
    if 1 - P_B[-1] > cfg.tau_conv:
        failures.append({"name": "P_B_final", "value": float(P_B[-1]), "bound": 1 - cfg.tau_conv})
    if P_H < 1 - cfg.tau_conv:
        failures.append({"name": "P_H", "value": P_H, "bound": 1 - cfg.tau_conv})
    live = H & (W.weights > 0)
    if live.any() and sample_res[live].max() > cfg.tau_conv:
        failures.append({"name": "sample_residual", "value": float(sample_res[live].max()),
                         "bound": cfg.tau_conv})
    if ba0_res[-1] > cfg.tau_conv:
        failures.append({"name": "ba0_residual_final", "value": float(ba0_res[-1]), "bound": cfg.tau_conv})
    return VectorExtraction(
        xi=VectorCharge(algebra, W, xi), weights=core.weights,
        G=[VectorCharge(algebra, W, g) for g in G], ba0_residual=ba0_res, P_B=P_B,
        partial_sum=partial, H=H, P_H=P_H, N_H=N_H, sample_residual=sample_res,
        failures=failures, r_report=rep,
    )
