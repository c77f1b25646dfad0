"""Convexify, truncate and restrict a sequence of charges until it converges in norm.

The engine works on plain arrays: a window of input vectors ``X`` (one row
per input charge), a non-negative reference ``ref`` playing the role of the
probability the truncations are measured against, and coordinate weights
``nw`` defining the weighted l1 norm (all ones for scalar charges, the sample
probabilities for vector charges).

Two ways of forming the convex combinations G_n are supported:

``"fit"``
    Estimate the weak cluster point by the Cesaro mean of the second half of
    the window, then walk forward through the window carving disjoint blocks;
    each block is grown until some convex combination of its members matches
    the estimate in norm (an l1 projection solved as a linear program and
    polished on its support).
``"blocks"``
    Plain disjoint block averages of ``block_size`` consecutive inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .charge import (
    TAU_CONV,
    TAU_INDEP,
    TAU_ZERO,
    Charge,
    ChargeError,
    independence_violation,
    meet,
    neg_part,
    pos_part,
    variation_norm,
)
from .set_algebra import EventSet, ProductStructure, SetAlgebra


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class KomlosConfig:
    K: int = 40
    horizon: int = 512
    block_size: int = 8
    delta: float = 1e-3
    tau_conv: float = TAU_CONV
    tau_zero: float = TAU_ZERO
    tail_tol: float = 1e-3
    mode: str = "fit"
    subsequence: bool = False

    def __post_init__(self):
        if self.K <= 0 or self.horizon <= 0 or self.block_size <= 0:
            raise ExtractionError("K, horizon and block_size must be positive")
        if self.mode not in ("fit", "blocks"):
            raise ExtractionError(f"unknown mode {self.mode!r}")


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class WeightMatrix:
    """Row n holds the convex weights alpha_{n,i} of G_n over input indices i."""

    rows: tuple[dict[int, Fraction], ...]
    n_inputs: int

    def __len__(self) -> int:
        return len(self.rows)

    def support(self, n: int) -> list[int]:
        return sorted(i for i, w in self.rows[n].items() if w != 0)

    def dense(self) -> np.ndarray:
        out = np.zeros((len(self.rows), self.n_inputs))
        for n, row in enumerate(self.rows):
            for i, w in row.items():
                out[n, i] = float(w)
        return out

    def check(self) -> dict[str, bool]:
        """Exact (rational) check of row-stochasticity, forward support and disjointness."""
        stochastic = all(sum(r.values()) == 1 and all(w >= 0 for w in r.values()) for r in self.rows)
        forward = all(min(self.support(n), default=n) >= n for n in range(len(self.rows)))
        seen: set[int] = set()
        disjoint = True
        for n in range(len(self.rows)):
            s = set(self.support(n))
            if s & seen:
                disjoint = False
            seen |= s
        return {"row_stochastic": stochastic, "forward": forward, "disjoint": disjoint}

    def compose(self, inner: WeightMatrix) -> WeightMatrix:
        """gamma_{j,i} = sum_n beta_{j,n} alpha_{n,i} with ``self`` = beta, ``inner`` = alpha."""
        if self.n_inputs != len(inner):
            raise ExtractionError("weight matrices do not compose")
        rows = []
        for row in self.rows:
            acc: dict[int, Fraction] = {}
            for n, b in row.items():
                for i, a in inner.rows[n].items():
                    acc[i] = acc.get(i, Fraction(0)) + b * a
            rows.append({i: w for i, w in acc.items() if w != 0})
        return WeightMatrix(tuple(rows), inner.n_inputs)

    def remap(self, index: Sequence[int], n_inputs: int) -> WeightMatrix:
        """Re-express weights given on a subsequence in terms of original indices."""
        return WeightMatrix(tuple({int(index[i]): w for i, w in r.items()} for r in self.rows), n_inputs)

    def triplets(self) -> list[list]:
        return [[n, i, float(w)] for n, r in enumerate(self.rows) for i, w in sorted(r.items())]


def _exact_row(entries: dict[int, float]) -> dict[int, Fraction]:
    fr = {i: Fraction(w) for i, w in entries.items() if w > 0}
    total = sum(fr.values())
    return {i: w / total for i, w in fr.items()}


def _fit_convex(Xb: np.ndarray, target: np.ndarray, nw: np.ndarray) -> tuple[np.ndarray, float]:
    """Convex weights over the rows of ``Xb`` minimising the weighted l1 distance to target."""
    b = Xb.shape[0]
    dist = (np.abs(Xb - target) * nw).sum(axis=1)
    best = int(np.argmin(dist))
    if b == 1 or dist[best] == 0.0:
        w = np.zeros(b)
        w[best] = 1.0
        return w, float(dist[best])
    cols = np.flatnonzero((nw > 0) & np.any(Xb != target, axis=0))
    A = Xb[:, cols].T
    g = target[cols]
    D = len(cols)
    c = np.concatenate([np.zeros(b), nw[cols]])
    As = sparse.csr_matrix(A)
    eye = sparse.identity(D, format="csr")
    A_ub = sparse.bmat([[As, -eye], [-As, -eye]], format="csr")
    b_ub = np.concatenate([g, -g])
    A_eq = np.concatenate([np.ones(b), np.zeros(D)])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=(0, None), method="highs")
    if res.status != 0:
        w = np.zeros(b)
        w[best] = 1.0
        return w, float(dist[best])
    w = np.clip(res.x[:b], 0.0, None)
    w /= w.sum()
    w = _polish(A, g, w)
    resid = float((np.abs(Xb.T @ w - target) * nw).sum())
    if resid > dist[best]:
        w = np.zeros(b)
        w[best] = 1.0
        resid = float(dist[best])
    return w, resid


def _polish(A: np.ndarray, g: np.ndarray, w: np.ndarray) -> np.ndarray:
    # re-solve on the LP support to remove solver tolerance
    S = np.flatnonzero(w > 1e-12)
    M = np.vstack([A[:, S], np.ones(len(S))])
    rhs = np.concatenate([g, [1.0]])
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    if np.all(sol >= 0):
        before = np.abs(A @ w - g).sum()
        out = np.zeros_like(w)
        out[S] = sol / sol.sum()
        if np.abs(A @ out - g).sum() <= before:
            return out
    return w


def fit_weights(X: np.ndarray, target: np.ndarray, nw: np.ndarray, block_size: int,
                tol: float) -> tuple[WeightMatrix, np.ndarray, int]:
    """Greedy disjoint forward blocks whose best convex combination reaches ``target``.

    Returns the weights, per-row fit residuals and the number of trailing
    inputs left unused because no block of them reached the target.
    """
    N = X.shape[0]
    rows: list[dict[int, Fraction]] = []
    resid: list[float] = []
    cursor = 0
    while cursor < N:
        end = min(cursor + block_size, N)
        while True:
            w, r = _fit_convex(X[cursor:end], target, nw)
            if r <= tol or end == N:
                break
            end = min(end + block_size, N)
        if r > tol and rows:
            break
        rows.append(_exact_row({cursor + i: float(v) for i, v in enumerate(w)}))
        resid.append(r)
        cursor = end
    return WeightMatrix(tuple(rows), N), np.array(resid), N - cursor


def block_weights(N: int, block_size: int) -> tuple[WeightMatrix, int]:
    R = N // block_size
    w = Fraction(1, block_size)
    rows = tuple({r * block_size + i: w for i in range(block_size)} for r in range(R))
    return WeightMatrix(rows, N), N - R * block_size


# --------------------------------------------------------------------------
# ladder


@dataclass(frozen=True)
class TruncationLadder:
    """levels[k] = xi_k, the tail average of G_n truncated at 2^k times the reference."""

    levels: np.ndarray
    reference: np.ndarray
    nw: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return self.levels.shape[0] - 1

    def _norm(self, v: np.ndarray) -> np.ndarray:
        return (np.abs(v) * self.nw).sum(axis=-1)

    def restr_residual(self) -> float:
        """max over k <= n of || xi_n ^ 2^k ref - xi_k ||."""
        worst = 0.0
        for k in range(self.K + 1):
            cap = np.minimum(self.levels[k:], 2.0 ** k * self.reference)
            worst = max(worst, float(self._norm(cap - self.levels[k]).max()))
        return worst

    def monotone_gap(self) -> float:
        """Largest atomwise decrease between consecutive levels (0 when monotone)."""
        if self.K == 0:
            return 0.0
        return float(max(0.0, -(np.diff(self.levels, axis=0)).min()))

    def domination_gap(self) -> float:
        scale = 2.0 ** np.arange(self.K + 1)[:, None] * self.reference
        return float(max(0.0, (self.levels - scale).max()))

    def stall(self) -> float:
        if self.K == 0:
            return 0.0
        return float(self._norm(self.levels[-1] - self.levels[-2]))


@dataclass
class _Core:
    weights: WeightMatrix
    G: np.ndarray
    fit_residual: np.ndarray
    tail: np.ndarray  # indices of rows averaged into the ladder
    ladder: TruncationLadder
    unused: int
    target: np.ndarray | None


def _ladder_levels(G: np.ndarray, ref: np.ndarray, K: int) -> np.ndarray:
    caps = 2.0 ** np.arange(K + 1)[:, None, None] * ref[None, None, :]
    return np.minimum(G[None, :, :], caps).mean(axis=1)


def run_core(X: np.ndarray, ref: np.ndarray, nw: np.ndarray, cfg: KomlosConfig,
             mode: str | None = None, K: int | None = None) -> _Core:
    mode = mode or cfg.mode
    K = cfg.K if K is None else K
    N = X.shape[0]
    if N == 0:
        raise ExtractionError("empty sequence")
    if mode == "fit":
        target = X[N // 2:].mean(axis=0)
        W, fit_res, unused = fit_weights(X, target, nw, cfg.block_size, cfg.tau_conv)
        G = W.dense() @ X
        ok = fit_res <= cfg.tau_conv
        start = len(ok)
        while start > 0 and ok[start - 1]:
            start -= 1
        if start == len(ok):
            start = len(ok) // 2
        tail = np.arange(start, len(ok))
    else:
        target = None
        W, unused = block_weights(N, min(cfg.block_size, N))
        G = W.dense() @ X
        fit_res = np.full(len(W), np.nan)
        tail = np.arange(len(W) // 2, len(W))
    levels = _ladder_levels(G[tail], ref, K)
    return _Core(W, G, fit_res, tail, TruncationLadder(levels, ref, nw), unused, target)


# --------------------------------------------------------------------------
# results


@dataclass
class Certificates:
    norm_residual: np.ndarray
    lambda_Anc: np.ndarray
    partial_sum: np.ndarray
    bound: np.ndarray
    mincover_gap: np.ndarray
    restr_residual: float
    monotone_gap: float
    domination_gap: float
    stall: float
    lower_bound: float
    lower_bound_limsup: float
    xi_norm: float
    certified_from: int | None  # 1-based row index

    def rows(self) -> list[dict]:
        return [
            {"n": n + 1, "norm_residual": float(self.norm_residual[n]),
             "lambda_Anc": float(self.lambda_Anc[n]), "partial_sum": float(self.partial_sum[n]),
             "bound": float(self.bound[n])}
            for n in range(len(self.norm_residual))
        ]

    def to_json(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass
class ExtractionResult:
    xi: Charge
    weights: WeightMatrix
    restriction_sets: list[EventSet]
    G: list[Charge]
    certificates: Certificates
    ladder: TruncationLadder
    diagnostics: dict
    failures: list[dict]

    @property
    def passed(self) -> bool:
        return not self.failures

    def certified_tail(self) -> range:
        c = self.certificates.certified_from
        return range(0) if c is None else range(c - 1, len(self.G))

    def to_json(self) -> dict:
        return {
            "xi": [float(v) for v in self.xi.values],
            "weights": self.weights.triplets(),
            "restriction_sets": [[bool(b) for b in A.mask] for A in self.restriction_sets],
            "certificates": self.certificates.to_json(),
            "diagnostics": self.diagnostics,
            "failures": self.failures,
            "passed": self.passed,
        }


def _fail(failures: list, name: str, value, bound) -> None:
    failures.append({"name": name, "value": float(value), "bound": float(bound)})


def _as_matrix(F: Sequence[Charge], l: Charge) -> tuple[SetAlgebra, np.ndarray]:
    if len(F) == 0:
        raise ExtractionError("empty sequence")
    for f in F:
        l._same(f)
    return l.algebra, np.array([np.asarray(f.values, dtype=float) for f in F])


def _scalar_result(X: np.ndarray, sel: np.ndarray, N_total: int, l: Charge, cfg: KomlosConfig,
                   core: _Core, lb_window: np.ndarray) -> ExtractionResult:
    """Certificates for a scalar run; ``sel`` maps engine positions to original indices."""
    algebra = l.algebra
    ref = np.asarray(l.values, dtype=float)
    G = core.G
    R = G.shape[0]
    xi = core.ladder.levels[-1]
    n = np.arange(1, R + 1)
    caps = 2.0 ** n[:, None] * ref[None, :]
    inside = G <= caps  # ties route into A_n
    Gbar = np.where(inside, G, 0.0)
    norm_res = np.abs(Gbar - xi).sum(axis=1)
    lam_c = np.where(inside, 0.0, ref).sum(axis=1)
    partial = np.cumsum(lam_c[::-1])[::-1]
    supF = float(np.abs(X).sum(axis=1).max())
    bound = 2.0 ** (-n) * (1.0 + supF)
    mincover = (np.where(inside, G, 0.0).sum(axis=1) + np.where(inside, 0.0, caps).sum(axis=1)
                - np.minimum(G, caps).sum(axis=1))

    # lower bound: truncated norms of the inputs actually used by the weights
    used = sorted({i for r in core.weights.rows for i in r})
    ks = 2.0 ** np.arange(cfg.K + 1)
    trunc = np.minimum(X[used][None, :, :], ks[:, None, None] * ref).sum(axis=2)
    lower = float(trunc.min(axis=1).max()) - cfg.delta
    tw = np.minimum(lb_window[None, :, :], ks[:, None, None] * ref).sum(axis=2)
    lower_limsup = float(tw[:, tw.shape[1] // 2:].max(axis=1).max()) - cfg.delta
    xi_norm = float(xi.sum())

    good = norm_res <= cfg.tail_tol
    cert = None
    if good[-1]:
        c = R
        while c > 0 and good[c - 1]:
            c -= 1
        cert = c + 1

    ladder = core.ladder
    certs = Certificates(
        norm_residual=norm_res, lambda_Anc=lam_c, partial_sum=partial, bound=bound,
        mincover_gap=mincover, restr_residual=ladder.restr_residual(),
        monotone_gap=ladder.monotone_gap(), domination_gap=ladder.domination_gap(),
        stall=ladder.stall(), lower_bound=lower, lower_bound_limsup=lower_limsup,
        xi_norm=xi_norm, certified_from=cert,
    )
    weights = core.weights.remap(sel, N_total)
    failures: list[dict] = []
    for name, ok in weights.check().items():
        if not ok:
            _fail(failures, f"weights_{name}", 0, 1)
    if norm_res[-1] > cfg.tau_conv:
        _fail(failures, "final_norm_residual", norm_res[-1], cfg.tau_conv)
    viol = partial - bound - cfg.tau_conv
    if np.any(viol > 0):
        i = int(np.argmax(viol))
        _fail(failures, f"summability_n{i + 1}", partial[i], bound[i] + cfg.tau_conv)
    if np.max(np.abs(mincover)) > cfg.tau_conv:
        _fail(failures, "mincover_gap", np.max(np.abs(mincover)), cfg.tau_conv)
    for name, v in (("restr_residual", certs.restr_residual), ("monotone_gap", certs.monotone_gap),
                    ("domination_gap", certs.domination_gap), ("stall", certs.stall)):
        if v > cfg.tau_conv:
            _fail(failures, name, v, cfg.tau_conv)
    checked_lb = lower_limsup if cfg.subsequence else lower
    if xi_norm < checked_lb - cfg.tau_conv:
        _fail(failures, "lower_bound", xi_norm, checked_lb)

    charged = X.sum(axis=0) > cfg.tau_zero
    degenerate = bool(charged.any() and np.all(ref[charged] <= cfg.tau_zero))
    diagnostics = {
        "mode": cfg.mode,
        "window": int(X.shape[0]),
        "rows": int(R),
        "unused_inputs": int(core.unused),
        "tail_rows": [int(core.tail[0]) + 1, int(core.tail[-1]) + 1] if len(core.tail) else [],
        "fit_residual": [float(v) for v in core.fit_residual],
        "sup_input_norm": supF,
        "degenerate": degenerate,
        "subsequence": cfg.subsequence,
        "lower_bound_window": "min over used inputs" if not cfg.subsequence else "tail max",
    }
    return ExtractionResult(
        xi=Charge(algebra, _ro(xi)),
        weights=weights,
        restriction_sets=[algebra.event(np.flatnonzero(m).tolist()) for m in inside],
        G=[Charge(algebra, _ro(g)) for g in G],
        certificates=certs,
        ladder=ladder,
        diagnostics=diagnostics,
        failures=failures,
    )


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


# --------------------------------------------------------------------------
# operations


def truncate(f: Charge, l: Charge, k: int) -> Charge:
    """f ^ 2^k l."""
    if not f.is_nonnegative():
        raise ChargeError("truncate needs a non-negative charge")
    return meet(f, l * (2 ** k))


def extract_positive(F: Sequence[Charge], l: Charge, cfg: KomlosConfig = KomlosConfig()) -> ExtractionResult:
    algebra, X = _as_matrix(F, l)
    if np.any(X < 0):
        raise ExtractionError("extract_positive needs non-negative charges")
    N_total = X.shape[0]
    X = X[: cfg.horizon]
    ref = np.asarray(l.values, dtype=float)
    sel = np.arange(X.shape[0])
    if cfg.subsequence:
        # keep the inputs whose top truncated norm is near the window limsup
        tn = np.minimum(X, 2.0 ** cfg.K * ref).sum(axis=1)
        sel = np.flatnonzero(tn >= tn[len(tn) // 2:].max() - cfg.delta / 2)
    core = run_core(X[sel], ref, np.ones_like(ref), cfg)
    return _scalar_result(X[sel], sel, N_total, l, cfg, core, X)


def extract_signed(F: Sequence[Charge], l: Charge, cfg: KomlosConfig = KomlosConfig()) -> ExtractionResult:
    """Two positive extractions: on positive parts, then on the matching mixtures of negative parts."""
    F = list(F)[: cfg.horizon]
    algebra, X = _as_matrix(F, l)
    first = extract_positive([pos_part(f) for f in F], l, cfg)
    alpha = first.weights
    A = alpha.dense()
    Xm = np.array([np.asarray(neg_part(f).values, dtype=float) for f in F])
    Fbar = [Charge(algebra, _ro(row)) for row in A @ Xm]
    second = extract_positive(Fbar, l, replace(cfg, horizon=len(Fbar), subsequence=False))
    beta = second.weights
    gamma = beta.compose(alpha)

    ref = np.asarray(l.values, dtype=float)
    Gmat = gamma.dense() @ X
    xi = np.asarray(first.xi.values) - np.asarray(second.xi.values)
    sets = []
    for j, row in enumerate(beta.rows):
        mask = second.restriction_sets[j].mask.copy()
        for n in row:
            mask &= first.restriction_sets[n].mask
        sets.append(mask)
    sets = np.array(sets)
    R = len(sets)
    Gbar = np.where(sets, Gmat, 0.0)
    norm_res = np.abs(Gbar - xi).sum(axis=1)
    lam_c = np.where(sets, 0.0, ref).sum(axis=1)
    partial = np.cumsum(lam_c[::-1])[::-1]
    n = np.arange(1, R + 1)
    sup_pos = first.diagnostics["sup_input_norm"]
    sup_bar = second.diagnostics["sup_input_norm"]
    bound = 2.0 ** (-n) * (2.0 + sup_pos + sup_bar)

    good = norm_res <= cfg.tail_tol
    cert = None
    if R and good[-1]:
        c = R
        while c > 0 and good[c - 1]:
            c -= 1
        cert = c + 1
    c1 = first.certificates
    certs = Certificates(
        norm_residual=norm_res, lambda_Anc=lam_c, partial_sum=partial, bound=bound,
        mincover_gap=np.zeros(R), restr_residual=max(c1.restr_residual, second.certificates.restr_residual),
        monotone_gap=c1.monotone_gap, domination_gap=c1.domination_gap, stall=c1.stall,
        lower_bound=float("nan"), lower_bound_limsup=float("nan"),
        xi_norm=float(np.abs(xi).sum()), certified_from=cert,
    )
    failures = [dict(f, name="stage1_" + f["name"]) for f in first.failures
                if not f["name"].startswith("final_norm")]
    failures += [dict(f, name="stage2_" + f["name"]) for f in second.failures
                 if not f["name"].startswith("final_norm")]
    for name, ok in gamma.check().items():
        if not ok:
            _fail(failures, f"gamma_{name}", 0, 1)
    if norm_res[-1] > cfg.tau_conv:
        _fail(failures, "final_norm_residual", norm_res[-1], cfg.tau_conv)
    viol = partial - bound - cfg.tau_conv
    if np.any(viol > 0):
        i = int(np.argmax(viol))
        _fail(failures, f"summability_n{i + 1}", partial[i], bound[i] + cfg.tau_conv)
    return ExtractionResult(
        xi=Charge(algebra, _ro(xi)),
        weights=gamma,
        restriction_sets=[algebra.event(np.flatnonzero(m).tolist()) for m in sets],
        G=[Charge(algebra, _ro(g)) for g in Gmat],
        certificates=certs,
        ladder=first.ladder,
        diagnostics={"mode": cfg.mode, "rows": R, "chi": first.xi.values.tolist(),
                     "zeta": second.xi.values.tolist(), "stage1": first.diagnostics,
                     "stage2": second.diagnostics, "alpha": alpha, "beta": beta,
                     "degenerate": first.diagnostics["degenerate"]},
        failures=failures,
    )


@dataclass
class OrthogonalityReport:
    tail_max: np.ndarray  # per j: max over tail n != j of ||F_n ^ F_j||
    tau: float
    window: int

    @property
    def verdict(self) -> bool:
        return bool(np.all(self.tail_max <= self.tau))


def test_asymptotic_orthogonality(F: Sequence[Charge], window: int, tau: float) -> OrthogonalityReport:
    X = np.array([np.asarray(f.values, dtype=float) for f in F])
    N = X.shape[0]
    window = max(1, min(window, N))
    tail = np.arange(N - window, N)
    meets = np.minimum(X[tail][:, None, :], X[None, :, :]).sum(axis=2)  # (window, N)
    meets[tail - (N - window), tail] = -np.inf
    worst = meets.max(axis=0)
    worst[np.isneginf(worst)] = 0.0
    return OrthogonalityReport(worst, tau, window)


test_asymptotic_orthogonality.__test__ = False


@dataclass(frozen=True)
class ExtendedCharge:
    """Additive set function valued in [0, inf]: a finite part plus atoms carrying +inf."""

    finite: Charge
    infinite: EventSet

    def __post_init__(self):
        if np.any(np.asarray(self.finite.values)[self.infinite.mask] != 0):
            raise ChargeError("finite part must vanish on the infinite atoms")

    def __call__(self, event: EventSet) -> float:
        if event.atoms & self.infinite.atoms:
            return math.inf
        return float(self.finite(event))


def extract_unbounded(F: Sequence[Charge], l: Charge, cfg: KomlosConfig = KomlosConfig(),
                      tau_inf: float = 0.05, levels: int | None = None):
    """Returns (ExtendedCharge, WeightMatrix, diagnostics).

    The ladder runs on plain block averages up to ``levels`` (default
    floor(log2(window)) - 1) and an atom is reported infinite when the top
    quarter of levels is saturated.
    """
    algebra, X = _as_matrix(F, l)
    if np.any(X < 0):
        raise ExtractionError("extract_unbounded needs non-negative charges")
    X = X[: cfg.horizon]
    ref = np.asarray(l.values, dtype=float)
    N = X.shape[0]
    K = levels if levels is not None else max(1, min(cfg.K, int(math.floor(math.log2(max(N, 2)))) - 1))
    core = run_core(X, ref, np.ones_like(ref), cfg, mode="blocks", K=K)
    lv = core.ladder.levels
    top = np.arange(int(math.ceil(0.75 * K)), K + 1)
    sat = lv[top] >= (1.0 - tau_inf) * (2.0 ** top)[:, None] * ref
    flagged = (ref > cfg.tau_zero) & np.all(sat, axis=0)
    finite = np.where(flagged, 0.0, lv[-1])
    xi = ExtendedCharge(Charge(algebra, _ro(finite)), algebra.event(np.flatnonzero(flagged).tolist()))
    G = core.G
    n = np.arange(1, G.shape[0] + 1)
    capped = np.minimum(G, 2.0 ** n[:, None] * ref)
    fin_res = np.where(flagged, 0.0, np.abs(capped - finite)).sum(axis=1)
    diagnostics = {
        "levels": int(K),
        "top_levels": top.tolist(),
        "flagged_atoms": np.flatnonzero(flagged).tolist(),
        "finite_residual": fin_res.tolist(),
        "converged": bool(fin_res[-1] <= cfg.tau_conv),
        "ladder": core.ladder,
        "G": G,
    }
    return xi, core.weights, diagnostics


@dataclass
class IndependentResult:
    N: int
    A_eps: EventSet
    probabilities: np.ndarray  # l(g_n <= 2^n) per row
    product: float
    l_A_eps: float
    xi_complement: float
    final_residual: float
    g: np.ndarray
    eps: float

    @property
    def passed(self) -> bool:
        return (self.product > 1 - self.eps and abs(self.l_A_eps - self.product) <= TAU_INDEP
                and self.xi_complement < self.eps)


def _densities(F: Sequence[Charge], l: Charge, ps: ProductStructure, tol: float) -> np.ndarray:
    ref = np.asarray(l.values, dtype=float)
    out = np.zeros((len(F), len(ref)))
    for n, f in enumerate(F):
        v = np.asarray(f.values, dtype=float)
        pos = ref > 0
        if np.any(np.abs(v[~pos]) > tol):
            raise ExtractionError(f"F_{n} is not absolutely continuous w.r.t. the reference")
        dens = np.where(pos, v / np.where(pos, ref, 1.0), 0.0)
        coord = ps.coordinates[:, n]
        simple = np.zeros_like(dens)
        for val in range(ps.factor_sizes[n]):
            cell = (coord == val) & pos
            if not cell.any():
                continue
            c = dens[cell]
            if c.max() - c.min() > tol * (1.0 + abs(c).max()):
                raise ExtractionError(f"F_{n} is not simple over coordinate {n}")
            simple[coord == val] = c.mean()
        out[n] = simple
    return out


def extract_independent(F: Sequence[Charge], l: Charge, ps: ProductStructure,
                        cfg: KomlosConfig = KomlosConfig(), eps: float = 0.05):
    """Extraction plus a single set A_eps on which G_n converges, via the product form of l.

    ``F[n]`` must be l times a function of coordinate ``n``.  Returns
    ``(ExtractionResult, IndependentResult)``.
    """
    F = list(F)[: cfg.horizon]
    if len(F) > ps.m:
        raise ExtractionError("more charges than coordinates")
    viol = independence_violation(l, ps, [[c] for c in range(ps.m)])
    if viol is not None:
        i, j, gap = viol
        raise ExtractionError(f"reference is not independent across coordinate blocks {i} and {j} (gap {gap:.3g})")
    f = _densities(F, l, ps, cfg.tau_conv)
    result = extract_positive(F, l, cfg)
    ref = np.asarray(l.values, dtype=float)
    g = result.weights.dense() @ f
    R = g.shape[0]
    n = np.arange(1, R + 1)
    events = g <= 2.0 ** n[:, None]
    p = (events * ref).sum(axis=1)
    N = next(N for N in range(R + 1) if np.prod(p[N:]) > 1 - eps)
    mask = np.all(events[N:], axis=0)
    A = l.algebra.event(np.flatnonzero(mask).tolist())
    xi = np.asarray(result.xi.values, dtype=float)
    G_last = np.asarray(result.G[-1].values, dtype=float)
    ind = IndependentResult(
        N=N, A_eps=A, probabilities=p, product=float(np.prod(p[N:])),
        l_A_eps=float(ref[mask].sum()), xi_complement=float(xi[~mask].sum()),
        final_residual=float(np.abs(G_last - xi)[mask].sum()), g=g, eps=eps,
    )
    return result, ind


def lower_bound_target(F: Sequence[Charge], l: Charge, K: int, delta: float) -> float:
    """sup_k limsup_n ||F_n ^ 2^k l|| - delta with limsup read as the max over the second half."""
    _, X = _as_matrix(F, l)
    ref = np.asarray(l.values, dtype=float)
    t = np.minimum(X[None], (2.0 ** np.arange(K + 1))[:, None, None] * ref).sum(axis=2)
    return float(t[:, t.shape[1] // 2:].max()) - delta


__all__ = [
    "KomlosConfig", "WeightMatrix", "TruncationLadder", "Certificates", "ExtractionResult",
    "ExtendedCharge", "OrthogonalityReport", "IndependentResult", "ExtractionError",
    "truncate", "extract_positive", "extract_signed", "extract_unbounded", "extract_independent",
    "test_asymptotic_orthogonality", "fit_weights", "block_weights", "run_core", "lower_bound_target",
    "variation_norm",
]
