"""Function-level consequences: lambda-convergence, Cesaro partial sums and scenario generators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .charge import (
    TAU_CONV,
    Charge,
    ChargeError,
    ProbabilityCharge,
    absolute,
    charge,
    outer_measure,
    probability,
    restrict,
)
from .komlos import KomlosConfig, extract_signed
from .set_algebra import (
    AlgebraError,
    Partition,
    ProductStructure,
    RawSubset,
    SetAlgebra,
    make_algebra,
    make_product,
)

DEFAULT_ETAS = tuple(2.0 ** e for e in range(-10, 11))
DEFAULT_CS = tuple(2.0 ** e for e in range(0, 11))


class SLLNError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeasurableFunction:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("function values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def is_measurable(self, algebra: SetAlgebra, tol: float = 0.0) -> bool:
        """Constant on every atom."""
        return all(np.ptp(self.values[sorted(b)]) <= tol for b in algebra.blocks)


def _as_array(f_seq) -> np.ndarray:
    if isinstance(f_seq, np.ndarray):
        return np.asarray(f_seq, dtype=float)
    return np.array([f.values if isinstance(f, MeasurableFunction) else f for f in f_seq], dtype=float)


def _outer(l: Charge, mask: np.ndarray) -> float:
    return float(outer_measure(l, RawSubset.from_mask(mask)))


def _atom_max(algebra: SetAlgebra, h: np.ndarray) -> np.ndarray:
    """Per-atom max over points of the last axis."""
    if algebra.n_atoms == algebra.ground_size and all(
            next(iter(b)) == i for i, b in enumerate(algebra.blocks)):
        return h
    return np.stack([h[..., sorted(b)].max(axis=-1) for b in algebra.blocks], axis=-1)


def l1_norm(h: np.ndarray, mu: Charge) -> np.ndarray:
    """Upper integral of |h| against mu (exact for functions constant on atoms)."""
    return (_atom_max(mu.algebra, np.abs(h)) * np.asarray(mu.values, dtype=float)).sum(axis=-1)


def lambda_converges(f_seq, l: Charge, eta_grid: Sequence[float] = DEFAULT_ETAS,
                     tol: float = TAU_CONV) -> tuple[bool, np.ndarray]:
    """lambda*(|f_n| > eta) for every n and eta; converges when the last row is below tol."""
    f = np.abs(_as_array(f_seq))
    trace = np.array([[_outer(l, fn > eta) for eta in eta_grid] for fn in f])
    return bool(np.all(trace[-1] <= tol)), trace


@dataclass
class L0Report:
    bounded: bool
    c_grid: np.ndarray
    sup_by_c: np.ndarray
    n_candidates: int
    estimate: bool = True  # sup over the hull is sampled, not exact


def check_L0_bounded(f_seq, l: Charge, c_grid: Sequence[float] = DEFAULT_CS,
                     hull_samples: int = 256, seed: int = 0, tol: float = TAU_CONV) -> L0Report:
    """Sampled sup over co(|f_1|, |f_2|, ...) of lambda*(h > c).

    Candidates are the hull vertices, Dirichlet mixtures of random small
    subsets, and Dirichlet mixtures of the whole family.
    """
    a = np.abs(_as_array(f_seq))
    N = a.shape[0]
    rng = np.random.default_rng(seed)
    cands = [a]
    if N > 1 and hull_samples > 0:
        small = np.zeros((hull_samples, N))
        for s in range(hull_samples):
            idx = rng.choice(N, size=min(3, N), replace=False)
            small[s, idx] = rng.dirichlet(np.ones(len(idx)))
        full = rng.dirichlet(np.ones(N), size=hull_samples)
        cands += [small @ a, full @ a]
    H = np.vstack(cands)
    c_grid = np.asarray(c_grid, dtype=float)
    sup = np.array([max(_outer(l, m) for m in np.unique(H > c, axis=0)) for c in c_grid])
    return L0Report(bool(sup[-1] <= tol), c_grid, sup, H.shape[0])


def reweight(l: Charge, f: np.ndarray) -> ProbabilityCharge:
    """mu(a) proportional to l(a) / (1 + sup_n |f_n| on a); same null atoms as l."""
    s = _atom_max(l.algebra, np.abs(f)).max(axis=0)
    w = np.asarray(l.values, dtype=float) / (1.0 + s)
    return probability(l.algebra, w / w.sum(), tol=1e-9)


@dataclass
class SLLNConfig:
    horizon: int = 512
    block_size: int = 1
    n_r: Sequence[int] | None = None  # default 2^r capped at horizon/4
    reweight: bool = True
    tau_conv: float = TAU_CONV
    L0_c_grid: Sequence[float] = DEFAULT_CS


@dataclass
class CesaroTrace:
    S: np.ndarray  # S_k for k = 1..H, one row per k
    g: np.ndarray
    records: list[tuple]  # (k, p, q, gap, bound, r, n_r)
    schedule: list[int]
    absolute_sums: list[float]  # sup_p sum_{n=n_r}^{n_r+p} int |g_{n+1} - g_n| dmu, per r
    sup_f_norm: float
    S_norms: np.ndarray
    extraction: object = field(repr=False, default=None)
    tol: float = TAU_CONV

    @property
    def passed(self) -> bool:
        return not self.failures()

    def failures(self) -> list[dict]:
        return [{"name": f"gap_k{k}_r{r}", "value": gap, "bound": bound}
                for k, p, q, gap, bound, r, nr in self.records if gap > bound + self.tol]


def run_slln(f_seq, l: Charge, cfg: SLLNConfig = SLLNConfig()) -> tuple[CesaroTrace, ProbabilityCharge]:
    f = _as_array(f_seq)
    rep = check_L0_bounded(f, l, c_grid=cfg.L0_c_grid, tol=cfg.tau_conv)
    if not rep.bounded:
        raise SLLNError(f"family is not L0-bounded: sup lambda*(h > {rep.c_grid[-1]}) = {rep.sup_by_c[-1]}")
    mu = reweight(l, f) if cfg.reweight else l
    algebra = l.algebra
    ref = np.asarray(l.values, dtype=float)
    atom_mean = np.stack([f[:, sorted(b)].mean(axis=1) for b in algebra.blocks], axis=1)
    F = [charge(algebra, ref * row) for row in atom_mean]
    kcfg = KomlosConfig(horizon=len(F), block_size=cfg.block_size, mode="blocks", tau_conv=cfg.tau_conv)
    ext = extract_signed(F, l, kcfg)
    g = ext.weights.dense() @ f
    g = g[: cfg.horizon]
    H = g.shape[0]
    if H < 2:
        raise SLLNError("need at least two Cesaro terms")
    S = np.cumsum(g, axis=0) / np.arange(1, H + 1)[:, None]

    if cfg.n_r is None:
        schedule = []
        r = 1
        while 2 ** r <= max(H // 4, 1):
            schedule.append(2 ** r)
            r += 1
        if not schedule:
            schedule = [1]
    else:
        schedule = [int(n) for n in cfg.n_r]
        for r, n in enumerate(schedule, start=1):
            if n >= H:
                raise SLLNError(f"block schedule infeasible at horizon {H}: n_{r} = {n}")

    # diam[k] = max over k <= j, j' <= H of ||S_j - S_j'||, tracked with its argmax
    diam = np.zeros(H + 2)
    arg = [(H, H)] * (H + 2)
    for k in range(H, 0, -1):
        d = l1_norm(S[k - 1:] - S[k - 1], mu)
        j = int(np.argmax(d))
        if d[j] > diam[k + 1]:
            diam[k], arg[k] = float(d[j]), (k, k + j)
        else:
            diam[k], arg[k] = diam[k + 1], arg[k + 1]
    sup_f = float(l1_norm(f, mu).max())
    steps = l1_norm(np.diff(g, axis=0), mu)
    records = []
    abs_sums = []
    for r, n_r in enumerate(schedule, start=1):
        abs_sums.append(float(steps[n_r - 1:].sum()))
        for k in range(n_r + 1, H + 1):
            j1, j2 = arg[k]
            bound = 4.0 * n_r / k * sup_f + 2.0 ** (-(r - 1))
            records.append((k, j1 - k, j2 - k, float(diam[k]), bound, r, n_r))
    trace = CesaroTrace(S, g, records, schedule, abs_sums, sup_f, l1_norm(S, mu), ext, cfg.tau_conv)
    return trace, mu


def lambda_cauchy(g_seq, l: Charge, c: float, window: int) -> float:
    """max over n, m in the last ``window`` terms of lambda*(|g_n - g_m| > c)."""
    g = _as_array(g_seq)[-window:]
    worst = 0.0
    for i in range(len(g)):
        for j in range(i + 1, len(g)):
            worst = max(worst, _outer(l, np.abs(g[i] - g[j]) > c))
    return worst


def empirical_distribution(points: Sequence[int], bins: Partition,
                           exact: bool = False) -> list[ProbabilityCharge]:
    """Running empirical distributions F_N on the algebra generated by the bins."""
    events = bins.events()
    ground = bins.algebra.ground_size
    algebra = make_algebra(ground, [sorted(e.points()) for e in events])
    which = algebra.point_atom
    counts = np.zeros(algebra.n_atoms, dtype=np.int64)
    out = []
    for N, p in enumerate(points, start=1):
        if not 0 <= int(p) < ground:
            raise AlgebraError(f"point {p} is not in any bin")
        counts[which[int(p)]] += 1
        if exact:
            from fractions import Fraction
            out.append(probability(algebra, [Fraction(int(c), N) for c in counts], exact=True))
        else:
            out.append(probability(algebra, counts / N))
    return out


def condition(prior: Charge, ps: ProductStructure, observations: Sequence[int], name: str = "prior"):
    cyl = ps.algebra.omega()
    out = []
    for n, x in enumerate(observations):
        cyl = cyl & ps.cylinder(n, int(x))
        mass = float(prior(cyl))
        if mass <= 0:
            raise ChargeError(f"{name} gives zero mass to the observed cylinder after {n + 1} observations")
        out.append(restrict(prior, cyl) / mass)
    return out


def posterior_scenario(prior1: Charge, prior2: Charge, ps: ProductStructure,
                       observations: Sequence[int]) -> list[Charge]:
    """Disagreements |F1_n - F2_n| between the two posteriors after n observations."""
    p1 = condition(prior1, ps, observations, "prior1")
    p2 = condition(prior2, ps, observations, "prior2")
    return [absolute(a - b) for a, b in zip(p1, p2)]


def bernoulli_mixture(ps: ProductStructure, theta: Sequence[float], weights: Sequence[float]) -> ProbabilityCharge:
    """Exchangeable coin law: mixture over theta of iid Bernoulli(theta) coordinates."""
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(weights, dtype=float)
    ones = ps.coordinates.sum(axis=1)
    m = ps.m
    vals = (w[None, :] * theta[None, :] ** ones[:, None] * (1 - theta[None, :]) ** (m - ones[:, None])).sum(axis=1)
    return probability(ps.algebra, vals / vals.sum(), tol=1e-9)


def bernoulli_posterior_disagreements(theta: Sequence[float], w1: Sequence[float], w2: Sequence[float],
                                      observations: Sequence[int], lookahead: int = 2):
    """Posterior predictive laws of the next ``lookahead`` coins under two theta-priors.

    Returns (algebra, disagreements) where disagreements[n] = |F1_n - F2_n| after
    n + 1 observations.  Computed in closed form, so long horizons are cheap.
    """
    theta = np.asarray(theta, dtype=float)
    algebra, fut = make_product([2] * lookahead)
    k = fut.coordinates.sum(axis=1)
    lik = theta[None, :] ** k[:, None] * (1 - theta[None, :]) ** (lookahead - k[:, None])
    logs = [np.log(np.asarray(w, dtype=float)) for w in (w1, w2)]
    out = []
    s = 0
    with np.errstate(divide="ignore"):
        lt, l1t = np.log(theta), np.log1p(-theta)
    for n, x in enumerate(observations, start=1):
        s += int(x)
        preds = []
        for lw in logs:
            lp = lw + s * lt + (n - s) * l1t
            lp = lp - np.max(lp)
            post = np.exp(lp)
            post /= post.sum()
            preds.append(lik @ post)
        out.append(charge(algebra, np.abs(preds[0] - preds[1])))
    return algebra, out
