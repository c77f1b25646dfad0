"""Declarative scenarios: JSON schema, generators and pipelines."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .charge import TAU_CONV, Charge, charge, product_charge, restrict, uniform
from .komlos import (
    KomlosConfig,
    extract_independent,
    extract_positive,
    extract_signed,
    extract_unbounded,
    test_asymptotic_orthogonality,
)
from .set_algebra import Partition, ProductStructure, SetAlgebra, make_product
from .slln import SLLNConfig, bernoulli_posterior_disagreements, empirical_distribution, run_slln
from .vector_charge import SampleSpace, VectorCharge, extract_vector

TOL_ENV = "CHARGE_KOMLOS_TOL"

GENERATORS = ("iid_charges", "singular_family", "constant", "signed_mixture", "unbounded_ramp",
              "product_independent", "empirical", "posterior", "slln_functions")
PIPELINES = ("extract_positive", "extract_signed", "extract_unbounded", "extract_independent",
             "extract_vector", "slln", "orthogonality")
STOCHASTIC = ("iid_charges", "signed_mixture", "empirical", "posterior", "slln_functions")
COMPATIBLE = {
    "iid_charges": ("extract_positive", "extract_vector", "orthogonality"),
    "singular_family": ("extract_positive", "orthogonality"),
    "constant": ("extract_positive", "orthogonality"),
    "signed_mixture": ("extract_signed",),
    "unbounded_ramp": ("extract_unbounded",),
    "product_independent": ("extract_independent",),
    "empirical": ("extract_positive",),
    "posterior": ("orthogonality",),
    "slln_functions": ("slln",),
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["algebra", "generator", "pipeline", "cfg"],
    "properties": {
        "name": {"type": "string"},
        "algebra": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["ground"],
                 "properties": {"ground": _pos_int,
                                "blocks": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}}}},
                {"type": "object", "additionalProperties": False, "required": ["product"],
                 "properties": {"product": {"type": "array", "minItems": 1,
                                            "items": {"type": "integer", "minimum": 2}}}},
            ]
        },
        "reference": {"oneOf": [{"enum": ["uniform"]}, {"type": "array", "items": _num}]},
        "generator": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {"kind": {"enum": list(GENERATORS)}, "params": {"type": "object"}},
        },
        "pipeline": {"enum": list(PIPELINES)},
        "cfg": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "K": _pos_int, "horizon": _pos_int, "block_size": _pos_int,
                "delta": {"type": "number", "minimum": 0},
                "tau_conv": {"type": "number", "exclusiveMinimum": 0},
                "tau_zero": {"type": "number", "minimum": 0},
                "tail_tol": {"type": "number", "exclusiveMinimum": 0},
                "mode": {"enum": ["fit", "blocks"]},
                "subsequence": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
                "window": _pos_int,
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "outputs": {
            "type": "object", "additionalProperties": False,
            "properties": {"report": {"type": "string"}, "certificates": {"type": "string"},
                           "ladder": {"type": "string"}},
        },
    },
    "allOf": [
        {"if": {"properties": {"generator": {"properties": {"kind": {"enum": list(STOCHASTIC)}}}}},
         "then": {"properties": {"cfg": {"required": ["seed"]}}}},
    ],
}


class ScenarioError(ValueError):
    pass


def _pointer(err: jsonschema.ValidationError) -> str:
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        path.append(missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        path.append(extra)
    return "/" + "/".join(str(p) for p in path)


@dataclass
class ScenarioSpec:
    raw: dict
    source: str = "<memory>"

    @property
    def name(self) -> str:
        return self.raw.get("name", Path(self.source).stem)

    @property
    def generator(self) -> str:
        return self.raw["generator"]["kind"]

    @property
    def params(self) -> dict:
        return self.raw["generator"].get("params", {})

    @property
    def pipeline(self) -> str:
        return self.raw["pipeline"]

    @property
    def cfg(self) -> dict:
        return self.raw["cfg"]

    def output(self, key: str) -> str:
        default = {"report": "report.json", "certificates": "certificates.csv", "ladder": "ladder.csv"}
        return self.raw.get("outputs", {}).get(key, default[key])


def validate_scenario(obj: dict, source: str = "<memory>") -> ScenarioSpec:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(obj), key=lambda e: (len(list(e.absolute_path)), list(e.absolute_path)))
    if errors:
        # prefer the most specific error of the first failing branch
        err = jsonschema.exceptions.best_match(errors)
        raise ScenarioError(f"{source}: schema violation at {_pointer(err)}: {err.message}")
    gen, pipe = obj["generator"]["kind"], obj["pipeline"]
    if pipe not in COMPATIBLE[gen]:
        raise ScenarioError(
            f"{source}: generator '{gen}' is incompatible with pipeline '{pipe}' "
            f"(allowed: {', '.join(COMPATIBLE[gen])})")
    spec = ScenarioSpec(copy.deepcopy(obj), source)
    try:
        algebra, _ = _algebra(spec)
        _reference(spec, algebra)
    except ValueError as e:
        raise ScenarioError(f"{source}: invalid algebra or reference: {e}") from None
    return spec


def parse_scenario(path: str | os.PathLike) -> ScenarioSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: invalid JSON: {e}") from None
    return validate_scenario(obj, str(path))


# --------------------------------------------------------------------------
# generators


@dataclass
class Built:
    algebra: SetAlgebra
    l: Charge
    F: list = field(default_factory=list)
    ps: ProductStructure | None = None
    functions: np.ndarray | None = None
    space: SampleSpace | None = None
    truth: dict = field(default_factory=dict)


def _algebra(spec: ScenarioSpec):
    desc = spec.raw["algebra"]
    if "product" in desc:
        return make_product(desc["product"])
    return SetAlgebra.from_descriptor(desc), None


def _reference(spec: ScenarioSpec, algebra: SetAlgebra) -> Charge:
    ref = spec.raw.get("reference", "uniform")
    if ref == "uniform":
        return uniform(algebra)
    return charge(algebra, ref)


def build(spec: ScenarioSpec) -> Built:
    algebra, ps = _algebra(spec)
    l = _reference(spec, algebra)
    p = spec.params
    cfg = spec.cfg
    N = cfg.get("horizon", 512)
    rng = np.random.default_rng(cfg.get("seed", 0))
    ref = np.asarray(l.values, dtype=float)
    d = algebra.n_atoms
    kind = spec.generator
    out = Built(algebra, l, ps=ps)
    if kind == "iid_charges":
        lo, hi = p.get("low", 0.0), p.get("high", 2.0)
        m = p.get("samples")
        if m is None:
            out.F = [charge(algebra, rng.uniform(lo, hi, d) * ref) for _ in range(N)]
        else:
            out.space = SampleSpace.uniform(int(m))
            out.F = [VectorCharge(algebra, out.space, rng.uniform(lo, hi, (d, int(m))) * ref[:, None])
                     for _ in range(N)]
        out.truth["mean"] = ((lo + hi) / 2 * ref).tolist()
    elif kind == "singular_family":
        mass = p.get("mass", 1.0)
        out.F = [charge(algebra, np.eye(d)[n] * mass if n < d else np.zeros(d)) for n in range(N)]
    elif kind == "constant":
        vals = np.asarray(p.get("values", ref), dtype=float)
        out.F = [charge(algebra, vals) for _ in range(N)]
    elif kind == "signed_mixture":
        lo, hi = p.get("low", -1.0), p.get("high", 1.0)
        out.F = [charge(algebra, rng.uniform(lo, hi, d) * ref) for _ in range(N)]
    elif kind == "unbounded_ramp":
        B = algebra.event(p.get("B", [0]))
        mu = restrict(l, B.complement())
        lB = restrict(l, B)
        out.F = [lB * n + mu for n in range(1, N + 1)]
        out.truth["B"] = sorted(B.atoms)
        out.truth["mu"] = [float(v) for v in mu.values]
    elif kind == "product_independent":
        if ps is None:
            raise ScenarioError("product_independent needs a product algebra")
        q = p.get("p", 0.5)
        if spec.raw.get("reference", "uniform") == "uniform":
            l = product_charge(ps, [[1 - q, q] if s == 2 else np.full(s, 1 / s) for s in ps.factor_sizes])
            out.l = l
        base = p.get("base", 2.0)
        ref = np.asarray(l.values, dtype=float)
        # coordinate i carries the (i+1)-th coin, so f_n = base^(n+1) on success of coin n
        out.F = [charge(algebra, base ** (i + 2) * (ps.coordinates[:, i] == 1) * ref)
                 for i in range(min(N, ps.m))]
    elif kind == "empirical":
        probs = np.asarray(p.get("probs", np.full(d, 1.0 / d)), dtype=float)
        atoms = rng.choice(d, size=N, p=probs / probs.sum())
        points = [sorted(algebra.blocks[a])[0] for a in atoms]
        F = empirical_distribution(points, Partition.finest(algebra))
        # the bin algebra equals the scenario algebra when bins are its atoms
        out.F = [charge(algebra, f.values) for f in F]
        out.truth["probs"] = (probs / probs.sum()).tolist()
    elif kind == "posterior":
        if ps is None or any(s != 2 for s in ps.factor_sizes):
            raise ScenarioError("posterior needs a product algebra of coins")
        theta = (np.arange(p.get("grid", 19)) + 1) / (p.get("grid", 19) + 1)
        priors = {"uniform": np.ones_like(theta), "linear": theta, "reverse": 1 - theta}
        w1 = priors[p.get("prior1", "uniform")]
        w2 = priors[p.get("prior2", "linear")]
        obs = (rng.random(N) < p.get("p_true", 0.7)).astype(int)
        _, D = bernoulli_posterior_disagreements(theta, w1 / w1.sum(), w2 / w2.sum(), obs, ps.m)
        out.F = [charge(algebra, dd.values) for dd in D]
    elif kind == "slln_functions":
        vals = np.asarray(p.get("values", [-1.0, 1.0]), dtype=float)
        out.functions = rng.choice(vals, size=(N, algebra.ground_size))
    return out


# --------------------------------------------------------------------------
# pipelines


@dataclass
class RunOutcome:
    report: dict
    certificates: list[dict]
    ladder: list[dict]

    @property
    def passed(self) -> bool:
        return self.report["passed"]


def effective_cfg(spec: ScenarioSpec) -> dict:
    cfg = dict(spec.cfg)
    env = os.environ.get(TOL_ENV)
    if env:
        cfg["tau_conv"] = float(env)
    return cfg


def _komlos_cfg(cfg: dict) -> KomlosConfig:
    keys = ("K", "horizon", "block_size", "delta", "tau_conv", "tau_zero", "tail_tol", "mode", "subsequence")
    return KomlosConfig(**{k: cfg[k] for k in keys if k in cfg})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if k not in ("alpha", "beta", "ladder", "G")}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if np.isnan(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _ladder_rows(levels: np.ndarray) -> list[dict]:
    rows = []
    for k, lv in enumerate(levels):
        step = 0.0 if k == 0 else float(np.abs(lv - levels[k - 1]).sum())
        rows.append({"k": k, "level_norm": float(np.abs(lv).sum()), "step": step})
    return rows


def run(spec: ScenarioSpec, strict: bool = False) -> RunOutcome:
    cfg = effective_cfg(spec)
    kcfg = _komlos_cfg(cfg)
    tau = cfg.get("tau_conv", TAU_CONV)
    pipe = spec.pipeline
    verdicts: dict = {}
    failures: list[dict] = []
    result: dict = {}
    certs: list[dict] = []
    ladder: list[dict] = []
    degenerate = False
    notes: list[str] = []
    try:
        built = build(spec)
        if pipe in ("extract_positive", "extract_signed"):
            fn = extract_positive if pipe == "extract_positive" else extract_signed
            res = fn(built.F, built.l, kcfg)
            result = _jsonable(res.to_json())
            certs = res.certificates.rows()
            ladder = _ladder_rows(res.ladder.levels)
            failures += res.failures
            degenerate = bool(res.diagnostics.get("degenerate", False))
            verdicts["extraction"] = res.passed
            if pipe == "extract_positive":
                orth = test_asymptotic_orthogonality(built.F, cfg.get("window", 64), cfg.get("tau", tau))
                verdicts["orthogonal"] = orth.verdict
                result["orthogonality_tail_max"] = float(orth.tail_max.max())
                if orth.verdict:
                    ok = res.certificates.xi_norm <= tau
                    verdicts["dichotomy_zero"] = ok
                    if not ok:
                        failures.append({"name": "dichotomy_zero", "value": res.certificates.xi_norm, "bound": tau})
        elif pipe == "extract_unbounded":
            xi, W, diag = extract_unbounded(built.F, built.l, kcfg)
            res_ = diag["finite_residual"]
            certs = [{"n": i + 1, "finite_residual": float(v)} for i, v in enumerate(res_)]
            ladder = _ladder_rows(diag["ladder"].levels)
            result = {"flagged_atoms": diag["flagged_atoms"], "finite": xi.finite.values.tolist(),
                      "levels": diag["levels"], "weights_check": W.check()}
            verdicts["converged"] = diag["converged"]
            if not diag["converged"]:
                failures.append({"name": "finite_residual", "value": res_[-1], "bound": tau})
            if "B" in built.truth:
                ok = diag["flagged_atoms"] == built.truth["B"]
                verdicts["flags_B"] = ok
                if not ok:
                    failures.append({"name": "flagged_atoms", "value": len(diag["flagged_atoms"]),
                                     "bound": len(built.truth["B"])})
        elif pipe == "extract_independent":
            res, ind = extract_independent(built.F, built.l, built.ps, kcfg, cfg.get("eps", 0.05))
            certs = res.certificates.rows()
            ladder = _ladder_rows(res.ladder.levels)
            # the single set A_eps replaces the moving restriction sets A_n
            failures += [f for f in res.failures if f["name"] != "final_norm_residual"]
            result = _jsonable(res.to_json())
            result["row_residual_final"] = float(res.certificates.norm_residual[-1])
            result["independent"] = {"N": ind.N, "product": ind.product, "l_A_eps": ind.l_A_eps,
                                     "xi_complement": ind.xi_complement,
                                     "final_residual": ind.final_residual,
                                     "probabilities": ind.probabilities.tolist()}
            verdicts["independent"] = ind.passed
            if not ind.passed:
                failures.append({"name": "product_bound", "value": ind.product, "bound": 1 - ind.eps})
            if ind.final_residual > kcfg.tail_tol:
                failures.append({"name": "A_eps_residual", "value": ind.final_residual, "bound": kcfg.tail_tol})
        elif pipe == "extract_vector":
            if built.space is None:
                raise ScenarioError("extract_vector needs iid_charges with a 'samples' parameter")
            ve = extract_vector(built.F, built.l, built.space, kcfg, strict=strict)
            certs = [{"n": i + 1, "ba0_residual": float(ve.ba0_residual[i]), "P_B": float(ve.P_B[i]),
                      "partial_sum": float(ve.partial_sum[i])} for i in range(len(ve.P_B))]
            failures += ve.failures
            result = {"xi": ve.xi.table.tolist(), "P_H": ve.P_H, "N_H": ve.N_H,
                      "r_bound": {"bounded": ve.r_report.bounded, "heuristic": ve.r_report.heuristic}}
            verdicts["extraction"] = ve.passed
        elif pipe == "slln":
            trace, mu = run_slln(built.functions, built.l,
                                 SLLNConfig(horizon=cfg.get("horizon", 512), block_size=cfg.get("block_size", 1),
                                            tau_conv=tau))
            certs = [dict(zip(("k", "p", "q", "gap", "bound", "r", "n_r"), r)) for r in trace.records]
            ladder = [{"k": k + 1, "S_norm": float(v)} for k, v in enumerate(trace.S_norms)]
            failures += trace.failures()
            verdicts["cauchy"] = trace.passed
            result = {"schedule": trace.schedule, "S_norm_final": float(trace.S_norms[-1]),
                      "sup_f_norm": trace.sup_f_norm, "absolute_sums": trace.absolute_sums,
                      "mu": mu.values.tolist(), "reweighting": "heuristic substitute for an external change of measure"}
            notes.append("absolute-sum condition reported as a diagnostic")
        elif pipe == "orthogonality":
            orth = test_asymptotic_orthogonality(built.F, cfg.get("window", 50), cfg.get("tau", 0.05))
            certs = [{"j": j + 1, "tail_max": float(v)} for j, v in enumerate(orth.tail_max)]
            norms = [float(np.abs(np.asarray(f.values, dtype=float)).sum()) for f in built.F]
            ladder = [{"n": n + 1, "norm": v} for n, v in enumerate(norms)]
            verdicts["orthogonal"] = orth.verdict
            result = {"tail_max": float(orth.tail_max.max()), "window": orth.window, "tau": orth.tau}
            if not orth.verdict:
                failures.append({"name": "orthogonality", "value": float(orth.tail_max.max()), "bound": orth.tau})
    except ScenarioError:
        raise
    except ValueError as e:
        raise ScenarioError(f"{spec.source}: pipeline {pipe} failed: {e}") from e

    passed = not failures and not (strict and degenerate)
    report = {
        "scenario": spec.name,
        "generator": spec.generator,
        "pipeline": pipe,
        "config": {"cfg": cfg, "params": spec.params, "algebra": spec.raw["algebra"],
                   "reference": spec.raw.get("reference", "uniform"), "strict": strict},
        "verdicts": verdicts,
        "degenerate": degenerate,
        "failures": _jsonable(failures),
        "passed": passed,
        "result": result,
        "notes": notes,
    }
    return RunOutcome(report, _jsonable(certs), _jsonable(ladder))
