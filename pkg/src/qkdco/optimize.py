"""Source-parameter optimisation of the predicted secret key rate.

A constraint-filtered grid is scored in one vectorised pass, then the best
point is refined with a bounded Nelder-Mead simplex. The simplex works on the
unfloored key length per second, which stays informative where the floored
key is zero or piecewise constant.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .finite_key import FiniteKeyResult, key_length_arrays
from .model import Scenario, ValidationError, Violation, validate
from .rates import LinkConstants, analytic_key, cell_model, expected_tallies

VARIABLES = ("mu1", "mu2", "p_mu1", "p_z_tx")
DEFAULT_BOUNDS = {"mu1": (0.01, 1.0), "mu2": (0.001, 0.99), "p_mu1": (0.01, 0.99), "p_z_tx": (0.5, 0.99)}


class EmptyFeasibleSet(ValidationError):
    pass


@dataclass(frozen=True)
class OptimizationSpec:
    variables: tuple = ("mu1", "mu2", "p_mu1")
    bounds: dict = field(default_factory=dict)
    grid: int = 17
    rel_tol: float = 1e-10
    max_evals: int = 4000
    # False drops dead-time losses (asymptotic-rate mode)
    saturation: bool = True
    trace: bool = False

    def bound(self, name: str) -> tuple[float, float]:
        lo, hi = self.bounds.get(name, DEFAULT_BOUNDS[name])
        return float(lo), float(hi)

    def violations(self) -> list[Violation]:
        out = []
        if not self.variables:
            out.append(Violation("variables", "at least one free variable required", self.variables))
        for v in self.variables:
            if v not in VARIABLES:
                out.append(Violation("variables", f"unknown variable, choose from {VARIABLES}", v))
        for name, b in self.bounds.items():
            if name not in VARIABLES:
                out.append(Violation(f"bounds.{name}", "unknown variable", b))
                continue
            lo, hi = b
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                out.append(Violation(f"bounds.{name}", "need finite lo <= hi", b))
            elif name == "mu1" and not (0 < lo and hi <= 1):
                out.append(Violation("bounds.mu1", "must lie in (0, 1]", b))
            elif name == "mu2" and lo < 0:
                out.append(Violation("bounds.mu2", "must be >= 0", b))
            elif name in ("p_mu1", "p_z_tx") and not (0 < lo and hi < 1):
                out.append(Violation(f"bounds.{name}", "must lie in the open interval (0, 1)", b))
        if self.grid < 1:
            out.append(Violation("grid", "must be >= 1", self.grid))
        if not self.rel_tol > 0:
            out.append(Violation("rel_tol", "must be > 0", self.rel_tol))
        if self.max_evals < 1:
            out.append(Violation("max_evals", "must be >= 1", self.max_evals))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> OptimizationSpec:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError([Violation(k, "unknown field", d[k]) for k in unknown])
        d = dict(d)
        if "variables" in d:
            d["variables"] = tuple(d["variables"])
        if "bounds" in d:
            d["bounds"] = {k: tuple(v) for k, v in d["bounds"].items()}
        return cls(**d)


@dataclass(frozen=True)
class OptimizationResult:
    params: dict
    result: FiniteKeyResult
    scenario: Scenario
    evaluations: int
    grid_best: dict
    grid_skr: float
    no_positive_key: bool
    trace: list | None = None

    @property
    def skr(self) -> float:
        return self.result.skr

    def to_dict(self) -> dict:
        out = {"params": self.params, "result": self.result.to_dict(), "evaluations": self.evaluations,
               "grid_best": self.grid_best, "grid_skr": self.grid_skr,
               "no_positive_key": self.no_positive_key}
        if self.trace is not None:
            out["trace"] = [{"params": p, "skr": v} for p, v in self.trace]
        return out


def _base_constants(base: Scenario, saturation: bool) -> tuple[Scenario, LinkConstants]:
    if not saturation:
        base = base.with_receiver(dead_time=0.0)
    return base, LinkConstants.from_scenario(base)


def objective_arrays(base: Scenario, consts: LinkConstants, mu1, mu2, p_mu1, p_z_tx) -> dict:
    """Finite-key intermediates of the expected block for arrays of source settings."""
    cells = cell_model(consts, mu1, mu2, p_mu1, p_z_tx)
    t = expected_tallies(cells, p_mu1, p_z_tx, base.receiver.p_z_rx, base.security.block_size)
    r_z = np.asarray(cells["r_sifted_z"], float)
    with np.errstate(divide="ignore"):
        t_acq = np.where(r_z > 0, base.security.block_size / np.where(r_z > 0, r_z, 1.0), np.inf)
    n, m = t["n"], t["m"]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = key_length_arrays(n["Z"]["mu1"], n["Z"]["mu2"], m["Z"]["mu1"], m["Z"]["mu2"],
                                n["X"]["mu1"], n["X"]["mu2"], m["X"]["mu1"], m["X"]["mu2"],
                                t_acq, mu1, mu2, p_mu1, base.security)
    out["t_acq"] = t_acq
    out["rate_raw"] = np.where(np.isfinite(t_acq), out["ell_raw"] / t_acq, -np.inf)
    return out


def _settings(base: Scenario, free: dict) -> dict:
    src = base.source
    out = {"mu1": src.mu1, "mu2": src.mu2, "p_mu1": src.p_mu1, "p_z_tx": src.p_z_tx}
    out.update(free)
    return out


def _feasible(p: dict) -> bool:
    return 0 <= p["mu2"] < p["mu1"] <= 1 and 0 < p["p_mu1"] < 1 and 0 < p["p_z_tx"] < 1


def optimize(base: Scenario, spec: OptimizationSpec | None = None) -> OptimizationResult:
    """Maximise the predicted skr over the free source parameters of ``base``."""
    spec = spec or OptimizationSpec()
    problems = spec.violations()
    if problems:
        raise ValidationError(problems)
    validate(base)
    scen, consts = _base_constants(base, spec.saturation)
    names = tuple(v for v in VARIABLES if v in spec.variables)  # lexicographic order
    bounds = [spec.bound(v) for v in names]

    # coarse grid, flattened in lexicographic order so argmax keeps the first tie
    axes = [np.unique(np.linspace(lo, hi, spec.grid)) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = _settings(scen, {v: g.ravel() for v, g in zip(names, mesh)})
    full = {k: np.broadcast_to(np.asarray(v, float), mesh[0].ravel().shape) for k, v in pts.items()}
    ok = ((0 <= full["mu2"]) & (full["mu2"] < full["mu1"]) & (full["mu1"] <= 1)
          & (0 < full["p_mu1"]) & (full["p_mu1"] < 1) & (0 < full["p_z_tx"]) & (full["p_z_tx"] < 1))
    if not ok.any():
        raise EmptyFeasibleSet([Violation("bounds", "empty feasible set (mu2 < mu1 cannot hold)", spec.bounds)])
    idx = np.flatnonzero(ok)
    sel = {k: v[idx] for k, v in full.items()}
    scores = objective_arrays(scen, consts, sel["mu1"], sel["mu2"], sel["p_mu1"], sel["p_z_tx"])
    evals = int(idx.size)
    skr = scores["skr"]
    i_best = int(np.argmax(skr)) if np.max(skr) > 0 else int(np.argmax(scores["rate_raw"]))
    grid_best = {v: float(sel[v][i_best]) for v in names}

    trace = [] if spec.trace else None
    budget = evals + spec.max_evals  # refinement budget on top of the grid

    def point(x) -> dict:
        p = {v: float(min(max(xi, lo), hi)) for v, xi, (lo, hi) in zip(names, x, bounds)}
        full_p = _settings(scen, p)
        if full_p["mu2"] >= full_p["mu1"]:
            full_p["mu2"] = p["mu2"] = float(np.nextafter(full_p["mu1"], 0.0)) * (1 - 1e-9)
        return p

    def f(x) -> float:
        nonlocal evals
        evals += 1
        p = _settings(scen, point(x))
        if not _feasible(p):
            return math.inf
        r = objective_arrays(scen, consts, p["mu1"], p["mu2"], p["p_mu1"], p["p_z_tx"])
        val = float(r["rate_raw"])
        if trace is not None:
            trace.append((dict(p), float(r["skr"])))
        return -val if math.isfinite(val) else math.inf

    x = np.array([grid_best[v] for v in names])
    fx = f(x)
    if len(names) and idx.size > 1:
        span = np.array([hi - lo for lo, hi in bounds])
        step = np.where(span > 0, span / max(spec.grid - 1, 1), 0.0)
        while evals < budget:
            simplex = [x] + [np.clip(x + np.eye(len(names))[j] * step[j] * 0.5,
                                     [b[0] for b in bounds], [b[1] for b in bounds]) for j in range(len(names))]
            res = minimize(f, x, method="Nelder-Mead", bounds=bounds,
                           options={"initial_simplex": np.array(simplex), "maxfev": max(1, budget - evals),
                                    "xatol": 1e-12, "fatol": spec.rel_tol * max(abs(fx), 1e-300)})
            if not res.fun < fx:
                break
            gain = (fx - res.fun) / max(abs(fx), 1e-300)
            x, fx = np.asarray(res.x), float(res.fun)
            step = step * 0.1
            if gain < spec.rel_tol:
                break

    # re-score both candidates through the scalar pipeline and keep the better one
    cands = [point(x), grid_best]
    best = None
    for p in cands:
        s_p = scen.with_source(**{k: v for k, v in p.items()})
        r = analytic_key(s_p)
        if best is None or r.skr > best[1].skr:
            best = (p, r, s_p)
    p, r, s_p = best
    return OptimizationResult(params=dict(p), result=r, scenario=s_p, evaluations=evals,
                              grid_best=grid_best, grid_skr=float(skr[i_best]),
                              no_positive_key=not r.skr > 0, trace=trace)

