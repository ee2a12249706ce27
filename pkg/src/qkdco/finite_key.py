"""Finite-key secret key length for one-decoy three-state BB84.

Vacuum and single-photon counts are bounded with Poisson decoy estimates
and Hoeffding deviations, every deviation using ``eps_prime = eps_sec/19``.
The array helpers (``*_arrays``) broadcast so grids of parameter choices can
be scored at once; the public functions wrap them for a single block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import SecurityParams, SourceConfig, ValidationError, Violation

BASES = ("Z", "X")
INTENSITIES = ("mu1", "mu2")
EPS_SPLIT = 19.0
GAMMA_CONST = 21.0


class EmptyBlock(ValueError):
    """No Z-basis clicks in the block."""


# --------------------------------------------------------------------------
# observed counts


def _cells(value) -> dict:
    return {b: {k: float(value[b][k]) for k in INTENSITIES} for b in BASES}


@dataclass(frozen=True)
class ObservedCounts:
    """Click (``n``) and error (``m``) tallies per basis and intensity.

    Counts may be non-integer when they are analytic expectations.
    """

    n: dict
    m: dict
    t_acq: float
    mu1: float
    mu2: float
    p_mu1: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        out = []
        try:
            n, m = _cells(self.n), _cells(self.m)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError([Violation("counts", f"malformed n/m tables: {exc}")]) from None
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)
        for b in BASES:
            for k in INTENSITIES:
                if not (0 <= m[b][k] <= n[b][k]) or not math.isfinite(n[b][k]):
                    out.append(Violation(f"counts.{b}.{k}", "0 <= m <= n violated", (n[b][k], m[b][k])))
        if not (self.t_acq > 0 and math.isfinite(self.t_acq)):
            out.append(Violation("counts.t_acq", "t_acq > 0 violated", self.t_acq))
        if out:
            raise ValidationError(out)

    def n_basis(self, basis: str) -> float:
        return sum(self.n[basis].values())

    def m_basis(self, basis: str) -> float:
        return sum(self.m[basis].values())

    def qber(self, basis: str, intensity: str | None = None) -> float | None:
        """Error fraction of a cell (or a whole basis); ``None`` when the cell is empty."""
        if intensity is None:
            n, m = self.n_basis(basis), self.m_basis(basis)
        else:
            n, m = self.n[basis][intensity], self.m[basis][intensity]
        return m / n if n > 0 else None

    def to_dict(self) -> dict:
        d = {"n": self.n, "m": self.m, "t_acq": self.t_acq,
             "mu1": self.mu1, "mu2": self.mu2, "p_mu1": self.p_mu1}
        if self.metadata:
            d["metadata"] = self.metadata
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ObservedCounts:
        allowed = {"n", "m", "t_acq", "mu1", "mu2", "p_mu1", "metadata"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ValidationError([Violation(f"counts.{u}", "unknown field", d[u]) for u in unknown])
        return cls(n=d["n"], m=d["m"], t_acq=float(d["t_acq"]), mu1=float(d["mu1"]),
                   mu2=float(d["mu2"]), p_mu1=float(d["p_mu1"]), metadata=dict(d.get("metadata", {})))


# --------------------------------------------------------------------------
# elementary pieces


def binary_entropy(x):
    """Shannon entropy of a Bernoulli(x) variable in bits, ``h(0) = h(1) = 0``."""
    xa = np.asarray(x, dtype=float)
    if np.any(~((xa >= 0) & (xa <= 1))):
        raise ValidationError([Violation("binary_entropy", "argument outside [0, 1]", x)])
    inner = (xa > 0) & (xa < 1)
    safe = np.where(inner, xa, 0.5)
    h = np.where(inner, -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe), 0.0)
    return float(h) if h.ndim == 0 else h


def tau(n: int, mu1, mu2, p_mu1):
    """Probability that a pulse of the intensity mixture carries ``n`` photons."""
    if n not in (0, 1):
        raise ValidationError([Violation("tau_n", "photon number must be 0 or 1", n)])
    mu1, mu2, p_mu1 = (np.asarray(a, dtype=float) for a in (mu1, mu2, p_mu1))
    out = p_mu1 * np.exp(-mu1) * mu1 ** n + (1 - p_mu1) * np.exp(-mu2) * mu2 ** n
    return float(out) if np.ndim(out) == 0 else out


def tau_n(n: int, source: SourceConfig) -> float:
    return tau(n, source.mu1, source.mu2, source.p_mu1)


def hoeffding_delta(total, eps_prime):
    """Hoeffding deviation ``sqrt(N/2 * ln(1/eps))`` for a sum of N Bernoulli trials."""
    total = np.asarray(total, dtype=float)
    out = np.sqrt(np.maximum(total, 0.0) / 2.0 * math.log(1.0 / eps_prime))
    return float(out) if out.ndim == 0 else out


def key_length_penalty(eps_sec: float, eps_corr: float) -> float:
    """Additive cost of the security parameters in the key length, in bits."""
    return 6.0 * math.log2(EPS_SPLIT / eps_sec) + math.log2(2.0 / eps_corr)


def _adjust(c1, c2, mu1, mu2, p1, eps_prime):
    """Scaled lower/upper deviations for the two intensities of one tally."""
    d = hoeffding_delta(np.asarray(c1) + np.asarray(c2), eps_prime)
    w1 = np.exp(mu1) / p1
    w2 = np.exp(mu2) / (1 - p1)
    return {
        "mu1": (np.maximum(w1 * (c1 - d), 0.0), w1 * (c1 + d)),
        "mu2": (np.maximum(w2 * (c2 - d), 0.0), w2 * (c2 + d)),
        "delta": d,
    }


def adjusted_counts(counts: ObservedCounts, basis: str, eps_prime: float) -> dict:
    """Finite-size adjusted counts: ``{"n": {k: (minus, plus)}, "m": {...}}``.

    Values include the ``e^k / p_k`` weighting; lower values are clamped at 0.
    """
    if not 0 < eps_prime <= 1:
        raise ValidationError([Violation("eps_prime", "must lie in (0, 1]", eps_prime)])
    out = {}
    for tally, table in (("n", counts.n[basis]), ("m", counts.m[basis])):
        adj = _adjust(table["mu1"], table["mu2"], counts.mu1, counts.mu2, counts.p_mu1, eps_prime)
        out[tally] = {k: (float(adj[k][0]), float(adj[k][1])) for k in INTENSITIES}
        out[f"delta_{tally}"] = float(adj["delta"])
    return out


# --------------------------------------------------------------------------
# bounds (array form)


def decoy_bounds_arrays(n1, n2, m1, m2, mu1, mu2, p1, eps_prime):
    """Vacuum/single-photon bounds for one basis; returns ``(s0_low, s0_up, s1_low)``."""
    n1, n2, m1, m2 = (np.asarray(a, dtype=float) for a in (n1, n2, m1, m2))
    mu1, mu2, p1 = (np.asarray(a, dtype=float) for a in (mu1, mu2, p1))
    t0 = tau(0, mu1, mu2, p1)
    t1 = tau(1, mu1, mu2, p1)
    na = _adjust(n1, n2, mu1, mu2, p1, eps_prime)
    ma = _adjust(m1, m2, mu1, mu2, p1, eps_prime)
    n1p = na["mu1"][1]
    n2m = na["mu2"][0]
    s0_low = np.maximum(0.0, t0 * (mu1 * n2m - mu2 * n1p) / (mu1 - mu2))
    s0_up = 2.0 * (t0 * np.minimum(ma["mu1"][1], ma["mu2"][1]) + na["delta"])
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = (t1 * mu1 * (n2m - (mu2 ** 2 / mu1 ** 2) * n1p
                          - ((mu1 ** 2 - mu2 ** 2) / mu1 ** 2) * (s0_up / t0))
              / (mu2 * (mu1 - mu2)))
    # a vacuum decoy (mu2 = 0) leaves the single-photon yield unconstrained from below
    s1_low = np.where(mu2 > 0, np.maximum(0.0, np.nan_to_num(s1, nan=0.0, posinf=0.0, neginf=0.0)), 0.0)
    return s0_low, s0_up, s1_low


def gamma_correction(a, b, c, d):
    """Finite-size correction to the phase error rate (0 when ``b`` is 0 or 1)."""
    a, b, c, d = (np.asarray(v, dtype=float) for v in (a, b, c, d))
    ok = (b > 0) & (b < 1) & (c > 0) & (d > 0)
    bs = np.where(ok, b, 0.5)
    cs = np.where(ok, c, 1.0)
    ds = np.where(ok, d, 1.0)
    var = (cs + ds) * (1 - bs) * bs / (cs * ds * math.log(2.0))
    arg = (cs + ds) / (cs * ds * (1 - bs) * bs) * (GAMMA_CONST ** 2 / a ** 2)
    g = np.sqrt(var * np.maximum(np.log2(arg), 0.0))
    out = np.where(ok, g, 0.0)
    return float(out) if out.ndim == 0 else out


def phase_error_arrays(nx1, nx2, mx1, mx2, s1z_low, mu1, mu2, p1, eps_prime):
    """Returns ``(v1x_up, s1x_low, phi1_up, clamped)`` for the X-basis tallies."""
    _, _, s1x = decoy_bounds_arrays(nx1, nx2, mx1, mx2, mu1, mu2, p1, eps_prime)
    ma = _adjust(np.asarray(mx1, float), np.asarray(mx2, float), mu1, mu2, p1, eps_prime)
    t1 = tau(1, mu1, mu2, p1)
    v = t1 * (ma["mu1"][1] - ma["mu2"][0]) / (np.asarray(mu1) - np.asarray(mu2))
    v = np.clip(v, 0.0, s1x)
    usable = (s1x > 0) & (np.asarray(s1z_low) > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(usable, v / np.where(s1x > 0, s1x, 1.0), 0.5)
    phi = ratio + gamma_correction(eps_prime, ratio, s1z_low, s1x)
    phi = np.where(usable, np.clip(phi, 0.0, 0.5), 0.5)
    return v, s1x, phi, ~usable


def key_length_from_bounds(s0_low, s1_low, phi1_up, lambda_ec, security: SecurityParams):
    """``(ell_raw, ell)``: the unfloored key length and its floored, zero-clamped value."""
    raw = (np.asarray(s0_low, float) + np.asarray(s1_low, float) * (1.0 - binary_entropy(phi1_up))
           - np.asarray(lambda_ec, float) - key_length_penalty(security.eps_sec, security.eps_corr))
    return raw, np.maximum(0.0, np.floor(raw))


def key_length_arrays(nz1, nz2, mz1, mz2, nx1, nx2, mx1, mx2, t_acq, mu1, mu2, p1,
                      security: SecurityParams):
    """All finite-key intermediates for arrays of blocks; see :class:`FiniteKeyResult`."""
    eps_prime = security.eps_sec / EPS_SPLIT
    s0_low, s0_up, s1_low = decoy_bounds_arrays(nz1, nz2, mz1, mz2, mu1, mu2, p1, eps_prime)
    v1x, s1x, phi, clamped = phase_error_arrays(nx1, nx2, mx1, mx2, s1_low, mu1, mu2, p1, eps_prime)
    n_z = np.asarray(nz1, float) + np.asarray(nz2, float)
    m_z = np.asarray(mz1, float) + np.asarray(mz2, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_z = np.where(n_z > 0, m_z / np.where(n_z > 0, n_z, 1.0), 0.0)
    lam = security.f_ec * n_z * binary_entropy(np.clip(q_z, 0.0, 1.0))
    raw, ell = key_length_from_bounds(s0_low, s1_low, phi, lam, security)
    return {
        "tau0": tau(0, mu1, mu2, p1), "tau1": tau(1, mu1, mu2, p1),
        "s0_low": s0_low, "s0_up": s0_up, "s1_low": s1_low,
        "s1x_low": s1x, "v1x_up": v1x, "phi1_up": phi, "phase_error_clamped": clamped,
        "lambda_ec": lam, "ell_raw": raw, "ell": ell, "skr": ell / np.asarray(t_acq, float),
    }


# --------------------------------------------------------------------------
# public single-block API


@dataclass(frozen=True)
class FiniteKeyResult:
    tau0: float
    tau1: float
    s0_low: float
    s0_up: float
    s1_low: float
    s1x_low: float
    v1x_up: float
    phi1_up: float
    lambda_ec: float
    ell: float
    skr: float
    ell_raw: float
    phase_error_clamped: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def no_key(cls, mu1: float, mu2: float, p_mu1: float,
               security: SecurityParams | None = None) -> FiniteKeyResult:
        """Result for a link that produces no clicks at all."""
        sec = security or SecurityParams()
        return cls(tau0=float(tau(0, mu1, mu2, p_mu1)), tau1=float(tau(1, mu1, mu2, p_mu1)),
                   s0_low=0.0, s0_up=0.0, s1_low=0.0, s1x_low=0.0, v1x_up=0.0, phi1_up=0.5,
                   lambda_ec=0.0, ell=0.0, skr=0.0, ell_raw=-key_length_penalty(sec.eps_sec, sec.eps_corr), phase_error_clamped=True)


def _check_mu(mu1: float, mu2: float) -> None:
    if not mu1 > mu2:
        raise ValidationError([Violation("mu2", "mu2 < mu1 violated", (mu1, mu2))])


def decoy_bounds(counts: ObservedCounts, basis: str, security: SecurityParams) -> dict:
    """``{"s0_low", "s0_up", "s1_low"}`` for the requested basis."""
    _check_mu(counts.mu1, counts.mu2)
    n, m = counts.n[basis], counts.m[basis]
    s0l, s0u, s1l = decoy_bounds_arrays(n["mu1"], n["mu2"], m["mu1"], m["mu2"], counts.mu1,
                                        counts.mu2, counts.p_mu1, security.eps_sec / EPS_SPLIT)
    return {"s0_low": float(s0l), "s0_up": float(s0u), "s1_low": float(s1l)}


def phase_error_upper(counts: ObservedCounts, security: SecurityParams) -> dict:
    """Upper bound on the single-photon phase error rate from X-basis tallies."""
    _check_mu(counts.mu1, counts.mu2)
    s1z = decoy_bounds(counts, "Z", security)["s1_low"]
    nx, mx = counts.n["X"], counts.m["X"]
    v, s1x, phi, clamped = phase_error_arrays(nx["mu1"], nx["mu2"], mx["mu1"], mx["mu2"], s1z,
                                              counts.mu1, counts.mu2, counts.p_mu1,
                                              security.eps_sec / EPS_SPLIT)
    return {"v1x_up": float(v), "s1x_low": float(s1x), "phi1_up": float(phi),
            "clamped": bool(clamped)}


def secret_key_length(counts: ObservedCounts, security: SecurityParams) -> FiniteKeyResult:
    """Key length per privacy-amplification block and the resulting secret key rate."""
    _check_mu(counts.mu1, counts.mu2)
    if counts.n_basis("Z") <= 0:
        raise EmptyBlock("empty block: no Z-basis clicks")
    n, m = counts.n, counts.m
    r = key_length_arrays(n["Z"]["mu1"], n["Z"]["mu2"], m["Z"]["mu1"], m["Z"]["mu2"],
                          n["X"]["mu1"], n["X"]["mu2"], m["X"]["mu1"], m["X"]["mu2"],
                          counts.t_acq, counts.mu1, counts.mu2, counts.p_mu1, security)
    return FiniteKeyResult(
        **{k: float(r[k]) for k in ("tau0", "tau1", "s0_low", "s0_up", "s1_low", "s1x_low",
                                    "v1x_up", "phi1_up", "lambda_ec", "ell", "skr", "ell_raw")},
        phase_error_clamped=bool(r["phase_error_clamped"]),
    )
