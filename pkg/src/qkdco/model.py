"""Domain types, unit conversion and validation shared by every engine.

Rates are in hertz, times in seconds and optical power in milliwatts.
Decibel quantities only appear as configuration fields and are converted
with :func:`db_to_linear` / :func:`dbm_to_mw` at the point of use.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ValidationError(ValueError):
    """Raised when a configuration violates one or more invariants.

    ``violations`` holds every problem found, not only the first one.
    """

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} violation(s): {lines}")


@dataclass(frozen=True)
class Violation:
    path: str
    message: str
    value: Any = None

    def __str__(self) -> str:
        return f"{self.path}: {self.message} (got {self.value!r})"


def _require_finite(x: float, name: str) -> float:
    try:
        xf = float(x)
    except (TypeError, ValueError):
        raise ValidationError([Violation(name, "not a number", x)]) from None
    if not math.isfinite(xf):
        raise ValidationError([Violation(name, "must be finite", x)])
    return xf


def db_to_linear(x: float) -> float:
    """Transmittance of an attenuation of ``x`` dB, i.e. ``10**(-x/10)``."""
    return 10.0 ** (-_require_finite(x, "db") / 10.0)


def dbm_to_mw(p: float) -> float:
    """Optical power in mW for ``p`` dBm."""
    return 10.0 ** (_require_finite(p, "dbm") / 10.0)


def mw_to_dbm(p: float) -> float:
    p = _require_finite(p, "mw")
    if p <= 0:
        raise ValidationError([Violation("mw", "power must be positive", p)])
    return 10.0 * math.log10(p)


# --------------------------------------------------------------------------
# configuration records


@dataclass(frozen=True)
class SourceConfig:
    rep_rate: float
    mu1: float
    mu2: float
    p_mu1: float
    p_z_tx: float
    pulse_fwhm: float
    intrinsic_error_z: float
    visibility_x: float

    @property
    def p_mu2(self) -> float:
        return 1.0 - self.p_mu1

    @property
    def p_x_tx(self) -> float:
        return 1.0 - self.p_z_tx


@dataclass(frozen=True)
class ChannelConfig:
    quantum_loss_db: float
    classical_input_dbm: float
    noise_spectral_density: float
    total_loop_loss_db: float = 21.0

    @property
    def launch_dbm(self) -> float:
        """Classical power entering the quantum-channel segment of the loop."""
        return self.classical_input_dbm - (self.total_loop_loss_db - self.quantum_loss_db)


@dataclass(frozen=True)
class ReceiverConfig:
    efficiency: float
    dark_rate: float
    dead_time: float
    jitter_fwhm: float
    gate_window: float
    optical_rejection_db: float = 0.0
    extra_loss_db: float = 0.0
    x_path_extra_loss_db: float = 4.0
    p_z_rx: float = 0.5
    afterpulse_prob: float = 0.0

    @property
    def p_x_rx(self) -> float:
        return 1.0 - self.p_z_rx


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_corr: float = 1e-9
    block_size: float = 1e7
    f_ec: float = 1.16


@dataclass(frozen=True)
class Scenario:
    source: SourceConfig
    channel: ChannelConfig
    receiver: ReceiverConfig
    security: SecurityParams = field(default_factory=SecurityParams)

    def with_source(self, **changes) -> Scenario:
        return dataclasses.replace(self, source=dataclasses.replace(self.source, **changes))

    def with_channel(self, **changes) -> Scenario:
        return dataclasses.replace(self, channel=dataclasses.replace(self.channel, **changes))

    def with_receiver(self, **changes) -> Scenario:
        return dataclasses.replace(self, receiver=dataclasses.replace(self.receiver, **changes))

    def with_security(self, **changes) -> Scenario:
        return dataclasses.replace(self, security=dataclasses.replace(self.security, **changes))


# --------------------------------------------------------------------------
# validation


def _check(out: list[Violation], path: str, value: Any, ok: bool, message: str) -> None:
    if not ok:
        out.append(Violation(path, message, value))


def _finite_fields(obj: Any, prefix: str, out: list[Violation]) -> set[str]:
    bad = set()
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            out.append(Violation(f"{prefix}.{f.name}", "must be a finite number", v))
            bad.add(f.name)
    return bad


def source_violations(s: SourceConfig, prefix: str = "source") -> list[Violation]:
    out: list[Violation] = []
    bad = _finite_fields(s, prefix, out)
    if bad:
        return out
    _check(out, f"{prefix}.mu2", s.mu2, s.mu2 >= 0, "mu2 >= 0 violated")
    _check(out, f"{prefix}.mu2", s.mu2, s.mu2 < s.mu1, "mu2 < mu1 violated")
    _check(out, f"{prefix}.mu1", s.mu1, s.mu1 <= 1.0, "mu1 <= 1 violated")
    _check(out, f"{prefix}.p_mu1", s.p_mu1, 0 < s.p_mu1 < 1, "0 < p_mu1 < 1 violated")
    _check(out, f"{prefix}.p_z_tx", s.p_z_tx, 0 < s.p_z_tx < 1, "0 < p_z_tx < 1 violated")
    _check(out, f"{prefix}.rep_rate", s.rep_rate, s.rep_rate > 0, "rep_rate > 0 violated")
    _check(out, f"{prefix}.pulse_fwhm", s.pulse_fwhm, s.pulse_fwhm > 0, "pulse_fwhm > 0 violated")
    _check(out, f"{prefix}.intrinsic_error_z", s.intrinsic_error_z,
           0 <= s.intrinsic_error_z <= 0.5, "0 <= intrinsic_error_z <= 0.5 violated")
    _check(out, f"{prefix}.visibility_x", s.visibility_x,
           0 <= s.visibility_x <= 1, "0 <= visibility_x <= 1 violated")
    return out


def channel_violations(c: ChannelConfig, prefix: str = "channel") -> list[Violation]:
    out: list[Violation] = []
    if _finite_fields(c, prefix, out):
        return out
    _check(out, f"{prefix}.quantum_loss_db", c.quantum_loss_db, c.quantum_loss_db >= 0,
           "quantum_loss_db >= 0 violated")
    _check(out, f"{prefix}.total_loop_loss_db", c.total_loop_loss_db,
           c.total_loop_loss_db >= c.quantum_loss_db, "total_loop_loss_db >= quantum_loss_db violated")
    _check(out, f"{prefix}.noise_spectral_density", c.noise_spectral_density,
           c.noise_spectral_density >= 0, "noise_spectral_density >= 0 violated")
    return out


def receiver_violations(r: ReceiverConfig, prefix: str = "receiver") -> list[Violation]:
    out: list[Violation] = []
    if _finite_fields(r, prefix, out):
        return out
    _check(out, f"{prefix}.efficiency", r.efficiency, 0 < r.efficiency <= 1,
           "0 < efficiency <= 1 violated")
    for name in ("dark_rate", "dead_time", "jitter_fwhm", "optical_rejection_db",
                 "extra_loss_db", "x_path_extra_loss_db"):
        v = getattr(r, name)
        _check(out, f"{prefix}.{name}", v, v >= 0, f"{name} >= 0 violated")
    _check(out, f"{prefix}.gate_window", r.gate_window, r.gate_window > 0, "gate_window > 0 violated")
    _check(out, f"{prefix}.p_z_rx", r.p_z_rx, 0 < r.p_z_rx < 1, "0 < p_z_rx < 1 violated")
    _check(out, f"{prefix}.afterpulse_prob", r.afterpulse_prob, 0 <= r.afterpulse_prob < 1,
           "0 <= afterpulse_prob < 1 violated")
    return out


def security_violations(p: SecurityParams, prefix: str = "security") -> list[Violation]:
    out: list[Violation] = []
    if _finite_fields(p, prefix, out):
        return out
    _check(out, f"{prefix}.eps_sec", p.eps_sec, 0 < p.eps_sec < 1, "0 < eps_sec < 1 violated")
    _check(out, f"{prefix}.eps_corr", p.eps_corr, 0 < p.eps_corr < 1, "0 < eps_corr < 1 violated")
    _check(out, f"{prefix}.block_size", p.block_size, p.block_size >= 1e3, "block_size >= 1e3 violated")
    _check(out, f"{prefix}.f_ec", p.f_ec, p.f_ec >= 1, "f_ec >= 1 violated")
    return out


def scenario_violations(s: Scenario) -> list[Violation]:
    out = (source_violations(s.source) + channel_violations(s.channel)
           + receiver_violations(s.receiver) + security_violations(s.security))
    if not any(v.path in ("source.rep_rate", "receiver.gate_window") for v in out):
        bin_slot = 0.5 / s.source.rep_rate
        _check(out, "receiver.gate_window", s.receiver.gate_window,
               s.receiver.gate_window <= bin_slot * (1 + 1e-12),
               f"gate_window <= (1/rep_rate)/2 = {bin_slot:.6g} s violated (two bins must fit the period)")
    return out


def validate(s: Scenario) -> Scenario:
    """Return ``s`` unchanged if every invariant holds, else raise :class:`ValidationError`."""
    violations = scenario_violations(s)
    if violations:
        raise ValidationError(violations)
    return s


# --------------------------------------------------------------------------
# JSON


_SECTIONS = {
    "source": SourceConfig,
    "channel": ChannelConfig,
    "receiver": ReceiverConfig,
    "security": SecurityParams,
}


def _build(cls, data: Any, prefix: str, out: list[Violation]):
    if not isinstance(data, dict):
        out.append(Violation(prefix, "must be a JSON object", data))
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    required = {f.name for f in dataclasses.fields(cls)
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING}
    for key in sorted(set(data) - names):
        out.append(Violation(f"{prefix}.{key}", "unknown field", data[key]))
    for key in sorted(required - set(data)):
        out.append(Violation(f"{prefix}.{key}", "missing required field"))
    if set(data) - names or required - set(data):
        return None
    return cls(**data)


def scenario_from_dict(data: Any) -> Scenario:
    """Build and validate a scenario from a JSON-like mapping; unknown fields are rejected."""
    out: list[Violation] = []
    if not isinstance(data, dict):
        raise ValidationError([Violation("<root>", "must be a JSON object", data)])
    for key in sorted(set(data) - set(_SECTIONS)):
        out.append(Violation(key, "unknown field", data[key]))
    parts = {}
    for key, cls in _SECTIONS.items():
        if key not in data:
            if key == "security":
                parts[key] = SecurityParams()
            else:
                out.append(Violation(key, "missing required section"))
            continue
        parts[key] = _build(cls, data[key], key, out)
    if out:
        raise ValidationError(out)
    return validate(Scenario(**parts))


def scenario_to_dict(s: Scenario) -> dict:
    return dataclasses.asdict(s)


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([Violation(str(path), f"invalid JSON: {exc}")]) from None
    return scenario_from_dict(data)


def dump_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n", encoding="utf-8")
