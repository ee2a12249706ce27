"""Noise calibration: coefficient fits, channel scans and threshold matching."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .finite_key import secret_key_length
from .model import Scenario, ValidationError, Violation
from .rates import NoKeyPossible, expected_counts, predict


@dataclass(frozen=True)
class NoiseFit:
    kappa: float  # counts/(s mW)
    residual: float  # Euclidean norm of the fit residuals, counts/s
    points: int


def fit_noise_coefficient(measurements, dark_rate: float) -> NoiseFit:
    """Least-squares slope through the origin of dark-subtracted counts versus launch power (mW).

    Negative residual counts are clamped at zero before fitting.
    """
    pts = [(float(p), float(c)) for p, c in measurements]
    if not pts:
        raise ValidationError([Violation("measurements", "at least one measurement required")])
    bad = [Violation(f"measurements[{i}]", "values must be finite", (p, c))
           for i, (p, c) in enumerate(pts) if not (math.isfinite(p) and math.isfinite(c))]
    bad += [Violation(f"measurements[{i}]", "power must be >= 0", p) for i, (p, _) in enumerate(pts) if p < 0]
    if bad:
        raise ValidationError(bad)
    x = np.array([p for p, _ in pts])
    y = np.clip(np.array([c for _, c in pts]) - float(dark_rate), 0.0, None)
    sxx = float(np.dot(x, x))
    if sxx == 0.0:
        raise ValidationError([Violation("measurements", "needs a measurement with positive power")])
    kappa = float(np.dot(x, y)) / sxx
    return NoiseFit(kappa=kappa, residual=float(np.linalg.norm(y - kappa * x)), points=len(pts))


@dataclass(frozen=True)
class NoiseScan:
    raw: dict
    subtracted: dict
    normalized: dict
    argmax: int | None  # None when no channel rises above the dark level

    def to_dict(self) -> dict:
        key = lambda d: {str(k): v for k, v in d.items()}  # noqa: E731
        return {"raw": key(self.raw), "subtracted": key(self.subtracted),
                "normalized": key(self.normalized), "argmax": self.argmax}


def scan_noise(per_channel_counts: dict, dark_rate: float) -> NoiseScan:
    """Dark-subtract, clamp and normalise a per-channel noise scan."""
    if not per_channel_counts:
        raise ValidationError([Violation("per_channel_counts", "at least one channel required")])
    channels = sorted(int(ch) for ch in per_channel_counts)
    raw = {int(ch): float(v) for ch, v in per_channel_counts.items()}
    raw = {ch: raw[ch] for ch in channels}
    sub = {ch: max(0.0, v - float(dark_rate)) for ch, v in raw.items()}
    top = max(sub.values())
    if top <= 0:
        return NoiseScan(raw=raw, subtracted=sub, normalized={ch: 0.0 for ch in channels}, argmax=None)
    # sorted channels + strict comparison: ties go to the lowest id
    best = channels[0]
    for ch in channels:
        if sub[ch] > sub[best]:
            best = ch
    return NoiseScan(raw=raw, subtracted=sub, normalized={ch: v / top for ch, v in sub.items()}, argmax=best)


def _read_pairs(path: str | Path, header: tuple[str, str], cast) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != header:
            raise ValidationError([Violation(str(path), f"expected CSV header {','.join(header)}",
                                             reader.fieldnames)])
        for i, row in enumerate(reader, start=2):
            try:
                rows.append((cast(row[header[0]]), float(row[header[1]])))
            except (TypeError, ValueError):
                raise ValidationError([Violation(f"{path}:{i}", "malformed row", row)]) from None
    return rows


def read_power_counts(path) -> list[tuple[float, float]]:
    return _read_pairs(path, ("power_mw", "counts_per_s"), float)


def read_channel_counts(path) -> dict[int, float]:
    return dict(_read_pairs(path, ("channel", "counts_per_s"), int))


# --------------------------------------------------------------------------
# threshold matching


def raw_key_length(s: Scenario) -> float:
    """Unfloored key length of the expected block; ``-inf`` if there are no clicks."""
    try:
        pred = predict(s)
    except NoKeyPossible:
        return -math.inf
    return secret_key_length(expected_counts(s, pred), s.security).ell_raw


def zero_key_threshold_dbm(s: Scenario, lo: float = -60.0, hi: float = 30.0, xtol: float = 1e-6) -> float:
    """Classical input power (dBm) at which the key length of ``s`` reaches zero.

    Returns ``-inf`` if there is no key even at ``lo`` and ``inf`` if key
    survives at ``hi``.
    """
    f = lambda p: raw_key_length(s.with_channel(classical_input_dbm=p))  # noqa: E731
    f_lo, f_hi = f(lo), f(hi)
    if f_lo <= 0:
        return -math.inf
    if f_hi > 0:
        return math.inf
    return float(brentq(f, lo, hi, xtol=xtol))


def calibrate_kappa_to_threshold(s: Scenario, target_dbm: float) -> float:
    """Noise coefficient that puts the zero-key threshold of ``s`` at ``target_dbm``.

    Noise counts depend on kappa and launch power only through their product,
    so the threshold shifts by exactly the dB change in kappa.
    """
    kappa0 = s.channel.noise_spectral_density
    if kappa0 <= 0:
        kappa0 = 1e8
        s = s.with_channel(noise_spectral_density=kappa0)
    thr = zero_key_threshold_dbm(s)
    if not math.isfinite(thr):
        raise ValueError(f"no finite zero-key threshold for this scenario (got {thr})")
    return kappa0 * 10.0 ** ((thr - target_dbm) / 10.0)


def calibrate_extra_loss_for_tacq(s: Scenario, target_s: float, rejection_tracks_loss: bool = False,
                                  hi_db: float = 40.0) -> float:
    """``extra_loss_db`` for which one block takes ``target_s`` seconds to acquire.

    With ``rejection_tracks_loss`` the optical rejection moves by the same dB,
    for losses that sit in front of both signal and noise.
    """
    base_loss = s.receiver.extra_loss_db
    base_rej = s.receiver.optical_rejection_db

    def with_loss(x: float) -> Scenario:
        changes = {"extra_loss_db": x}
        if rejection_tracks_loss:
            changes["optical_rejection_db"] = max(0.0, base_rej + x - base_loss)
        return dataclasses.replace(s, receiver=dataclasses.replace(s.receiver, **changes))

    def f(x: float) -> float:
        return math.log(predict(with_loss(x)).t_acq / target_s)

    if f(0.0) > 0:
        raise ValueError("target acquisition time is shorter than the lossless receiver allows")
    return float(brentq(f, 0.0, hi_db, xtol=1e-9))
