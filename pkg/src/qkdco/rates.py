"""Analytic link model: click probabilities, QBERs and dead-time-limited rates.

The per-cell algebra in :func:`cell_model` is written to broadcast, so the
optimizer can evaluate whole parameter grids with one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .model import (
    ChannelConfig,
    ReceiverConfig,
    Scenario,
    ValidationError,
    Violation,
    db_to_linear,
    dbm_to_mw,
    validate,
)

BASES = ("Z", "X")
INTENSITIES = ("mu1", "mu2")

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class NoKeyPossible(RuntimeError):
    """The scenario produces no sifted key clicks at all."""

    def __init__(self, message: str, component: str):
        super().__init__(message)
        self.component = component


def combined_fwhm(pulse_fwhm: float, jitter_fwhm: float) -> float:
    """FWHM of the detected arrival distribution (widths add in quadrature)."""
    return math.hypot(pulse_fwhm, jitter_fwhm)


def arrival_sigma(pulse_fwhm: float, jitter_fwhm: float) -> float:
    return combined_fwhm(pulse_fwhm, jitter_fwhm) / FWHM_PER_SIGMA


def default_gate_window(pulse_fwhm: float, jitter_fwhm: float, n_sigma: float = 3.0) -> float:
    """Gate width used by the shipped presets: ``n_sigma`` arrival standard deviations."""
    return n_sigma * arrival_sigma(pulse_fwhm, jitter_fwhm)


def gate_acceptance(pulse_fwhm: float, jitter_fwhm: float, gate_window: float) -> float:
    """Fraction of a Gaussian arrival distribution inside a centred gate.

    >>> gate_acceptance(100e-12, 0.0, 0.0)
    0.0
    """
    bad = [Violation(n, "must be >= 0", v) for n, v in
           (("pulse_fwhm", pulse_fwhm), ("jitter_fwhm", jitter_fwhm), ("gate_window", gate_window))
           if not v >= 0]
    if bad:
        raise ValidationError(bad)
    if gate_window == 0:
        return 0.0
    sigma = arrival_sigma(pulse_fwhm, jitter_fwhm)
    if sigma == 0 or math.isinf(gate_window):
        return 1.0
    return float(erf(gate_window / (2.0 * math.sqrt(2.0) * sigma)))


def dead_time_throughput(true_rate, dead_time):
    """Recorded rate of a non-paralyzable detector, ``R / (1 + R*tau)``."""
    true_rate = np.asarray(true_rate, dtype=float)
    if np.any(true_rate < 0) or dead_time < 0:
        raise ValidationError([Violation("dead_time_throughput", "rates and dead time must be >= 0",
                                         (true_rate.tolist(), dead_time))])
    with np.errstate(invalid="ignore"):
        out = true_rate / (1.0 + true_rate * dead_time)
    if dead_time > 0:
        out = np.where(np.isinf(true_rate), 1.0 / dead_time, out)
        out = np.minimum(out, 1.0 / dead_time)
    return out if out.ndim else float(out)


def noise_rate_at_detector(channel: ChannelConfig, receiver: ReceiverConfig) -> float:
    """Classical-noise count rate reaching the detector (Z path), counts/s."""
    return (channel.noise_spectral_density * dbm_to_mw(channel.launch_dbm)
            * db_to_linear(receiver.optical_rejection_db))


@dataclass(frozen=True)
class LinkConstants:
    """Everything in a scenario that does not depend on the source intensities."""

    rep_rate: float
    p_z_rx: float
    dead_time: float
    gate_accept: float
    eta: dict  # basis -> gated single-photon detection efficiency
    eta_ungated: dict  # basis -> same without the temporal gate
    bg_rate: dict  # basis -> dark + classical-noise rate on that path, counts/s
    p_bg: dict  # basis -> background click probability per state (inside the gates)
    e_opt: dict

    @classmethod
    def from_scenario(cls, s: Scenario) -> LinkConstants:
        src, ch, rx = s.source, s.channel, s.receiver
        ga = gate_acceptance(src.pulse_fwhm, rx.jitter_fwhm, rx.gate_window)
        t_z = db_to_linear(ch.quantum_loss_db + rx.extra_loss_db)
        t_x = t_z * db_to_linear(rx.x_path_extra_loss_db)
        noise = noise_rate_at_detector(ch, rx)
        # classical noise enters before the interferometer; dark counts do not see its loss
        bg = {"Z": rx.dark_rate + noise,
              "X": rx.dark_rate + noise * db_to_linear(rx.x_path_extra_loss_db)}
        return cls(
            rep_rate=src.rep_rate,
            p_z_rx=rx.p_z_rx,
            dead_time=rx.dead_time,
            gate_accept=ga,
            eta={"Z": t_z * rx.efficiency * ga, "X": t_x * rx.efficiency * ga},
            eta_ungated={"Z": t_z * rx.efficiency, "X": t_x * rx.efficiency},
            bg_rate=bg,
            p_bg={b: bg[b] * 2.0 * rx.gate_window for b in BASES},
            e_opt={"Z": src.intrinsic_error_z, "X": (1.0 - src.visibility_x) / 2.0},
        )

    @property
    def p_rx(self) -> dict:
        return {"Z": self.p_z_rx, "X": 1.0 - self.p_z_rx}


def click_and_error(k, eta, p_bg, e_opt):
    """Signal, total click probability and QBER of one (basis, intensity) cell."""
    p_sig = -np.expm1(-np.asarray(k, dtype=float) * eta)
    noise_only = p_bg * (1.0 - p_sig)  # = p_click - p_sig
    p_click = p_sig + noise_only
    with np.errstate(invalid="ignore", divide="ignore"):
        qber = np.where(p_click > 0, (e_opt * p_sig + 0.5 * noise_only) / np.where(p_click > 0, p_click, 1.0), 0.5)
    return p_sig, p_click, qber


def cell_model(c: LinkConstants, mu1, mu2, p_mu1, p_z_tx):
    """Per-cell probabilities and aggregate rates; broadcasts over parameter arrays.

    Returns a dict with ``p_sig``, ``p_click``, ``qber`` (nested basis ->
    intensity), ``detector_rate`` (all avalanches loading the dead time),
    ``survival`` (fraction of avalanches not lost to dead time) and the
    sifted rates.
    """
    mus = {"mu1": np.asarray(mu1, dtype=float), "mu2": np.asarray(mu2, dtype=float)}
    pk = {"mu1": np.asarray(p_mu1, dtype=float), "mu2": 1.0 - np.asarray(p_mu1, dtype=float)}
    p_tx = {"Z": np.asarray(p_z_tx, dtype=float), "X": 1.0 - np.asarray(p_z_tx, dtype=float)}
    p_rx = c.p_rx

    p_sig, p_click, qber = {}, {}, {}
    for b in BASES:
        p_sig[b], p_click[b], qber[b] = {}, {}, {}
        for k in INTENSITIES:
            p_sig[b][k], p_click[b][k], qber[b][k] = click_and_error(mus[k], c.eta[b], c.p_bg[b], c.e_opt[b])

    # Every avalanche, sifted or not and in-gate or not, loads the detector.
    detector_rate = 0.0
    for b in BASES:
        signal = sum(pk[k] * -np.expm1(-mus[k] * c.eta_ungated[b]) for k in INTENSITIES)
        detector_rate = detector_rate + p_rx[b] * (c.rep_rate * signal + c.bg_rate[b])
    if c.dead_time > 0:
        survival = 1.0 / (1.0 + detector_rate * c.dead_time)
    else:
        survival = np.ones_like(np.asarray(detector_rate, dtype=float))

    sifted = {b: c.rep_rate * p_tx[b] * p_rx[b] * sum(pk[k] * p_click[b][k] for k in INTENSITIES)
              for b in BASES}
    return {
        "p_sig": p_sig,
        "p_click": p_click,
        "qber": qber,
        "detector_rate": detector_rate,
        "survival": survival,
        "r_sifted_z": sifted["Z"] * survival,
        "r_sifted_x": sifted["X"] * survival,
    }


@dataclass(frozen=True)
class RatePrediction:
    p_sig: dict
    p_click: dict
    qber: dict
    p_bg_z: float
    p_bg_x: float
    gate_accept: float
    detector_rate: float
    survival: float
    r_sifted_z: float
    r_sifted_x: float
    t_acq: float

    @property
    def p_bg(self) -> dict:
        return {"Z": self.p_bg_z, "X": self.p_bg_x}

    @property
    def recorded_rate(self) -> float:
        """Avalanches per second that survive the dead time."""
        return self.detector_rate * self.survival

    def p_click_recorded(self, basis: str, intensity: str) -> float:
        """Per-state click probability after dead-time losses (what a detector records)."""
        return self.p_click[basis][intensity] * self.survival

    def to_dict(self) -> dict:
        return {
            "p_sig": self.p_sig, "p_click": self.p_click, "qber": self.qber,
            "p_bg_z": self.p_bg_z, "p_bg_x": self.p_bg_x, "gate_accept": self.gate_accept,
            "detector_rate": self.detector_rate, "survival": self.survival,
            "r_sifted_z": self.r_sifted_z, "r_sifted_x": self.r_sifted_x, "t_acq": self.t_acq,
        }


def _floats(nested: dict) -> dict:
    return {b: {k: float(v) for k, v in d.items()} for b, d in nested.items()}


def predict(s: Scenario, strict: bool = True) -> RatePrediction:
    """Expected per-state click statistics and block acquisition time for a scenario."""
    if strict:
        validate(s)
    c = LinkConstants.from_scenario(s)
    src = s.source
    out = cell_model(c, src.mu1, src.mu2, src.p_mu1, src.p_z_tx)
    r_z = float(out["r_sifted_z"])
    if not r_z > 0:
        raise NoKeyPossible("no key possible: sifted Z click rate is zero", "r_sifted_z")
    return RatePrediction(
        p_sig=_floats(out["p_sig"]),
        p_click=_floats(out["p_click"]),
        qber=_floats(out["qber"]),
        p_bg_z=c.p_bg["Z"],
        p_bg_x=c.p_bg["X"],
        gate_accept=c.gate_accept,
        detector_rate=float(out["detector_rate"]),
        survival=float(out["survival"]),
        r_sifted_z=r_z,
        r_sifted_x=float(out["r_sifted_x"]),
        t_acq=s.security.block_size / r_z,
    )


def expected_tallies(cells: dict, p_mu1, p_z_tx, p_z_rx: float, block_size: float) -> dict:
    """Block-scaled expected click/error tallies from :func:`cell_model` output.

    The block holds ``block_size`` sifted Z clicks; X tallies follow from the
    basis-choice odds. Dead-time survival cancels in these ratios.
    """
    pk = {"mu1": np.asarray(p_mu1, float), "mu2": 1.0 - np.asarray(p_mu1, float)}
    p_tx = {"Z": np.asarray(p_z_tx, float), "X": 1.0 - np.asarray(p_z_tx, float)}
    p_rx = {"Z": p_z_rx, "X": 1.0 - p_z_rx}
    weight = {b: {k: p_tx[b] * p_rx[b] * pk[k] * cells["p_click"][b][k] for k in INTENSITIES}
              for b in BASES}
    z_total = weight["Z"]["mu1"] + weight["Z"]["mu2"]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(z_total > 0, block_size / np.where(z_total > 0, z_total, 1.0), 0.0)
    n = {b: {k: weight[b][k] * scale for k in INTENSITIES} for b in BASES}
    m = {b: {k: n[b][k] * cells["qber"][b][k] for k in INTENSITIES} for b in BASES}
    return {"n": n, "m": m}


def expected_counts(s: Scenario, prediction: RatePrediction | None = None):
    """Analytic ObservedCounts for one privacy-amplification block of the scenario."""
    from .finite_key import ObservedCounts

    pred = prediction if prediction is not None else predict(s)
    src = s.source
    cells = {"p_click": pred.p_click, "qber": pred.qber}
    t = expected_tallies(cells, src.p_mu1, src.p_z_tx, s.receiver.p_z_rx, s.security.block_size)
    return ObservedCounts(n=_floats(t["n"]), m=_floats(t["m"]), t_acq=pred.t_acq,
                          mu1=src.mu1, mu2=src.mu2, p_mu1=src.p_mu1,
                          metadata={"source": "analytic"})


def analytic_key(s: Scenario):
    """Finite-key result of the expected counts; zero key when no clicks are expected."""
    from .finite_key import FiniteKeyResult, secret_key_length

    try:
        pred = predict(s)
    except NoKeyPossible:
        src = s.source
        return FiniteKeyResult.no_key(src.mu1, src.mu2, src.p_mu1, s.security)
    return secret_key_length(expected_counts(s, pred), s.security)
