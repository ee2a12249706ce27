"""Property-based checks of the model invariants."""

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from qkdco import calibration, finite_key as fk, model, presets, rates
from qkdco.finite_key import ObservedCounts

finite_db = st.floats(0, 60, allow_nan=False)
prob = st.floats(1e-3, 0.999)


@given(finite_db, finite_db)
def test_db_additivity(a, b):
    assert model.db_to_linear(a + b) == pytest.approx(model.db_to_linear(a) * model.db_to_linear(b), rel=1e-12)


@given(st.floats(1e-6, 1e3))
def test_dbm_round_trip(mw):
    assert model.dbm_to_mw(model.mw_to_dbm(mw)) == pytest.approx(mw, rel=1e-12)


@st.composite
def scenarios(draw):
    r = draw(st.sampled_from(presets.RECEIVERS))
    mu1 = draw(st.floats(0.02, 1.0))
    mu2 = draw(st.floats(0.001, 0.98)) * mu1
    s = presets.scenario(r, draw(st.floats(0, 15)), input_dbm=draw(st.floats(-30, 0)),
                         params=(mu1, mu2, draw(prob)))
    return s.with_source(p_z_tx=draw(st.floats(0.05, 0.95)))


@given(scenarios())
def test_validate_idempotent(s):
    assert model.validate(model.validate(s)) == model.validate(s)


@given(scenarios())
def test_qber_between_optical_error_and_half(s):
    p = rates.predict(s)
    c = rates.LinkConstants.from_scenario(s)
    for b in "ZX":
        for k in ("mu1", "mu2"):
            assert c.e_opt[b] - 1e-12 <= p.qber[b][k] <= 0.5 + 1e-12
            assert 0 <= p.p_click[b][k] <= 1


@given(scenarios(), st.floats(0.1, 20))
def test_p_click_monotone(s, delta_db):
    c0 = rates.predict(s).p_click
    assert c0["Z"]["mu1"] >= c0["Z"]["mu2"]
    lossier = rates.predict(s.with_channel(quantum_loss_db=s.channel.quantum_loss_db + delta_db,
                                           total_loop_loss_db=s.channel.total_loop_loss_db + delta_db))
    # keep launch power fixed so only transmittance changes
    assert lossier.p_click["Z"]["mu1"] <= c0["Z"]["mu1"]
    narrow = rates.predict(s.with_receiver(gate_window=s.receiver.gate_window * 0.5))
    assert narrow.p_click["X"]["mu1"] <= c0["X"]["mu1"]


@given(st.floats(0, 1e12), st.floats(1e-9, 1e-3))
def test_throughput_bounded_and_monotone(r, tau):
    out = rates.dead_time_throughput(r, tau)
    assert out <= 1 / tau
    assert rates.dead_time_throughput(r * 1.5 + 1, tau) >= out


@given(scenarios())
def test_outputs_finite(s):
    k = rates.analytic_key(s)
    for v in k.to_dict().values():
        assert math.isfinite(float(v))
    assert 0 <= k.phi1_up <= 0.5 and k.ell >= 0


@given(st.floats(1e3, 1e7), st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, 1e5))
def test_ell_monotone_in_phase_error(s1, phi_a, phi_b, lam):
    lo, hi = sorted((phi_a, phi_b))
    sec = model.SecurityParams()
    assert fk.key_length_from_bounds(0, s1, hi, lam, sec)[1] <= fk.key_length_from_bounds(0, s1, lo, lam, sec)[1]


def _counts(scale, mz1, mz2):
    n = {"Z": {"mu1": 3e5 * scale, "mu2": 6e5 * scale}, "X": {"mu1": 4e4 * scale, "mu2": 8e4 * scale}}
    m = {"Z": {"mu1": mz1 * scale, "mu2": mz2 * scale}, "X": {"mu1": 600 * scale, "mu2": 1500 * scale}}
    return ObservedCounts(n=n, m=m, t_acq=10.0 * scale, mu1=0.5, mu2=0.1, p_mu1=0.4)


@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(1, 5e3))
def test_ell_monotone_in_z_errors(mz1, mz2, bump):
    sec = model.SecurityParams()
    a = fk.secret_key_length(_counts(1, mz1, mz2), sec).ell
    b = fk.secret_key_length(_counts(1, mz1 + bump, mz2), sec).ell
    assert b <= a


@given(st.floats(1.01, 50))
def test_longer_block_never_lowers_rate(c):
    # noiseless synthetic counts: Z and X errors only from optics
    sec = model.SecurityParams()
    a = fk.secret_key_length(_counts(1, 1500, 3000), sec).skr
    b = fk.secret_key_length(_counts(c, 1500, 3000), sec).skr
    assert b >= a - 1e-6


@given(st.lists(st.tuples(st.floats(0.001, 10), st.floats(0, 1e6)), min_size=1, max_size=12),
       st.floats(0, 1e3))
def test_noise_fit_slope_formula(points, dark):
    fit = calibration.fit_noise_coefficient(points, dark)
    x = np.array([p for p, _ in points])
    y = np.clip(np.array([c for _, c in points]) - dark, 0, None)
    assert fit.kappa == pytest.approx(float(x @ y / (x @ x)), rel=1e-9, abs=1e-12)
    assert fit.kappa >= 0


@given(st.floats(1, 1e6), st.lists(st.floats(0.001, 10), min_size=1, max_size=8))
def test_noise_fit_exact_linear(kappa, powers):
    fit = calibration.fit_noise_coefficient([(p, kappa * p + 50.0) for p in powers], 50.0)
    assert fit.kappa == pytest.approx(kappa, rel=1e-9)


@given(st.dictionaries(st.integers(1, 80), st.floats(0, 1e6), min_size=1), st.floats(0, 1e5))
def test_scan_normalisation(counts, dark):
    scan = calibration.scan_noise(counts, dark)
    assert all(v >= 0 for v in scan.subtracted.values())
    if any(v > dark for v in counts.values()):
        assert max(scan.normalized.values()) == 1.0
        best = max(scan.subtracted.values())
        assert scan.argmax == min(ch for ch, v in scan.subtracted.items() if v == best)
    else:
        assert scan.argmax is None


@given(st.sampled_from(presets.RECEIVERS), st.floats(0, 10), st.floats(0.2, 3), st.floats(-25, -8))
def test_skr_monotone_in_loss_and_power(r, loss, step, power):
    base = presets.scenario(r, loss, input_dbm=power)
    k0 = rates.analytic_key(base).skr
    assume(math.isfinite(k0))
    more_loss = base.with_channel(quantum_loss_db=loss + step)
    more_power = base.with_channel(classical_input_dbm=power + step)
    assert rates.analytic_key(more_loss).skr <= k0 * (1 + 1e-12)
    assert rates.analytic_key(more_power).skr <= k0 * (1 + 1e-12)
