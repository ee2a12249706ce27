"""Pulse-resolved Monte Carlo of the link with photon-number tags.

Pulses are i.i.d., so a chunk of ``C`` pulses is sampled event-first: the
set of pulses with at least one detected photon is drawn by geometric
skipping, and the class (bases, intensity), bit and photon number of each
eventful pulse are then drawn from their exact conditional laws. Pulses
without any detector event only enter the preparation tallies, which are
completed by a multinomial draw. Background (dark + classical noise)
avalanches are a Poisson process over wall time, thinned by the
measurement path of the pulse period they land in.

Every chunk owns an independent Philox stream keyed by ``(seed, chunk)``,
so chunk generation can run on any number of workers. Dead time,
afterpulsing and double-click resolution are applied afterwards in one
sequential, deterministic pass over the merged timeline.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .finite_key import ObservedCounts
from .model import Scenario, validate
from .rates import BASES, INTENSITIES, LinkConstants, arrival_sigma, predict

CAUSES = ("signal", "dark", "classical_noise", "afterpulse")
BINS = ("early", "late")
CSV_HEADER = ("pulse_index", "basis_tx", "basis_rx", "intensity", "bin", "arrival_offset_s",
              "cause", "photon_number", "is_error")

DEFAULT_CHUNK = 1 << 22
DEFAULT_RECORD_CAP = 5_000_000
AFTERPULSE_MEAN_DELAY = 1e-6
_PASS_STREAM = (1 << 63) - 1

# class id = 4*tx + 2*rx + k, with basis 0=Z, 1=X and intensity 0=mu1, 1=mu2
_TX = np.array([c >> 2 for c in range(8)], dtype=np.int8)
_RX = np.array([(c >> 1) & 1 for c in range(8)], dtype=np.int8)
_K = np.array([c & 1 for c in range(8)], dtype=np.int8)


class RecordCapExceeded(MemoryError):
    pass


class PartialBlock(RuntimeError):
    """Pulse cap reached before the block filled."""

    def __init__(self, n_z: int, pulses: int, block_size: float):
        super().__init__(f"partial block: {n_z} of {int(block_size)} Z bits after {pulses} pulses")
        self.n_z = n_z
        self.pulses = pulses
        self.block_size = block_size


def worker_count() -> int:
    """Worker cap from ``QKDCO_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("QKDCO_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class ClickRecord:
    pulse_index: int
    basis_tx: str
    basis_rx: str
    intensity: str
    bin: str
    arrival_offset: float
    cause: str
    photon_number: int
    is_error: bool


def _stream(seed: int, index: int) -> np.random.Generator:
    seed = int(seed) & ((1 << 128) - 1)
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, seed >> 64], dtype=np.uint64)
    counter = np.array([0, 0, 0, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True)
class _Physics:
    period: float
    p_class: np.ndarray  # prior probability of each class
    q_class: np.ndarray  # probability of >= 1 detected photon (ungated)
    mean_class: np.ndarray  # mean photon number
    eta0_class: np.ndarray  # per-photon detection probability
    e_opt: np.ndarray  # per measured basis
    bg_rate: np.ndarray  # per measured basis
    dark_rate: float
    sigma: float
    half_gate: float
    dead_time: float
    afterpulse_prob: float
    afterpulse_delay: float

    @classmethod
    def from_scenario(cls, s: Scenario, afterpulse_delay: float) -> _Physics:
        c = LinkConstants.from_scenario(s)
        src, rx = s.source, s.receiver
        p_tx = np.array([src.p_z_tx, 1 - src.p_z_tx])
        p_rx = np.array([rx.p_z_rx, 1 - rx.p_z_rx])
        p_k = np.array([src.p_mu1, 1 - src.p_mu1])
        mus = np.array([src.mu1, src.mu2])
        eta0 = np.array([c.eta_ungated[b] for b in BASES])
        p_class = p_tx[_TX] * p_rx[_RX] * p_k[_K]
        mean = mus[_K]
        eta_c = eta0[_RX]
        return cls(
            period=1.0 / src.rep_rate,
            p_class=p_class,
            q_class=-np.expm1(-mean * eta_c),
            mean_class=mean,
            eta0_class=eta_c,
            e_opt=np.array([c.e_opt[b] for b in BASES]),
            bg_rate=np.array([c.bg_rate[b] for b in BASES]),
            dark_rate=rx.dark_rate,
            sigma=arrival_sigma(src.pulse_fwhm, rx.jitter_fwhm),
            half_gate=rx.gate_window / 2.0,
            dead_time=rx.dead_time,
            afterpulse_prob=rx.afterpulse_prob,
            afterpulse_delay=afterpulse_delay,
        )

    @property
    def p_detect(self) -> float:
        return float(np.dot(self.p_class, self.q_class))

    @property
    def silent_class_probs(self) -> np.ndarray:
        w = self.p_class * (1 - self.q_class)
        return w / w.sum()


def _positions(rng: np.random.Generator, n: int, q: float) -> np.ndarray:
    """Indices in ``range(n)`` selected independently with probability ``q``."""
    if q <= 0 or n == 0:
        return np.empty(0, dtype=np.int64)
    if q >= 1:
        return np.arange(n, dtype=np.int64)
    out = []
    pos = -1
    while True:
        expect = (n - pos) * q
        size = int(expect + 6 * math.sqrt(expect) + 16)
        steps = np.cumsum(rng.geometric(q, size=size)) + pos
        out.append(steps[steps < n])
        if steps[-1] >= n:
            break
        pos = int(steps[-1])
    return np.concatenate(out).astype(np.int64)


def _zero_truncated_poisson(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    """Photons detected given at least one was (inverse CDF, exact to 1e-15)."""
    u = rng.random(lam.shape)
    out = np.ones(lam.shape, dtype=np.int64)
    norm = -np.expm1(-lam)
    term = lam * np.exp(-lam)  # P(m = 1), unnormalised
    cdf = term / norm
    j = 1
    active = u > cdf
    while active.any() and j < 60:
        j += 1
        term = term * lam / j
        cdf = cdf + term / norm
        out[active] = j
        active = active & (u > cdf)
    return out


def _bin_split(phase: np.ndarray, period: float, half_gate: float):
    """Nearest bin, signed offset from its centre (s) and gate acceptance."""
    bins = (phase >= 0.5).astype(np.int8)
    offset = (phase - (0.25 + 0.5 * bins)) * period
    return bins, offset, np.abs(offset) <= half_gate


def _chunk(phys: _Physics, seed: int, chunk_index: int, start: int, n: int) -> dict:
    """Candidate avalanches and preparation tallies for pulses ``start .. start+n-1``."""
    rng = _stream(seed, chunk_index)
    T = phys.period

    # pulses with at least one detected photon
    sig_pos = _positions(rng, n, phys.p_detect)
    d = sig_pos.size
    w = phys.p_class * phys.q_class
    sig_cls = rng.choice(8, size=d, p=w / w.sum()).astype(np.int8) if d else np.empty(0, np.int8)
    sig_bit = rng.integers(0, 2, size=d, dtype=np.int8)
    lam_det = phys.mean_class[sig_cls] * phys.eta0_class[sig_cls]
    detected = _zero_truncated_poisson(rng, lam_det) if d else np.empty(0, np.int64)
    lost = rng.poisson(phys.mean_class[sig_cls] * (1 - phys.eta0_class[sig_cls]))
    sig_photons = (detected + lost).astype(np.int32)
    offset = rng.normal(0.0, phys.sigma, size=d) if phys.sigma > 0 else np.zeros(d)
    for i in np.flatnonzero(detected > 1):
        extra = rng.normal(0.0, phys.sigma, size=int(detected[i]) - 1) if phys.sigma > 0 else [0.0]
        offset[i] = min(offset[i], float(np.min(extra)))
    tx, rx = _TX[sig_cls], _RX[sig_cls]
    sig_bit = np.where(tx == 1, 0, sig_bit).astype(np.int8)
    flip = rng.random(d) < phys.e_opt[rx]
    coin = rng.integers(0, 2, size=d, dtype=np.int8)
    outcome = np.where(tx == rx, sig_bit ^ flip, coin).astype(np.int8)
    sig_phase = np.clip(0.25 + 0.5 * outcome + offset / T, 0.0, np.nextafter(1.0, 0.0))

    # background avalanches: Poisson at the larger path rate, thinned per path
    lam_max = float(phys.bg_rate.max())
    nb = rng.poisson(lam_max * n * T) if lam_max > 0 else 0
    bg_pos = rng.integers(0, n, size=nb)
    bg_phase = rng.random(nb)
    bg_u = rng.random(nb)
    bg_cause_u = rng.random(nb)
    order = np.argsort(bg_pos, kind="stable")
    bg_pos, bg_phase, bg_u, bg_cause_u = bg_pos[order], bg_phase[order], bg_u[order], bg_cause_u[order]

    # attributes of background-hit pulses that carry no detected photon
    in_sig = np.isin(bg_pos, sig_pos)
    silent_pos = np.unique(bg_pos[~in_sig])
    ns = silent_pos.size
    silent_cls = rng.choice(8, size=ns, p=phys.silent_class_probs).astype(np.int8) if ns else np.empty(0, np.int8)
    silent_bit = np.where(_TX[silent_cls] == 1, 0, rng.integers(0, 2, size=ns)).astype(np.int8)
    silent_photons = rng.poisson(phys.mean_class[silent_cls] * (1 - phys.eta0_class[silent_cls])).astype(np.int32)

    known_pos = np.concatenate([sig_pos, silent_pos])
    known_cls = np.concatenate([sig_cls, silent_cls])
    known_bit = np.concatenate([sig_bit, silent_bit])
    known_ph = np.concatenate([sig_photons, silent_photons])
    srt = np.argsort(known_pos, kind="stable")
    known_pos, known_cls, known_bit, known_ph = known_pos[srt], known_cls[srt], known_bit[srt], known_ph[srt]
    idx = np.searchsorted(known_pos, bg_pos)
    bg_cls, bg_bit, bg_ph = known_cls[idx], known_bit[idx], known_ph[idx]
    bg_rx = _RX[bg_cls]
    keep = bg_u * lam_max < phys.bg_rate[bg_rx]
    bg_pos, bg_phase, bg_cls, bg_bit, bg_ph = bg_pos[keep], bg_phase[keep], bg_cls[keep], bg_bit[keep], bg_ph[keep]
    bg_cause = np.where(bg_cause_u[keep] * phys.bg_rate[bg_rx[keep]] < phys.dark_rate, 1, 2).astype(np.int8)

    # preparation tallies
    rest = n - d - ns
    tallies = np.bincount(known_cls, minlength=8).astype(np.int64)
    if rest > 0:
        tallies += rng.multinomial(rest, phys.silent_class_probs)

    pulse = np.concatenate([sig_pos, bg_pos]) + start
    cls = np.concatenate([sig_cls, bg_cls])
    phase = np.concatenate([sig_phase, bg_phase])
    m = pulse.size
    cand = {
        "pulse": pulse.astype(np.int64),
        "cls": cls,
        "bit": np.concatenate([sig_bit, bg_bit]),
        "photons": np.concatenate([sig_photons, bg_ph]),
        "cause": np.concatenate([np.zeros(d, np.int8), bg_cause]),
        "phase": phase,
        "u_ap": rng.random(m),
        "d_ap": rng.exponential(1.0, size=m),
        "u_tie": rng.random(m),
    }
    cand["time"] = (cand["pulse"] + phase) * T
    order = np.argsort(cand["time"], kind="stable")
    cand = {k: v[order] for k, v in cand.items()}
    return {"cand": cand, "tallies": tallies, "known": (known_pos + start, known_cls, known_bit, known_ph)}


class _Timeline:
    """Sequential non-paralyzable dead time with afterpulsing across chunks."""

    def __init__(self, phys: _Physics, seed: int):
        self.phys = phys
        self.last = -math.inf
        self.pending: list = []  # heap of afterpulse times
        self.rng = _stream(seed, _PASS_STREAM)

    def _maybe_afterpulse(self, t: float, u: float, d: float) -> None:
        p = self.phys
        if p.afterpulse_prob > 0 and u < p.afterpulse_prob:
            heapq.heappush(self.pending, t + p.dead_time + d * p.afterpulse_delay)

    def run(self, times: np.ndarray, u_ap: np.ndarray, d_ap: np.ndarray, end: float):
        """Accept mask for ``times`` plus the accepted afterpulse times before ``end``."""
        tau = self.phys.dead_time
        accepted = np.zeros(times.size, dtype=bool)
        ap_times = []
        last = self.last
        if self.phys.afterpulse_prob <= 0:
            tl = times.tolist()
            n = len(tl)
            if n and tau > 0 and n * tau > 2.0 * (tl[-1] - tl[0] + tau):
                # saturated: jump straight to the next candidate outside the dead time
                i = bisect.bisect_left(tl, last + tau)
                while i < n:
                    accepted[i] = True
                    last = tl[i]
                    i = bisect.bisect_left(tl, last + tau, i + 1)
            else:
                for i, t in enumerate(tl):
                    if t >= last + tau:
                        accepted[i] = True
                        last = t
            self.last = last
            return accepted, np.empty(0)
        tl, ul, dl = times.tolist(), u_ap.tolist(), d_ap.tolist()
        i, n = 0, len(tl)
        while True:
            t_ap = self.pending[0] if self.pending else math.inf
            t_c = tl[i] if i < n else math.inf
            if t_ap < t_c and t_ap < end:
                heapq.heappop(self.pending)
                if t_ap >= last + tau:
                    ap_times.append(t_ap)
                    last = t_ap
                    self._maybe_afterpulse(t_ap, float(self.rng.random()), float(self.rng.exponential()))
            elif i < n:
                if t_c >= last + tau:
                    accepted[i] = True
                    last = t_c
                    self._maybe_afterpulse(t_c, ul[i], dl[i])
                i += 1
            else:
                break
        self.last = last
        return accepted, np.array(ap_times)


def _afterpulse_candidates(phys: _Physics, timeline: _Timeline, ap_times: np.ndarray, known) -> dict:
    T = phys.period
    pulse = np.floor(ap_times / T).astype(np.int64)
    phase = np.clip(ap_times / T - pulse, 0.0, np.nextafter(1.0, 0.0))
    kpos, kcls, kbit, kph = known
    n = pulse.size
    cls = np.empty(n, np.int8)
    bit = np.empty(n, np.int8)
    ph = np.empty(n, np.int32)
    probs = phys.silent_class_probs
    for i, p in enumerate(pulse.tolist()):
        j = int(np.searchsorted(kpos, p))
        if j < kpos.size and kpos[j] == p:
            cls[i], bit[i], ph[i] = kcls[j], kbit[j], kph[j]
        else:
            c = int(timeline.rng.choice(8, p=probs))
            cls[i] = c
            bit[i] = 0 if _TX[c] == 1 else int(timeline.rng.integers(0, 2))
            ph[i] = int(timeline.rng.poisson(phys.mean_class[c] * (1 - phys.eta0_class[c])))
    return {"pulse": pulse, "cls": cls, "bit": bit, "photons": ph, "cause": np.full(n, 3, np.int8),
            "phase": phase, "u_tie": timeline.rng.random(n), "time": ap_times}


def _resolve(phys: _Physics, cand: dict, accepted: np.ndarray, ap: dict) -> dict:
    """Gate, resolve double clicks and sift the accepted avalanches of one chunk."""
    keys = ("pulse", "cls", "bit", "photons", "cause", "phase", "u_tie", "time")
    ev = {k: np.concatenate([cand[k][accepted], ap[k]]) for k in keys}
    if ap["pulse"].size:
        order = np.argsort(ev["time"], kind="stable")
        ev = {k: v[order] for k, v in ev.items()}
    bins, offset, in_gate = _bin_split(ev["phase"], phys.period, phys.half_gate)
    ev.update(bin=bins, offset=offset)
    ev = {k: v[in_gate] for k, v in ev.items()}
    if ev["pulse"].size > 1:
        # double clicks in one state period: keep one, chosen by a fair coin
        starts = np.flatnonzero(np.r_[True, ev["pulse"][1:] != ev["pulse"][:-1]])
        counts = np.diff(np.r_[starts, ev["pulse"].size])
        if np.any(counts > 1):
            pick = starts + np.minimum((ev["u_tie"][starts] * counts).astype(np.int64), counts - 1)
            ev = {k: v[pick] for k, v in ev.items()}
    tx, rx = _TX[ev["cls"]], _RX[ev["cls"]]
    ev["sifted"] = tx == rx
    ev["error"] = ev["sifted"] & (ev["bin"] != ev["bit"])
    return ev


def _empty_truth() -> dict:
    keys = ("vacuum", "single", "multi", "signal", "dark", "classical_noise", "afterpulse", "single_errors")
    return {b: {k: {key: 0 for key in keys} for k in INTENSITIES} for b in BASES}


def _tally(ev: dict, n, m, truth, sel=None) -> None:
    if sel is None:
        sel = ev["sifted"]
    cls, err, ph, cause = ev["cls"][sel], ev["error"][sel], ev["photons"][sel], ev["cause"][sel]
    for bi, b in enumerate(BASES):
        for ki, k in enumerate(INTENSITIES):
            cell = (_RX[cls] == bi) & (_K[cls] == ki)
            n[b][k] += int(cell.sum())
            m[b][k] += int((cell & err).sum())
            t = truth[b][k]
            t["vacuum"] += int((cell & (ph == 0)).sum())
            t["single"] += int((cell & (ph == 1)).sum())
            t["multi"] += int((cell & (ph >= 2)).sum())
            t["single_errors"] += int((cell & (ph == 1) & err).sum())
            for ci, cname in enumerate(CAUSES):
                t[cname] += int((cell & (cause == ci)).sum())


@dataclass(frozen=True)
class McSummary:
    """Observed tallies plus photon-number and cause truth from the tags."""

    counts: ObservedCounts
    prepared: dict  # matched-basis prepared states per basis/intensity
    truth: dict
    pulses: int
    seed: int
    mode: str = "direct"
    avalanches: int = 0  # accepted detector events, gated or not
    records: dict | None = field(default=None, repr=False, compare=False)

    def truth_totals(self, basis: str) -> dict:
        out: dict = {}
        for k in INTENSITIES:
            for key, v in self.truth[basis][k].items():
                out[key] = out.get(key, 0) + v
        return out

    def to_dict(self) -> dict:
        return {"counts": self.counts.to_dict(), "prepared": self.prepared, "truth": self.truth,
                "pulses": self.pulses, "seed": self.seed, "mode": self.mode,
                "avalanches": self.avalanches}

    def iter_records(self):
        if self.records is None:
            return
        r = self.records
        for i in range(r["pulse"].size):
            c = int(r["cls"][i])
            yield ClickRecord(
                pulse_index=int(r["pulse"][i]), basis_tx=BASES[_TX[c]], basis_rx=BASES[_RX[c]],
                intensity=INTENSITIES[_K[c]], bin=BINS[int(r["bin"][i])],
                arrival_offset=float(r["offset"][i]), cause=CAUSES[int(r["cause"][i])],
                photon_number=int(r["photons"][i]), is_error=bool(r["error"][i]))

    def write_records_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for rec in self.iter_records():
                w.writerow([rec.pulse_index, rec.basis_tx, rec.basis_rx, rec.intensity, rec.bin,
                            f"{rec.arrival_offset:.9g}", rec.cause, rec.photon_number,
                            int(rec.is_error)])


def _records_from(events: list[dict]) -> dict:
    keys = ("pulse", "cls", "bin", "offset", "cause", "photons", "error")
    if not events:
        return {k: np.empty(0) for k in keys}
    return {k: np.concatenate([e[k] for e in events]) for k in keys}


def _summary(s: Scenario, n, m, truth, tallies, pulses, seed, mode, records, avalanches=0) -> McSummary:
    src = s.source
    prepared = {b: {k: int(tallies[4 * bi + 2 * bi + ki]) for ki, k in enumerate(INTENSITIES)}
                for bi, b in enumerate(BASES)}
    counts = ObservedCounts(n=n, m=m, t_acq=pulses / src.rep_rate, mu1=src.mu1, mu2=src.mu2,
                            p_mu1=src.p_mu1, metadata={"source": "mc", "mode": mode, "seed": seed})
    return McSummary(counts=counts, prepared=prepared, truth=truth, pulses=int(pulses), seed=int(seed),
                     mode=mode, avalanches=int(avalanches), records=records)


def simulate(s: Scenario, n_pulses: int, seed: int, *, records: bool = False,
             record_cap: int = DEFAULT_RECORD_CAP, chunk: int = DEFAULT_CHUNK,
             workers: int | None = None, afterpulse_delay: float = AFTERPULSE_MEAN_DELAY,
             strict: bool = True) -> McSummary:
    """Simulate ``n_pulses`` prepared states; deterministic in ``(s, n_pulses, seed, chunk)``."""
    if strict:
        validate(s)
    n_pulses = int(n_pulses)
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    phys = _Physics.from_scenario(s, afterpulse_delay)
    workers = workers or worker_count()
    spans = [(i, start, min(chunk, n_pulses - start))
             for i, start in enumerate(range(0, n_pulses, chunk))]
    timeline = _Timeline(phys, seed)
    n = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    m = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    truth = _empty_truth()
    tallies = np.zeros(8, dtype=np.int64)
    kept: list[dict] = []
    n_records = 0
    avalanches = 0

    def gen(span):
        return _chunk(phys, seed, *span)

    batch = max(1, workers)
    with ThreadPoolExecutor(max_workers=batch) as pool:
        for b0 in range(0, len(spans), batch):
            results = list(pool.map(gen, spans[b0:b0 + batch]))
            for span, res in zip(spans[b0:b0 + batch], results):
                end = (span[1] + span[2]) * phys.period
                cand = res["cand"]
                acc, ap_t = timeline.run(cand["time"], cand["u_ap"], cand["d_ap"], end)
                ap = _afterpulse_candidates(phys, timeline, ap_t, res["known"])
                avalanches += int(acc.sum()) + ap_t.size
                ev = _resolve(phys, cand, acc, ap)
                _tally(ev, n, m, truth)
                tallies += res["tallies"]
                if records:
                    n_records += ev["pulse"].size
                    if n_records > record_cap:
                        raise RecordCapExceeded(f"click stream exceeds record cap {record_cap}")
                    kept.append(ev)
    return _summary(s, n, m, truth, tallies, n_pulses, seed, "direct",
                    _records_from(kept) if records else None, avalanches)


def empirical_stats(summary: McSummary) -> dict:
    """Per-cell click probability and QBER; empty cells are ``None`` rather than 0/0."""
    c = summary.counts
    p_click = {b: {k: (c.n[b][k] / summary.prepared[b][k] if summary.prepared[b][k] else None)
                   for k in INTENSITIES} for b in BASES}
    qber = {b: {k: c.qber(b, k) for k in INTENSITIES} for b in BASES}
    t = c.t_acq
    return {
        "counts": c,
        "p_click": p_click,
        "qber": qber,
        "qber_basis": {b: c.qber(b) for b in BASES},
        "r_sifted_z": c.n_basis("Z") / t,
        "r_sifted_x": c.n_basis("X") / t,
    }


def tally_records(records, t_acq: float, mu1: float, mu2: float, p_mu1: float) -> ObservedCounts:
    """ObservedCounts from an iterable of :class:`ClickRecord` (sifted ones only)."""
    n = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    m = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    for r in records:
        if r.basis_tx != r.basis_rx:
            continue
        n[r.basis_rx][r.intensity] += 1
        m[r.basis_rx][r.intensity] += int(r.is_error)
    return ObservedCounts(n=n, m=m, t_acq=t_acq, mu1=mu1, mu2=mu2, p_mu1=p_mu1)


# --------------------------------------------------------------------------
# privacy-amplification blocks


@dataclass(frozen=True)
class BlockResult:
    counts: ObservedCounts
    truth: dict
    pulses: int
    mode: str
    seed: int


def _block_chunk(s: Scenario, phys: _Physics) -> int:
    pred = predict(s)
    per_pulse = pred.r_sifted_z / s.source.rep_rate
    target = s.security.block_size / (4.0 * per_pulse)
    return int(min(max(2 ** round(math.log2(max(target, 1024))), 1 << 12), 1 << 26))


def run_block(s: Scenario, seed: int, *, mode: str = "direct", max_pulses: float = 1e13,
              scaled_pulses: int | None = None, afterpulse_delay: float = AFTERPULSE_MEAN_DELAY) -> BlockResult:
    """Counts of one block with exactly ``security.block_size`` sifted Z clicks.

    ``mode="direct"`` simulates until the block fills. ``mode="scaled"``
    simulates ``scaled_pulses`` pulses and rescales the tagged tallies to
    the block size by multinomial resampling.
    """
    validate(s)
    block = int(math.ceil(s.security.block_size))
    try:
        predict(s)
    except RuntimeError:
        raise PartialBlock(0, 0, block) from None
    if mode == "scaled":
        return _scaled_block(s, seed, block, scaled_pulses, afterpulse_delay)
    if mode != "direct":
        raise ValueError(f"unknown block mode {mode!r}")

    phys = _Physics.from_scenario(s, afterpulse_delay)
    chunk = _block_chunk(s, phys)
    timeline = _Timeline(phys, seed)
    n = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    m = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    truth = _empty_truth()
    n_z = 0
    index = 0
    start = 0
    while start < max_pulses:
        size = int(min(chunk, max_pulses - start))
        res = _chunk(phys, seed, index, start, size)
        cand = res["cand"]
        acc, ap_t = timeline.run(cand["time"], cand["u_ap"], cand["d_ap"], (start + size) * phys.period)
        ev = _resolve(phys, cand, acc, _afterpulse_candidates(phys, timeline, ap_t, res["known"]))
        z_mask = ev["sifted"] & (_RX[ev["cls"]] == 0)
        z_here = int(z_mask.sum())
        if n_z + z_here >= block:
            last_pulse = ev["pulse"][np.flatnonzero(z_mask)[block - n_z - 1]]
            _tally(ev, n, m, truth, ev["sifted"] & (ev["pulse"] <= last_pulse))
            pulses = int(last_pulse) + 1
            src = s.source
            counts = ObservedCounts(n=n, m=m, t_acq=pulses / src.rep_rate, mu1=src.mu1, mu2=src.mu2,
                                    p_mu1=src.p_mu1, metadata={"source": "mc", "mode": "direct", "seed": seed})
            return BlockResult(counts=counts, truth=truth, pulses=pulses, mode="direct", seed=seed)
        _tally(ev, n, m, truth)
        n_z += z_here
        start += size
        index += 1
    raise PartialBlock(n_z, start, block)


def _scaled_block(s: Scenario, seed: int, block: int, pulses: int | None, afterpulse_delay: float) -> BlockResult:
    src = s.source
    if pulses is None:
        per_pulse = predict(s).r_sifted_z / src.rep_rate
        target = min(block, max(1e5, block / 100.0))
        pulses = int(math.ceil(target / per_pulse))
    summary = simulate(s, pulses, seed, afterpulse_delay=afterpulse_delay)
    n_z = summary.counts.n_basis("Z")
    if n_z == 0:
        raise PartialBlock(0, pulses, block)
    factor = block / n_z
    # categories: basis x intensity x photon class x error
    cats, probs = [], []
    for b in BASES:
        for k in INTENSITIES:
            t = summary.truth[b][k]
            single_err = t["single_errors"]
            other_err = summary.counts.m[b][k] - single_err
            ok = {"vacuum": t["vacuum"], "single": t["single"] - single_err, "multi": t["multi"]}
            # errors outside the single-photon class are attributed to vacuum/multi clicks pro rata
            vm = t["vacuum"] + t["multi"]
            vac_err = round(other_err * t["vacuum"] / vm) if vm else 0
            rows = [("vacuum", False, t["vacuum"] - vac_err), ("vacuum", True, vac_err),
                    ("single", False, ok["single"]), ("single", True, single_err),
                    ("multi", False, t["multi"] - (other_err - vac_err)), ("multi", True, other_err - vac_err)]
            for ph, err, count in rows:
                cats.append((b, k, ph, err))
                probs.append(max(count, 0))
    probs = np.array(probs, dtype=float)
    total = int(round(probs.sum() * factor))
    rng = _stream(seed, _PASS_STREAM - 1)
    draw = rng.multinomial(total, probs / probs.sum())
    n = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    m = {b: {k: 0 for k in INTENSITIES} for b in BASES}
    truth = _empty_truth()
    for (b, k, ph, err), c in zip(cats, draw.tolist()):
        n[b][k] += c
        truth[b][k][ph] += c
        if err:
            m[b][k] += c
            if ph == "single":
                truth[b][k]["single_errors"] += c
    t_acq = summary.counts.t_acq * factor
    counts = ObservedCounts(n=n, m=m, t_acq=t_acq, mu1=src.mu1, mu2=src.mu2, p_mu1=src.p_mu1,
                            metadata={"source": "mc", "mode": "scaled", "seed": seed,
                                      "simulated_pulses": pulses, "scale": factor})
    return BlockResult(counts=counts, truth=truth, pulses=int(round(pulses * factor)), mode="scaled", seed=seed)
