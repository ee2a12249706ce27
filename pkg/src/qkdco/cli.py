"""``qkdco`` command-line entry point.

Exit codes: 0 success (including a zero key), 1 invalid input, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .calibration import (calibrate_kappa_to_threshold, fit_noise_coefficient, read_channel_counts,
                          read_power_counts, scan_noise)
from .mc import worker_count
from .model import Scenario, ValidationError, Violation, load_scenario
from .rates import NoKeyPossible, analytic_key, predict

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

SWEEP_COLUMNS = ("quantum_loss_db", "classical_input_dbm", "receiver_id", "qber_z", "qber_x",
                 "skr_bps", "ell_bits", "t_acq_s", "r_sifted_z_hz")
_RANGE_FLAGS = ("--loss", "--power")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    return f"{float(x):.9g}"


def parse_range(text: str, name: str) -> list[float]:
    """Inclusive ``start:stop:step`` range, or a single value."""
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ValidationError([Violation(name, "expected a:b:step", text)]) from None
    if len(vals) == 1:
        return vals
    if len(vals) != 3 or not all(math.isfinite(v) for v in vals):
        raise ValidationError([Violation(name, "expected a:b:step", text)])
    a, b, step = vals
    if step <= 0 or b < a:
        raise ValidationError([Violation(name, "need step > 0 and a <= b", text)])
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 12) for i in range(n)]


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        _atomic_write(out, text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    quantum_loss_db: float
    classical_input_dbm: float
    receiver_id: str
    qber_z: float
    qber_x: float
    skr_bps: float
    ell_bits: float
    t_acq_s: float
    r_sifted_z_hz: float

    def cells(self) -> list[str]:
        return [fmt(getattr(self, c)) for c in SWEEP_COLUMNS]


@dataclass(frozen=True)
class SweepResult:
    rows: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()


def sweep_point(s: Scenario, receiver_id: str) -> SweepRow:
    ch = s.channel
    key = analytic_key(s)
    try:
        pred = predict(s)
        qz = (pred.p_click["Z"]["mu1"] * s.source.p_mu1 * pred.qber["Z"]["mu1"]
              + pred.p_click["Z"]["mu2"] * s.source.p_mu2 * pred.qber["Z"]["mu2"]) / (
            pred.p_click["Z"]["mu1"] * s.source.p_mu1 + pred.p_click["Z"]["mu2"] * s.source.p_mu2)
        qx = (pred.p_click["X"]["mu1"] * s.source.p_mu1 * pred.qber["X"]["mu1"]
              + pred.p_click["X"]["mu2"] * s.source.p_mu2 * pred.qber["X"]["mu2"]) / (
            pred.p_click["X"]["mu1"] * s.source.p_mu1 + pred.p_click["X"]["mu2"] * s.source.p_mu2)
        t_acq, r_z = pred.t_acq, pred.r_sifted_z
    except NoKeyPossible:
        qz = qx = 0.5
        t_acq, r_z = math.inf, 0.0
    return SweepRow(ch.quantum_loss_db, ch.classical_input_dbm, receiver_id, qz, qx,
                    key.skr, key.ell, t_acq, r_z)


def sweep(bases: dict, losses, powers, workers: int | None = None) -> SweepResult:
    """Rows for every (loss, power, receiver); ``bases`` maps receiver id to a scenario
    or to a callable ``loss -> scenario``."""
    jobs = []
    for rid, base in bases.items():
        for loss in losses:
            s = base(loss) if callable(base) else base.with_channel(quantum_loss_db=float(loss))
            for p in powers:
                jobs.append((s.with_channel(quantum_loss_db=float(loss), classical_input_dbm=float(p)), rid))
    with ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        rows = list(pool.map(lambda j: sweep_point(*j), jobs))
    ids = {r.receiver_id for r in rows}
    keys = {(r.quantum_loss_db, r.classical_input_dbm, r.receiver_id) for r in rows}
    if len(keys) != len(rows):
        raise ValidationError([Violation("sweep", "duplicate (loss, power, receiver) rows", sorted(ids))])
    rows.sort(key=lambda r: (r.quantum_loss_db, r.classical_input_dbm, r.receiver_id))
    return SweepResult(tuple(rows))


# --------------------------------------------------------------------------
# subcommands


def _cmd_skr(a) -> int:
    s = load_scenario(a.config)
    changes = {}
    if a.loss is not None:
        changes["quantum_loss_db"] = a.loss
    if a.power is not None:
        changes["classical_input_dbm"] = a.power
    if changes:
        s = s.with_channel(**changes)
    from .model import validate

    validate(s)
    _emit(_json(analytic_key(s).to_dict()), a.out)
    return EXIT_OK


def _cmd_sweep(a) -> int:
    bases = {}
    for path in a.config:
        rid = Path(path).stem
        if rid in bases:
            raise ValidationError([Violation("--config", "receiver ids (file stems) must be unique", rid)])
        bases[rid] = load_scenario(path)
    losses = parse_range(a.loss, "--loss")
    powers = parse_range(a.power, "--power")
    result = sweep(bases, losses, powers)
    _emit(result.to_csv(), a.out)
    return EXIT_OK


def _cmd_optimize(a) -> int:
    from .optimize import OptimizationSpec, optimize

    s = load_scenario(a.config)
    spec = OptimizationSpec()
    if a.spec:
        try:
            data = json.loads(Path(a.spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError([Violation(a.spec, f"invalid JSON: {exc}")]) from None
        spec = OptimizationSpec.from_dict(data)
    _emit(_json(optimize(s, spec).to_dict()), a.out)
    return EXIT_OK


def _cmd_simulate(a) -> int:
    from .mc import simulate

    s = load_scenario(a.config)
    if a.pulses < 1:
        raise ValidationError([Violation("--pulses", "must be >= 1", a.pulses)])
    summary = simulate(s, a.pulses, a.seed, records=bool(a.records))
    if a.records:
        path = Path(a.records)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
        os.close(fd)
        try:
            summary.write_records_csv(tmp)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    _emit(_json(summary.to_dict()), a.out)
    return EXIT_OK


def _cmd_calibrate(a) -> int:
    if (a.input is None) == (a.config is None):
        raise ValidationError([Violation("calibrate", "give exactly one of --input or --config")])
    if a.input is not None:
        if a.dark_rate is None:
            raise ValidationError([Violation("--dark-rate", "required with --input")])
        fit = fit_noise_coefficient(read_power_counts(a.input), a.dark_rate)
        out = {"noise_spectral_density": fit.kappa, "residual": fit.residual, "points": fit.points}
    else:
        s = load_scenario(a.config)
        kappa = calibrate_kappa_to_threshold(s, a.threshold_dbm)
        out = {"noise_spectral_density": kappa, "threshold_dbm": a.threshold_dbm}
    _emit(_json(out), a.out)
    return EXIT_OK


def _cmd_scan_noise(a) -> int:
    scan = scan_noise(read_channel_counts(a.input), a.dark_rate)
    _emit(_json(scan.to_dict()), a.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qkdco", description="Decoy-state QKD link and finite-key toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("skr", help="finite-key result of one scenario")
    c.add_argument("--config", required=True)
    c.add_argument("--loss", type=float, help="override quantum_loss_db")
    c.add_argument("--power", type=float, help="override classical_input_dbm")
    c.add_argument("--out")
    c.set_defaults(func=_cmd_skr)

    c = sub.add_parser("sweep", help="loss x power grid to CSV")
    c.add_argument("--config", required=True, action="append", help="repeatable; receiver id = file stem")
    c.add_argument("--loss", required=True, help="a:b:step in dB")
    c.add_argument("--power", required=True, help="a:b:step in dBm")
    c.add_argument("--out")
    c.set_defaults(func=_cmd_sweep)

    c = sub.add_parser("optimize", help="optimise source parameters")
    c.add_argument("--config", required=True)
    c.add_argument("--spec")
    c.add_argument("--out")
    c.set_defaults(func=_cmd_optimize)

    c = sub.add_parser("simulate", help="photon Monte Carlo")
    c.add_argument("--config", required=True)
    c.add_argument("--pulses", type=int, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--records", help="write the click stream to this CSV")
    c.add_argument("--out")
    c.set_defaults(func=_cmd_simulate)

    c = sub.add_parser("calibrate", help="fit the noise coefficient")
    c.add_argument("--input", help="CSV with power_mw,counts_per_s")
    c.add_argument("--dark-rate", type=float)
    c.add_argument("--config", help="threshold-match kappa for this scenario instead")
    c.add_argument("--threshold-dbm", type=float, default=-12.0)
    c.add_argument("--out")
    c.set_defaults(func=_cmd_calibrate)

    c = sub.add_parser("scan-noise", help="normalise a per-channel noise scan")
    c.add_argument("--input", required=True, help="CSV with channel,counts_per_s")
    c.add_argument("--dark-rate", type=float, default=0.0)
    c.add_argument("--out")
    c.set_defaults(func=_cmd_scan_noise)
    return p


def _join_ranges(argv: list[str]) -> list[str]:
    # let "--power -20:-8:2" through; argparse would read the value as a flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _RANGE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = _join_ranges(list(sys.argv[1:] if argv is None else argv))
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"qkdco: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"qkdco: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"qkdco: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
