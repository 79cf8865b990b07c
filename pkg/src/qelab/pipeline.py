"""Batch analysis of many emitters and the summary statistics over them.

A manifest (JSON) lists, per emitter, the data files recorded under each
filter configuration::

    {"emitters": [
        {"id": 1, "position_um": [12.4, 3.0],
         "filters": {"cfg1": {"spectrum": "e1_cfg1.csv", "g2": "e1_cfg1.qtag",
                              "saturation": "e1_cfg1_sat.csv"}, ...},
         "lifetime": "e1_decay.qtag"}],
     "config": {"k_components": 4, ...}}

Relative paths are resolved against the manifest's directory. A failing step
is recorded on that emitter's record and never stops the batch.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields, replace
import csv
import hashlib
import json
import logging
import math
import os
import re

import numpy as np

from .correlation import compute_g2, g2_zero_pulsed
from .errors import DegenerateDataError, InvalidInputError, QelabError
from .fileio import read_qtag, read_saturation, read_spectrum
from .photophysics import (SaturationParams, build_decay_histogram, eval_saturation,
                           fit_lifetime, fit_saturation)
from .spectroscopy import FILTER_PRESETS, FilterConfig, SpectralFit, apply_filter, fit_multi_gaussian

_logger = logging.getLogger(__name__)

ZPL_RANGE_NM = (600.0, 680.0)
ZPL_BIN_NM = 2.0
SINGLE_PHOTON_THRESHOLD = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    k_components: int = 4
    g2_channels: tuple = (0, 1)
    g2_bin_ps: int = 256
    g2_max_lag_ps: int = 409_600
    g2_method: str = "window"
    rep_rate_hz: float = 39e6
    n_side_peaks: int = 10
    lifetime_trigger: int = 2
    lifetime_bin_ps: int = 128
    op_power_uw: float = 120.0
    p_sh_uw: float = 500.0
    filters: dict = field(default_factory=lambda: dict(FILTER_PRESETS))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        if "filters" in d:
            filters = dict(FILTER_PRESETS)
            for name, spec in d["filters"].items():
                filters[name] = (FILTER_PRESETS[spec] if isinstance(spec, str)
                                 else FilterConfig(tuple(map(tuple, spec["passbands"])),
                                                   spec.get("transmission", 1.0)))
            d["filters"] = filters
        if "g2_channels" in d:
            d["g2_channels"] = tuple(d["g2_channels"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["g2_channels"] = list(self.g2_channels)
        d["filters"] = {name: {"passbands": [list(b) for b in f.passbands],
                               "transmission": f.peak_transmission}
                        for name, f in sorted(self.filters.items())}
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FilterResult:
    spectral_fit: SpectralFit = None
    zpl_nm: float = None
    g2_zero: float = None
    g2_zero_err: float = None
    saturation_params: SaturationParams = None
    rate_at_op_power_cps: float = None

    def to_dict(self):
        return {
            "spectral_fit": self.spectral_fit.to_dict() if self.spectral_fit else None,
            "zpl_nm": self.zpl_nm,
            "g2_zero": self.g2_zero,
            "g2_zero_err": self.g2_zero_err,
            "saturation_params": asdict(self.saturation_params) if self.saturation_params else None,
            "rate_at_op_power_cps": self.rate_at_op_power_cps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            spectral_fit=SpectralFit.from_dict(d["spectral_fit"]) if d.get("spectral_fit") else None,
            zpl_nm=d.get("zpl_nm"),
            g2_zero=d.get("g2_zero"),
            g2_zero_err=d.get("g2_zero_err"),
            saturation_params=(SaturationParams(**d["saturation_params"])
                               if d.get("saturation_params") else None),
            rate_at_op_power_cps=d.get("rate_at_op_power_cps"),
        )


@dataclass(frozen=True)
class EmitterRecord:
    id: int
    position_um: tuple
    per_filter: dict
    lifetime_ns: float = None
    provenance: dict = field(default_factory=dict)

    @property
    def failures(self):
        return list(self.provenance.get("failures", []))

    @property
    def failed_steps(self):
        return sorted({f.split(":", 1)[0].split("[", 1)[0] for f in self.failures})

    @property
    def status(self):
        steps = self.failed_steps
        return "complete" if not steps else ",".join(f"failed-{s}" for s in steps)

    def to_dict(self):
        return {
            "id": self.id,
            "position_um": list(self.position_um) if self.position_um is not None else None,
            "lifetime_ns": self.lifetime_ns,
            "per_filter": {k: v.to_dict() for k, v in sorted(self.per_filter.items())},
            "provenance": self.provenance,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d):
        pos = d.get("position_um")
        return cls(
            id=d["id"],
            position_um=tuple(pos) if pos is not None else None,
            per_filter={k: FilterResult.from_dict(v) for k, v in d["per_filter"].items()},
            lifetime_ns=d.get("lifetime_ns"),
            provenance=d.get("provenance", {}),
        )


def load_manifest(path):
    """Parse a manifest file; returns ``(entries, config, base_dir)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read manifest {path}: {exc}") from None
    if isinstance(doc, list):
        doc = {"emitters": doc}
    entries = doc.get("emitters")
    if not isinstance(entries, list):
        raise InvalidInputError(f"{path}: 'emitters' must be a list")
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "id" not in e:
            raise InvalidInputError(f"{path}: emitter #{i} has no id")
    return entries, PipelineConfig.from_dict(doc.get("config")), os.path.dirname(os.path.abspath(path))


def _resolve(base_dir, p):
    return p if os.path.isabs(p) else os.path.join(base_dir, p)


def analyze_emitter(entry, config, base_dir="."):
    """Run every analysis step for one manifest entry; never raises on bad data."""
    failures = []
    per_filter = {}
    inputs = {}
    filters_in = entry.get("filters", {})
    for name in sorted(filters_in):
        files = filters_in[name]
        if name not in config.filters:
            failures.append(f"config[{name}]: filter not declared")
            continue
        inputs[name] = dict(sorted(files.items()))
        spectral_fit = zpl = g2 = g2_err = sat = rate_op = None

        spec_path = files.get("spectrum") or entry.get("spectrum")
        if spec_path:
            try:
                spectrum = read_spectrum(_resolve(base_dir, spec_path))
                if "spectrum" not in files:
                    spectrum = apply_filter(spectrum, config.filters[name])
                spectral_fit = fit_multi_gaussian(spectrum, config.k_components)
                zpl = spectral_fit.zpl.center_nm
            except (QelabError, OSError, ValueError) as exc:
                failures.append(f"spectrum[{name}]: {exc}")

        if files.get("g2"):
            try:
                stream = read_qtag(_resolve(base_dir, files["g2"]))
                ch_a, ch_b = config.g2_channels
                hist = compute_g2(stream, ch_a, ch_b, config.g2_bin_ps, config.g2_max_lag_ps)
                res = g2_zero_pulsed(hist, config.rep_rate_hz, config.n_side_peaks,
                                     config.g2_method)
                g2, g2_err = res.g2_zero, res.g2_zero_err
            except (QelabError, OSError, ValueError) as exc:
                failures.append(f"g2[{name}]: {exc}")

        if files.get("saturation"):
            try:
                curve = read_saturation(_resolve(base_dir, files["saturation"]))
                sat = fit_saturation(curve, config.p_sh_uw).params
                rate_op = float(eval_saturation(sat, config.op_power_uw))
            except (QelabError, OSError, ValueError) as exc:
                failures.append(f"saturation[{name}]: {exc}")

        per_filter[name] = FilterResult(spectral_fit, zpl, g2, g2_err, sat, rate_op)

    lifetime = None
    if entry.get("lifetime"):
        inputs["lifetime"] = entry["lifetime"]
        try:
            stream = read_qtag(_resolve(base_dir, entry["lifetime"]))
            hist = build_decay_histogram(stream, config.lifetime_trigger, config.lifetime_bin_ps)
            lifetime = fit_lifetime(hist).tau_ns
        except (QelabError, OSError, ValueError) as exc:
            failures.append(f"lifetime: {exc}")

    pos = entry.get("position_um")
    return EmitterRecord(
        id=int(entry["id"]),
        position_um=tuple(float(v) for v in pos) if pos is not None else None,
        per_filter=per_filter,
        lifetime_ns=lifetime,
        provenance={"inputs": inputs, "config_hash": config.digest(), "failures": failures},
    )


def _analyze_star(args):
    return analyze_emitter(*args)


def run_pipeline(entries, config=None, base_dir=".", workers=1):
    """Analyse every manifest entry; records come back sorted by id."""
    config = config or PipelineConfig()
    jobs = [(e, config, base_dir) for e in entries]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_analyze_star, jobs))
    else:
        records = [analyze_emitter(*j) for j in jobs]
    for r in records:
        for f in r.failures:
            _logger.warning("emitter %s: %s", r.id, f)
    return sorted(records, key=lambda r: r.id)


@dataclass(frozen=True)
class Summary:
    n: int
    median: float
    mean: float
    q1: float
    q3: float
    min: float
    max: float

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            nan = float("nan")
            return cls(0, nan, nan, nan, nan, nan, nan)
        q1, med, q3 = np.percentile(v, [25, 50, 75])  # linear interpolation (type 7)
        return cls(int(v.size), float(med), float(v.mean()), float(q1), float(q3),
                   float(v.min()), float(v.max()))


@dataclass(frozen=True)
class BatchStats:
    zpl_bin_edges_nm: tuple
    zpl_counts: tuple
    zpl_overflow: int
    zpl_filter: str
    g2_summary: dict
    rinf_summary: dict
    n_single: dict
    n_emitters: int

    @property
    def n_valid_zpl(self):
        return sum(self.zpl_counts) + self.zpl_overflow

    def to_dict(self):
        return {
            "n_emitters": self.n_emitters,
            "zpl_histogram": {"filter": self.zpl_filter,
                              "bin_edges_nm": list(self.zpl_bin_edges_nm),
                              "counts": list(self.zpl_counts),
                              "overflow": self.zpl_overflow},
            "g2_summary": {k: asdict(v) for k, v in sorted(self.g2_summary.items())},
            "rinf_summary": {k: asdict(v) for k, v in sorted(self.rinf_summary.items())},
            "n_single": dict(sorted(self.n_single.items())),
        }


def _finite(x):
    return x is not None and math.isfinite(x)


def aggregate_stats(records, filters):
    """ZPL histogram (2 nm bins over 600-680 nm) and per-filter g2 / R_inf summaries.

    ZPLs come from the first filter in ``filters``; values outside the range
    go to ``zpl_overflow``. Quartiles use linear interpolation.
    """
    filters = list(filters)
    if not filters:
        raise InvalidInputError("at least one filter name is required")
    lo, hi = ZPL_RANGE_NM
    n_bins = int(round((hi - lo) / ZPL_BIN_NM))
    edges = tuple(lo + ZPL_BIN_NM * i for i in range(n_bins + 1))
    counts = [0] * n_bins
    overflow = 0
    g2_vals = {f: [] for f in filters}
    rinf_vals = {f: [] for f in filters}
    for r in records:
        for f in filters:
            res = r.per_filter.get(f)
            if res is None:
                continue
            if f == filters[0] and _finite(res.zpl_nm):
                k = math.floor((res.zpl_nm - lo) / ZPL_BIN_NM)
                if 0 <= k < n_bins:
                    counts[k] += 1
                else:
                    overflow += 1
            if _finite(res.g2_zero):
                g2_vals[f].append(res.g2_zero)
            if res.saturation_params is not None:
                rinf_vals[f].append(res.saturation_params.r_inf_cps)
    if sum(counts) + overflow == 0 and not any(g2_vals.values()) and not any(rinf_vals.values()):
        raise DegenerateDataError("no valid results in any record")
    return BatchStats(
        zpl_bin_edges_nm=edges,
        zpl_counts=tuple(counts),
        zpl_overflow=overflow,
        zpl_filter=filters[0],
        g2_summary={f: Summary.of(sorted(v)) for f, v in g2_vals.items()},
        rinf_summary={f: Summary.of(sorted(v)) for f, v in rinf_vals.items()},
        n_single={f: sum(1 for g in v if g < SINGLE_PHOTON_THRESHOLD) for f, v in g2_vals.items()},
        n_emitters=len(records),
    )


RECORD_COLUMNS = ["id", "x_um", "y_um", "filter", "status", "zpl_nm", "fitted_fwhm_nm",
                  "direct_fwhm_nm", "g2_zero", "g2_zero_err", "r_inf_cps", "p_sat_uw", "c_sh",
                  "p_sh_uw", "c_bg_cps_per_uw", "rate_at_op_power_cps", "lifetime_ns"]
BOX_COLUMNS = ["filter", "n", "min", "q1", "median", "q3", "max", "mean"]


def fmt_csv(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def jsonable(obj):
    """NaN/inf become null so the JSON is standard."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.floating):
        return jsonable(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def records_to_json(records):
    return json.dumps({"records": jsonable([r.to_dict() for r in records])},
                      sort_keys=True, indent=1) + "\n"


def records_from_json(text):
    doc = json.loads(text)
    return [EmitterRecord.from_dict(d) for d in doc["records"]]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt_csv(v) for v in row])


def record_rows(records):
    for r in records:
        x, y = r.position_um if r.position_um is not None else (None, None)
        for name, res in sorted(r.per_filter.items()):
            sp = res.spectral_fit
            sat = res.saturation_params
            yield [r.id, x, y, name, r.status, res.zpl_nm,
                   sp.fitted_fwhm_nm if sp else None, sp.direct_fwhm_nm if sp else None,
                   res.g2_zero, res.g2_zero_err,
                   *(getattr(sat, f) if sat else None
                     for f in ("r_inf_cps", "p_sat_uw", "c_sh", "p_sh_uw", "c_bg_cps_per_uw")),
                   res.rate_at_op_power_cps, r.lifetime_ns]


def emit_report(records, stats, out_dir, formats=("json", "csv")):
    """Write the batch report; returns the list of files written.

    JSON keeps full float precision (exact round trip); CSV values use six
    significant digits. Plot data (ZPL histogram, box-plot coordinates) is
    always written as CSV.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create output directory {out_dir}: {exc}") from None
    written = []

    def path(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    if "json" in formats:
        with open(path("records.json"), "w") as fh:
            fh.write(records_to_json(records))
        with open(path("stats.json"), "w") as fh:
            fh.write(json.dumps(jsonable(stats.to_dict() if stats else {}), sort_keys=True,
                                indent=1) + "\n")
    if "csv" in formats:
        _write_csv(path("records.csv"), RECORD_COLUMNS, record_rows(records))
    hist_rows, g2_rows, rinf_rows = [], [], []
    if stats is not None:
        e = stats.zpl_bin_edges_nm
        hist_rows = [[e[i], e[i + 1], c] for i, c in enumerate(stats.zpl_counts)]
        for name, rows, table in (("g2", g2_rows, stats.g2_summary),
                                  ("rinf", rinf_rows, stats.rinf_summary)):
            for f, s in table.items():
                rows.append([f, s.n, s.min, s.q1, s.median, s.q3, s.max, s.mean])
    _write_csv(path("zpl_histogram.csv"), ["bin_low_nm", "bin_high_nm", "count"], hist_rows)
    _write_csv(path("g2_boxplot.csv"), BOX_COLUMNS, g2_rows)
    _write_csv(path("rinf_boxplot.csv"), BOX_COLUMNS, rinf_rows)
    return written


_FILTER_LINE = re.compile(r"filter\.(\w+)\s*=\s*(\[.*\])\s*,\s*transmission\s*=\s*(\S+)$")


def load_config(path):
    """Read a flat ``key = value`` pipeline config file.

    Values are JSON literals (numbers, lists, quoted strings); bare words are
    taken as strings. Filters are declared as
    ``filter.<name> = [[low, high], ...], transmission=<t>``.
    """
    d, filters = {}, {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        m = _FILTER_LINE.match(s)
        if m:
            try:
                bands = json.loads(m.group(2))
                filters[m.group(1)] = {"passbands": bands, "transmission": float(m.group(3))}
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{n}: {exc}") from None
            continue
        if "=" not in s:
            raise InvalidInputError(f"{path}:{n}: expected key = value")
        key, raw = (p.strip() for p in s.split("=", 1))
        try:
            d[key] = json.loads(raw)
        except ValueError:
            d[key] = raw
    if filters:
        d["filters"] = filters
    return PipelineConfig.from_dict(d)
