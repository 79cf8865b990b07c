"""Command-line entry point ``qelab``.

Exit codes: 0 success, 1 fatal input error, 2 batch finished but at least one
emitter had a failed analysis step.
"""
import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import __version__
from .correlation import compute_g2, g2_zero_pulsed
from .errors import InvalidInputError, QelabError
from .fileio import (read_qtag, read_saturation, read_scan, read_sim_config, read_spectrum,
                     write_qtag, write_saturation, write_scan, write_spectrum)
from .photophysics import DEFAULT_P_SH_UW, build_decay_histogram, fit_lifetime, fit_saturation
from .pipeline import (RECORD_COLUMNS, aggregate_stats, emit_report, fmt_csv, jsonable,
                       load_config, load_manifest, record_rows, records_from_json, run_pipeline)
from .scan import KERNELS, DetectionParams, detect
from .sim import (SimEmitterConfig, random_layout, simulate_saturation, simulate_scan,
                  simulate_spectrum, simulate_stream)
from .spectroscopy import (FILTER_PRESETS, GaussianComponent, apply_filter, fit_multi_gaussian,
                           wavelength_at_detuning)

EXIT_OK, EXIT_INPUT, EXIT_PARTIAL = 0, 1, 2

# ZPL-relative layout used by ``simulate spectrum`` when no components are given:
# (detuning meV, sigma nm, amplitude)
DEFAULT_SPECTRUM_LAYOUT = ((0.0, 1.7, 1000.0), (2.5, 4.0, 300.0), (17.0, 1.5, 300.0),
                           (71.0, 5.0, 120.0))


def _write_json(obj, path):
    text = json.dumps(jsonable(obj), sort_keys=True, indent=1) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_detect(args):
    image = read_scan(args.scan)
    cands = detect(image, DetectionParams(args.n, args.a, KERNELS[args.kernel]))
    _write_json({"n_candidates": len(cands), "candidates": [c.to_dict() for c in cands]},
                args.out)
    return EXIT_OK


def cmd_spectrum(args):
    spectrum = read_spectrum(args.inp)
    if args.filter:
        spectrum = apply_filter(spectrum, FILTER_PRESETS[args.filter])
    _write_json(fit_multi_gaussian(spectrum, args.k).to_dict(), args.out)
    return EXIT_OK


def cmd_g2(args):
    stream = read_qtag(args.inp)
    max_lag = int(round(args.max_lag_ns * 1000))
    max_lag = -(-max_lag // args.bin_ps) * args.bin_ps  # round up to whole bins
    hist = compute_g2(stream, args.cha, args.chb, args.bin_ps, max_lag, workers=args.workers)
    out = {"histogram": hist.to_dict()}
    if args.rep_mhz:
        out["g2"] = g2_zero_pulsed(hist, args.rep_mhz * 1e6, args.side_peaks,
                                   args.method).to_dict()
    _write_json(out, args.out)
    return EXIT_OK


def cmd_saturation(args):
    fit = fit_saturation(read_saturation(args.inp), args.p_sh_uw)
    _write_json(fit.to_dict(), args.out)
    return EXIT_OK


def cmd_lifetime(args):
    hist = build_decay_histogram(read_qtag(args.inp), args.trigger, args.bin_ps)
    out = fit_lifetime(hist).to_dict()
    out["n_discarded"] = hist.n_discarded
    _write_json(out, args.out)
    return EXIT_OK


def _sim_config(args):
    return read_sim_config(args.config) if args.config else SimEmitterConfig()


def cmd_sim_stream(args):
    cfg = _sim_config(args)
    rec = simulate_stream(cfg, args.power_uw, args.duration_s, args.seed)
    write_qtag(args.out, rec.stream)
    logging.info("wrote %d events (%d signal, %d background detected)", len(rec.stream),
                 rec.detected_signal_photons, rec.detected_background_photons)
    return EXIT_OK


def cmd_sim_scan(args):
    size = args.field_um
    px = int(round(size / args.pixel_um))
    margin = args.margin_um if args.margin_um is not None else 10 * args.pixel_um + 2 * args.psf_um
    emitters = random_layout(args.n_emitters, size, margin, args.min_sep_um, args.brightness,
                             seed=args.seed) if args.n_emitters else []
    image = simulate_scan(emitters, args.psf_um, args.background, (px, px, args.pixel_um),
                          seed=args.seed)
    write_scan(args.out, image)
    if args.truth:
        _write_json({"emitters": [{"x_um": x, "y_um": y, "brightness_cps": b}
                                  for x, y, b in emitters]}, args.truth)
    return EXIT_OK


def _parse_components(text):
    comps = []
    for item in text.split(","):
        c, s, a = (float(v) for v in item.split(":"))
        comps.append(GaussianComponent(c, s, a))
    return comps


def cmd_sim_spectrum(args):
    if args.components:
        comps = _parse_components(args.components)
    else:
        comps = [GaussianComponent(wavelength_at_detuning(d, args.zpl_nm), s, a)
                 for d, s, a in DEFAULT_SPECTRUM_LAYOUT]
    n = int(round((args.wl_max - args.wl_min) / args.wl_step)) + 1
    wl = args.wl_min + args.wl_step * np.arange(n)
    write_spectrum(args.out, simulate_spectrum(comps, args.baseline, wl, args.total_counts,
                                               args.seed))
    return EXIT_OK


def cmd_sim_saturation(args):
    cfg = _sim_config(args)
    if args.powers:
        powers = _floats(args.powers)
    else:
        powers = np.geomspace(args.p_min, args.p_max, args.n_points)
    curve = simulate_saturation(cfg, powers, args.integration_s, args.seed)
    write_saturation(args.out, curve, args.integration_s)
    return EXIT_OK


def cmd_batch(args):
    entries, config, base_dir = load_manifest(args.manifest)
    if args.config:
        config = load_config(args.config)
    filters = [f.strip() for f in args.filters.split(",") if f.strip()] if args.filters \
        else sorted(config.filters)
    unknown = [f for f in filters if f not in config.filters]
    if unknown:
        raise InvalidInputError(f"filters not declared: {unknown}")
    entries = [dict(e, filters={k: v for k, v in e.get("filters", {}).items() if k in filters})
               for e in entries]
    records = run_pipeline(entries, config, base_dir, workers=args.workers)
    try:
        stats = aggregate_stats(records, filters) if records else None
    except QelabError as exc:
        logging.warning("no statistics: %s", exc)
        stats = None
    emit_report(records, stats, args.out, tuple(args.format.split(",")))
    failed = [r.id for r in records if r.failures]
    if failed:
        logging.warning("%d of %d emitters had failures: %s", len(failed), len(records), failed)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args):
    with open(args.records) as fh:
        records = records_from_json(fh.read())
    filters = ([f for f in args.filters.split(",") if f] if args.filters
               else sorted({k for r in records for k in r.per_filter}))
    if args.out:
        try:
            stats = aggregate_stats(records, filters) if records and filters else None
        except QelabError as exc:
            logging.warning("no statistics: %s", exc)
            stats = None
        emit_report(records, stats, args.out, (args.format,))
        return EXIT_OK
    if args.format == "csv":
        wr = csv.writer(sys.stdout, lineterminator="\n")
        wr.writerow(RECORD_COLUMNS)
        for row in record_rows(records):
            wr.writerow([fmt_csv(v) for v in row])
    else:
        _write_json({"records": [r.to_dict() for r in records]}, None)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="qelab", description="Quantum-emitter characterisation toolkit")
    p.add_argument("--version", action="version", version=f"qelab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("detect", help="find bright emitters in a scan image")
    s.add_argument("--scan", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--a", type=float, default=2.5)
    s.add_argument("--kernel", choices=sorted(KERNELS), default="binomial")
    s.add_argument("--out")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("spectrum", help="multi-Gaussian fit of an emission spectrum")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--filter", choices=sorted(FILTER_PRESETS))
    s.add_argument("--out")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("g2", help="second-order correlation from a timestamp file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--cha", type=int, default=0)
    s.add_argument("--chb", type=int, default=1)
    s.add_argument("--bin-ps", type=int, default=256)
    s.add_argument("--max-lag-ns", type=float, default=409.6)
    s.add_argument("--rep-mhz", type=float, default=39.0,
                   help="repetition rate; 0 skips the pulsed g2(0) estimate")
    s.add_argument("--side-peaks", type=int, default=10)
    s.add_argument("--method", choices=("window", "fit"), default="window")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_g2)

    s = sub.add_parser("saturation", help="fit the power-saturation model")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--p-sh-uw", type=float, default=DEFAULT_P_SH_UW)
    s.add_argument("--out")
    s.set_defaults(func=cmd_saturation)

    s = sub.add_parser("lifetime", help="excited-state lifetime from trigger-relative delays")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--trigger", type=int, default=2)
    s.add_argument("--bin-ps", type=int, default=128)
    s.add_argument("--out")
    s.set_defaults(func=cmd_lifetime)

    sim = sub.add_parser("simulate", help="synthetic data from the emitter simulator")
    ssub = sim.add_subparsers(dest="what", required=True)

    s = ssub.add_parser("stream")
    s.add_argument("--config")
    s.add_argument("--power-uw", type=float, required=True)
    s.add_argument("--duration-s", type=float, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim_stream)

    s = ssub.add_parser("scan")
    s.add_argument("--n-emitters", type=int, default=126)
    s.add_argument("--field-um", type=float, default=80.0)
    s.add_argument("--pixel-um", type=float, default=0.2)
    s.add_argument("--psf-um", type=float, default=0.3)
    s.add_argument("--brightness", type=float, default=400.0)
    s.add_argument("--background", type=float, default=20.0)
    s.add_argument("--min-sep-um", type=float, default=3.0)
    s.add_argument("--margin-um", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--truth", help="also write the true emitter positions as JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim_scan)

    s = ssub.add_parser("spectrum")
    s.add_argument("--zpl-nm", type=float, default=619.14)
    s.add_argument("--components", help="center:sigma:amplitude,... (overrides the default layout)")
    s.add_argument("--baseline", type=float, default=20.0)
    s.add_argument("--total-counts", type=int, default=1_000_000)
    s.add_argument("--wl-min", type=float, default=600.0)
    s.add_argument("--wl-max", type=float, default=680.0)
    s.add_argument("--wl-step", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim_spectrum)

    s = ssub.add_parser("saturation")
    s.add_argument("--config")
    s.add_argument("--powers", help="comma-separated powers in uW")
    s.add_argument("--p-min", type=float, default=10.0)
    s.add_argument("--p-max", type=float, default=2000.0)
    s.add_argument("--n-points", type=int, default=30)
    s.add_argument("--integration-s", type=float, default=0.01)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim_saturation)

    s = sub.add_parser("batch", help="analyse every emitter in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="key = value pipeline config (overrides the manifest's)")
    s.add_argument("--filters", help="comma-separated filter names; first one feeds the ZPL histogram")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--format", default="json,csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_batch)

    s = sub.add_parser("report", help="re-emit a report from saved records")
    s.add_argument("--records", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--filters")
    s.add_argument("--out", help="report directory; without it records go to stdout")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (QelabError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"qelab: error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
