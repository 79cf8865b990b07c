"""A small survey: find emitters in a scan, measure each, summarise.

A synthetic confocal scan is searched for bright spots. For every spot a
spectrum, an HBT timestamp file and a saturation sweep are simulated and
written to disk with a manifest, then the batch pipeline analyses them and
writes the report with the plot-data CSVs.

    python demos/batch_survey.py [output_dir]
"""
import json
import os
import sys
import tempfile

import numpy as np

from qelab.fileio import write_qtag, write_saturation, write_spectrum
from qelab.pipeline import PipelineConfig, aggregate_stats, emit_report, run_pipeline
from qelab.scan import DetectionParams, detect
from qelab.sim import (SimEmitterConfig, derive_seed, random_layout, simulate_saturation,
                       simulate_scan, simulate_spectrum, simulate_stream)
from qelab.spectroscopy import GaussianComponent, multi_gaussian, wavelength_at_detuning

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="qelab-survey-")
data = os.path.join(out, "data")
os.makedirs(data, exist_ok=True)
rng = np.random.default_rng(0)

layout = random_layout(12, 30.0, 2.4, 3.0, 400.0, seed=5)
scan = simulate_scan(layout, 0.3, 20.0, (150, 150, 0.2), seed=5)
found = detect(scan, DetectionParams(10, 2.5))
print(f"{len(found)} candidates in the scan ({len(layout)} placed)")

wl = np.arange(600.0, 680.0001, 0.1)
entries = []
for i, cand in enumerate(found, 1):
    seed = derive_seed(5, i)
    zpl = rng.normal(620.0, 4.0)
    comps = [GaussianComponent(wavelength_at_detuning(d, zpl), s, a)
             for d, s, a in ((0, 1.7, 1000), (2.5, 4.0, 300), (17, 1.5, 300), (71, 5.0, 120))]
    # emitters differ in brightness and in how much background they sit on
    emitter = SimEmitterConfig(collection_efficiency=rng.uniform(0.1, 0.4),
                               background_cps_per_uw=rng.uniform(0, 4e4))
    stem = os.path.join(data, f"e{i}")
    write_spectrum(stem + ".csv", simulate_spectrum(
        comps, 20.0, wl, int(10 * multi_gaussian(wl, comps, 20.0).sum()), seed=seed))
    write_qtag(stem + ".qtag", simulate_stream(emitter, 200.0, 0.02, seed=seed).stream)
    write_saturation(stem + "_sat.csv", simulate_saturation(
        emitter, np.geomspace(10, 3000, 15), 2e-3, seed=seed), 2e-3)
    files = {"spectrum": f"e{i}.csv", "g2": f"e{i}.qtag", "saturation": f"e{i}_sat.csv"}
    entries.append({"id": i, "position_um": list(cand.centroid_um),
                    "filters": {"cfg1": files}, "lifetime": files["g2"]})

with open(os.path.join(data, "manifest.json"), "w") as fh:
    json.dump({"emitters": entries, "config": {"g2_method": "fit"}}, fh, indent=1)

config = PipelineConfig(g2_method="fit")
records = run_pipeline(entries, config, base_dir=data, workers=2)
stats = aggregate_stats(records, ["cfg1"])
files = emit_report(records, stats, os.path.join(out, "report"))

g2 = stats.g2_summary["cfg1"]
print(f"g2(0): median {g2.median:.2f}, mean {g2.mean:.2f}, "
      f"{stats.n_single['cfg1']}/{g2.n} below 0.5")
print(f"ZPLs histogrammed: {stats.n_valid_zpl}")
print("report files:", *[os.path.relpath(f, out) for f in files], sep="\n  ")
