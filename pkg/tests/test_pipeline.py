import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datasets import (SUMMARY_TARGETS, summary_fixture_records, summary_values, write_emitter,
                      write_manifest)
from qelab.errors import DegenerateDataError, InvalidInputError
from qelab.pipeline import (EmitterRecord, FilterResult, PipelineConfig, aggregate_stats,
                            emit_report, jsonable, load_config, load_manifest, records_from_json,
                            records_to_json, run_pipeline)
from qelab.sim import SimEmitterConfig, expected_rate


def record(i, zpl=None, g2=None, f="cfg1"):
    return EmitterRecord(i, (0.0, 0.0), {f: FilterResult(zpl_nm=zpl, g2_zero=g2)})


@pytest.fixture(scope="module")
def batch_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("batch")
    entries = [write_emitter(str(d), i, seed=100 + i, zpl_nm=612.0 + 2.5 * i) for i in range(1, 11)]
    return str(d), entries


def test_empty_manifest(tmp_path):
    path = write_manifest(str(tmp_path), [])
    entries, config, base = load_manifest(path)
    assert run_pipeline(entries, config, base) == []


def test_bad_manifest_is_fatal(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(InvalidInputError):
        load_manifest(str(p))
    p.write_text(json.dumps({"emitters": [{"filters": {}}]}))
    with pytest.raises(InvalidInputError):
        load_manifest(str(p))


def test_single_emitter_matches_ground_truth(batch_dir):
    d, entries = batch_dir
    (rec,) = run_pipeline(entries[:1], PipelineConfig(g2_method="fit"), d)
    assert rec.status == "complete"
    res = rec.per_filter["cfg1"]
    assert res.zpl_nm == pytest.approx(614.5, abs=0.3)
    assert res.g2_zero < 0.1
    assert rec.lifetime_ns == pytest.approx(5.87, rel=0.05)
    cfg = SimEmitterConfig(collection_efficiency=0.3)
    assert res.rate_at_op_power_cps == pytest.approx(expected_rate(cfg, 120.0), rel=0.1)
    assert rec.provenance["config_hash"] == PipelineConfig(g2_method="fit").digest()


def test_one_corrupt_spectrum_is_isolated(batch_dir, tmp_path):
    d, entries = batch_dir
    good = run_pipeline(entries, PipelineConfig(), d)
    assert [r.status for r in good] == ["complete"] * 10

    bad = [dict(e) for e in entries]
    broken = tmp_path / "broken.csv"
    broken.write_text("wavelength_nm,counts\n600,abc\n")
    bad[3] = dict(bad[3], filters={"cfg1": dict(bad[3]["filters"]["cfg1"],
                                                spectrum=str(broken))})
    out = run_pipeline(bad, PipelineConfig(), d)
    assert len(out) == 10
    assert [r.status for r in out].count("complete") == 9
    assert out[3].status == "failed-spectrum"
    assert out[3].per_filter["cfg1"].g2_zero == good[3].per_filter["cfg1"].g2_zero
    for i in set(range(10)) - {3}:
        assert records_to_json([out[i]]) == records_to_json([good[i]])


def test_undeclared_filter_recorded(batch_dir):
    d, entries = batch_dir
    e = dict(entries[0], filters={"nope": entries[0]["filters"]["cfg1"]})
    (rec,) = run_pipeline([e], PipelineConfig(), d)
    assert rec.status == "failed-config"
    assert "nope" not in rec.per_filter


def test_workers_do_not_change_records(batch_dir):
    d, entries = batch_dir
    one = run_pipeline(entries[::-1], PipelineConfig(), d, workers=1)
    four = run_pipeline(entries, PipelineConfig(), d, workers=4)
    assert records_to_json(one) == records_to_json(four)
    assert [r.id for r in one] == sorted(r.id for r in one)


def test_json_round_trip_and_report_determinism(batch_dir, tmp_path):
    d, entries = batch_dir
    recs = run_pipeline(entries, PipelineConfig(), d)
    assert records_from_json(records_to_json(recs)) == recs
    stats = aggregate_stats(recs, ["cfg1"])
    a = emit_report(recs, stats, str(tmp_path / "a"))
    b = emit_report(run_pipeline(entries, PipelineConfig(), d), stats, str(tmp_path / "b"))
    for pa, pb in zip(a, b):
        with open(pa, "rb") as fa, open(pb, "rb") as fb:
            assert fa.read() == fb.read(), os.path.basename(pa)


def test_n_single_matches_csv(batch_dir, tmp_path):
    d, entries = batch_dir
    recs = run_pipeline(entries, PipelineConfig(), d)
    stats = aggregate_stats(recs, ["cfg1"])
    emit_report(recs, stats, str(tmp_path), formats=("csv",))
    with open(tmp_path / "records.csv") as fh:
        rows = list(csv.DictReader(fh))
    direct = sum(1 for r in rows if r["filter"] == "cfg1" and r["g2_zero"] and float(r["g2_zero"]) < 0.5)
    assert stats.n_single["cfg1"] == direct == 10


def test_empty_stats_give_headers_only(tmp_path):
    files = emit_report([], None, str(tmp_path), formats=("csv",))
    for p in files:
        with open(p) as fh:
            assert len(fh.read().strip().splitlines()) == 1


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InvalidInputError):
        emit_report([], None, str(blocker / "sub"))


def test_summary_examples():
    stats = aggregate_stats([record(1, g2=0.3), record(2, g2=0.5), record(3, g2=0.9)], ["cfg1"])
    s = stats.g2_summary["cfg1"]
    assert s.median == 0.5
    assert s.mean == pytest.approx(0.5667, abs=1e-4)
    assert stats.n_single["cfg1"] == 1
    stats = aggregate_stats([record(1, zpl=619.0)], ["cfg1"])
    k = stats.zpl_bin_edges_nm.index(618.0)
    assert stats.zpl_counts[k] == 1 and sum(stats.zpl_counts) == 1
    assert stats.zpl_bin_edges_nm[k + 1] == 620.0


def test_no_valid_records():
    with pytest.raises(DegenerateDataError):
        aggregate_stats([record(1)], ["cfg1"])
    with pytest.raises(InvalidInputError):
        aggregate_stats([record(1, g2=0.2)], [])


def test_overflow_bucket():
    stats = aggregate_stats([record(1, zpl=590.0), record(2, zpl=680.0), record(3, zpl=600.0)],
                            ["cfg1"])
    assert stats.zpl_overflow == 2 and stats.zpl_counts[0] == 1
    assert stats.n_valid_zpl == 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.one_of(st.none(), st.floats(580, 700)),
                          st.one_of(st.none(), st.floats(0, 2))), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_aggregate_properties(values, rnd):
    recs = [record(i, z, g) for i, (z, g) in enumerate(values)]
    try:
        stats = aggregate_stats(recs, ["cfg1"])
    except DegenerateDataError:
        assert all(z is None and g is None for z, g in values)
        return
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    dump = lambda st_: json.dumps(jsonable(st_.to_dict()), sort_keys=True)
    assert dump(aggregate_stats(shuffled, ["cfg1"])) == dump(stats)
    assert stats.n_valid_zpl == sum(z is not None for z, _ in values)
    s = stats.g2_summary["cfg1"]
    if s.n:
        assert s.min <= s.q1 <= s.median <= s.q3 <= s.max


def test_summary_values_helper():
    for f, (m, mu) in SUMMARY_TARGETS.items():
        v = summary_values(m, mu)
        assert np.median(v) == m
        assert v.mean() == pytest.approx(mu, abs=1e-12)


def test_summary_fixture_reproduced():
    stats = aggregate_stats(summary_fixture_records(), list(SUMMARY_TARGETS))
    for f, (m, mu) in SUMMARY_TARGETS.items():
        assert stats.g2_summary[f].median == pytest.approx(m, abs=1e-12)
        assert stats.g2_summary[f].mean == pytest.approx(mu, abs=1e-12)


def test_load_config(tmp_path):
    p = tmp_path / "pipe.cfg"
    p.write_text("# batch settings\nk_components = 3\ng2_method = fit\ng2_channels = [0, 1]\n"
                 "filter.narrow = [[616, 622]], transmission=0.5\n")
    cfg = load_config(str(p))
    assert cfg.k_components == 3 and cfg.g2_method == "fit"
    assert cfg.filters["narrow"].passbands == ((616, 622),)
    assert cfg.filters["narrow"].peak_transmission == 0.5
    assert "cfg1" in cfg.filters
    p.write_text("bogus_key = 1\n")
    with pytest.raises(InvalidInputError):
        load_config(str(p))
    p.write_text("no equals sign\n")
    with pytest.raises(InvalidInputError):
        load_config(str(p))
