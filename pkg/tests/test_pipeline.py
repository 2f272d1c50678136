import json
import os
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from codapipe.cluster import adjusted_rand_index
from codapipe.errors import ConfigError, DuplicateEntity, NegativeValue, ParseError
from codapipe.pipeline.cli import main
from codapipe.pipeline.config import load_config
from codapipe.pipeline.ingest import aggregate_rows, ingest, read_table
from codapipe.pipeline.run import run_pipeline, strip_timestamp

from conftest import write_pipeline_inputs

SVG_NS = "{http://www.w3.org/2000/svg}"


def _csv(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _gids(path, prefix):
    root = ET.parse(path).getroot()
    return [el.get("id") for el in root.iter() if (el.get("id") or "").startswith(prefix)]


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    cfg, ids, truth, hist_cell = write_pipeline_inputs(tmp_path_factory.mktemp("run") / "in")
    assert main(["run", str(cfg)]) == 0
    out = cfg.parent / "out"
    return out, json.loads((out / "report.json").read_text()), ids, truth


# -- ingest ----------------------------------------------------------------------


def test_aggregate_mean_of_three_rows():
    ids, vals, log = aggregate_rows(["A", "GBR-EW", "GBR-NI", "GBR-S"],
                                    np.array([[1.0, 1.0], [3.0, 1.0], [6.0, 2.0], [9.0, 3.0]]),
                                    {"GBR": ("GBR-EW", "GBR-NI", "GBR-S")})
    assert ids == ["A", "GBR"]
    assert vals[1, 0] == 6.0 and vals[1, 1] == 2.0
    assert len(log) == 1


def test_aggregate_ignores_missing_members():
    _, vals, _ = aggregate_rows(["a", "b"], np.array([[np.nan, 2.0], [4.0, np.nan]]), {"ab": ("a", "b")})
    np.testing.assert_array_equal(vals, [[4.0, 2.0]])


def test_aggregate_unknown_member(tmp_path):
    with pytest.raises(ConfigError):
        aggregate_rows(["a"], np.ones((1, 2)), {"x": ("a", "zz")})


@pytest.mark.parametrize("token", ["", "NA", "nan", "..", " n/a "])
def test_missing_tokens(tmp_path, token):
    ids, labels, vals = read_table(_csv(tmp_path, f"id,a,b\nX,1,{token}\nY,2,3\n"))
    assert np.isnan(vals[0, 1]) and not np.isnan(vals[1]).any()


def test_empty_cell_masked(pipeline_inputs):
    cfg, ids, truth, (i, j) = pipeline_inputs
    data = ingest(load_config(cfg))
    assert data.mask.total == 7
    assert data.mask.cells[i, j]
    assert data.table.shape == (33, 14)
    assert "UK" in data.table.row_ids and "DROPME" not in data.table.row_ids


@pytest.mark.parametrize("body, row, col", [
    ("id,a,b\nX,1,2\nY,oops,3\n", 3, 2),
    ("id,a,b\nX,1,2\nY,1,0\n", 3, 3),
    ("id,a,b\nX,1,2,4\n", 2, None),
])
def test_parse_error_location(tmp_path, body, row, col):
    with pytest.raises(ParseError) as info:
        read_table(_csv(tmp_path, body))
    assert info.value.row == row
    assert info.value.column == col


def test_negative_and_duplicate(tmp_path):
    with pytest.raises(NegativeValue):
        read_table(_csv(tmp_path, "id,a,b\nX,1,-2\n"))
    with pytest.raises(DuplicateEntity):
        read_table(_csv(tmp_path, "id,a,b\nX,1,2\nX,3,4\n"))


# -- config ----------------------------------------------------------------------


def test_config_values(pipeline_inputs):
    cfg = load_config(pipeline_inputs[0])
    assert cfg.aggregate == {"UK": ("UK-A", "UK-B", "UK-C")}
    assert cfg.exclude_columns == ("dropped_total",)
    assert cfg.k_range == (2, 5)
    assert cfg.imputation.repetitions == 3
    assert cfg.tsne.perplexity == 8.0
    assert cfg.table.is_absolute() or cfg.table.exists()


def test_config_hash_stable(tmp_path):
    a = write_pipeline_inputs(tmp_path / "a")[0]
    b = write_pipeline_inputs(tmp_path / "b")[0]
    ca, cb = load_config(a), load_config(b)
    assert ca.hash() == cb.hash()
    assert ca.hash() == ca.with_overrides(out_dir=tmp_path / "elsewhere").hash()
    assert ca.hash() != ca.with_overrides(seed=1).hash()


@pytest.mark.parametrize("extra", ["[bogus]\nx = 1\n", "[rmode]\n", "[qmode]\nvariation = fancy\n"])
def test_config_rejects(tmp_path, extra):
    cfg = write_pipeline_inputs(tmp_path)[0]
    text = cfg.read_text()
    if extra == "[rmode]\n":
        text = text.replace("k = 3\nk_range", "k = 1\nk_range")
    elif "variation" in extra:
        text = text.replace("[qmode]\n", extra)
    else:
        text += extra
    cfg.write_text(text)
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_missing_input_file(tmp_path):
    cfg = write_pipeline_inputs(tmp_path)[0]
    (tmp_path / "history.csv").unlink()
    with pytest.raises(ConfigError):
        load_config(cfg)


# -- cli -------------------------------------------------------------------------


def test_validate_ok(pipeline_inputs, capsys):
    assert main(["validate", str(pipeline_inputs[0])]) == 0
    assert "ok" in capsys.readouterr().out


def test_validate_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[input]\n")
    assert main(["validate", str(bad)]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_run_bad_table_exit_code(tmp_path):
    cfg = write_pipeline_inputs(tmp_path)[0]
    table = tmp_path / "table.csv"
    table.write_text(table.read_text().replace("DROPME,1.0", "DROPME,-1.0", 1))
    assert main(["run", str(cfg)]) == 1
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["failed_stage"] == "ingest"
    assert "NegativeValue" in report["stages"]["ingest"]["error"]


# -- full run --------------------------------------------------------------------


def test_outputs_present(finished_run):
    out = finished_run[0]
    for name in ("report.json", "assignments.csv", "variation_matrix.csv", "tsne.svg",
                 "qmode_dendrogram.svg", "imputation_report.json"):
        assert (out / name).exists(), name
    assert list(out.glob("biplot_cluster*.svg"))


def test_all_stages_ok(finished_run):
    report = finished_run[1]
    assert {s["status"] for s in report["stages"].values()} == {"ok"}
    assert report["exit_code"] == 0


def test_kmeans_recovers_blobs(finished_run):
    _, report, ids, truth = finished_run
    labels = report["stages"]["rmode"]["kmeans"]["labels"]
    assert adjusted_rand_index(labels, truth) == 1.0


def test_assignments_csv(finished_run):
    out, report, ids, _ = finished_run
    lines = (out / "assignments.csv").read_text().splitlines()
    assert lines[0] == "entity_id,kmeans,divisive,gmm"
    assert [ln.split(",")[0] for ln in lines[1:]] == ids


def test_provenance_seeds(finished_run):
    prov = finished_run[1]["provenance"]
    assert set(prov["seeds"]) >= {"imputation", "kmeans", "gmm", "diagnostics", "tsne"}
    assert prov["seeds"]["imputation"] == [20221, 20222, 20223]
    assert any(k.startswith("pca_cluster") for k in prov["seeds"])
    assert len(prov["config_hash"]) == 64
    assert set(prov["input_sha256"]) == {"table", "history"}


def test_imputation_counts(finished_run):
    counts = finished_run[1]["stages"]["impute"]["counts"]
    assert counts == {"observed": 455, "trend_regression": 1, "iterative_knn_lts": 6}


@pytest.mark.parametrize("name", ["tsne.svg", "qmode_dendrogram.svg", "biplot_cluster1.svg"])
def test_svg_well_formed(finished_run, name):
    root = ET.parse(finished_run[0] / name).getroot()
    assert root.tag == SVG_NS + "svg"


def test_dendrogram_leaves(finished_run):
    leaves = _gids(finished_run[0] / "qmode_dendrogram.svg", "leaf-")
    assert sorted(leaves) == sorted(f"leaf-{i}" for i in range(14))


def test_biplot_arrows(finished_run):
    out, report = finished_run[:2]
    for entry in report["stages"]["pca"]["clusters"]:
        if entry["status"] != "ok":
            continue
        arrows = _gids(out / f"biplot_cluster{entry['cluster']}.svg", "arrow-")
        assert len(arrows) == len(entry["components"])


def test_tsne_points(finished_run):
    out, _, ids, _ = finished_run
    assert sorted(_gids(out / "tsne.svg", "point-")) == sorted(f"point-{i}" for i in ids)


def test_variation_matrix_csv(finished_run):
    import pandas as pd

    out, report = finished_run[:2]
    frame = pd.read_csv(out / "variation_matrix.csv", index_col=0, float_precision="round_trip")
    np.testing.assert_array_equal(frame.to_numpy(), report["stages"]["qmode"]["variation_matrix"])


# -- determinism and isolation ---------------------------------------------------


def _report_bytes(out):
    report = json.loads((out / "report.json").read_text())
    return json.dumps(strip_timestamp(report), sort_keys=True)


def test_rerun_identical(tmp_path):
    cfg = load_config(write_pipeline_inputs(tmp_path)[0])
    r1, _ = run_pipeline(cfg.with_overrides(out_dir=tmp_path / "o1"))
    r2, _ = run_pipeline(cfg.with_overrides(out_dir=tmp_path / "o2"))
    assert _report_bytes(tmp_path / "o1") == _report_bytes(tmp_path / "o2")
    for name in ("assignments.csv", "variation_matrix.csv", "tsne.svg", "qmode_dendrogram.svg",
                 "imputation_report.json", "biplot_cluster1.svg"):
        assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o2" / name).read_bytes()


def _run_with_threads(cfg, out, threads):
    env = dict(os.environ)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)
    subprocess.run([sys.executable, "-m", "codapipe.pipeline.cli", "run", str(cfg),
                    "--out-dir", str(out)], check=True, env=env, capture_output=True)


def test_thread_count_does_not_change_report(tmp_path):
    cfg = write_pipeline_inputs(tmp_path, tsne=False)[0]
    _run_with_threads(cfg, tmp_path / "t1", 1)
    _run_with_threads(cfg, tmp_path / "t4", 4)
    assert _report_bytes(tmp_path / "t1") == _report_bytes(tmp_path / "t4")


def test_skip_tsne_isolated(tmp_path):
    cfg = write_pipeline_inputs(tmp_path)[0]
    assert main(["run", str(cfg), "--out-dir", str(tmp_path / "full")]) == 0
    assert main(["run", str(cfg), "--out-dir", str(tmp_path / "lean"), "--skip-tsne"]) == 0
    full, lean = tmp_path / "full", tmp_path / "lean"
    assert not (lean / "tsne.svg").exists()
    for path in full.iterdir():
        if path.name in ("report.json", "tsne.svg"):
            continue
        assert path.read_bytes() == (lean / path.name).read_bytes(), path.name
    a = json.loads((full / "report.json").read_text())
    b = json.loads((lean / "report.json").read_text())
    assert b["stages"]["tsne"] == {"status": "disabled"}
    for stage in ("ingest", "impute", "transform", "rmode", "qmode", "pca"):
        assert a["stages"][stage] == b["stages"][stage]


def test_cli_seed_override(tmp_path):
    cfg = write_pipeline_inputs(tmp_path, tsne=False)[0]
    assert main(["run", str(cfg), "--seed", "5", "--repetitions", "2"]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["provenance"]["seeds"]["imputation"] == [5, 6]
    assert report["provenance"]["config"]["seed"] == 5


def test_failed_stage_partial_report(tmp_path, capsys):
    cfg = write_pipeline_inputs(tmp_path)[0]
    cfg.write_text(cfg.read_text().replace("perplexity = 8", "perplexity = 40"))
    assert main(["run", str(cfg)]) == 1
    out = tmp_path / "out"
    report = json.loads((out / "report.json").read_text())
    assert report["failed_stage"] == "tsne"
    assert report["stages"]["rmode"]["status"] == "ok"
    assert "PerplexityUnreachable" in report["stages"]["tsne"]["error"]
    assert report["stages"]["qmode"]["status"] == "skipped"
    assert report["stages"]["pca"]["status"] == "skipped"
    assert (out / "assignments.csv").exists()
    assert "stage tsne" in capsys.readouterr().err
