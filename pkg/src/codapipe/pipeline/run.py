"""End-to-end orchestration.

Stages run in a fixed order and each one records ``status`` in the report.
The first failure stops the run; the report written at that point marks
the failed stage with its error and every later stage as skipped.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np

from .. import __version__
from ..cluster import (
    adjusted_rand_index,
    diagnostics,
    divisive_hierarchical,
    gmm_em,
    kmeans,
    qmode_ward,
)
from ..coda import (
    CompositionTable,
    aitchison_distances,
    euclidean_distances,
    ilr_coordinates,
    variation_matrix_classical,
)
from ..impute import impute_table
from ..pca import select_pca
from ..robust import variation_matrix_robust
from ..tsne import affinities, embed
from .ingest import ingest
from .render import render_biplot, render_dendrogram, render_tsne

log = logging.getLogger(__name__)

STAGES = ("ingest", "impute", "transform", "rmode", "tsne", "qmode", "pca")
TIMESTAMP_KEY = "generated_at"


class StageFailure(Exception):
    def __init__(self, stage, error):
        self.stage = stage
        self.error = error
        super().__init__(f"stage {stage} failed: {type(error).__name__}: {error}")


def _clean(obj):
    """Make numpy content JSON-serialisable."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _dump(obj, path):
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions():
    import matplotlib
    import pandas
    import scipy

    return {"codapipe": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pandas.__version__, "matplotlib": matplotlib.__version__}


class _Run:
    def __init__(self, config):
        self.cfg = config
        self.out = Path(config.out_dir)
        self.report = {
            "stages": {s: {"status": "pending"} for s in STAGES},
            "provenance": {
                "config_hash": config.hash(),
                "config": {k: v for k, v in config.to_dict().items() if k != "out_dir"},
                "versions": _versions(),
                "seeds": {},
            },
        }
        self.seeds = self.report["provenance"]["seeds"]

    def stage(self, name, fn):
        entry = self.report["stages"][name]
        try:
            result = fn()
        except Exception as exc:  # every stage error is reported, then re-raised
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            for later in STAGES[STAGES.index(name) + 1:]:
                if self.report["stages"][later]["status"] == "pending":
                    self.report["stages"][later]["status"] = "skipped"
            raise StageFailure(name, exc) from exc
        entry["status"] = "ok"
        if result:
            entry.update(result)

    # -- stages ---------------------------------------------------------------

    def do_ingest(self):
        self.data = ingest(self.cfg)
        inputs = {"table": _file_digest(self.cfg.table)}
        if self.cfg.history:
            inputs["history"] = _file_digest(self.cfg.history)
        self.report["provenance"]["input_sha256"] = inputs
        t = self.data.table
        return {"rows": len(t.row_ids), "columns": len(t.labels), "missing": self.data.mask.total,
                "row_ids": list(t.row_ids), "labels": list(t.labels), "log": self.data.log}

    def do_impute(self):
        imp = self.cfg.imputation
        filled, rep = impute_table(
            self.data.table, self.data.history, self.cfg.target_year,
            repetitions=imp.repetitions, seed=self.cfg.seed, k=imp.k,
            trim_fraction=imp.trim_fraction, tol=imp.tol, max_iter=imp.max_iter,
            lts_starts=imp.lts_starts, strict=imp.strict)
        self.table = filled
        body = rep.to_dict()
        _dump(body, self.out / "imputation_report.json")
        if rep.repetitions:
            self.seeds["imputation"] = [self.cfg.seed + r for r in range(rep.repetitions)]
        return {"counts": body["counts"], "nonconverged_repetitions": len(rep.nonconverged),
                "regression_fallbacks": rep.fallbacks, "artifact": "imputation_report.json"}

    def do_transform(self):
        self.closed = self.table.closed()
        self.coords = ilr_coordinates(self.closed)
        return {"coordinates": "ilr (pivot)", "dimension": self.coords.values.shape[1]}

    def do_rmode(self):
        cfg, seed = self.cfg, self.cfg.seed
        z = self.coords.values
        n = len(z)
        K = cfg.k_rmode
        km = kmeans(z, K, restarts=cfg.restarts, seed=seed)
        self.seeds["kmeans"] = seed
        tree = divisive_hierarchical(aitchison_distances(self.closed.values), self.closed.row_ids)
        diana = tree.cut(K)
        gm = gmm_em(z, K, seed=seed)
        self.seeds["gmm"] = seed
        lo, hi = cfg.k_range
        ks = range(max(2, lo), min(hi, n - 1) + 1)
        curve = diagnostics(z, ks, seed=seed, restarts=cfg.restarts)
        self.seeds["diagnostics"] = seed
        self.kmeans = km
        with open(self.out / "assignments.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "kmeans", "divisive", "gmm"])
            for i, r in enumerate(self.closed.row_ids):
                w.writerow([r, int(km.labels[i]), int(diana[i]), int(gm.labels[i])])
        return {
            "headline": "kmeans",
            "kmeans": km.to_dict() | {"centers": km.params["centers"]},
            "divisive": {"labels": diana, "tree": tree.to_dict()},
            "gmm": gm.to_dict() | {"bic": gm.params["bic"],
                                   "covariance_model": gm.params["covariance_model"]},
            "ari": {
                "kmeans_vs_divisive": adjusted_rand_index(km.labels, diana),
                "kmeans_vs_gmm": adjusted_rand_index(km.labels, gm.labels),
                "divisive_vs_gmm": adjusted_rand_index(diana, gm.labels),
            },
            "diagnostics": curve.to_dict(),
            "artifact": "assignments.csv",
        }

    def do_tsne(self):
        ts = self.cfg.tsne
        if not ts.enabled:
            return {"status": "disabled"}
        P = affinities(euclidean_distances(self.coords.values), ts.perplexity)
        emb = embed(P, seed=self.cfg.seed, n_iter=ts.n_iter, learning_rate=ts.learning_rate,
                    exaggeration=ts.exaggeration, exaggeration_iters=ts.exaggeration_iters)
        self.seeds["tsne"] = self.cfg.seed
        render_tsne(emb, self.kmeans.labels, self.closed.row_ids, self.out / "tsne.svg",
                    title="t-SNE map coloured by k-means cluster")
        return {"embedding": emb.to_dict(), "artifact": "tsne.svg"}

    def do_qmode(self):
        if self.cfg.variation == "robust":
            vm = variation_matrix_robust(self.closed)
        else:
            vm = variation_matrix_classical(self.closed)
        frame = vm.to_frame()
        frame.index.name = "component"
        frame.to_csv(self.out / "variation_matrix.csv", float_format="%.17g", lineterminator="\n")
        tree = qmode_ward(vm)
        K = min(self.cfg.k_qmode, len(vm.labels))
        self.groups = tree.groups(K)
        render_dendrogram(tree, self.out / "qmode_dendrogram.svg",
                          title=f"Ward clustering of components ({vm.method} variation matrix)",
                          ylabel="Ward height (log-ratio variance scale)")
        return {"variation": vm.method, "variation_matrix": vm.t, "tree": tree.to_dict(),
                "K": K, "groups": [list(g) for g in self.groups],
                "artifacts": ["variation_matrix.csv", "qmode_dendrogram.svg"]}

    def do_pca(self):
        models, artifacts = [], []
        for k, group in enumerate(self.groups, start=1):
            entry = {"cluster": k, "components": list(group)}
            if len(group) < self.cfg.pca_min_parts:
                entry["status"] = f"skipped: fewer than {self.cfg.pca_min_parts} components"
                models.append(entry)
                continue
            sub = self.closed.select(group)
            coords = ilr_coordinates(CompositionTable(sub.values, sub.row_ids, sub.labels))
            chosen, ratios = select_pca(coords, seed=self.cfg.seed)
            self.seeds[f"pca_cluster{k}"] = self.cfg.seed
            name = f"biplot_cluster{k}.svg"
            render_biplot(chosen, self.out / name, title=f"Variable cluster {k}")
            artifacts.append(name)
            entry.update(status="ok", ratios=ratios, model=chosen.to_dict())
            models.append(entry)
        return {"clusters": models, "artifacts": artifacts}


def run_pipeline(config, write_report: bool = True):
    """Run every stage and write artifacts to ``config.out_dir``.

    Returns
    -------
    (dict, int)
        The report and an exit code: 0 on success, 1 when a stage failed.
    """
    runner = _Run(config)
    runner.out.mkdir(parents=True, exist_ok=True)
    code = 0
    try:
        runner.stage("ingest", runner.do_ingest)
        runner.stage("impute", runner.do_impute)
        runner.stage("transform", runner.do_transform)
        runner.stage("rmode", runner.do_rmode)
        if config.tsne.enabled:
            runner.stage("tsne", runner.do_tsne)
        else:
            runner.report["stages"]["tsne"] = {"status": "disabled"}
        runner.stage("qmode", runner.do_qmode)
        runner.stage("pca", runner.do_pca)
    except StageFailure as failure:
        log.error("%s", failure)
        runner.report["failed_stage"] = failure.stage
        code = 1
    runner.report["exit_code"] = code
    runner.report[TIMESTAMP_KEY] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    if write_report:
        _dump(runner.report, runner.out / "report.json")
    return _clean(runner.report), code


def strip_timestamp(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != TIMESTAMP_KEY}
