"""Cross-run comparison tables and figures.

Everything here reads finished run directories and nothing else, so running
the report twice over the same runs writes byte-identical CSV files.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from persrep import errors
from persrep.analysis import PoolAnalysis
from persrep.evaluation import EvalReport
from persrep.evaluation.protocol import METRIC_TASK

METRIC_ORDER = ("pr_auc", "ndcg", "det_ap", "det_ap50", "det_f1", "seg_ap", "seg_ap50", "seg_f1")


@dataclass
class RunArtifacts:
    path: Path
    label: str
    config: dict
    manifest: dict
    base: EvalReport
    personalized: EvalReport
    analyses: list = field(default_factory=list)

    @property
    def dataset_digest(self) -> str:
        return self.manifest["dataset_digest"]

    @property
    def n_real(self) -> int:
        return int(self.manifest.get("n_real") or 0)


def load_run(path) -> RunArtifacts:
    path = Path(path)
    try:
        config = json.loads((path / "config.json").read_text())
        manifest = json.loads((path / "manifest.json").read_text())
        base = EvalReport.from_json(json.loads((path / "eval" / "base.json").read_text()))
        pers = EvalReport.from_json(json.loads((path / "eval" / "personalized.json").read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise errors.ConfigError(f"{path} is not a finished run directory: {exc}") from None
    analyses = []
    for f in sorted((path / "instances").glob("*/analysis.json")):
        analyses.append(PoolAnalysis.from_json(json.loads(f.read_text())))
    return RunArtifacts(path, path.name, config, manifest, base, pers, analyses)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{v:.6f}"


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _metrics(runs) -> list[str]:
    present = {m for r in runs for rep in (r.base, r.personalized) for m in rep.aggregate}
    return [m for m in METRIC_ORDER if m in present] + sorted(present - set(METRIC_ORDER))


def _unique_labels(runs):
    seen: dict[str, int] = {}
    for r in runs:
        n = seen.get(r.label, 0)
        seen[r.label] = n + 1
        if n:
            r.label = f"{r.label}#{n}"


@dataclass
class ReportResult:
    out_dir: Path
    files: dict[str, Path]


def report(run_dirs: Sequence, out_dir, figures: bool = True) -> ReportResult:
    """Compare base and personalized encoders across runs sharing one dataset."""
    if not run_dirs:
        raise errors.ConfigError("report needs at least one run directory")
    runs = [load_run(p) for p in run_dirs]
    digests = {r.dataset_digest for r in runs}
    if len(digests) > 1:
        raise errors.IncompatibleRuns(f"runs were made on {len(digests)} different datasets")
    _unique_labels(runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = _metrics(runs)
    files: dict[str, Path] = {}

    # comparison table: one base row per distinct backbone, one row per personalized run
    rows, bases = [], {}
    for r in runs:
        key = r.manifest["encoder"]["fingerprint"]
        if key not in bases:
            bases[key] = r
            rows.append(["base", r.manifest["encoder"]["name"], "-"]
                        + [_fmt(r.base.aggregate.get(m)) for m in metrics])
    for r in runs:
        rows.append(["personalized", r.manifest["encoder"]["name"], r.label]
                    + [_fmt(r.personalized.aggregate.get(m)) for m in metrics])
    files["table"] = _write_csv(out / "table.csv", ["variant", "encoder", "run"] + metrics, rows)

    delta_rows = []
    for r in runs:
        b, p = r.base.aggregate, r.personalized.aggregate
        for m in metrics:
            if m in b and m in p:
                delta_rows.append([r.label, METRIC_TASK.get(m, ""), m, _fmt(b[m]), _fmt(p[m]), _fmt(p[m] - b[m])])
    files["deltas"] = _write_csv(out / "deltas.csv",
                                 ["run", "task", "metric", "base", "personalized", "delta"], delta_rows)

    scatter_rows = []
    for r in runs:
        for a in sorted(r.analyses, key=lambda a: a.instance_id):
            acc = r.personalized.per_instance.get(a.instance_id, {}).get("pr_auc")
            scatter_rows.append([r.label, a.instance_id, a.pool_digest, _fmt(a.diversity),
                                 _fmt(a.fidelity_mean), _fmt(acc)])
    files["scatter"] = _write_csv(out / "diversity_fidelity.csv",
                                  ["run", "instance_id", "pool_digest", "diversity", "fidelity", "pr_auc"],
                                  scatter_rows)

    varies_real = len({r.n_real for r in runs}) > 1
    if varies_real:
        scale_rows = []
        for r in sorted(runs, key=lambda r: (r.n_real, r.label)):
            for m in metrics:
                if m in r.personalized.aggregate:
                    scale_rows.append([r.label, r.n_real, m, _fmt(r.base.aggregate.get(m)),
                                       _fmt(r.personalized.aggregate[m])])
        files["scaling"] = _write_csv(out / "scaling.csv",
                                      ["run", "n_real", "metric", "base", "personalized"], scale_rows)

    if figures:
        from persrep import plotting

        first = next(iter(bases.values()))
        files["table_png"] = plotting.plot_comparison(
            metrics, first.base.aggregate, {r.label: r.personalized.aggregate for r in runs},
            out / "comparison.png")
        if scatter_rows:
            pts = [(float(x[3]), float(x[4]), float(x[5])) for x in scatter_rows]
            files["scatter_png"] = plotting.plot_diversity_fidelity(
                [p[0] for p in pts], [p[1] for p in pts], [p[2] for p in pts], out / "diversity_fidelity.png")
        if varies_real:
            metric = "pr_auc" if "pr_auc" in metrics else metrics[0]
            ordered = sorted(runs, key=lambda r: r.n_real)
            files["scaling_png"] = plotting.plot_scaling(
                [r.n_real for r in ordered],
                {"personalized": [r.personalized.aggregate.get(metric, math.nan) for r in ordered],
                 "base": [r.base.aggregate.get(metric, math.nan) for r in ordered]},
                out / "scaling.png", metric)
    return ReportResult(out, files)
