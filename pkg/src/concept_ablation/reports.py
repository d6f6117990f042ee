"""Report files: canonical JSON, flat CSV tables and SVG charts.

Everything written here is a pure function of its inputs, so repeated runs
produce identical bytes. Wall-clock data lives only in the run manifest.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ablation import TrainingLog  # noqa: E402
from .evaluation import EvalReport  # noqa: E402

SCORE_COLUMNS = ("concept", "model-tag", "score-posterior", "score-raw", "stderr", "n", "label", "prompt")
LOG_COLUMNS = ("run", "method", "step", "loss", "score")
SVG_SALT = "concept-ablation"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(obj, path: Path) -> None:
    Path(path).write_text(canonical_json(obj))


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def write_scores_csv(report: EvalReport, path: Path) -> None:
    rows = [(s.concept, s.model, repr(s.value), repr(s.raw), repr(s.stderr), s.n, s.label, s.prompt) for s in report.scores]
    _write_csv(path, SCORE_COLUMNS, rows)


def write_training_logs(logs: Mapping[str, TrainingLog], outdir: Path) -> str:
    rows = []
    for run in sorted(logs):
        for r in logs[run].to_rows():
            rows.append((run, r["method"], r["step"], repr(r["loss"]), "" if r["score"] is None else repr(r["score"])))
    _write_csv(Path(outdir) / "training_log.csv", LOG_COLUMNS, rows)
    return "training_log.csv"


def _save_svg(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def probe_chart(logs: Mapping[str, TrainingLog], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for run in sorted(logs):
        pts = logs[run].probes()
        if pts:
            ax.plot([s for s, _ in pts], [v for _, v in pts], marker="o", label=run)
            plotted = True
    ax.set_xlabel("ablation step")
    ax.set_ylabel("target alignment")
    ax.set_ylim(-0.02, 1.02)
    if plotted:
        ax.legend()
    _save_svg(fig, path)


def score_chart(report: EvalReport, path: Path) -> None:
    keys = []
    for s in report.scores:
        k = (s.label, s.prompt, s.concept)
        if k not in keys:
            keys.append(k)
    vals = {(s.label, s.prompt, s.concept, s.model): s.value for s in report.scores}
    errs = {(s.label, s.prompt, s.concept, s.model): s.stderr for s in report.scores}
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(keys)), 4))
    width = 0.4
    for j, tag in enumerate(("baseline", "ablated")):
        xs = [i + (j - 0.5) * width for i in range(len(keys))]
        ax.bar(xs, [vals.get(k + (tag,), 0.0) for k in keys], width, yerr=[errs.get(k + (tag,), 0.0) for k in keys], label=tag)
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels([p if p == c else f"{p} as {c}" for _, p, c in keys], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("alignment")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)


def emit_reports(report: EvalReport, logs: Mapping[str, TrainingLog], outdir) -> dict[str, str]:
    """Write all report files under ``outdir``; returns artifact name -> relative path."""
    outdir = Path(outdir)
    (outdir / "charts").mkdir(parents=True, exist_ok=True)
    write_json(report.to_dict(), outdir / "report.json")
    write_scores_csv(report, outdir / "scores.csv")
    files = {"report": "report.json", "scores": "scores.csv", "chart:scores": "charts/scores.svg"}
    score_chart(report, outdir / "charts" / "scores.svg")
    if logs:
        files["training_log"] = write_training_logs(logs, outdir)
        probe_chart(logs, outdir / "charts" / "target_alignment.svg")
        files["chart:target_alignment"] = "charts/target_alignment.svg"
    return files
