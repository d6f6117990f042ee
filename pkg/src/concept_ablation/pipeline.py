"""End-to-end runs: pretrain (cached) -> ablate -> evaluate -> write artifacts."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import METHODS, TrainingLog, make_trademark_config, run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .concepts import Prompt
from .config import ExperimentConfig
from .diffusion import Denoiser, NoiseSchedule, ddpm_sample
from .evaluation import (
    EvalReport,
    alignment_score,
    compare_methods,
    eval_suite,
    far_concept_report,
    generate,
    leakage_probe,
)
from .pretrain import pretrain
from .reports import emit_reports, write_json, write_training_logs


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


@dataclass
class RunManifest:
    config_hash: str
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    status: str = "running"
    failed_stage: str | None = None
    pretrain_cache_hit: bool | None = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "artifacts": dict(sorted(self.artifacts.items())),
            "tool_version": self.tool_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "pretrain_cache_hit": self.pretrain_cache_hit,
        }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def default_cache_dir() -> Path:
    return Path(os.environ.get("ABLATE_CACHE", Path.home() / ".cache" / "concept-ablation"))


def load_or_pretrain(cfg: ExperimentConfig, sched: NoiseSchedule) -> tuple[Denoiser, bool]:
    """Baseline for ``cfg``, read from the pretrain cache when an identical run exists."""
    cache = cfg.cache_dir or default_cache_dir()
    path = Path(cache) / f"baseline-{cfg.pretrain_hash()[:16]}.ckpt"
    if path.exists():
        try:
            return load_checkpoint(path), True
        except CheckpointError:
            pass  # stale or damaged entry: retrain and overwrite
    model, _ = pretrain(cfg.vocab, cfg.pretrain_prompts(), sched, cfg.pretrain_config(), cfg.seed, cfg.architecture)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    return model, False


def make_probe(cfg: ExperimentConfig, sched: NoiseSchedule):
    target = cfg.eval_target
    cands = cfg.candidates()
    n = cfg.eval["probe_n"]
    bw = cfg.eval["bandwidth"]

    def probe(model: Denoiser, rng: np.random.Generator) -> float:
        x = ddpm_sample(model, target.tokens, sched, n, rng)
        return alignment_score(cfg.vocab, x, target, cands, bandwidth=bw).value

    return probe


def trademark_detail(cfg: ExperimentConfig, models: dict[str, Denoiser], sched: NoiseSchedule) -> list[dict]:
    """Glyph-part and object-part alignment of target generations, scored separately."""
    vocab = cfg.vocab
    target = cfg.eval_target
    obj = Prompt(tuple(t for t in target if vocab.effective_kind(vocab[t]) != "trademark"))
    glyph_dims = list(range(vocab.d_obj, vocab.d))
    obj_dims = list(range(vocab.d_obj))
    rows = []
    for tag, model in models.items():
        x = generate(model, target, sched, cfg.eval["n"], cfg.seed, vocab.describe(target))
        g = alignment_score(vocab, x, target, cfg.eval_prompts("glyph_candidates"), dims=glyph_dims, bandwidth=cfg.eval["bandwidth"])
        o = alignment_score(vocab, x, obj, cfg.eval_prompts("object_candidates"), dims=obj_dims, bandwidth=cfg.eval["bandwidth"])
        rows.append({
            "model": tag,
            "glyph_posterior": g.value,
            "glyph_stderr": g.stderr,
            "object_posterior": o.value,
            "object_stderr": o.stderr,
            "n": g.n,
        })
    return rows


def evaluate(cfg: ExperimentConfig, baseline: Denoiser, ablated: Denoiser, sched: NoiseSchedule) -> EvalReport:
    e = cfg.eval
    vocab = cfg.vocab
    concepts = {"target": [cfg.eval_target], "anchor": [cfg.eval_anchor]}
    if e["surrounding"]:
        concepts["surrounding"] = cfg.eval_prompts("surrounding")
    if e["far"]:
        concepts["far"] = cfg.eval_prompts("far")
    cands = cfg.candidates()
    cross = [(cfg.eval_anchor, cfg.eval_target, "anchor_on_target")]
    report = eval_suite(vocab, baseline, ablated, concepts, cands, sched, n=e["n"], seed=cfg.seed, bandwidth=e["bandwidth"], cross=cross)
    syn = cfg.eval_prompts("synonyms")
    if syn:
        banned = cfg.ablation_config().target.tokens
        for tag, model in (("baseline", baseline), ("ablated", ablated)):
            scores = leakage_probe(vocab, model, syn, cfg.eval_target, cands, sched, n=e["n"], seed=cfg.seed, ablated_tokens=banned, bandwidth=e["bandwidth"], model_tag=tag)
            report.leakage += [s.to_dict() for s in scores]
    if e["far"]:
        report.far = far_concept_report(vocab, baseline, ablated, cfg.eval_prompts("far"), cands, sched, n=e["n"], seed=cfg.seed, bandwidth=e["bandwidth"])
    report.metadata.update({
        "config_hash": cfg.config_hash(),
        "pretrain_hash": cfg.pretrain_hash(),
        "seed": cfg.seed,
        "tool_version": __version__,
        "variant": cfg.ablation["variant"],
        "method": cfg.ablation["method"],
        "target": vocab.describe(cfg.eval_target),
        "anchor": vocab.describe(cfg.eval_anchor),
    })
    return report


class _Stages:
    """Tracks the running stage so failures can name it."""

    def __init__(self):
        self.current = "config"

    def __call__(self, name: str) -> "_Stages":
        self.current = name
        return self


def run_pipeline(cfg: ExperimentConfig, out: Path | None = None) -> RunManifest:
    out = Path(out or cfg.output_dir)
    manifest = RunManifest(config_hash=cfg.config_hash(), started_at=_now())
    stage = _Stages()
    logs: dict[str, TrainingLog] = {}
    try:
        stage("setup")
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        write_json(cfg.to_dict(), out / "config.resolved.json")
        manifest.artifacts["config"] = "config.resolved.json"
        sched = cfg.build_schedule()

        stage("pretrain")
        baseline, hit = load_or_pretrain(cfg, sched)
        manifest.pretrain_cache_hit = hit
        save_checkpoint(baseline, out / "checkpoints" / "baseline.ckpt")
        manifest.artifacts["checkpoint:baseline"] = "checkpoints/baseline.ckpt"

        probe = make_probe(cfg, sched)
        primary = cfg.ablation["method"]
        runs = [(primary, cfg.ablation_config(primary))]
        if cfg.ablation["compare_methods"]:
            other = [m for m in METHODS if m != primary][0]
            runs.append((other, cfg.ablation_config(other)))
        if cfg.ablation["trademark_comparison"]:
            runs.append(("trademark", make_trademark_config(cfg.ablation_config(primary), cfg.vocab)))
        ablated: dict[str, Denoiser] = {}
        for name, acfg in runs:
            stage(f"ablation:{name}")
            logs[name] = TrainingLog(probe_interval=acfg.probe_interval, method=acfg.method)
            ablated[name], _ = run_ablation(acfg, baseline, cfg.vocab, sched, probe, log=logs[name])
            tag = "ablated" if name == primary else f"ablated-{name}"
            save_checkpoint(ablated[name], out / "checkpoints" / f"{tag}.ckpt")
            manifest.artifacts[f"checkpoint:{tag}"] = f"checkpoints/{tag}.ckpt"

        stage("eval")
        report = evaluate(cfg, baseline, ablated[primary], sched)
        if cfg.ablation["compare_methods"]:
            report.comparison = compare_methods(logs["noise"], logs["model"])
        if cfg.ablation["trademark_comparison"]:
            models = {"baseline": baseline, "instance": ablated[primary], "trademark": ablated["trademark"]}
            report.trademark = trademark_detail(cfg, models, sched)

        stage("reports")
        for key, path in emit_reports(report, logs, out).items():
            manifest.artifacts[key] = path
        manifest.status = "ok"
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = stage.current
        if logs:
            try:
                out.mkdir(parents=True, exist_ok=True)
                manifest.artifacts["training_log"] = write_training_logs(logs, out)
            except OSError:
                pass
        raise PipelineError(stage.current, exc) from exc
    finally:
        manifest.finished_at = _now()
        if out.is_dir():
            write_json(manifest.to_dict(), out / "manifest.json")
    return manifest


def run_eval(cfg: ExperimentConfig, baseline_path, ablated_path, out: Path | None = None) -> RunManifest:
    """Evaluate two existing checkpoints under ``cfg``'s eval section."""
    out = Path(out or Path(cfg.output_dir) / "eval")
    manifest = RunManifest(config_hash=cfg.config_hash(), started_at=_now())
    stage = _Stages()
    try:
        stage("load")
        baseline = load_checkpoint(baseline_path)
        ablated = load_checkpoint(ablated_path)
        sched = cfg.build_schedule()
        stage("eval")
        report = evaluate(cfg, baseline, ablated, sched)
        stage("reports")
        out.mkdir(parents=True, exist_ok=True)
        manifest.artifacts.update(emit_reports(report, {}, out))
        manifest.status = "ok"
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = stage.current
        raise PipelineError(stage.current, exc) from exc
    finally:
        manifest.finished_at = _now()
        if out.is_dir():
            write_json(manifest.to_dict(), out / "manifest.json")
    return manifest

