"""Acceptance criteria A1-A9.

Each test prints one ``A<k> PASS|FAIL`` line with the measured numbers, then
asserts. Recipes come from ``experiments/``; pretrained baselines are cached
for the session so criteria sharing a seed share a baseline. Wall times
include any pretraining a criterion triggers first.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from concept_ablation.ablation import anchor_prediction, draw_noise, frozen_reference_loss, model_ablation_loss, model_ablation_step, select_trainable
from concept_ablation.audit import TOLERANCE, gradient_audit
from concept_ablation.checkpoint import load_checkpoint, save_checkpoint
from concept_ablation.config import config_from_dict, parse_config
from concept_ablation.diffusion import Denoiser, DenoiserConfig, ddpm_sample, eps_with_grad, forward_noise, weighted_mse
from concept_ablation.evaluation import far_concept_report
from concept_ablation.numerics import AdamState
from concept_ablation.pipeline import load_or_pretrain, run_pipeline
from concept_ablation.seeding import derive_rng

ROOT = Path(__file__).resolve().parent.parent
RECIPES = ROOT / "experiments"
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.acceptance


class Runs:
    """Pipeline runs keyed by (recipe, seed), executed on first request."""

    def __init__(self, base: Path):
        self.base = base
        self.reports: dict[tuple[str, int], dict] = {}
        self.seconds: dict[tuple[str, int], float] = {}

    def config(self, recipe: str, seed: int):
        return parse_config(RECIPES / f"{recipe}.yaml").with_seed(seed)

    def get(self, recipe: str, seed: int) -> dict:
        key = (recipe, seed)
        if key not in self.reports:
            t0 = time.perf_counter()
            out = self.base / f"{recipe}-{seed}"
            run_pipeline(self.config(recipe, seed), out)
            self.seconds[key] = time.perf_counter() - t0
            self.reports[key] = json.loads((out / "report.json").read_text())
        return self.reports[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("runs"))


def score(report: dict, label: str, model: str) -> dict:
    return next(s for s in report["scores"] if s["label"] == label and s["model"] == model)


def verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# ---- A1 ------------------------------------------------------------------------


def test_a1_gradient_fidelity(acceptance_line):
    t0 = time.perf_counter()
    rows = gradient_audit(seed=0)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in rows)
    covered = {(r.loss, r.scope) for r in rows}
    ok = worst < TOLERANCE and len(covered) == 6 and secs < 30
    acceptance_line(f"A1 {verdict(ok)}  max rel err {worst:.2e} over {len(covered)} loss x scope cases (< 1e-4), {secs:.1f}s (< 30s)")
    assert len(covered) == 6
    assert worst < TOLERANCE
    assert secs < 30


# ---- A2 ------------------------------------------------------------------------


def test_a2_stop_gradient_exactness(acceptance_line):
    t0 = time.perf_counter()
    cfg = parse_config(RECIPES / "instance.yaml")
    vocab, sched = cfg.vocab, cfg.build_schedule()
    arch = DenoiserConfig(vocab_size=vocab.size, d=vocab.d, T=sched.T, **cfg.architecture)
    model = Denoiser.init(arch, np.random.default_rng(0), zero_head=False)
    target, anchor = cfg.prompt("grumpy_cat+van_gogh"), cfg.prompt("cat+van_gogh")
    rng = np.random.default_rng(1)
    x0 = vocab.sample_ground_truth(anchor, 32, rng)
    t, eps = draw_noise(rng, 32, vocab.d, sched)

    grads_equal = True
    for scope in ("cross_attention", "embedding", "full"):
        select_trainable(model, scope)
        _, live = model_ablation_loss(model, x0, anchor, target, t, eps, sched)
        x_t = forward_noise(x0, t, eps, sched)
        constant = np.array(anchor_prediction(model, x_t, anchor, t))
        pred, back = eps_with_grad(model, x_t, target.tokens, t)
        _, d = weighted_mse(pred, constant, sched.w[t])
        surrogate = back(d)
        grads_equal &= live.keys() == surrogate.keys() and all(np.array_equal(live[k], surrogate[k]) for k in live)
    model.params.set_trainable(model.params.names())

    frozen = model.copy()
    ref = frozen_reference_loss(model, frozen, anchor, target, x0, sched, np.random.default_rng(5))
    step = model_ablation_step(model, anchor, target, x0, sched, np.random.default_rng(5), AdamState(lr=1e-3))
    secs = time.perf_counter() - t0
    ok = grads_equal and ref == step and secs < 5
    acceptance_line(f"A2 {verdict(ok)}  bitwise surrogate gradients: {grads_equal}; frozen {ref!r} vs live {step!r}; {secs:.1f}s (< 5s)")
    assert grads_equal
    assert ref == step
    assert secs < 5


# ---- A3 / A4 -------------------------------------------------------------------


def test_a3_ablation_trend(runs, acceptance_line):
    t0 = time.perf_counter()
    details, all_ok = [], True
    for seed in SEEDS:
        r = runs.get("instance", seed)
        bt, at = score(r, "target", "baseline")["value"], score(r, "target", "ablated")["value"]
        floor = score(r, "anchor_on_target", "baseline")["value"]
        ba, aa = score(r, "anchor", "baseline")["value"], score(r, "anchor", "ablated")["value"]
        drop_ok = (bt - at) >= 0.5 * (bt - floor)
        anchor_ok = abs(aa - ba) <= 0.10
        all_ok &= drop_ok and anchor_ok
        details.append(f"seed {seed}: target {bt:.3f}->{at:.3f} (floor {floor:.3f}, drop {(bt - at) / (bt - floor):.0%}), anchor {ba:.3f}->{aa:.3f}")
    secs = time.perf_counter() - t0
    ok = all_ok and secs < 300
    acceptance_line(f"A3 {verdict(ok)}  " + "; ".join(details) + f"; {secs:.0f}s (< 300s)")
    assert all_ok
    assert secs < 300


def test_a4_method_comparison(runs, acceptance_line):
    t0 = time.perf_counter()
    verdicts = []
    for seed in SEEDS:
        comp = runs.get("instance", seed)["comparison"]
        verdicts.append((seed, comp["verdict"], comp["model_wins"], len(comp["diff"])))
    # the runs are shared with A3, so count their cost here as well
    secs = time.perf_counter() - t0 + sum(runs.seconds.get(("instance", s), 0.0) for s in SEEDS)
    wins = sum(v == "model-based-dominates" for _, v, _, _ in verdicts)
    ok = wins >= 2 and secs < 600
    text = "; ".join(f"seed {s}: {v} ({w}/{n})" for s, v, w, n in verdicts)
    acceptance_line(f"A4 {verdict(ok)}  {text}; model-based dominates in {wins}/3 seeds (need 2); {secs:.0f}s (< 600s)")
    assert wins >= 2
    assert secs < 600


# ---- A5 ------------------------------------------------------------------------


def test_a5_trademark_superiority(runs, acceptance_line):
    t0 = time.perf_counter()
    glyph_ok, object_ok, details = True, True, []
    for seed in SEEDS:
        rows = {row["model"]: row for row in runs.get("trademark", seed)["trademark"]}
        inst, tm = rows["instance"], rows["trademark"]
        g = tm["glyph_posterior"] < inst["glyph_posterior"]
        o = tm["object_posterior"] >= inst["object_posterior"] - 0.05
        glyph_ok &= g
        object_ok &= o
        details.append(
            f"seed {seed}: glyph inst {inst['glyph_posterior']:.3f} vs tm {tm['glyph_posterior']:.3f} [{'ok' if g else 'x'}], "
            f"object inst {inst['object_posterior']:.3f} vs tm {tm['object_posterior']:.3f} [{'ok' if o else 'x'}]"
        )
    secs = time.perf_counter() - t0
    ok = glyph_ok and object_ok and secs < 600
    acceptance_line(f"A5 {verdict(ok)}  " + "; ".join(details) + f"; {secs:.0f}s (< 600s)")
    assert glyph_ok, "trademark run did not lower the glyph posterior in every seed"
    assert object_ok, "trademark run lost more than 0.05 object alignment relative to the instance run"
    assert secs < 600


# ---- A6 ------------------------------------------------------------------------


def test_a6_leakage_instrument(runs, acceptance_line):
    t0 = time.perf_counter()
    valid, details, leak = True, [], {}
    for recipe in ("instance", "style", "memorization"):
        r = runs.get(recipe, 0)
        direct = score(r, "target", "baseline")
        base_rows = [row for row in r["leakage"] if row["model"] == "baseline"]
        abl_rows = [row for row in r["leakage"] if row["model"] == "ablated"]
        assert base_rows and abl_rows, f"{recipe}: leakage scores missing"
        for row in base_rows:
            tol = 3 * np.hypot(row["stderr"], direct["stderr"])
            valid &= abs(row["value"] - direct["value"]) < tol
            details.append(f"{recipe} {row['prompt']}: synonym {row['value']:.3f} vs direct {direct['value']:.3f} (tol {tol:.3f})")
        leak[recipe] = float(np.mean([row["value"] for row in abl_rows]))
    secs = time.perf_counter() - t0
    more = leak["memorization"] > max(leak["instance"], leak["style"])
    ok = valid and secs < 300
    leaks = ", ".join(f"{k} {v:.3f}" for k, v in leak.items())
    acceptance_line(
        f"A6 {verdict(ok)}  " + "; ".join(details) + f"; post-ablation leak: {leaks}; memorization leaks more: {more} (informational); {secs:.0f}s (< 300s)"
    )
    assert valid
    assert secs < 300


# ---- A7 ------------------------------------------------------------------------


def test_a7_far_concept_report(runs, acceptance_line):
    t0 = time.perf_counter()
    r = runs.get("far_concept", 0)
    rows = r["far"]
    structural = len(rows) >= 2 and all(np.isfinite(row["stderr"]) and np.isfinite(row["delta"]) for row in rows)

    cfg = runs.config("far_concept", 0)
    sched = cfg.build_schedule()
    baseline, _ = load_or_pretrain(cfg, sched)
    same = far_concept_report(cfg.vocab, baseline, baseline.copy(), cfg.eval_prompts("far"), cfg.candidates(), sched, n=cfg.eval["n"], seed=cfg.seed)
    null_ok = all(abs(row["delta"]) <= 3 * row["stderr"] + 1e-12 for row in same)
    secs = time.perf_counter() - t0
    ok = structural and null_ok and secs < 180
    deltas = ", ".join(f"{row['concept']} {row['delta']:+.3f}+-{row['stderr']:.3f}" for row in rows)
    acceptance_line(f"A7 {verdict(ok)}  full-scope deltas: {deltas}; baseline==ablated within 3 SE: {null_ok}; {secs:.0f}s (< 180s)")
    assert structural
    assert null_ok
    assert secs < 180


# ---- A8 ------------------------------------------------------------------------


def _data_files(out: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_a8_determinism_and_persistence(tmp_path, acceptance_line):
    doc = parse_config(RECIPES / "instance.yaml").to_dict()
    cold = config_from_dict(doc | {"output_dir": "unused", "cache_dir": str(tmp_path / "fresh-cache")})
    t0 = time.perf_counter()
    first = run_pipeline(cold, tmp_path / "a")
    secs = time.perf_counter() - t0
    second = run_pipeline(cold, tmp_path / "b")
    a, b = _data_files(tmp_path / "a"), _data_files(tmp_path / "b")
    identical = a == b and len(a) > 0
    kinds = sorted({Path(k).suffix for k in a})

    model = load_checkpoint(tmp_path / "a" / "checkpoints" / "ablated.ckpt")
    save_checkpoint(model, tmp_path / "again.ckpt")
    back = load_checkpoint(tmp_path / "again.ckpt")
    lossless = all(back.params.params[k].tobytes() == v.tobytes() for k, v in model.params.params.items())
    ok = identical and lossless and not first.pretrain_cache_hit and second.pretrain_cache_hit and secs < 300
    acceptance_line(
        f"A8 {verdict(ok)}  {len(a)} files byte-identical across runs: {identical} ({', '.join(kinds)}); "
        f"checkpoint round-trip bitwise: {lossless}; cold pipeline incl. pretraining {secs:.0f}s (< 300s)"
    )
    assert identical
    assert lossless
    assert not first.pretrain_cache_hit
    assert secs < 300


# ---- A9 ------------------------------------------------------------------------


def test_a9_baseline_fidelity(acceptance_line):
    cfg = parse_config(RECIPES / "three_concepts.yaml")
    sched = cfg.build_schedule()
    t0 = time.perf_counter()
    model, _ = load_or_pretrain(cfg, sched)
    worst_mean, worst_std, details = 0.0, 0.0, []
    for prompt in cfg.pretrain_prompts():
        [comp] = cfg.vocab.components(prompt)
        x = ddpm_sample(model, prompt.tokens, sched, 500, derive_rng(cfg.seed, "fidelity", cfg.vocab.describe(prompt)))
        mean_err = float(np.max(np.abs(x.mean(axis=0) - comp.mean)))
        std_err = float(np.max(np.abs(x.std(axis=0, ddof=1) / np.sqrt(np.diag(comp.cov)) - 1)))
        worst_mean, worst_std = max(worst_mean, mean_err), max(worst_std, std_err)
        details.append(f"{cfg.vocab.describe(prompt)} mean err {mean_err:.3f} std rel err {std_err:.1%}")
    secs = time.perf_counter() - t0
    ok = worst_mean <= 0.1 and worst_std <= 0.2 and secs < 120
    acceptance_line(f"A9 {verdict(ok)}  " + "; ".join(details) + f"; {secs:.0f}s (< 120s)")
    assert worst_mean <= 0.1
    assert worst_std <= 0.2
    assert secs < 120
