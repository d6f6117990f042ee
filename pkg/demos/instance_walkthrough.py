"""
Instance ablation, step by step
===============================

Make the prompt "grumpy_cat" produce ordinary cats, then check what moved.
Run from the repository root:

    python demos/instance_walkthrough.py

The first run pretrains the baseline (under a minute) and caches it in
$ABLATE_CACHE or ~/.cache/concept-ablation.
"""
from pathlib import Path

import numpy as np

from concept_ablation.ablation import run_ablation
from concept_ablation.config import parse_config
from concept_ablation.evaluation import alignment_score, generate, leakage_probe
from concept_ablation.pipeline import load_or_pretrain, make_probe

ROOT = Path(__file__).resolve().parent.parent
cfg = parse_config(ROOT / "experiments" / "instance.yaml")
vocab, sched = cfg.vocab, cfg.build_schedule()

# The universe is 6-dimensional: 4 object coordinates and 2 trademark
# coordinates. Each object token is a Gaussian blob.
for name in ("cat", "grumpy_cat", "lion", "dog"):
    print(f"{name:>10}: mean {vocab[name].mean}, sigma {vocab[name].sigma}")

# Pretrained baseline, shared by every experiment with the same pretrain section.
baseline, cached = load_or_pretrain(cfg, sched)
print(f"\nbaseline {'loaded from cache' if cached else 'pretrained'}")

# Alignment = mean posterior of the intended concept among the candidates,
# computed from the analytic ground-truth densities.
cands = cfg.candidates()
print("candidates:", [vocab.describe(c) for c in cands])


def report(model, tag):
    for text in ("grumpy_cat", "cat", "lion"):
        p = vocab.parse(text)
        x = generate(model, p, sched, 500, cfg.seed, text)
        s = alignment_score(vocab, x, p, cands)
        print(f"  {tag:<8} {text:<10} alignment {s.value:.3f} +- {s.stderr:.3f}")


report(baseline, "baseline")

# Model-based ablation: the target-conditioned prediction is regressed onto
# the (stop-gradient) anchor-conditioned prediction on anchor images.
acfg = cfg.ablation_config("model")
probe = make_probe(cfg, sched)
ablated, log = run_ablation(acfg, baseline, vocab, sched, probe)
print("\nprobed target alignment during training:")
for step, value in log.probes():
    print(f"  step {step:>3}: {value:.3f}")

report(ablated, "ablated")

# The paraphrase "sour_kitty" never appears in training. How much of the
# removed concept does it still bring back?
target = vocab.parse("grumpy_cat")
for tag, model in (("baseline", baseline), ("ablated", ablated)):
    [leak] = leakage_probe(vocab, model, [vocab.parse("sour_kitty")], target, cands, sched, n=500, seed=cfg.seed)
    print(f"  {tag:<8} sour_kitty -> grumpy_cat alignment {leak.value:.3f}")

# Where do ablated grumpy_cat samples land now? Compare their centre with
# the cat and grumpy_cat means.
x = generate(ablated, target, sched, 500, cfg.seed, "grumpy_cat")
print("\nablated grumpy_cat sample mean (object part):", np.round(x[:, :4].mean(axis=0), 2))
