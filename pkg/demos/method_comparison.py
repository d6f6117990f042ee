"""
Noise-based versus model-based ablation
=======================================

Both objectives start from the same baseline and seed and differ only in
the regression target: noise-based pairs anchor images with the target
prompt under the ordinary diffusion loss, model-based matches the anchor
prompt's own prediction. The probe curves show which one removes the target
faster.

    python demos/method_comparison.py [seed]
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from concept_ablation.ablation import run_ablation
from concept_ablation.config import parse_config
from concept_ablation.evaluation import compare_methods
from concept_ablation.pipeline import load_or_pretrain, make_probe

ROOT = Path(__file__).resolve().parent.parent
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = parse_config(ROOT / "experiments" / "instance.yaml").with_seed(seed)
sched = cfg.build_schedule()
baseline, _ = load_or_pretrain(cfg, sched)
probe = make_probe(cfg, sched)

logs = {}
for method in ("noise", "model"):
    _, logs[method] = run_ablation(cfg.ablation_config(method), baseline, cfg.vocab, sched, probe)

comp = compare_methods(logs["noise"], logs["model"])
print(f"{'step':>5} {'noise':>7} {'model':>7}")
for step, n, m in zip(comp["steps"], comp["noise"], comp["model"]):
    print(f"{step:>5} {n:7.3f} {m:7.3f}")
print(f"verdict: {comp['verdict']} (model-based lower or equal at {comp['model_wins']}/{len(comp['steps'])} probes)")

fig, ax = plt.subplots(figsize=(6, 4))
for method, log in logs.items():
    pts = log.probes()
    ax.plot([s for s, _ in pts], [v for _, v in pts], marker="o", label=method)
ax.set_xlabel("ablation step")
ax.set_ylabel("grumpy_cat alignment")
ax.legend()
out = ROOT / "runs" / f"method_comparison_seed{seed}.png"
out.parent.mkdir(exist_ok=True)
fig.savefig(out, dpi=120)
print(f"chart written to {out}")
