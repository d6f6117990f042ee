"""
Removing a trademark glyph
==========================

"cup+starbucks" draws a cup whose two trademark coordinates sit on the
starbucks glyph. Two ablations with equal steps and seed:

* instance configuration: cross-attention only, anchor "cup"
* trademark configuration: all weights, no augmentation, anchor "cup+logo"

The glyph part and the object part are scored separately, since a cup with
the logo removed should still be a cup.

    python demos/trademark_glyph.py [seed]
"""
import sys
from pathlib import Path

from concept_ablation.ablation import make_trademark_config, run_ablation
from concept_ablation.config import parse_config
from concept_ablation.pipeline import load_or_pretrain, trademark_detail

ROOT = Path(__file__).resolve().parent.parent
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = parse_config(ROOT / "experiments" / "trademark.yaml").with_seed(seed)
vocab, sched = cfg.vocab, cfg.build_schedule()
baseline, _ = load_or_pretrain(cfg, sched)

instance_cfg = cfg.ablation_config()
trademark_cfg = make_trademark_config(instance_cfg, vocab)
print(f"instance : scope {instance_cfg.scope.value}, anchor {vocab.describe(instance_cfg.anchor)}, lr {instance_cfg.learning_rate}")
print(f"trademark: scope {trademark_cfg.scope.value}, anchor {vocab.describe(trademark_cfg.anchor)}, lr {trademark_cfg.learning_rate}")

models = {"baseline": baseline}
models["instance"], _ = run_ablation(instance_cfg, baseline, vocab, sched)
models["trademark"], _ = run_ablation(trademark_cfg, baseline, vocab, sched)

print(f"\n{'model':<10} {'glyph':>7} {'object':>7}")
for row in trademark_detail(cfg, models, sched):
    print(f"{row['model']:<10} {row['glyph_posterior']:7.3f} {row['object_posterior']:7.3f}")
print("\nglyph: posterior of the starbucks glyph among glyph candidates (lower = removed)")
print("object: posterior of 'cup' among object candidates (higher = still a cup)")
