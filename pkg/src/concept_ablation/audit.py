"""Finite-difference audit of both ablation losses under every fine-tune scope."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ablation import FinetuneScope, model_ablation_loss, noise_ablation_loss, select_trainable
from .concepts import Vocabulary
from .config import default_vocabulary_path
from .diffusion import Denoiser, DenoiserConfig, build_schedule
from .numerics import grad_check

TOLERANCE = 1e-4


@dataclass
class AuditRow:
    loss: str
    scope: str
    max_rel_error: float
    n_params: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def gradient_audit(seed: int = 0, batch: int = 4) -> list[AuditRow]:
    """grad_check of the noise-based loss and of the model-based surrogate
    (anchor prediction held constant) on a small random denoiser."""
    vocab = Vocabulary.load(default_vocabulary_path())
    sched = build_schedule(T=20)
    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(vocab_size=vocab.size, d=vocab.d, d_e=4, d_a=4, d_h=8, n_freq=2, T=sched.T)
    model = Denoiser.init(cfg, rng, zero_head=False)
    target = vocab.prompt("grumpy_cat", "van_gogh")
    anchor = vocab.prompt("cat", "van_gogh")
    x0 = rng.standard_normal((batch, vocab.d))
    t = rng.integers(0, sched.T, size=batch)
    eps = rng.standard_normal((batch, vocab.d))
    frozen = model.copy()

    losses = {
        "noise": lambda p: noise_ablation_loss(model, x0, target, t, eps, sched),
        "model": lambda p: model_ablation_loss(model, x0, anchor, target, t, eps, sched, anchor_model=frozen),
    }
    rows = []
    for scope in FinetuneScope:
        names = select_trainable(model, scope)
        n = sum(model.params[k].size for k in names)
        for label, fn in losses.items():
            rows.append(AuditRow(label, scope.value, grad_check(fn, model.params), n))
    model.params.set_trainable(model.params.names())
    return rows
