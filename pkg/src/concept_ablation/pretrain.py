"""Baseline pretraining on ground-truth concept data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .concepts import Prompt, PromptBank, Vocabulary
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, apply_grads, standard_loss
from .numerics import AdamState
from .seeding import derive_rng


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 128
    lr: float = 3e-3
    min_lr_ratio: float = 0.05
    ema: float = 0.999


def pretrain(
    vocab: Vocabulary,
    prompts: list[Prompt],
    sched: NoiseSchedule,
    cfg: PretrainConfig,
    seed: int,
    arch: dict | None = None,
) -> tuple[Denoiser, list[float]]:
    """Train a fresh denoiser on mixed-prompt batches; returns the EMA weights and losses.

    The learning rate follows a cosine decay to ``min_lr_ratio * lr``.
    """
    if not prompts:
        raise ValueError("pretraining needs at least one prompt")
    rng = derive_rng(seed, "pretrain")
    config = DenoiserConfig(vocab_size=vocab.size, d=vocab.d, T=sched.T, **(arch or {}))
    model = Denoiser.init(config, derive_rng(seed, "init"))
    bank = PromptBank(vocab, prompts)
    opt = AdamState(lr=cfg.lr)
    ema = {k: v.copy() for k, v in model.params.params.items()}
    losses = []
    for k in range(cfg.steps):
        which = rng.integers(0, len(prompts), size=cfg.batch_size)
        x0 = bank.sample(which, rng)
        t = rng.integers(0, sched.T, size=cfg.batch_size)
        eps = rng.standard_normal(x0.shape)
        loss, grads = standard_loss(model, x0, bank.tokens(which), t, eps, sched)
        opt.lr = cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + np.cos(np.pi * k / cfg.steps)))
        apply_grads(model, grads, opt)
        for name, v in ema.items():
            v += (1.0 - cfg.ema) * (model.params.params[name] - v)
        losses.append(loss)
    if cfg.steps:
        model.params.params.update(ema)
    return model, losses


def default_pretrain_prompts(vocab: Vocabulary, trademark_carriers=("cup",)) -> list[Prompt]:
    """Every object (and object paraphrase) bare and under every style, the bare
    styles, each trademark on each carrier object, and the memorized tokens."""
    def kind(t):
        return vocab.effective_kind(t)

    styles = [t.name for t in vocab.tokens if kind(t) == "style"]
    objects = [t.name for t in vocab.tokens if kind(t) == "object"]
    marks = [t.name for t in vocab.tokens if kind(t) == "trademark"]
    memorized = [t.name for t in vocab.tokens if kind(t) == "memorized"]
    # styles are applied with their canonical tokens only; paraphrased styles ride on objects
    canon_styles = [s for s in styles if not vocab[s].kind == "synonym"]
    out = []
    for o in objects:
        out.append(vocab.prompt(o))
        out += [vocab.prompt(o, s) for s in styles]
    out += [vocab.prompt(s) for s in styles]
    for c in trademark_carriers:
        for m in marks:
            out.append(vocab.prompt(c, m))
            out += [vocab.prompt(c, m, s) for s in canon_styles]
    for m in memorized:
        out.append(vocab.prompt(m))
        out += [vocab.prompt(m, s) for s in canon_styles]
    return out
