"""Concept ablation objectives, fine-tune scopes and the ablation loop."""
from __future__ import annotations

import dataclasses
import enum
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .concepts import AugmentationConfig, Prompt, PromptBank, Vocabulary, augment, compose_prompts
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    apply_grads,
    ddpm_sample,
    eps_with_grad,
    forward_noise,
    predict_eps,
    weighted_mse,
)
from .numerics import AdamState
from .seeding import derive_rng

Array = np.ndarray


class AblationConfigError(ValueError):
    pass


class FinetuneScope(str, enum.Enum):
    CROSS_ATTENTION = "cross_attention"
    EMBEDDING = "embedding"
    FULL = "full"


SCOPE_PARAMS = {
    FinetuneScope.CROSS_ATTENTION: ("W_k", "W_v"),
    FinetuneScope.EMBEDDING: ("embedding",),
}

DEFAULT_LR = {
    FinetuneScope.CROSS_ATTENTION: 1e-4,
    FinetuneScope.EMBEDDING: 2e-3,
    FinetuneScope.FULL: 3e-5,
}

VARIANTS = ("style", "instance", "memorization", "trademark")
METHODS = ("noise", "model")


def select_trainable(model: Denoiser, scope) -> set[str]:
    try:
        scope = FinetuneScope(scope)
    except ValueError:
        raise AblationConfigError(f"unknown fine-tune scope {scope!r}") from None
    names = set(model.params.names()) if scope is FinetuneScope.FULL else set(SCOPE_PARAMS[scope])
    model.params.set_trainable(names)
    return names


@dataclass
class AblationConfig:
    target: Prompt
    anchor: Prompt
    variant: str = "instance"
    method: str = "model"
    scope: FinetuneScope = FinetuneScope.CROSS_ATTENTION
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    steps: int = 400
    batch_size: int = 32
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_context: int = 200
    probe_interval: int = 50
    anchor_source: str = "ground_truth"  # or "model": anchors generated by the pretrained model
    fixed_pool: bool = False
    pool_size: int = 512

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[FinetuneScope(self.scope)] if self.lr is None else self.lr

    def validate(self, vocab: Vocabulary | None = None) -> None:
        errors = []
        if self.variant not in VARIANTS:
            errors.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.method not in METHODS:
            errors.append(f"method must be one of {METHODS}, got {self.method!r}")
        try:
            FinetuneScope(self.scope)
        except ValueError:
            errors.append(f"unknown fine-tune scope {self.scope!r}")
        if tuple(self.target) == tuple(self.anchor):
            errors.append("target prompt must differ from anchor prompt")
        for name in ("steps", "n_context"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        for name in ("batch_size", "probe_interval", "pool_size"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive")
        if self.anchor_source not in ("ground_truth", "model"):
            errors.append(f"anchor_source must be 'ground_truth' or 'model', got {self.anchor_source!r}")
        if self.variant == "trademark":
            if FinetuneScope(self.scope) is not FinetuneScope.FULL:
                errors.append("trademark variant requires scope=full")
            if self.augmentation.enabled:
                errors.append("trademark variant requires augmentation disabled")
            if vocab is not None:
                logo = vocab.roles.get("generic_logo")
                if logo is None or vocab[logo].id not in tuple(self.anchor):
                    errors.append("trademark variant requires the generic logo token in the anchor")
        if vocab is not None:
            for label, p in (("target", self.target), ("anchor", self.anchor)):
                try:
                    vocab.validate(p)
                except ValueError as exc:
                    errors.append(f"{label}: {exc}")
                if any(vocab.is_synonym(t) for t in p):
                    errors.append(f"{label} prompt must not contain synonym tokens")
        if errors:
            raise AblationConfigError("; ".join(errors))


def make_trademark_config(base: AblationConfig, vocab: Vocabulary) -> AblationConfig:
    """Instance config -> trademark config: full scope, no augmentation, generic logo anchor."""
    if base.variant != "instance":
        raise AblationConfigError(f"trademark config derives from an instance config, got {base.variant!r}")
    logo = vocab.roles.get("generic_logo")
    if logo is None:
        raise AblationConfigError("vocabulary declares no generic_logo role")
    kept = tuple(t for t in base.anchor if vocab.effective_kind(vocab[t]) != "trademark")
    return dataclasses.replace(
        base,
        variant="trademark",
        scope=FinetuneScope.FULL,
        augmentation=dataclasses.replace(base.augmentation, enabled=False),
        anchor=Prompt(kept + (vocab[logo].id,)),
    )


# ---- objectives ------------------------------------------------------------


def draw_noise(rng: np.random.Generator, n: int, d: int, sched: NoiseSchedule):
    t = rng.integers(0, sched.T, size=n)
    eps = rng.standard_normal((n, d))
    return t, eps


def noise_ablation_loss(model: Denoiser, x0: Array, target: Prompt, t, eps: Array, sched: NoiseSchedule):
    """Anchor images paired with the target prompt under the plain diffusion loss."""
    x_t = forward_noise(x0, t, eps, sched)
    pred, back = eps_with_grad(model, x_t, target.tokens, t)
    loss, d_pred = weighted_mse(pred, eps, sched.w[np.asarray(t)])
    return loss, back(d_pred)


def anchor_prediction(model: Denoiser, x_t: Array, anchor: Prompt, t) -> Array:
    """Anchor-conditioned prediction as a constant: no backward is ever built."""
    E, mask, _ = model.embed(anchor.tokens)
    return predict_eps(model, x_t, E, t, mask)[0].copy()


def model_ablation_loss(model: Denoiser, x0: Array, anchor: Prompt, target: Prompt, t, eps: Array, sched: NoiseSchedule, anchor_model: Denoiser | None = None):
    """Regress the target-conditioned prediction onto the stop-gradient anchor prediction.

    ``anchor_model`` substitutes a frozen network for the anchor branch.
    """
    x_t = forward_noise(x0, t, eps, sched)
    goal = anchor_prediction(model if anchor_model is None else anchor_model, x_t, anchor, t)
    pred, back = eps_with_grad(model, x_t, target.tokens, t)
    loss, d_pred = weighted_mse(pred, goal, sched.w[np.asarray(t)])
    return loss, back(d_pred)


def _check_batch(x0: Array) -> Array:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("empty batch")
    return x0


def noise_ablation_step(model: Denoiser, anchor_batch: Array, target: Prompt, sched: NoiseSchedule, rng: np.random.Generator, opt: AdamState) -> float:
    x0 = _check_batch(anchor_batch)
    t, eps = draw_noise(rng, x0.shape[0], x0.shape[1], sched)
    loss, grads = noise_ablation_loss(model, x0, target, t, eps, sched)
    apply_grads(model, grads, opt)
    return loss


def model_ablation_step(model: Denoiser, anchor: Prompt, target: Prompt, anchor_batch: Array, sched: NoiseSchedule, rng: np.random.Generator, opt: AdamState) -> float:
    x0 = _check_batch(anchor_batch)
    t, eps = draw_noise(rng, x0.shape[0], x0.shape[1], sched)
    loss, grads = model_ablation_loss(model, x0, anchor, target, t, eps, sched)
    apply_grads(model, grads, opt)
    return loss


def frozen_reference_loss(model: Denoiser, frozen: Denoiser, anchor: Prompt, target: Prompt, anchor_batch: Array, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    """Same draw and loss as ``model_ablation_step`` with the anchor branch on ``frozen``; no update."""
    for name, p in model.params.params.items():
        q = frozen.params.params.get(name)
        if q is None or q.shape != p.shape:
            raise ValueError(f"frozen snapshot does not match model at parameter {name!r}")
    x0 = _check_batch(anchor_batch)
    t, eps = draw_noise(rng, x0.shape[0], x0.shape[1], sched)
    loss, _ = model_ablation_loss(model, x0, anchor, target, t, eps, sched, anchor_model=frozen)
    return loss


# ---- training loop ---------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    score: float | None = None
    wall_time: float = 0.0


@dataclass
class TrainingLog:
    probe_interval: int
    method: str = "model"
    initial_score: float | None = None
    records: list[StepRecord] = field(default_factory=list)

    def probes(self) -> list[tuple[int, float]]:
        out = [] if self.initial_score is None else [(0, self.initial_score)]
        out += [(r.step, r.score) for r in self.records if r.score is not None]
        return out

    def to_rows(self) -> list[dict]:
        """Deterministic rows (wall time excluded)."""
        return [{"method": self.method, "step": r.step, "loss": r.loss, "score": r.score} for r in self.records]


Probe = Callable[[Denoiser, np.random.Generator], float]


def run_ablation(
    cfg: AblationConfig,
    model: Denoiser,
    vocab: Vocabulary,
    sched: NoiseSchedule,
    probe: Probe | None = None,
    log: TrainingLog | None = None,
) -> tuple[Denoiser, TrainingLog]:
    """Fine-tune a copy of ``model`` so ``cfg.target`` behaves like ``cfg.anchor``.

    Even steps train the bare (target, anchor) pair, odd steps cycle through
    composed context pairs. ``probe(model, rng)`` is evaluated before training,
    every ``probe_interval`` steps and after the last step. Records are
    appended to ``log`` as they happen, so a caller holding it keeps the
    partial history if a step raises.
    """
    cfg.validate(vocab)
    if log is None:
        log = TrainingLog(probe_interval=cfg.probe_interval, method=cfg.method)
    log.probe_interval, log.method = cfg.probe_interval, cfg.method
    model = model.copy()
    if cfg.steps == 0:
        return model, log

    select_trainable(model, cfg.scope)
    opt = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    pairs = [(cfg.target, cfg.anchor)]
    context = compose_prompts(vocab, cfg.target, cfg.anchor, cfg.n_context) if cfg.n_context else []
    rng = derive_rng(cfg.seed, "ablation", cfg.method)
    aug_rng = derive_rng(cfg.seed, "augment")

    # the memorized variant fine-tunes around the memorized sample itself
    source_prompts = [(tp if cfg.variant == "memorization" and cfg.method == "model" else ap) for tp, ap in pairs + context]
    bank = PromptBank(vocab, source_prompts)
    pools = None
    if cfg.anchor_source == "model" or cfg.fixed_pool:
        pool_rng = derive_rng(cfg.seed, "anchor-pool")
        pools = {}
        for i, p in enumerate(source_prompts):
            if p.tokens in pools:
                continue
            if cfg.anchor_source == "model":
                pools[p.tokens] = ddpm_sample(model, p.tokens, sched, cfg.pool_size, pool_rng)
            else:
                pools[p.tokens] = bank.sample(np.full(cfg.pool_size, i), pool_rng)

    def probe_at(step: int) -> float | None:
        if probe is None:
            return None
        return float(probe(model, derive_rng(cfg.seed, "probe", step)))

    log.initial_score = probe_at(0)
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        k = step - 1
        idx = 0 if (k % 2 == 0 or not context) else 1 + (k // 2) % len(context)
        target, anchor = (pairs + context)[idx]
        if pools is None:
            x0 = bank.sample(np.full(cfg.batch_size, idx), rng)
        else:
            pool = pools[source_prompts[idx].tokens]
            x0 = pool[rng.integers(0, pool.shape[0], size=cfg.batch_size)]
        x0 = augment(x0, cfg.augmentation, aug_rng)
        if cfg.method == "noise":
            loss = noise_ablation_step(model, x0, target, sched, rng, opt)
        else:
            loss = model_ablation_step(model, anchor, target, x0, sched, rng, opt)
        probed = step % cfg.probe_interval == 0 or step == cfg.steps
        log.records.append(StepRecord(step, loss, probe_at(step) if probed else None, time.perf_counter() - t0))
    model.params.set_trainable(model.params.names())
    return model, log
