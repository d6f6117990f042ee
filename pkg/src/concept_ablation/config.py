"""Experiment configuration files: parsing, validation and hashing.

A config is a YAML document tagged ``format: ablation-experiment/1``. Every
validation problem is collected and reported together, each prefixed with
the dotted path of the offending field.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .ablation import METHODS, VARIANTS, AblationConfig, FinetuneScope
from .concepts import AugmentationConfig, CompositionError, Prompt, Vocabulary, VocabularyError
from .diffusion import build_schedule
from .pretrain import PretrainConfig, default_pretrain_prompts

CONFIG_FORMAT = "ablation-experiment/1"
DEFAULT_VOCABULARY = "default"

SCHEDULE_DEFAULTS = {"T": 100, "beta_min": 1e-3, "beta_max": 0.2}
ARCH_DEFAULTS = {"d_e": 16, "d_a": 16, "d_h": 64, "n_freq": 8}
PRETRAIN_DEFAULTS = {
    "steps": 20000,
    "batch_size": 128,
    "lr": 3e-3,
    "min_lr_ratio": 0.05,
    "ema": 0.999,
    "concepts": "default",
    "trademark_carriers": ["cup"],
}
ABLATION_DEFAULTS = {
    "variant": "instance",
    "method": "model",
    "compare_methods": False,
    "trademark_comparison": False,
    "target": None,
    "anchor": None,
    "scope": "cross_attention",
    "steps": 400,
    "batch_size": 32,
    "lr": None,
    "betas": [0.9, 0.999],
    "adam_eps": 1e-8,
    "n_context": 200,
    "probe_interval": 50,
    "anchor_source": "ground_truth",
    "fixed_pool": False,
    "pool_size": 512,
    "augmentation": {"enabled": True, "jitter": 0.05, "scale_range": [0.95, 1.05]},
}
EVAL_DEFAULTS = {
    "n": 500,
    "probe_n": 200,
    "bandwidth": 0.15,
    "target": None,
    "anchor": None,
    "surrounding": [],
    "far": [],
    "candidates": None,
    "synonyms": [],
    "glyph_candidates": [],
    "object_candidates": [],
}
TOP_KEYS = {"format", "seed", "vocabulary", "schedule", "architecture", "pretrain", "ablation", "eval", "output_dir", "cache_dir"}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid experiment config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    seed: int
    vocabulary: str
    vocab: Vocabulary = field(repr=False)
    vocab_doc: dict = field(repr=False)
    schedule: dict
    architecture: dict
    pretrain: dict
    ablation: dict
    eval: dict
    output_dir: Path
    cache_dir: Path | None = None
    source: Path | None = None

    # ---- derived views ------------------------------------------------------

    def build_schedule(self):
        return build_schedule(**self.schedule)

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(steps=p["steps"], batch_size=p["batch_size"], lr=p["lr"], min_lr_ratio=p["min_lr_ratio"], ema=p["ema"])

    def pretrain_prompts(self) -> list[Prompt]:
        if self.pretrain["concepts"] == "default":
            return default_pretrain_prompts(self.vocab, self.pretrain["trademark_carriers"])
        return [self.vocab.parse(s) for s in self.pretrain["concepts"]]

    def prompt(self, text: str) -> Prompt:
        return self.vocab.parse(text)

    def ablation_config(self, method: str | None = None) -> AblationConfig:
        a = self.ablation
        aug = a["augmentation"]
        return AblationConfig(
            target=self.prompt(a["target"]),
            anchor=self.prompt(a["anchor"]),
            variant=a["variant"],
            method=method or a["method"],
            scope=FinetuneScope(a["scope"]),
            augmentation=AugmentationConfig(enabled=aug["enabled"], jitter=aug["jitter"], scale_range=tuple(aug["scale_range"])),
            steps=a["steps"],
            batch_size=a["batch_size"],
            lr=a["lr"],
            beta1=a["betas"][0],
            beta2=a["betas"][1],
            adam_eps=a["adam_eps"],
            seed=self.seed,
            n_context=a["n_context"],
            probe_interval=a["probe_interval"],
            anchor_source=a["anchor_source"],
            fixed_pool=a["fixed_pool"],
            pool_size=a["pool_size"],
        )

    def eval_prompts(self, key: str) -> list[Prompt]:
        return [self.prompt(s) for s in self.eval[key]]

    @property
    def eval_target(self) -> Prompt:
        return self.prompt(self.eval["target"] or self.ablation["target"])

    @property
    def eval_anchor(self) -> Prompt:
        return self.prompt(self.eval["anchor"] or self.ablation["anchor"])

    def candidates(self) -> list[Prompt]:
        e = self.eval
        names = e["candidates"]
        if names is None:
            names = [self.vocab.describe(self.eval_target), self.vocab.describe(self.eval_anchor)] + e["surrounding"] + e["far"]
        return [self.prompt(s) for s in names]

    # ---- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        """Resolved config with every default filled in (paths excluded)."""
        return {
            "format": CONFIG_FORMAT,
            "seed": self.seed,
            "vocabulary": self.vocabulary,
            "schedule": self.schedule,
            "architecture": self.architecture,
            "pretrain": self.pretrain,
            "ablation": self.ablation,
            "eval": self.eval,
        }

    def config_hash(self) -> str:
        payload = {"config": self.to_dict(), "vocabulary": self.vocab_doc}
        return _digest(payload)

    def pretrain_hash(self) -> str:
        payload = {
            "vocabulary": self.vocab_doc,
            "schedule": self.schedule,
            "architecture": self.architecture,
            "pretrain": self.pretrain,
            "seed": self.seed,
        }
        return _digest(payload)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if not 0 <= int(seed) < 2**64:
            raise ConfigError([f"seed: must be an unsigned 64-bit integer, got {seed}"])
        out = copy.copy(self)
        out.seed = int(seed)
        return out


def _digest(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def default_vocabulary_path() -> Path:
    return Path(str(resources.files("concept_ablation") / "data" / "default_vocab.yaml"))


class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def section(self, doc: dict, name: str, defaults: dict, path: str | None = None) -> dict:
        path = path or name
        raw = doc.get(name) or {}
        if not isinstance(raw, dict):
            self.errors.append(f"{path}: expected a mapping")
            raw = {}
        for k in sorted(set(raw) - set(defaults)):
            self.errors.append(f"{path}.{k}: unknown field")
        out = copy.deepcopy(defaults)
        out.update({k: v for k, v in raw.items() if k in defaults})
        return out

    def positive(self, sec: dict, path: str, keys, integer=True, allow_zero=False) -> None:
        for k in keys:
            v = sec[k]
            if not integer and isinstance(v, str):
                # YAML 1.1 reads exponents without a dot ("5e-4") as strings
                try:
                    v = sec[k] = float(v)
                except ValueError:
                    pass
            ok_type = isinstance(v, int) and not isinstance(v, bool) if integer else isinstance(v, (int, float)) and not isinstance(v, bool)
            if not ok_type:
                self.errors.append(f"{path}.{k}: expected {'an integer' if integer else 'a number'}, got {v!r}")
            elif v < 0 or (v == 0 and not allow_zero):
                self.errors.append(f"{path}.{k}: must be {'non-negative' if allow_zero else 'positive'}, got {v!r}")

    def prompt(self, vocab: Vocabulary | None, text, path: str) -> None:
        if vocab is None:
            return
        if not isinstance(text, str) or not text.strip():
            self.errors.append(f"{path}: expected a prompt string like 'cup+starbucks', got {text!r}")
            return
        try:
            vocab.parse(text)
        except VocabularyError as exc:
            self.errors.append(f"{path}: {exc}")
        except CompositionError as exc:
            self.errors.append(f"{path}: {exc}")

    def prompts(self, vocab, items, path: str) -> None:
        if not isinstance(items, list):
            self.errors.append(f"{path}: expected a list of prompts")
            return
        for i, text in enumerate(items):
            self.prompt(vocab, text, f"{path}[{i}]")


def _load_vocab(ref: str, base: Path, errors: list[str]) -> tuple[Vocabulary | None, dict]:
    path = default_vocabulary_path() if ref == DEFAULT_VOCABULARY else (base / ref)
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        return Vocabulary.from_dict(doc), doc
    except FileNotFoundError:
        errors.append(f"vocabulary: file not found: {path}")
    except (VocabularyError, KeyError, TypeError, yaml.YAMLError) as exc:
        errors.append(f"vocabulary: {exc}")
    return None, {}


def config_from_dict(doc: dict, base: Path = Path("."), source: Path | None = None) -> ExperimentConfig:
    chk = _Checker()
    err = chk.errors
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: expected a mapping"])
    if doc.get("format") != CONFIG_FORMAT:
        err.append(f"format: expected {CONFIG_FORMAT!r}, got {doc.get('format')!r}")
    for k in sorted(set(doc) - TOP_KEYS):
        err.append(f"{k}: unknown field")

    seed = doc.get("seed")
    if seed is None:
        err.append("seed: required (runs never fall back to implicit randomness)")
    elif not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        err.append(f"seed: must be an unsigned 64-bit integer, got {seed!r}")

    vocab_ref = doc.get("vocabulary", DEFAULT_VOCABULARY)
    vocab, vocab_doc = _load_vocab(str(vocab_ref), base, err)

    sched = chk.section(doc, "schedule", SCHEDULE_DEFAULTS)
    chk.positive(sched, "schedule", ["T"])
    chk.positive(sched, "schedule", ["beta_min", "beta_max"], integer=False)
    if not err:
        try:
            build_schedule(**sched)
        except ValueError as exc:
            err.append(f"schedule: {exc}")

    arch = chk.section(doc, "architecture", ARCH_DEFAULTS)
    chk.positive(arch, "architecture", list(ARCH_DEFAULTS))

    pre = chk.section(doc, "pretrain", PRETRAIN_DEFAULTS)
    chk.positive(pre, "pretrain", ["steps"], allow_zero=True)
    chk.positive(pre, "pretrain", ["batch_size"])
    chk.positive(pre, "pretrain", ["lr", "min_lr_ratio", "ema"], integer=False)
    if pre["concepts"] != "default":
        chk.prompts(vocab, pre["concepts"], "pretrain.concepts")
        if isinstance(pre["concepts"], list) and not pre["concepts"]:
            err.append("pretrain.concepts: must not be empty")
    chk.prompts(vocab, pre["trademark_carriers"], "pretrain.trademark_carriers")

    abl = chk.section(doc, "ablation", ABLATION_DEFAULTS)
    aug = chk.section(abl, "augmentation", ABLATION_DEFAULTS["augmentation"], "ablation.augmentation")
    abl["augmentation"] = aug
    for key in ("target", "anchor"):
        if abl[key] is None:
            err.append(f"ablation.{key}: required")
        else:
            chk.prompt(vocab, abl[key], f"ablation.{key}")
    if abl["variant"] not in VARIANTS:
        err.append(f"ablation.variant: must be one of {list(VARIANTS)}, got {abl['variant']!r}")
    if abl["method"] not in METHODS:
        err.append(f"ablation.method: must be one of {list(METHODS)}, got {abl['method']!r}")
    if abl["scope"] not in [s.value for s in FinetuneScope]:
        err.append(f"ablation.scope: must be one of {[s.value for s in FinetuneScope]}, got {abl['scope']!r}")
    chk.positive(abl, "ablation", ["steps", "n_context"], allow_zero=True)
    chk.positive(abl, "ablation", ["batch_size", "probe_interval", "pool_size"])
    if abl["lr"] is not None:
        chk.positive(abl, "ablation", ["lr"], integer=False)
    chk.positive(abl, "ablation", ["adam_eps"], integer=False)
    betas = abl["betas"]
    if not (isinstance(betas, list) and len(betas) == 2 and all(isinstance(b, (int, float)) and 0 <= b < 1 for b in betas)):
        err.append(f"ablation.betas: expected two numbers in [0, 1), got {betas!r}")
    chk.positive(aug, "ablation.augmentation", ["jitter"], integer=False, allow_zero=True)
    sr = aug["scale_range"]
    if not (isinstance(sr, list) and len(sr) == 2 and all(isinstance(v, (int, float)) for v in sr) and 0 < sr[0] <= 1 <= sr[1]):
        err.append(f"ablation.augmentation.scale_range: expected [lo, hi] with 0 < lo <= 1 <= hi, got {sr!r}")
    if abl["trademark_comparison"] and abl["variant"] != "instance":
        err.append("ablation.trademark_comparison: requires the instance variant")

    ev = chk.section(doc, "eval", EVAL_DEFAULTS)
    chk.positive(ev, "eval", ["n", "probe_n"])
    for k in ("n", "probe_n"):
        if isinstance(ev[k], int) and 0 < ev[k] < 100:
            err.append(f"eval.{k}: alignment scores need at least 100 samples, got {ev[k]}")
    chk.positive(ev, "eval", ["bandwidth"], integer=False, allow_zero=True)
    for key in ("target", "anchor"):
        if ev[key] is not None:
            chk.prompt(vocab, ev[key], f"eval.{key}")
    for key in ("surrounding", "far", "synonyms", "glyph_candidates", "object_candidates"):
        chk.prompts(vocab, ev[key], f"eval.{key}")
    if ev["candidates"] is not None:
        chk.prompts(vocab, ev["candidates"], "eval.candidates")
    if abl["trademark_comparison"] and (len(ev["glyph_candidates"]) < 2 or len(ev["object_candidates"]) < 2):
        err.append("eval.glyph_candidates/object_candidates: trademark comparison needs at least two of each")

    output_dir = doc.get("output_dir")
    if output_dir is None:
        err.append("output_dir: required")
    cache_dir = doc.get("cache_dir")

    if err:
        raise ConfigError(err)

    cfg = ExperimentConfig(
        seed=int(seed),
        vocabulary=str(vocab_ref),
        vocab=vocab,
        vocab_doc=vocab_doc,
        schedule=sched,
        architecture=arch,
        pretrain=pre,
        ablation=abl,
        eval=ev,
        output_dir=base / str(output_dir),
        cache_dir=None if cache_dir is None else base / str(cache_dir),
        source=source,
    )
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: ExperimentConfig) -> None:
    """Cross-field rules that need parsed prompts."""
    err = []
    try:
        cfg.ablation_config().validate(cfg.vocab)
    except ValueError as exc:
        err.append(f"ablation: {exc}")
    cands = {p.tokens for p in cfg.candidates()}
    if len(cands) < 2:
        err.append("eval.candidates: need at least two distinct candidates")
    for key in ("target", "anchor"):
        p = cfg.eval_target if key == "target" else cfg.eval_anchor
        if p.tokens not in cands:
            err.append(f"eval.candidates: missing the evaluation {key} {cfg.vocab.describe(p)!r}")
    near = {cfg.eval_target.tokens, cfg.eval_anchor.tokens} | {p.tokens for p in cfg.eval_prompts("surrounding")}
    for i, p in enumerate(cfg.eval_prompts("far")):
        if p.tokens in near:
            err.append(f"eval.far[{i}]: {cfg.vocab.describe(p)!r} overlaps the target/anchor/surrounding set")
    banned = set(cfg.ablation_config().target)
    for i, p in enumerate(cfg.eval_prompts("synonyms")):
        if banned & set(p):
            err.append(f"eval.synonyms[{i}]: {cfg.vocab.describe(p)!r} contains a literal ablation target token")
        if not any(cfg.vocab.is_synonym(t) for t in p):
            err.append(f"eval.synonyms[{i}]: {cfg.vocab.describe(p)!r} contains no paraphrase token")
    if cfg.ablation["trademark_comparison"]:
        target = cfg.eval_target
        if target.tokens not in {p.tokens for p in cfg.eval_prompts("glyph_candidates")}:
            err.append("eval.glyph_candidates: must include the evaluation target")
        obj = Prompt(tuple(t for t in target if cfg.vocab.effective_kind(cfg.vocab[t]) != "trademark"))
        if obj.tokens not in {p.tokens for p in cfg.eval_prompts("object_candidates")}:
            err.append(f"eval.object_candidates: must include the target's object prompt {cfg.vocab.describe(obj)!r}")
    if err:
        raise ConfigError(err)


def parse_config(path) -> ExperimentConfig:
    """Load and fully validate an experiment config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"<file>: config not found: {path}"])
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML: {exc}"]) from None
    return config_from_dict(doc, base=path.resolve().parent, source=path)
