"""Alignment scores and baseline-vs-ablated evaluation reports.

The alignment score of a sample set is the mean posterior probability of a
concept among a candidate set, using the analytic ground-truth densities. All
verdicts are paired comparisons; there is no absolute success threshold.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .concepts import Prompt, Vocabulary, concept_posterior
from .diffusion import Denoiser, NoiseSchedule, ddpm_sample
from .seeding import derive_rng

Array = np.ndarray

MIN_SAMPLES = 100
DEFAULT_BANDWIDTH = 0.15


class EvaluationError(ValueError):
    pass


@dataclass
class AlignmentScore:
    concept: str
    prompt: str
    model: str
    value: float
    stderr: float
    raw: float
    raw_stderr: float
    n: int
    label: str = ""
    per_sample: Array | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_sample")
        return d


def _mean_se(v: Array) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def alignment_score(
    vocab: Vocabulary,
    samples: Array,
    concept: Prompt,
    candidates: Sequence[Prompt],
    dims: Sequence[int] | None = None,
    bandwidth: float = DEFAULT_BANDWIDTH,
    model: str = "",
    prompt: Prompt | None = None,
    label: str = "",
) -> AlignmentScore:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < MIN_SAMPLES:
        raise EvaluationError(f"alignment score needs >= {MIN_SAMPLES} samples, got {samples.shape[0]}")
    keys = [tuple(c) for c in candidates]
    if tuple(concept) not in keys:
        raise EvaluationError(f"concept {vocab.describe(concept)!r} is not in the candidate set")
    post = concept_posterior(vocab, samples if dims is None else samples[:, list(dims)], candidates, dims, bandwidth)
    # with duplicated candidates the concept's mass is that of its first copy
    per_sample = post[:, keys.index(tuple(concept))]
    raw = vocab.log_density(samples if dims is None else samples[:, list(dims)], concept, dims, bandwidth)
    value, se = _mean_se(per_sample)
    raw_mean, raw_se = _mean_se(raw)
    return AlignmentScore(
        concept=vocab.describe(concept),
        prompt=vocab.describe(prompt if prompt is not None else concept),
        model=model,
        value=value,
        stderr=se,
        raw=raw_mean,
        raw_stderr=raw_se,
        n=int(samples.shape[0]),
        label=label,
        per_sample=per_sample,
    )


def generate(model: Denoiser, prompt: Prompt, sched: NoiseSchedule, n: int, seed: int, *stream) -> Array:
    """Samples from ``model``; the noise stream depends only on ``(seed, stream)``."""
    return ddpm_sample(model, prompt.tokens, sched, n, derive_rng(seed, "generate", *stream))


@dataclass
class EvalReport:
    scores: list[AlignmentScore] = field(default_factory=list)
    leakage: list[dict] = field(default_factory=list)
    trademark: list[dict] = field(default_factory=list)
    far: list[dict] = field(default_factory=list)
    comparison: dict | None = None
    metadata: dict = field(default_factory=dict)

    def score(self, label: str, model: str, concept: str | None = None, prompt: str | None = None) -> AlignmentScore:
        for s in self.scores:
            if s.label == label and s.model == model and (concept is None or s.concept == concept) and (prompt is None or s.prompt == prompt):
                return s
        raise KeyError(f"no score for label={label!r} model={model!r} concept={concept!r} prompt={prompt!r}")

    def to_dict(self) -> dict:
        return {
            "metadata": dict(sorted(self.metadata.items())),
            "scores": [s.to_dict() for s in self.scores],
            "leakage": self.leakage,
            "trademark": self.trademark,
            "far": self.far,
            "comparison": self.comparison,
        }

    def check_paired(self) -> None:
        base = {(s.label, s.concept, s.prompt) for s in self.scores if s.model == "baseline"}
        for s in self.scores:
            if s.model == "ablated" and (s.label, s.concept, s.prompt) not in base:
                raise EvaluationError(f"ablated score for {s.concept!r} has no baseline twin")


def _check_same_architecture(a: Denoiser, b: Denoiser) -> None:
    if a.config != b.config:
        raise EvaluationError(f"architectures differ: {a.config} vs {b.config}")
    for name, p in a.params.params.items():
        q = b.params.params.get(name)
        if q is None or q.shape != p.shape:
            raise EvaluationError(f"architectures differ at parameter {name!r}")


def eval_suite(
    vocab: Vocabulary,
    baseline: Denoiser,
    ablated: Denoiser,
    concepts: Mapping[str, Sequence[Prompt]],
    candidates: Sequence[Prompt],
    sched: NoiseSchedule,
    n: int = 500,
    seed: int = 0,
    bandwidth: float = DEFAULT_BANDWIDTH,
    cross: Sequence[tuple[Prompt, Prompt, str]] = (),
) -> EvalReport:
    """Score every labelled concept's own generations under both models.

    ``cross`` entries ``(generated_from, scored_concept, label)`` add scores
    of one prompt's generations against another concept, e.g. the target
    alignment of anchor generations. Both models share noise streams, so
    paired differences carry no sampling noise from the sampler seed.
    """
    _check_same_architecture(baseline, ablated)
    report = EvalReport()
    jobs = [(p, p, label) for label, prompts in concepts.items() for p in prompts] + list(cross)
    for gen_prompt, concept, label in jobs:
        for tag, model in (("baseline", baseline), ("ablated", ablated)):
            x = generate(model, gen_prompt, sched, n, seed, vocab.describe(gen_prompt))
            report.scores.append(alignment_score(vocab, x, concept, candidates, bandwidth=bandwidth, model=tag, prompt=gen_prompt, label=label))
    report.check_paired()
    return report


def leakage_probe(
    vocab: Vocabulary,
    ablated: Denoiser,
    synonym_prompts: Sequence[Prompt],
    target: Prompt,
    candidates: Sequence[Prompt],
    sched: NoiseSchedule,
    n: int = 500,
    seed: int = 0,
    ablated_tokens: Sequence[int] | None = None,
    bandwidth: float = DEFAULT_BANDWIDTH,
    model_tag: str = "ablated",
) -> list[AlignmentScore]:
    """Target alignment of generations from paraphrase prompts (higher = more leakage).

    ``ablated_tokens`` are the literal tokens trained away (default: the
    target's tokens); a probe prompt containing any of them is rejected.
    """
    banned = set(target if ablated_tokens is None else ablated_tokens)
    out = []
    for p in synonym_prompts:
        if banned & set(p):
            raise EvaluationError(f"leakage prompt {vocab.describe(p)!r} contains a literal ablated token")
        if not any(vocab.is_synonym(t) for t in p):
            raise EvaluationError(f"leakage prompt {vocab.describe(p)!r} contains no paraphrase token")
        x = generate(ablated, p, sched, n, seed, vocab.describe(p))
        out.append(alignment_score(vocab, x, target, candidates, bandwidth=bandwidth, model=model_tag, prompt=p, label="leakage"))
    return out


def far_concept_report(
    vocab: Vocabulary,
    baseline: Denoiser,
    ablated: Denoiser,
    far_prompts: Sequence[Prompt],
    candidates: Sequence[Prompt],
    sched: NoiseSchedule,
    n: int = 500,
    seed: int = 0,
    bandwidth: float = DEFAULT_BANDWIDTH,
) -> list[dict]:
    """Per far concept: baseline - ablated alignment with a paired standard error."""
    _check_same_architecture(baseline, ablated)
    rows = []
    for p in far_prompts:
        b = alignment_score(vocab, generate(baseline, p, sched, n, seed, vocab.describe(p)), p, candidates, bandwidth=bandwidth)
        a = alignment_score(vocab, generate(ablated, p, sched, n, seed, vocab.describe(p)), p, candidates, bandwidth=bandwidth)
        diff = b.per_sample - a.per_sample
        delta, se = _mean_se(diff)
        rows.append({"concept": vocab.describe(p), "baseline": b.value, "ablated": a.value, "delta": delta, "stderr": se, "n": n})
    return rows


def compare_methods(log_noise, log_model) -> dict:
    """Paired probe-by-probe comparison of noise- and model-based runs.

    The pre-training probe (step 0) is excluded since both runs share it.
    """
    pn = [(s, v) for s, v in log_noise.probes() if s > 0]
    pm = [(s, v) for s, v in log_model.probes() if s > 0]
    if [s for s, _ in pn] != [s for s, _ in pm]:
        raise EvaluationError(f"probe grids differ: {[s for s, _ in pn]} vs {[s for s, _ in pm]}")
    if not pn:
        raise EvaluationError("no probe points to compare")
    steps = [s for s, _ in pn]
    noise = [v for _, v in pn]
    model = [v for _, v in pm]
    diffs = [m - z for m, z in zip(model, noise)]
    wins = sum(d <= 0 for d in diffs)
    if all(d == 0 for d in diffs):
        verdict = "tie"
    elif wins >= 2 * len(diffs) / 3:
        verdict = "model-based-dominates"
    elif sum(d >= 0 for d in diffs) >= 2 * len(diffs) / 3:
        verdict = "noise-based-dominates"
    else:
        verdict = "mixed"
    return {"steps": steps, "noise": noise, "model": model, "diff": diffs, "model_wins": wins, "verdict": verdict}
