"""Synthetic concept universe: vocabulary, ground truth, prompts and posteriors."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import yaml
from scipy.special import logsumexp

from .diffusion import PAD

Array = np.ndarray

VOCAB_FORMAT = "concept-vocabulary/1"
KINDS = ("object", "style", "trademark", "memorized", "synonym", "generic")
EXCLUSIVE_KINDS = ("object", "style", "trademark")


class VocabularyError(ValueError):
    pass


class CompositionError(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise CompositionError("prompt must contain at least one token")
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __iter__(self):
        return iter(self.tokens)

    def __len__(self):
        return len(self.tokens)


@dataclass
class ConceptToken:
    name: str
    id: int
    kind: str
    mean: Array | None = None  # object
    sigma: float = 1.0  # object spread, or memorized spread
    matrix: Array | None = None  # style
    glyph: Array | None = None  # trademark
    point: Array | None = None  # memorized
    of: str | None = None  # synonym referent
    members: tuple[str, ...] = ()  # generic


@dataclass
class Component:
    weight: float
    mean: Array
    cov: Array


@dataclass
class AugmentationConfig:
    enabled: bool = True
    jitter: float = 0.05
    scale_range: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not lo <= 1.0 <= hi:
            raise ValueError(f"scale range must bracket 1, got {self.scale_range}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass
class Vocabulary:
    """Tokens with generative semantics over R^(d_obj + d_tm)."""

    d_obj: int
    d_tm: int
    tokens: list[ConceptToken]
    trademark_absent_scale: float = 0.5
    background_scale: float = 1.0
    glyph_scale: float = 0.25
    roles: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._by_name = {}
        for i, tok in enumerate(self.tokens):
            if tok.id != i:
                raise VocabularyError(f"token {tok.name!r} has id {tok.id}, expected {i}")
            if tok.name in self._by_name:
                raise VocabularyError(f"duplicate token name {tok.name!r}")
            self._by_name[tok.name] = tok
        for tok in self.tokens:
            self._validate_token(tok)
        for role, name in self.roles.items():
            if name not in self._by_name:
                raise VocabularyError(f"role {role!r} refers to unknown token {name!r}")

    @property
    def d(self) -> int:
        return self.d_obj + self.d_tm

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, key) -> ConceptToken:
        if isinstance(key, str):
            try:
                return self._by_name[key]
            except KeyError:
                raise VocabularyError(f"unknown token {key!r}") from None
        return self.tokens[int(key)]

    def _validate_token(self, tok: ConceptToken) -> None:
        if tok.kind not in KINDS:
            raise VocabularyError(f"token {tok.name!r}: unknown kind {tok.kind!r}")
        if tok.kind == "object":
            if tok.mean is None or tok.mean.shape != (self.d_obj,):
                raise VocabularyError(f"object {tok.name!r} needs a mean of length {self.d_obj}")
            if tok.sigma <= 0:
                raise VocabularyError(f"object {tok.name!r} needs sigma > 0")
        elif tok.kind == "style":
            if tok.matrix is None or tok.matrix.shape != (self.d_obj, self.d_obj):
                raise VocabularyError(f"style {tok.name!r} needs a {self.d_obj}x{self.d_obj} matrix")
            if abs(np.linalg.det(tok.matrix)) <= 1e-6:
                raise VocabularyError(f"style {tok.name!r} matrix is not invertible")
        elif tok.kind == "trademark":
            if tok.glyph is None or tok.glyph.shape != (self.d_tm,):
                raise VocabularyError(f"trademark {tok.name!r} needs a glyph of length {self.d_tm}")
        elif tok.kind == "memorized":
            if tok.point is None or tok.point.shape != (self.d,):
                raise VocabularyError(f"memorized {tok.name!r} needs a point of length {self.d}")
            if tok.sigma <= 0:
                raise VocabularyError(f"memorized {tok.name!r} needs sigma > 0")
        elif tok.kind == "synonym":
            ref = self._by_name.get(tok.of)
            if ref is None:
                raise VocabularyError(f"synonym {tok.name!r} refers to unknown token {tok.of!r}")
            if ref.kind == "synonym":
                raise VocabularyError(f"synonym {tok.name!r} must refer to a non-synonym token")
        elif tok.kind == "generic":
            if not tok.members:
                raise VocabularyError(f"generic {tok.name!r} needs members")
            kinds = set()
            for m in tok.members:
                if m not in self._by_name:
                    raise VocabularyError(f"generic {tok.name!r} member {m!r} is unknown")
                kinds.add(self._by_name[m].kind)
            if len(kinds) != 1 or kinds & {"generic", "synonym"}:
                raise VocabularyError(f"generic {tok.name!r} members must share one concrete kind")

    # ---- prompts -----------------------------------------------------------

    def prompt(self, *names: str) -> Prompt:
        p = Prompt(tuple(self[n].id for n in names))
        self.validate(p)
        return p

    def parse(self, text: str) -> Prompt:
        """``"cup+starbucks"`` -> Prompt."""
        return self.prompt(*[s.strip() for s in text.split("+") if s.strip()])

    def describe(self, prompt: Prompt) -> str:
        return "+".join(self[t].name for t in prompt)

    def resolve(self, tok: ConceptToken) -> ConceptToken:
        return self[tok.of] if tok.kind == "synonym" else tok

    def effective_kind(self, tok: ConceptToken) -> str:
        tok = self.resolve(tok)
        if tok.kind == "generic":
            return self[tok.members[0]].kind
        return tok.kind

    def validate(self, prompt: Prompt) -> None:
        counts: dict[str, int] = {}
        for t in prompt:
            if not 0 <= t < self.size:
                raise CompositionError(f"token id {t} outside vocabulary of size {self.size}")
            k = self.effective_kind(self[t])
            counts[k] = counts.get(k, 0) + 1
        for k in EXCLUSIVE_KINDS + ("memorized",):
            if counts.get(k, 0) > 1:
                raise CompositionError(f"prompt {self.describe(prompt)!r} has {counts[k]} {k} tokens")

    def is_synonym(self, token_id: int) -> bool:
        return self[token_id].kind == "synonym"

    # ---- ground truth ------------------------------------------------------

    def components(self, prompt: Prompt) -> list[Component]:
        """Gaussian mixture components of the ground-truth distribution."""
        self.validate(prompt)
        choices = []
        for t in prompt:
            tok = self.resolve(self[t])
            if tok.kind == "generic":
                choices.append([self[m] for m in tok.members])
            else:
                choices.append([tok])
        combos = list(itertools.product(*choices))
        w = 1.0 / len(combos)
        return [self._component(combo, w) for combo in combos]

    def _component(self, toks: Sequence[ConceptToken], weight: float) -> Component:
        by_kind = {t.kind: t for t in toks}
        if "memorized" in by_kind:
            m = by_kind["memorized"]
            return Component(weight, m.point.copy(), m.sigma**2 * np.eye(self.d))
        if "object" in by_kind:
            mu, s = by_kind["object"].mean, by_kind["object"].sigma
        else:
            mu, s = np.zeros(self.d_obj), self.background_scale
        A = by_kind["style"].matrix if "style" in by_kind else np.eye(self.d_obj)
        mean = np.zeros(self.d)
        cov = np.zeros((self.d, self.d))
        mean[: self.d_obj] = A @ mu
        cov[: self.d_obj, : self.d_obj] = s**2 * (A @ A.T)
        if "trademark" in by_kind:
            mean[self.d_obj :] = by_kind["trademark"].glyph
            tm_scale = self.glyph_scale
        else:
            tm_scale = self.trademark_absent_scale
        cov[self.d_obj :, self.d_obj :] = tm_scale**2 * np.eye(self.d_tm)
        return Component(weight, mean, cov)

    def sample_ground_truth(self, prompt: Prompt, n: int, rng: np.random.Generator) -> Array:
        return PromptBank(self, [prompt]).sample(np.zeros(n, dtype=np.int64), rng)

    def log_density(self, x: Array, prompt: Prompt, dims: Sequence[int] | None = None, bandwidth: float = 0.0) -> Array:
        """Log ground-truth density of rows of ``x``, optionally marginal on ``dims``.

        ``bandwidth`` adds an isotropic variance floor h^2 to every component.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.arange(self.d) if dims is None else np.asarray(dims)
        if x.shape[1] != idx.size:
            raise ValueError(f"x has {x.shape[1]} columns, expected {idx.size}")
        parts = []
        for comp in self.components(prompt):
            mean = comp.mean[idx]
            cov = comp.cov[np.ix_(idx, idx)] + bandwidth**2 * np.eye(idx.size)
            try:
                L = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise VocabularyError(f"undefined density for {self.describe(prompt)!r}") from exc
            z = np.linalg.solve(L, (x - mean).T)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            parts.append(np.log(comp.weight) - 0.5 * (z * z).sum(axis=0) - 0.5 * logdet - 0.5 * idx.size * np.log(2 * np.pi))
        return logsumexp(np.stack(parts), axis=0)

    # ---- persistence -------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "Vocabulary":
        if doc.get("format") != VOCAB_FORMAT:
            raise VocabularyError(f"unsupported vocabulary format {doc.get('format')!r}, expected {VOCAB_FORMAT!r}")
        dims = doc.get("dims", {})
        toks = []
        for i, t in enumerate(doc.get("tokens", [])):
            arr = lambda key: None if t.get(key) is None else np.asarray(t[key], dtype=np.float64)  # noqa: E731
            toks.append(
                ConceptToken(
                    name=str(t["name"]),
                    id=i,
                    kind=str(t["kind"]),
                    mean=arr("mean"),
                    sigma=float(t.get("sigma", 1e-3 if t["kind"] == "memorized" else 1.0)),
                    matrix=arr("matrix"),
                    glyph=arr("glyph"),
                    point=arr("point"),
                    of=t.get("of"),
                    members=tuple(t.get("members", ())),
                )
            )
        return cls(
            d_obj=int(dims.get("object", 4)),
            d_tm=int(dims.get("trademark", 2)),
            tokens=toks,
            trademark_absent_scale=float(doc.get("trademark_absent_scale", 0.5)),
            background_scale=float(doc.get("background_scale", 1.0)),
            glyph_scale=float(doc.get("glyph_scale", 0.25)),
            roles=dict(doc.get("roles", {})),
        )

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


class PromptBank:
    """Precomputed mixture components for fast mixed-prompt batch sampling."""

    def __init__(self, vocab: Vocabulary, prompts: Sequence[Prompt]):
        self.vocab = vocab
        self.prompts = list(prompts)
        means, chols, owners, weights = [], [], [], []
        for i, p in enumerate(self.prompts):
            for comp in vocab.components(p):
                means.append(comp.mean)
                chols.append(np.linalg.cholesky(comp.cov))
                owners.append(i)
                weights.append(comp.weight)
        self.means = np.array(means)
        self.chols = np.array(chols)
        owners = np.array(owners)
        weights = np.array(weights)
        width_c = max(int((owners == i).sum()) for i in range(len(self.prompts)))
        self._comp_table = np.zeros((len(self.prompts), width_c), dtype=np.int64)
        self._comp_cdf = np.ones((len(self.prompts), width_c))
        for i in range(len(self.prompts)):
            ix = np.flatnonzero(owners == i)
            self._comp_table[i, : ix.size] = ix
            self._comp_table[i, ix.size :] = ix[-1]
            self._comp_cdf[i, : ix.size] = np.cumsum(weights[ix]) / weights[ix].sum()
        width = max(len(p) for p in self.prompts)
        self.token_matrix = np.full((len(self.prompts), width), PAD, dtype=np.int64)
        for i, p in enumerate(self.prompts):
            self.token_matrix[i, : len(p)] = p.tokens

    def sample(self, which: Array, rng: np.random.Generator) -> Array:
        """One draw per entry of ``which`` (indices into the bank's prompts)."""
        which = np.asarray(which, dtype=np.int64)
        u = rng.random(which.size)
        cdf = self._comp_cdf[which]
        pick = np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)
        comp = self._comp_table[which, pick]
        z = rng.standard_normal((which.size, self.vocab.d))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], z)

    def tokens(self, which: Array) -> Array:
        """Padded ``[n, L]`` token ids, trimmed to the longest selected prompt."""
        mat = self.token_matrix[np.asarray(which)]
        width = int((mat != PAD).sum(axis=1).max())
        return mat[:, :width]


def sample_ground_truth(vocab: Vocabulary, prompt: Prompt, n: int, rng: np.random.Generator) -> Array:
    return vocab.sample_ground_truth(prompt, n, rng)


def compose_prompts(vocab: Vocabulary, target: Prompt, anchor: Prompt, n: int) -> list[tuple[Prompt, Prompt]]:
    """Deterministic (target-with-context, anchor-with-context) training pairs.

    Context fillers cycle round-robin, in vocabulary order, through every
    non-synonym style, generic or object token that composes validly with
    both prompts. Synonyms never appear.
    """
    if tuple(target) == tuple(anchor):
        raise CompositionError("target and anchor prompts must differ")
    used = set(target) | set(anchor)
    fillers = []
    for tok in vocab.tokens:
        if tok.id in used or tok.kind not in ("style", "generic", "object"):
            continue
        try:
            vocab.validate(Prompt(tuple(target) + (tok.id,)))
            vocab.validate(Prompt(tuple(anchor) + (tok.id,)))
        except CompositionError:
            continue
        fillers.append(tok.id)
    if n > 0 and not fillers:
        raise CompositionError(f"no context tokens compose with {vocab.describe(target)!r} and {vocab.describe(anchor)!r}")
    pairs = []
    for k in range(n):
        f = fillers[k % len(fillers)]
        pairs.append((Prompt(tuple(target) + (f,)), Prompt(tuple(anchor) + (f,))))
    return pairs


def embed_prompt(model, prompt: Prompt):
    """Embedding rows of ``prompt`` and a backward into the embedding table."""
    E, _, backward = model.embed(prompt.tokens)
    return E, backward


def augment(batch: Array, cfg: AugmentationConfig, rng: np.random.Generator) -> Array:
    if not cfg.enabled:
        return batch
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi, size=(n, 1))
    return (batch + cfg.jitter * rng.standard_normal(batch.shape)) * scale


def concept_posterior(
    vocab: Vocabulary,
    x: Array,
    candidates: Sequence[Prompt],
    dims: Sequence[int] | None = None,
    bandwidth: float = 0.0,
) -> Array:
    """Posterior over candidates under a uniform prior.

    ``x`` may be one point ``[d]`` (returns ``[k]``) or rows ``[n, d]``
    (returns ``[n, k]``).
    """
    if len(candidates) < 2:
        raise ValueError("concept_posterior needs at least two candidates")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    logp = np.stack([vocab.log_density(x, c, dims, bandwidth) for c in candidates], axis=1)
    post = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return post[0] if single else post

