"""Noise schedule, cross-attention denoiser, DDPM training step and sampler."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, ParamSet, ShapeError, adam_step, affine, nonlinearity, softmax

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    beta: Array
    alpha_bar: Array
    w: Array

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    @property
    def alpha(self) -> Array:
        return 1.0 - self.beta

    @property
    def alpha_bar_prev(self) -> Array:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> Array:
        # beta-tilde; zero at t=0 where no noise is injected
        return self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)


def build_schedule(T: int = 100, beta_min: float = 1e-3, beta_max: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule with unit loss weights.

    The defaults rescale the familiar 1e-4..0.02 / 1000-step schedule to 100
    steps so that alpha_bar at the last step is close to zero and sampling can
    start from a standard normal.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, w=np.ones(int(T)))


def forward_noise(x0: Array, t, eps: Array, sched: NoiseSchedule) -> Array:
    """x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps; ``t`` scalar or per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_noise: x0{x0.shape} vs eps{eps.shape}")
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_features(t, T: int, n_freq: int) -> Array:
    """Sinusoidal encoding of t/T, shape [n, 2*n_freq]."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * np.geomspace(1.0, 64.0, n_freq)
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserConfig:
    vocab_size: int
    d: int = 6
    d_e: int = 16
    d_a: int = 16
    d_h: int = 64
    n_freq: int = 8
    T: int = 100


PARAM_NAMES = ("embedding", "W_q", "W_k", "W_v", "W_in", "b_in", "W_mid", "b_mid", "W_out", "b_out")


@dataclass
class Denoiser:
    """Epsilon-prediction network conditioned on a token prompt.

    Trunk layer 1 reads ``x_t`` and time features. Its hidden state queries a
    single-head cross-attention over the prompt's token embeddings. Trunk
    layer 2 and the linear head both read the hidden state concatenated with
    the attention output.
    """

    config: DenoiserConfig
    params: ParamSet = field(default=None)

    @classmethod
    def init(cls, config: DenoiserConfig, rng: np.random.Generator, zero_head: bool = True) -> "Denoiser":
        c = config
        d_in = c.d + 2 * c.n_freq

        def glorot(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        p = {
            "embedding": rng.normal(0.0, 1.0, size=(c.vocab_size, c.d_e)),
            "W_q": glorot(c.d_h, c.d_a),
            "W_k": glorot(c.d_e, c.d_a),
            "W_v": glorot(c.d_e, c.d_a),
            "W_in": glorot(d_in, c.d_h),
            "b_in": np.zeros(c.d_h),
            "W_mid": glorot(c.d_h + c.d_a, c.d_h),
            "b_mid": np.zeros(c.d_h),
            "W_out": np.zeros((c.d_h + c.d_a, c.d)) if zero_head else glorot(c.d_h + c.d_a, c.d),
            "b_out": np.zeros(c.d),
        }
        return cls(config, ParamSet(p))

    def copy(self) -> "Denoiser":
        return Denoiser(copy.deepcopy(self.config), self.params.copy())

    def embed(self, tokens):
        return embed_tokens(self.params["embedding"], tokens)


PAD = -1


def embed_tokens(table: Array, tokens):
    """Row lookup for ``[L]`` or padded ``[n, L]`` ids (padding = -1).

    Returns ``(E, mask, backward)``; ``mask`` is None for an unpadded prompt and
    ``backward`` scatters into a table-shaped gradient.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise ValueError("empty prompt")
    mask = ids != PAD
    if not mask.any(axis=-1).all():
        raise ValueError("empty prompt")
    valid = ids[mask]
    if valid.min() < 0 or valid.max() >= table.shape[0]:
        raise KeyError(f"token id out of range for vocabulary of size {table.shape[0]}: {sorted(set(valid.tolist()))}")
    safe = np.where(mask, ids, 0)
    E = table[safe]
    if mask.all():
        mask = None

    def backward(dE: Array) -> Array:
        g = np.zeros_like(table)
        if mask is None:
            np.add.at(g, safe, dE)
        else:
            np.add.at(g, safe[mask], dE[mask])
        return g

    return E, mask, backward


def predict_eps(model: Denoiser, x_t: Array, prompt_embedding: Array, t, mask: Array | None = None):
    """Forward pass. Returns ``(eps_hat, backward, attention_weights)``.

    ``prompt_embedding`` is ``[L, d_e]`` shared by the batch or ``[n, L, d_e]``
    per row, with ``mask[n, L]`` marking real tokens. ``backward(d_eps)``
    returns ``(param_grads, d_prompt_embedding)``; ``param_grads`` excludes the
    embedding table, which the caller owns.
    """
    P = model.params.params
    c = model.config
    x_t = np.asarray(x_t, dtype=np.float64)
    E = np.asarray(prompt_embedding, dtype=np.float64)
    shared = E.ndim == 2
    if E.shape[-2] < 1:
        raise ValueError("prompt embedding must have at least one token")
    if x_t.ndim != 2 or x_t.shape[1] != c.d:
        raise ShapeError(f"x_t{x_t.shape} does not match data dimension {c.d}")
    n = x_t.shape[0]
    E3 = E[None] if shared else E
    if E3.shape[0] not in (1, n):
        raise ShapeError(f"prompt batch {E3.shape[0]} does not match x_t batch {n}")
    tf = time_features(t, c.T, c.n_freq)
    if tf.shape[0] == 1 and n != 1:
        tf = np.repeat(tf, n, axis=0)

    z1, b_in = affine(np.concatenate([x_t, tf], axis=1), P["W_in"], P["b_in"])
    h1, b_act1 = nonlinearity(z1)

    q = h1 @ P["W_q"]
    K = E3 @ P["W_k"]
    V = E3 @ P["W_v"]
    scale = 1.0 / np.sqrt(c.d_a)
    scores = (K @ q[:, :, None])[:, :, 0] * scale
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    A, b_sm = softmax(scores)
    attn = (A[:, None, :] @ V)[:, 0, :]

    z2, b_mid = affine(np.concatenate([h1, attn], axis=1), P["W_mid"], P["b_mid"])
    h2, b_act2 = nonlinearity(z2)
    out, b_out = affine(np.concatenate([h2, attn], axis=1), P["W_out"], P["b_out"])

    def backward(d_out: Array):
        g = {}
        d_cat2, g["W_out"], g["b_out"] = b_out(d_out)
        d_h2, d_attn = d_cat2[:, : c.d_h], d_cat2[:, c.d_h :].copy()
        d_cat1, g["W_mid"], g["b_mid"] = b_mid(b_act2(d_h2))
        d_h1 = d_cat1[:, : c.d_h].copy()
        d_attn += d_cat1[:, c.d_h :]
        dA = (V @ d_attn[:, :, None])[:, :, 0]
        dV = A[:, :, None] * d_attn[:, None, :]
        d_scores = b_sm(dA) * scale
        dK = d_scores[:, :, None] * q[:, None, :]
        dq = (d_scores[:, None, :] @ K)[:, 0, :]
        if shared:
            dK, dV = dK.sum(axis=0), dV.sum(axis=0)
            g["W_k"] = E.T @ dK
            g["W_v"] = E.T @ dV
        else:
            g["W_k"] = np.einsum("nle,nla->ea", E, dK)
            g["W_v"] = np.einsum("nle,nla->ea", E, dV)
        dE = dK @ P["W_k"].T + dV @ P["W_v"].T
        g["W_q"] = h1.T @ dq
        d_h1 += dq @ P["W_q"].T
        _, g["W_in"], g["b_in"] = b_in(b_act1(d_h1))
        return g, dE

    return out, backward, A


def eps_with_grad(model: Denoiser, x_t: Array, tokens, t):
    """predict_eps from token ids; backward returns gradients for every parameter."""
    E, mask, b_emb = model.embed(tokens)
    out, b_net, _ = predict_eps(model, x_t, E, t, mask)

    def backward(d_out: Array) -> dict[str, Array]:
        g, dE = b_net(d_out)
        g["embedding"] = b_emb(dE)
        return g

    return out, backward


def weighted_mse(pred: Array, target: Array, w: Array):
    """mean_i w_i * mean_j (pred - target)^2 and its gradient w.r.t. ``pred``."""
    diff = pred - target
    n, d = diff.shape
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
    loss = float(np.mean(w * np.mean(diff * diff, axis=1)))
    d_pred = (2.0 / (n * d)) * w[:, None] * diff
    return loss, d_pred


def standard_loss(model: Denoiser, x0: Array, tokens, t, eps: Array, sched: NoiseSchedule):
    """Diffusion loss at fixed (t, eps); returns ``(loss, grads)``."""
    x_t = forward_noise(x0, t, eps, sched)
    pred, back = eps_with_grad(model, x_t, tokens, t)
    loss, d_pred = weighted_mse(pred, eps, sched.w[np.asarray(t)])
    return loss, back(d_pred)


def apply_grads(model: Denoiser, grads: dict[str, Array], opt: AdamState) -> None:
    model.params.zero_grad()
    model.params.accumulate({k: v for k, v in grads.items() if k in model.params.trainable})
    adam_step(model.params, opt)


def train_step_standard(model: Denoiser, x0: Array, tokens, sched: NoiseSchedule, rng: np.random.Generator, opt: AdamState) -> float:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("empty batch")
    if not model.params.trainable:
        raise ValueError("model has no trainable parameters")
    t = rng.integers(0, sched.T, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    loss, grads = standard_loss(model, x0, tokens, t, eps, sched)
    apply_grads(model, grads, opt)
    return loss


def ddpm_sample(model: Denoiser, tokens, sched: NoiseSchedule, n: int, rng: np.random.Generator, eps_fn=None, variance: str = "beta") -> Array:
    """Ancestral DDPM sampling from x_T ~ N(0, I).

    ``variance`` picks the injected noise: ``"beta"`` (sigma_t^2 = beta_t) or
    ``"posterior"`` (beta-tilde). ``eps_fn(x_t, t)`` overrides the network.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if variance not in ("beta", "posterior"):
        raise ValueError(f"unknown sampler variance {variance!r}")
    d = model.config.d
    if eps_fn is None:
        E, mask, _ = model.embed(tokens)

        def eps_fn(x, t):
            return predict_eps(model, x, E, t, mask)[0]

    x = rng.standard_normal((n, d))
    alpha, ab = sched.alpha, sched.alpha_bar
    var = sched.beta if variance == "beta" else sched.posterior_variance
    for t in range(sched.T - 1, -1, -1):
        eps_hat = eps_fn(x, t)
        x = (x - sched.beta[t] / np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(alpha[t])
        if t > 0:
            x = x + np.sqrt(var[t]) * rng.standard_normal((n, d))
    return x
