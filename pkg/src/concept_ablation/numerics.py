"""Dense float64 numerics with explicit reverse-mode gradients.

Every differentiable op returns ``(value, backward)`` where ``backward`` maps
the upstream gradient to gradients of the op's inputs. Composite models chain
these closures by hand; there is no global tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def affine(x: Array, W: Array, b: Array):
    """y = x @ W + b for x[n, d_in], W[d_in, d_out], b[d_out]."""
    x, W, b = _as_f64(x), _as_f64(W), _as_f64(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: cannot apply W{W.shape}, b{b.shape} to x{x.shape}")
    y = x @ W + b

    def backward(dy: Array):
        return dy @ W.T, x.T @ dy, dy.sum(axis=0)

    return y, backward


def nonlinearity(x: Array):
    y = np.tanh(_as_f64(x))

    def backward(dy: Array):
        return dy * (1.0 - y * y)

    return y, backward


def softmax(v: Array):
    """Softmax over the last axis, stabilised by max subtraction."""
    v = _as_f64(v)
    if v.size == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)

    def backward(dp: Array):
        return p * (dp - (dp * p).sum(axis=-1, keepdims=True))

    return p, backward


@dataclass
class ParamSet:
    """Named parameters, matching gradient buffers and a trainable mask."""

    params: dict[str, Array]
    grads: dict[str, Array] = field(default_factory=dict)
    trainable: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.params = {k: _as_f64(v).copy() for k, v in self.params.items()}
        if not self.grads:
            self.zero_grad()
        if not self.trainable:
            self.trainable = set(self.params)
        unknown = set(self.trainable) - set(self.params)
        if unknown:
            raise KeyError(f"trainable names not in parameters: {sorted(unknown)}")

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"trainable names not in parameters: {sorted(unknown)}")
        self.trainable = names

    def accumulate(self, grads: Mapping[str, Array]) -> None:
        for k, g in grads.items():
            self.grads[k] += g

    def copy(self) -> "ParamSet":
        out = ParamSet({k: v.copy() for k, v in self.params.items()}, trainable=set(self.trainable))
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState) -> None:
    """Bias-corrected Adam update of the trainable parameters, in place."""
    names = sorted(params.trainable)
    for name in names:
        g = params.grads.get(name)
        if g is None:
            raise GradientError(f"no gradient for trainable parameter {name!r}")
        if g.shape != params.params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params.params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in names:
        g = params.grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params.params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(
    loss_fn: Callable[[ParamSet], tuple[float, Mapping[str, Array]]],
    params: ParamSet,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` returns ``(loss, grads)`` for the given parameters and must be
    deterministic. Only trainable entries are compared; ``params`` is restored
    exactly afterwards.
    """
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise GradientError(f"non-finite loss {loss}")
    worst = 0.0
    for name in sorted(params.trainable):
        p = params.params[name]
        g = np.asarray(grads.get(name, np.zeros_like(p)))
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(params)[0]
            flat[i] = orig - step
            lm = loss_fn(params)[0]
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise GradientError(f"non-finite loss while perturbing {name}[{i}]")
            fd = (lp - lm) / (2.0 * step)
            err = abs(gflat[i] - fd) / max(1e-8, abs(gflat[i]) + abs(fd))
            worst = max(worst, err)
    return worst
