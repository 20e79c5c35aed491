"""MLPs, Adam and the gradient-reversal layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Mlp:
    """Affine layers with a shared hidden activation and identity output.

    Weights are initialised uniformly in +-1/sqrt(fan_in).
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 activation: str = "relu", name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("Mlp needs at least input and output sizes")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = list(sizes)
        self.activation = activation
        self.name = name
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.layers.append((Tensor(w, requires_grad=True, name=f"{name}.{i}.w"),
                                Tensor(b, requires_grad=True, name=f"{name}.{i}.b")))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(net: Mlp, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != net.in_dim:
        raise ad.ShapeError(f"{net.name}: expected input (n, {net.in_dim}), got {x.shape}")
    act = ad.relu if net.activation == "relu" else ad.tanh
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = act(h)
    return h


def gradient_reversal(x, lambda_d: float) -> Tensor:
    if lambda_d < 0:
        raise ValueError("lambda_d must be >= 0")
    return ad.grl(x, lambda_d)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update using ``p.grad``; mutates params and state.

    Raises NonFiniteGradient (leaving everything untouched) if any grad is NaN/inf.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name or p}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad[...] = 0.0
