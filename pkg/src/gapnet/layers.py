"""Parameterized building blocks: linear map, Swish MLP and the SwiGLU sifter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, fan_in: int, fan_out: int, rng_seed=None) -> Tensor:
    """Glorot-uniform tensor: entries ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"xavier_init: fans must be positive, got {fan_in}, {fan_out}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a = xavier_bound(fan_in, fan_out)
    return Tensor(rng.uniform(-a, a, size=tuple(shape)), requires_grad=True)


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def default_d_prime(d_in: int) -> int:
    """Smallest power of two that is at least ``2 * d_in``."""
    return next_power_of_two(2 * d_in)


def _check_last_dim(name: str, x: Tensor, expected: int) -> None:
    if x.ndim == 0 or x.shape[-1] != expected:
        raise ShapeError(f"{name}: expected last dim {expected}, got input shape {x.shape}")


@dataclass
class LinearLayer:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng) -> "LinearLayer":
        return cls(xavier_init((d_in, d_out), d_in, d_out, rng), Tensor(np.zeros(d_out), requires_grad=True))

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.W", self.W
        yield f"{prefix}.b", self.b


def linear_forward(layer: LinearLayer, x) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x = ad.as_tensor(x)
    _check_last_dim("linear_forward", x, layer.d_in)
    if x.ndim == 1:
        return ad.reshape(linear_forward(layer, ad.reshape(x, (1, -1))), (layer.d_out,))
    return ad.add(ad.matmul(x, layer.W), layer.b)


@dataclass
class Mlp:
    """Stack of linear layers with Swish between them (none after the last)."""

    layers: list

    @classmethod
    def init(cls, dims, rng) -> "Mlp":
        dims = list(dims)
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        return cls([LinearLayer.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])])

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.{i}")


def mlp_forward(mlp: Mlp, x) -> Tensor:
    h = ad.as_tensor(x)
    for i, layer in enumerate(mlp.layers):
        h = linear_forward(layer, h)
        if i < len(mlp.layers) - 1:
            h = ad.swish(h)
    return h


@dataclass
class SwiGluFfn:
    """Gated expansion-compression block.

    ``(Swish(x W_g + b_g) * (x W_u + b_u)) W_d + b_d`` with the two parallel
    projections widening ``d_in`` to ``d_prime``.
    """

    W_g: Tensor
    b_g: Tensor
    W_u: Tensor
    b_u: Tensor
    W_d: Tensor
    b_d: Tensor

    @classmethod
    def init(cls, d_in: int, rng, d_prime: Optional[int] = None, d_out: Optional[int] = None) -> "SwiGluFfn":
        d_prime = d_prime or default_d_prime(d_in)
        d_out = d_out or d_in
        zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)  # noqa: E731
        return cls(
            W_g=xavier_init((d_in, d_prime), d_in, d_prime, rng),
            b_g=zeros(d_prime),
            W_u=xavier_init((d_in, d_prime), d_in, d_prime, rng),
            b_u=zeros(d_prime),
            W_d=xavier_init((d_prime, d_out), d_prime, d_out, rng),
            b_d=zeros(d_out),
        )

    def calibrate(self, x: np.ndarray) -> float:
        """Rescale ``W_d`` so the block's output on ``x`` has the std of ``x``.

        The gated product is roughly quadratic in the input scale, so small
        inputs come out much smaller still. Returns the applied gain.
        """
        out = swiglu_forward(self, x).data - self.b_d.data
        gain = float(np.std(x) / np.std(out))
        self.W_d.data = self.W_d.data * gain
        return gain

    @property
    def d_in(self) -> int:
        return self.W_g.shape[0]

    @property
    def d_prime(self) -> int:
        return self.W_g.shape[1]

    @property
    def d_out(self) -> int:
        return self.W_d.shape[1]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("W_g", "b_g", "W_u", "b_u", "W_d", "b_d"):
            yield f"{prefix}.{name}", getattr(self, name)


def swiglu_forward(ffn: SwiGluFfn, x) -> Tensor:
    x = ad.as_tensor(x)
    _check_last_dim("swiglu_forward", x, ffn.d_in)
    if x.ndim == 1:
        return ad.reshape(swiglu_forward(ffn, ad.reshape(x, (1, -1))), (ffn.d_out,))
    gate = ad.swish(ad.add(ad.matmul(x, ffn.W_g), ffn.b_g))
    up = ad.add(ad.matmul(x, ffn.W_u), ffn.b_u)
    return ad.add(ad.matmul(ad.mul(gate, up), ffn.W_d), ffn.b_d)
