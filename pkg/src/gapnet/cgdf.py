"""Context-gated fusion of the three view vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Mlp, SwiGluFfn, mlp_forward, swiglu_forward

CONTEXTS = ("minimalist", "full", "purified")

N_VIEWS = 3


def anchor_width(context: str, d: int) -> int:
    return {"minimalist": 4 * d, "full": 6 * d, "purified": 5 * d}[_check_context(context)]


def _check_context(context: str) -> str:
    if context not in CONTEXTS:
        raise ValueError(f"unknown CGDF context {context!r}; expected one of {CONTEXTS}")
    return context


@dataclass
class CgdfParams:
    gate_mlp: Mlp
    W_logit: Tensor  # g x 3
    purifier: Optional[SwiGluFfn] = None
    context: str = "purified"

    @classmethod
    def init(
        cls,
        d: int,
        rng,
        *,
        context: str = "purified",
        gate_hidden: Optional[int] = None,
        gate_dim: Optional[int] = None,
        d_prime: Optional[int] = None,
    ) -> "CgdfParams":
        width = anchor_width(context, d)
        gate_hidden = gate_hidden or 2 * d
        gate_dim = gate_dim or d
        purifier = SwiGluFfn.init(width, rng, d_prime=d_prime) if context == "purified" else None
        return cls(
            gate_mlp=Mlp.init([width, gate_hidden, gate_dim], rng),
            # zero start: uniform view weights until the gate has learned something
            W_logit=Tensor(np.zeros((gate_dim, N_VIEWS)), requires_grad=True),
            purifier=purifier,
            context=context,
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.purifier is not None:
            yield from self.purifier.named_parameters(f"{prefix}.purifier")
        yield from self.gate_mlp.named_parameters(f"{prefix}.gate_mlp")
        yield f"{prefix}.W_logit", self.W_logit


@dataclass
class FusionOutput:
    v_final: Tensor  # [B, 3d]
    alpha: np.ndarray  # [B, 3]


def cgdf_fuse(
    params: CgdfParams,
    e_t_sifted,
    e_c,
    H_rt,
    H_st,
    H_lt,
    *,
    e_u=None,
    view_logits=None,
    alpha=None,
) -> FusionOutput:
    """Weight each view by a softmax over context-driven logits and concatenate.

    The decision anchor is ``[e_t, e_c, H_rt, H_st, H_lt]`` passed through the
    purifier (``purified``), ``[e_t, H_rt, H_st, H_lt]`` (``minimalist``) or
    ``[e_t, e_u, e_c, H_rt, H_st, H_lt]`` (``full``, needs ``e_u``). Inputs may
    be single vectors or ``[B, d]`` batches.

    Hooks: ``view_logits`` replaces the learned logits before the softmax;
    ``alpha`` replaces the weights outright.
    """
    parts = [ad.as_tensor(x) for x in (e_t_sifted, e_c, H_rt, H_st, H_lt)]
    single = parts[0].ndim == 1
    if single:
        parts = [ad.reshape(p, (1, -1)) for p in parts]
        if e_u is not None:
            e_u = ad.reshape(ad.as_tensor(e_u), (1, -1))
    d = parts[0].shape[-1]
    for p in parts:
        if p.shape != parts[0].shape:
            raise ShapeError(f"cgdf_fuse: input shape {p.shape} does not match {parts[0].shape}")
    e_t, e_c, h_rt, h_st, h_lt = parts
    views = [h_rt, h_st, h_lt]
    B = e_t.shape[0]

    if alpha is not None:
        alpha_t = Tensor(np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B, N_VIEWS)))
    else:
        if view_logits is not None:
            logits = Tensor(np.broadcast_to(np.asarray(view_logits, dtype=np.float64), (B, N_VIEWS)))
        else:
            logits = ad.matmul(mlp_forward(params.gate_mlp, _anchor(params, e_t, e_c, views, e_u)), params.W_logit)
        alpha_t = ad.softmax(logits)

    a_parts = ad.split(alpha_t, [1, 1, 1])
    v_final = ad.concat([ad.mul(h, a) for h, a in zip(views, a_parts)])
    if single:
        return FusionOutput(ad.reshape(v_final, (3 * d,)), alpha_t.data[0])
    return FusionOutput(v_final, alpha_t.data)


def _anchor(params: CgdfParams, e_t, e_c, views, e_u) -> Tensor:
    context = _check_context(params.context)
    if context == "minimalist":
        return ad.concat([e_t, *views])
    if context == "full":
        if e_u is None:
            raise ValueError("cgdf_fuse: the 'full' context needs the user embedding e_u")
        return ad.concat([e_t, ad.as_tensor(e_u), e_c, *views])
    z_raw = ad.concat([e_t, e_c, *views])
    return swiglu_forward(params.purifier, z_raw)
