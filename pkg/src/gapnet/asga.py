"""Adaptive sparse-gated target attention.

Multi-head scaled dot-product attention where the query projection is twice
as wide as usual: one half is the query, the other half a per-head gate logit
whose sigmoid multiplies that head's pooled output. A closed gate lets the
model ignore the history entirely instead of being forced to spread unit
attention mass over it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import SwiGluFfn, swiglu_forward, xavier_init

MASK_FILL = -1e9

NORMALIZERS = ("softmax", "sigmoid")


@dataclass
class AsgaParams:
    W_Q: Tensor  # d x 2*H*d_k, per head [query | gate logit]
    W_K: Tensor  # d x H*d_k
    W_V: Tensor  # d x H*d_k
    W_O: Tensor  # H*d_k x d
    num_heads: int
    d_k: int

    def __post_init__(self):
        d = self.W_Q.shape[0]
        hd = self.num_heads * self.d_k
        if self.W_Q.shape != (d, 2 * hd):
            raise ShapeError(f"W_Q must be {(d, 2 * hd)}, got {self.W_Q.shape}")
        for name in ("W_K", "W_V"):
            if getattr(self, name).shape != (d, hd):
                raise ShapeError(f"{name} must be {(d, hd)}, got {getattr(self, name).shape}")
        if self.W_O.shape != (hd, d):
            raise ShapeError(f"W_O must be {(hd, d)}, got {self.W_O.shape}")

    @classmethod
    def init(cls, d: int, num_heads: int, d_k: int, rng) -> "AsgaParams":
        hd = num_heads * d_k
        return cls(
            W_Q=xavier_init((d, 2 * hd), d, 2 * hd, rng),
            W_K=xavier_init((d, hd), d, hd, rng),
            W_V=xavier_init((d, hd), d, hd, rng),
            W_O=xavier_init((hd, d), hd, d, rng),
            num_heads=num_heads,
            d_k=d_k,
        )

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class AsgaOutput:
    pooled: Tensor  # [B, d] (or [d] for unbatched calls)
    attn_weights: np.ndarray  # [B, H, L]
    gate_values: np.ndarray  # [B, H, d_k]


def asga_attend(
    params: AsgaParams,
    query_vec,
    seq,
    mask=None,
    *,
    gated: bool = True,
    normalizer: str = "softmax",
    gate_logit: Optional[float] = None,
) -> AsgaOutput:
    """Gated multi-head target attention of ``query_vec`` over ``seq``.

    Accepts a single example (query ``[d]``, seq ``[L, d]``, mask ``[L]``) or a
    batch (``[B, d]``, ``[B, L, d]``, ``[B, L]``). Masked positions get no
    weight; rows with no valid position pool to exactly zero.

    ``gated=False`` drops the output gate (plain SDPA). ``normalizer="sigmoid"``
    swaps the softmax for an elementwise sigmoid on the scores. ``gate_logit``
    replaces every gate logit by a constant (diagnostic hook).
    """
    if normalizer not in NORMALIZERS:
        raise ValueError(f"unknown normalizer {normalizer!r}; expected one of {NORMALIZERS}")
    query_vec = ad.as_tensor(query_vec)
    seq = ad.as_tensor(seq)
    single = query_vec.ndim == 1
    if single:
        query_vec = ad.reshape(query_vec, (1, -1))
        seq = ad.reshape(seq, (1,) + seq.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    d, H, dk = params.d, params.num_heads, params.d_k
    if query_vec.ndim != 2 or query_vec.shape[-1] != d:
        raise ShapeError(f"asga_attend: query shape {query_vec.shape} does not match d={d}")
    if seq.ndim != 3 or seq.shape[-1] != d or seq.shape[0] != query_vec.shape[0]:
        raise ShapeError(f"asga_attend: sequence shape {seq.shape} incompatible with query {query_vec.shape}, d={d}")
    B, L = seq.shape[0], seq.shape[1]
    mask = np.ones((B, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (B, L):
        raise ShapeError(f"asga_attend: mask shape {mask.shape} does not match sequence {(B, L)}")

    qg = ad.reshape(ad.matmul(query_vec, params.W_Q), (B, H, 2 * dk))
    q, g_logit = ad.split(qg, [dk, dk])
    if gate_logit is not None:
        g_logit = Tensor(np.full((B, H, dk), float(gate_logit)))
    gate = ad.sigmoid(g_logit)

    if L == 0:
        return _finish(Tensor(np.zeros((B, d))), np.zeros((B, H, 0)), gate.data, single)

    k = ad.transpose(ad.reshape(ad.matmul(seq, params.W_K), (B, L, H, dk)), (0, 2, 3, 1))  # B,H,dk,L
    v = ad.transpose(ad.reshape(ad.matmul(seq, params.W_V), (B, L, H, dk)), (0, 2, 1, 3))  # B,H,L,dk
    scores = ad.scale(ad.matmul(ad.reshape(q, (B, H, 1, dk)), k), 1.0 / math.sqrt(dk))  # B,H,1,L
    bias = np.where(mask, 0.0, MASK_FILL)[:, None, None, :]
    logits = ad.add(scores, bias)
    if normalizer == "softmax":
        attn = ad.softmax(logits)
    else:
        attn = ad.sigmoid(logits)
    h_att = ad.reshape(ad.matmul(attn, v), (B, H, dk))
    h_final = ad.mul(h_att, gate) if gated else h_att
    pooled = ad.matmul(ad.reshape(h_final, (B, H * dk)), params.W_O)

    has_any = mask.any(axis=1)
    if not has_any.all():
        pooled = ad.mul(pooled, has_any[:, None].astype(np.float64))
    weights = attn.data.reshape(B, H, L) * has_any[:, None, None]
    return _finish(pooled, weights, gate.data if gated else np.ones((B, H, dk)), single)


def _finish(pooled: Tensor, weights: np.ndarray, gates: np.ndarray, single: bool) -> AsgaOutput:
    if single:
        return AsgaOutput(ad.reshape(pooled, (pooled.shape[-1],)), weights[0], gates[0])
    return AsgaOutput(pooled, weights, gates)


def asga_forward(
    params: AsgaParams,
    pafs_target: Optional[SwiGluFfn],
    pafs_seq: Optional[SwiGluFfn],
    e_t,
    E_s,
    mask=None,
    **attend_kwargs,
) -> AsgaOutput:
    """Sift raw target and sequence embeddings, then attend.

    A ``None`` sifter is the identity (the no-sifting ablation).
    """
    e_t, E_s = ad.as_tensor(e_t), ad.as_tensor(E_s)
    q = swiglu_forward(pafs_target, e_t) if pafs_target is not None else e_t
    if pafs_seq is not None and E_s.shape[-2] > 0:
        E_s = swiglu_forward(pafs_seq, E_s)
    return asga_attend(params, q, E_s, mask, **attend_kwargs)
