"""Cascading query calibration across real-time, short-term and long-term views."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .asga import AsgaParams, asga_attend
from .autodiff import ShapeError, Tensor
from .layers import xavier_init


@dataclass
class CguParams:
    W_z: Tensor  # 2d x d
    b_z: Tensor  # d

    @classmethod
    def init(cls, d: int, rng) -> "CguParams":
        return cls(xavier_init((2 * d, d), 2 * d, d, rng), Tensor(np.zeros(d), requires_grad=True))

    @property
    def d(self) -> int:
        return self.W_z.shape[1]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.W_z", self.W_z
        yield f"{prefix}.b_z", self.b_z


@dataclass
class GcqcOutput:
    Q_rt: Tensor
    H_rt: Tensor
    H_st: Tensor
    H_lt: Tensor
    z1_diag: np.ndarray
    Q_st: Optional[Tensor] = None


def cgu_update(params: CguParams, q, h, *, gate: Optional[float] = None):
    """Convex intent update ``(1 - z) * q + z * h``.

    ``z = sigmoid([q; h] W_z + b_z)``; ``gate`` pins z to a constant instead.
    Returns ``(q_new, z)`` with z as a Tensor.
    """
    q, h = ad.as_tensor(q), ad.as_tensor(h)
    if q.shape != h.shape or q.shape[-1] != params.d:
        raise ShapeError(f"cgu_update: q {q.shape} and h {h.shape} must both end in d={params.d}")
    if gate is None:
        z = ad.sigmoid(ad.add(ad.matmul(_rows(ad.concat([q, h])), params.W_z), params.b_z))
        z = ad.reshape(z, q.shape)
    else:
        z = Tensor(np.full(q.shape, float(gate)))
    q_new = ad.add(ad.mul(ad.sub(1.0, z), q), ad.mul(z, h))
    return q_new, z


def _rows(x: Tensor) -> Tensor:
    return ad.reshape(x, (1, -1)) if x.ndim == 1 else x


def gcqc_forward(
    views: dict,
    cgu: CguParams,
    q0,
    E_rt,
    E_st,
    E_lt,
    masks=(None, None, None),
    *,
    cgu_gate: Optional[float] = None,
    second_cgu: Optional[CguParams] = None,
    **attend_kwargs,
) -> GcqcOutput:
    """Three-stage cascade on already-sifted inputs.

    ``views`` maps ``"rt"``, ``"st"``, ``"lt"`` to :class:`AsgaParams` (the
    same object may serve several views). Stage 1 attends the real-time view
    with ``q0`` and blends the result into the query through the CGU; stages
    2 and 3 attend the short- and long-term views with that calibrated query.
    With ``second_cgu`` the short-term result is blended in once more before
    the long-term lookup.
    """
    m_rt, m_st, m_lt = masks
    H_rt = asga_attend(views["rt"], q0, E_rt, m_rt, **attend_kwargs).pooled
    Q_rt, z1 = cgu_update(cgu, q0, H_rt, gate=cgu_gate)
    H_st = asga_attend(views["st"], Q_rt, E_st, m_st, **attend_kwargs).pooled
    Q_st = None
    q_lt = Q_rt
    if second_cgu is not None:
        Q_st, _ = cgu_update(second_cgu, Q_rt, H_st)
        q_lt = Q_st
    H_lt = asga_attend(views["lt"], q_lt, E_lt, m_lt, **attend_kwargs).pooled
    return GcqcOutput(Q_rt=Q_rt, H_rt=H_rt, H_st=H_st, H_lt=H_lt, z1_diag=z1.data, Q_st=Q_st)
