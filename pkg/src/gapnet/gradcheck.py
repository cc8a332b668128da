"""Central finite-difference verification of backward() on the full model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import AblationConfig, GapNetParams, Overrides, batch_loss, loss_and_grads

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# below this magnitude both gradients count as zero (central-difference roundoff
# on an O(1) loss is ~1e-11 at step 1e-5)
GRAD_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, index, step: float = DEFAULT_STEP) -> float:
    """Central difference of ``f`` w.r.t. ``x[index]``; ``x`` is restored afterwards."""
    orig = x[index]
    x[index] = orig + step
    up = f()
    x[index] = orig - step
    down = f()
    x[index] = orig
    return (up - down) / (2.0 * step)


@dataclass
class PathResult:
    path: str
    n_checked: int
    max_rel_err: float
    worst_index: Optional[tuple] = None


@dataclass
class GradCheckReport:
    results: list = field(default_factory=list)
    tol: float = DEFAULT_TOL

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.max_rel_err < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        if self.passed:
            return f"all {len(self.results)} parameter paths pass, max rel-err = {self.max_rel_err:.3e}"
        worst = ", ".join(f"{r.path} ({r.max_rel_err:.2e})" for r in self.failures)
        return f"{len(self.failures)} of {len(self.results)} parameter paths fail: {worst}"


def _pick_entries(grad: np.ndarray, max_entries: int, rng) -> list:
    n = grad.size
    if n <= max_entries:
        return list(range(n))
    nonzero = np.flatnonzero(np.abs(grad.reshape(-1)) > 0)
    n_zero_probe = min(4, n)
    take = min(len(nonzero), max_entries - n_zero_probe)
    chosen = set(rng.choice(nonzero, size=take, replace=False).tolist()) if take else set()
    chosen.update(rng.choice(n, size=n_zero_probe, replace=False).tolist())
    return sorted(chosen)


def check_gradients(
    params: GapNetParams,
    ablation: AblationConfig,
    batch,
    *,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_entries: int = 48,
    seed: int = 0,
    paths=None,
    overrides: Optional[Overrides] = None,
) -> GradCheckReport:
    """Compare backward() against central differences for every parameter path.

    Small tensors are checked exhaustively. Larger ones (embedding tables,
    wide projections) are sampled: mostly entries with a nonzero analytic
    gradient, plus a few uniform probes that must agree on zero.
    """
    rng = np.random.default_rng(seed)
    loss_and_grads(params, ablation, batch, overrides)
    analytic = {p: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for p, t in params.named_parameters()}

    def f() -> float:
        return batch_loss(params, ablation, batch, overrides).item()

    report = GradCheckReport(tol=tol)
    for path, t in params.named_parameters():
        if paths is not None and path not in paths:
            continue
        flat_a = analytic[path].reshape(-1)
        data = t.data.reshape(-1)  # view: perturbations hit the live tensor
        worst, worst_i = 0.0, None
        entries = _pick_entries(analytic[path], max_entries, rng)
        for i in entries:
            err = float(relative_error(flat_a[i], numeric_grad(f, data, i, step)))
            if err > worst or worst_i is None:
                worst, worst_i = err, i
        index = None if worst_i is None else tuple(int(v) for v in np.unravel_index(worst_i, t.shape))
        report.results.append(PathResult(path, len(entries), worst, index))
    return report
