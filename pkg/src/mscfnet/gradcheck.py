"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst_index: Optional[tuple] = None
    analytic: np.ndarray = field(default=None, repr=False)
    numeric: np.ndarray = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); ``floor`` keeps near-zero gradients from amplifying roundoff."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def analytic_grad(f: Callable[[], Tensor], x: Tensor) -> np.ndarray:
    """Gradient of the scalar ``f()`` with respect to ``x`` via the tape."""
    saved = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    try:
        with Tape() as tape:
            loss = f()
        backward(tape, loss)
        return x.grad.copy()
    finally:
        x.requires_grad = saved


def finite_difference_check(
    f: Callable[[], Tensor],
    x: Tensor,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    max_coords: int = 256,
    seed: int = 0,
    coord_filter: Optional[Callable[[np.ndarray, tuple], bool]] = None,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` w.r.t. ``x`` with central differences.

    ``f`` takes no arguments and must read ``x`` (it is perturbed in place).
    At most ``max_coords`` coordinates are probed, drawn without replacement.
    ``coord_filter(data, index)`` can exclude points such as activation kinks.
    """
    ana = analytic_grad(f, x)
    flat_idx = np.arange(x.data.size)
    if coord_filter is not None:
        flat_idx = np.array(
            [i for i in flat_idx if coord_filter(x.data, np.unravel_index(i, x.shape))], dtype=np.int64
        )
    if flat_idx.size > max_coords:
        flat_idx = np.sort(np.random.default_rng(seed).choice(flat_idx, size=max_coords, replace=False))
    a_sel, n_sel = [], []
    flat = x.data.reshape(-1)
    for i in flat_idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        n_sel.append((fp - fm) / (2 * step))
        a_sel.append(ana.reshape(-1)[i])
    a_sel, n_sel = np.array(a_sel), np.array(n_sel)
    if a_sel.size == 0:
        return GradCheckReport(0.0, 0, tolerance, None, a_sel, n_sel)
    err = rel_error(a_sel, n_sel)
    k = int(np.argmax(err))
    return GradCheckReport(
        float(err[k]), int(a_sel.size), tolerance, np.unravel_index(int(flat_idx[k]), x.shape), a_sel, n_sel
    )


def check_many(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-5,
    max_coords: int = 256,
    seed: int = 0,
) -> dict[int, GradCheckReport]:
    return {
        i: finite_difference_check(f, t, step, tolerance, max_coords, seed + i) for i, t in enumerate(tensors)
    }


def check_parameters(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    coords_per_tensor: int = 3,
    seed: int = 0,
    floor: float = 1e-6,
) -> dict[str, GradCheckReport]:
    """Finite-difference check of many named tensors against one backward pass.

    All analytic gradients come from a single tape; each tensor then has up
    to ``coords_per_tensor`` coordinates probed by central differences.

    Central differences of an O(1) loss carry roundoff near eps·|L|/step, so
    gradients much smaller than ``floor`` cannot be resolved to a relative
    tolerance; their error is measured against ``floor`` instead. Batch-norm
    scales feeding a per-channel linear op and another batch norm sit there,
    as their true gradient vanishes up to the norm's epsilon.
    """
    for _, p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    rng = np.random.default_rng(seed)
    out: dict[str, GradCheckReport] = {}
    for name, p in params:
        ana = p.grad.reshape(-1).copy()
        n = min(coords_per_tensor, p.data.size)
        idx = np.sort(rng.choice(p.data.size, size=n, replace=False))
        flat = p.data.reshape(-1)
        num = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num.append((fp - fm) / (2 * step))
        num = np.array(num)
        err = rel_error(ana[idx], num, floor)
        k = int(np.argmax(err))
        out[name] = GradCheckReport(
            float(err[k]), n, tolerance, np.unravel_index(int(idx[k]), p.shape), ana[idx], num
        )
    return out


def parameter_group(name: str) -> str:
    """Top-level block of a parameter name; module lists keep their index (``block2.1``)."""
    parts = name.split(".")
    return ".".join(parts[:2]) if len(parts) > 2 and parts[1].isdigit() else parts[0]
