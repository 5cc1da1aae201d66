"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    checked_entries: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.max_rel_error.values())

    def lines(self) -> list[str]:
        return [
            f"{'ok  ' if err < self.tolerance else 'FAIL'} {name}: rel err {err:.3e} "
            f"over {self.checked_entries[name]} entries"
            for name, err in self.max_rel_error.items()
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Largest absolute discrepancy scaled by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], tolerance: float,
               n_samples: Optional[int] = None, seed: int = 0,
               reference: Optional[tuple[Callable[[], Tensor], Mapping[str, Tensor]]] = None,
               scale: str = "per_param") -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn`` with central differences.

    ``loss_fn`` must return a scalar tensor and read the current values of
    ``params``. When ``n_samples`` is set, that many entries per parameter
    are probed (chosen by ``seed``); otherwise every entry is.

    ``reference`` optionally supplies a twin ``(loss_fn, params)`` evaluated
    for the finite differences instead, typically a float64 copy of a
    float32 model so the oracle is not limited by single precision.
    ``scale="global"`` divides every discrepancy by the largest probed
    gradient over all parameters rather than per parameter. That is the
    meaningful choice for whole networks, where some parameters (a conv
    bias feeding batch norm) have an exactly zero true gradient.
    Failures are reported, never raised.
    """
    if scale not in ("per_param", "global"):
        raise ValueError(f"unknown scale mode {scale!r}")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    fd_fn, fd_params = reference if reference is not None else (loss_fn, params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    probes = {}
    for name, p in params.items():
        target = fd_params[name]
        flat = target.data.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=n_samples, replace=False))
        numeric = np.empty(idx.size, dtype=np.float64)
        for j, i in enumerate(idx):
            original = flat[i]
            h = 1e-5 * max(1.0, abs(float(original)))
            flat[i] = original + h
            f_plus = fd_fn().data.item()
            flat[i] = original - h
            f_minus = fd_fn().data.item()
            flat[i] = original
            numeric[j] = (f_plus - f_minus) / (2.0 * h)
        probes[name] = (analytic[name].reshape(-1)[idx].astype(np.float64), numeric)
        report.checked_entries[name] = int(idx.size)
    if scale == "global":
        denom = max([np.max(np.abs(a), initial=0.0) for a, _ in probes.values()]
                    + [np.max(np.abs(n), initial=0.0) for _, n in probes.values()] + [1e-12])
        for name, (a, n) in probes.items():
            report.max_rel_error[name] = float(np.max(np.abs(a - n), initial=0.0) / denom)
    else:
        for name, (a, n) in probes.items():
            report.max_rel_error[name] = relative_error(a, n)
    return report
