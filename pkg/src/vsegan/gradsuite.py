"""Finite-difference verification suite for every op and the full generator loss.

Op checks run in float64 against a 1e-6 relative-error bound. The
end-to-end check differentiates ``g_loss`` through a width-reduced
generator and discriminator in float32, using a float64 copy of the same
weights as the finite-difference oracle, against a 1e-3 bound.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor, grad_check
from .model import ModelConfig, build_models, g_loss

OP_TOLERANCE = 1e-6
E2E_TOLERANCE = 1e-3


@dataclass
class SuiteResult:
    name: str
    report: ad.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.report.worst:.2e} "
                f"(tol {self.report.tolerance:g}, {self.seconds:.2f} s)")


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], dict]]:
    cases = []
    x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, 4, 3), _leaf(rng, 4)
    for stride in ((1, 1), (2, 1), (2, 2), (1, 5)):
        r_out = ad.conv2d(x, w, b, stride)
        r = Tensor(rng.standard_normal(r_out.dims), dtype=np.float64)
        cases.append((f"conv2d stride {stride}",
                      lambda s=stride, r=r: ad.sum_all(ad.conv2d(x, w, b, s) * r), {"x": x, "w": w, "b": b}))
    xt, wt, bt = _leaf(rng, 2, 3, 4, 3), _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2)
    for stride in ((1, 1), (2, 2), (2, 1), (1, 5)):
        r_out = ad.conv_transpose2d(xt, wt, bt, stride)
        r = Tensor(rng.standard_normal(r_out.dims), dtype=np.float64)
        cases.append((f"conv_transpose2d stride {stride}",
                      lambda s=stride, r=r: ad.sum_all(ad.conv_transpose2d(xt, wt, bt, s) * r),
                      {"x": xt, "w": wt, "b": bt}))
    xp = _leaf(rng, 2, 2, 7, 9)
    for window in ((2, 4), (2, 2), (1, 5)):
        r = Tensor(rng.standard_normal(ad.maxpool2d(xp, window).dims), dtype=np.float64)
        cases.append((f"maxpool2d window {window}",
                      lambda wdw=window, r=r: ad.sum_all(ad.maxpool2d(xp, wdw) * r), {"x": xp}))
    xb, gamma, beta = _leaf(rng, 3, 2, 4, 3), _leaf(rng, 2), _leaf(rng, 2)
    rb = Tensor(rng.standard_normal(xb.dims), dtype=np.float64)
    mean_buf, var_buf = np.zeros(2), np.ones(2)
    cases.append(("batchnorm2d train", lambda: ad.sum_all(
        ad.batchnorm2d(xb, gamma, beta, mean_buf, var_buf, training=True) * rb),
        {"x": xb, "gamma": gamma, "beta": beta}))
    xe = _leaf(rng, 4, 5)
    for name, fn in (("leaky_relu", lambda t: ad.leaky_relu(t, 0.2)), ("tanh", ad.tanh),
                     ("square", ad.square), ("absolute", ad.absolute)):
        r = Tensor(rng.standard_normal(xe.dims), dtype=np.float64)
        cases.append((name, lambda fn=fn, r=r: ad.sum_all(fn(xe) * r), {"x": xe}))
    cases.append(("mean", lambda: ad.mean(ad.square(xe)), {"x": xe}))
    xl, wl, bl = _leaf(rng, 3, 6), _leaf(rng, 4, 6), _leaf(rng, 4)
    rl = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    cases.append(("linear", lambda: ad.sum_all(ad.linear(xl, wl, bl) * rl), {"x": xl, "w": wl, "b": bl}))
    a1, a2 = _leaf(rng, 2, 3, 4, 2), _leaf(rng, 2, 1, 4, 2)
    rc = Tensor(rng.standard_normal((2, 4, 4, 2)), dtype=np.float64)
    cases.append(("concat", lambda: ad.sum_all(ad.concat([a1, a2], axis=1) * rc), {"a": a1, "b": a2}))
    rs = Tensor(rng.standard_normal((2, 1, 4, 2)), dtype=np.float64)
    cases.append(("split", lambda: ad.sum_all(ad.split(a1, [2, 1], axis=1)[1] * rs), {"x": a1}))
    rf = Tensor(rng.standard_normal((2, 24)), dtype=np.float64)
    cases.append(("flatten/reshape", lambda: ad.sum_all(
        ad.reshape(ad.flatten(a1), (2, 24)) * rf), {"x": a1}))
    m1, m2 = _leaf(rng, 3, 4), _leaf(rng, 4)
    rm = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    cases.append(("broadcast add/sub/mul", lambda: ad.sum_all(((m1 + m2) * m2 - m1) * rm), {"a": m1, "b": m2}))
    return cases


def op_suite(seed: int = 0) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = []
    with ad.precision("float64"):
        for name, fn, params in _op_cases(rng):
            t = time.perf_counter()
            report = grad_check(fn, params, OP_TOLERANCE)
            results.append(SuiteResult(name, report, time.perf_counter() - t))
    return results


def end_to_end_check(width_scale: int = 8, batch: int = 2, lam: float = 100.0, samples: int = 2,
                     seed: int = 0) -> SuiteResult:
    """Float32 backprop of the full generator loss checked against float64 differences."""
    t = time.perf_counter()
    rng = np.random.default_rng([seed, 77])
    noisy = rng.uniform(-1, 1, (batch, 1, dsp.N_MELS, dsp.SEGMENT_FRAMES))
    clean = rng.uniform(-1, 1, noisy.shape)
    video = rng.uniform(0, 1, (batch, dsp.VIDEO_FRAMES_PER_SEGMENT, dsp.FRAME_SIZE, dsp.FRAME_SIZE))

    nets = {}
    for dtype in ("float32", "float64"):
        G, D = build_models(ModelConfig(width_scale=width_scale, dtype=dtype), seed)
        G.train()
        nets[dtype] = (G, D)
    # the float64 oracle holds exactly the float32 weights
    for src, dst in zip(nets["float32"], nets["float64"]):
        dst.load_arrays({k: v.astype(np.float64) for k, v in src.state_arrays().items()})

    def make_loss(dtype):
        G, D = nets[dtype]
        x, y, v = (Tensor(a, dtype=dtype) for a in (noisy, clean, video))
        return lambda: g_loss(D, G(x, v), x, y, lam).total

    def params(dtype):
        G, D = nets[dtype]
        return {**{f"G.{k}": p for k, p in G.named_parameters().items()},
                **{f"D.{k}": p for k, p in D.named_parameters().items()}}

    report = grad_check(make_loss("float32"), params("float32"), E2E_TOLERANCE, n_samples=samples,
                        seed=seed, reference=(make_loss("float64"), params("float64")), scale="global")
    return SuiteResult(f"g_loss end-to-end (width_scale {width_scale}, float32)", report,
                       time.perf_counter() - t)


def run_suite(width_scale: int = 8, seed: int = 0) -> list[SuiteResult]:
    return op_suite(seed) + [end_to_end_check(width_scale, seed=seed)]
