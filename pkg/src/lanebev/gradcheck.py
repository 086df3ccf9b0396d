"""Finite-difference checks of every differentiable op.

Each check draws random inputs, a random output cotangent ``u`` and a
random input direction ``v``, then compares the reverse-mode product
``<J^T u, v>`` (computed at the requested precision) with the central
difference ``<u, (f(x + h v) - f(x - h v)) / 2h>`` evaluated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import GridSpec, forward_camera
from .warp import backproject_op

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}


@dataclass
class Check:
    name: str
    fn: Callable  # (*Tensor) -> Tensor
    inputs: List[np.ndarray]
    wrt: Sequence[int]


def directional_error(fn: Callable, inputs: Sequence[np.ndarray], wrt: Sequence[int], dtype,
                      rng: np.random.Generator, h: float = 1e-6) -> float:
    """Relative difference between the VJP and central differences along one direction."""
    tensors = [ad.Tensor(x.astype(dtype), requires_grad=(k in wrt)) for k, x in enumerate(inputs)]
    with ad.Tape() as tape:
        out = fn(*tensors)
        u = rng.standard_normal(out.shape)
        loss = ad.sum_all(ad.multiply_const(out, u))
    grads = ad.backward(tape, loss)
    dirs = {k: rng.standard_normal(inputs[k].shape) for k in wrt}
    analytic = sum(float(np.sum(grads[tensors[k]].astype(np.float64) * dirs[k]))
                   for k in wrt if tensors[k] in grads)

    def at(sign: float) -> np.ndarray:
        xs = [x.astype(np.float64) + (sign * h * dirs[k] if k in dirs else 0.0) for k, x in enumerate(inputs)]
        return fn(*[ad.Tensor(x) for x in xs]).data.astype(np.float64)

    numeric = float(np.sum(u * (at(1.0) - at(-1.0)) / (2.0 * h)))
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _warp_setup(rng):
    cam = forward_camera(height=1.7, pitch_down_deg=5.0, fx=40.0, fy=40.0, width=64, height_px=32)
    spec = GridSpec.covering(16, 16, 0.75)
    image = rng.uniform(0.0, 1.0, (3, 32, 64))
    ground = 0.1 * rng.standard_normal((1, 16, 16))
    return cam, spec, image, ground


def default_checks(seed: int = 0) -> List[Check]:
    rng = np.random.default_rng([seed, 77])
    x4 = rng.standard_normal((2, 3, 7, 6))
    w3 = rng.standard_normal((4, 3, 3, 3))
    b4 = rng.standard_normal(4)
    w1 = rng.standard_normal((4, 3, 1, 1))
    cam, spec, image, ground = _warp_setup(rng)
    target = rng.standard_normal((2, 1, 5, 5)) * 3
    gtg = rng.standard_normal((2, 1, 5, 5))
    pred_g = gtg + _away_from_zero(rng, (2, 1, 5, 5), 0.1)

    from .models import ground_loss, lane_loss  # local import: models depends on data

    return [
        Check("add", lambda a, b: ad.add(a, b), [x4, rng.standard_normal(x4.shape)], (0, 1)),
        Check("scale", lambda a: ad.scale(a, -1.7), [x4], (0,)),
        Check("multiply_const", lambda a: ad.multiply_const(a, np.linspace(-1, 1, a.data.size).reshape(a.shape)),
              [x4], (0,)),
        Check("relu", ad.relu, [_away_from_zero(rng, x4.shape)], (0,)),
        Check("square", ad.square, [x4], (0,)),
        Check("sum_all", ad.sum_all, [x4], (0,)),
        Check("concat_channels", lambda a, b: ad.concat_channels([a, b]),
              [x4, rng.standard_normal((2, 2, 7, 6))], (0, 1)),
        Check("conv2d", lambda a, w, b: ad.conv2d(a, w, b), [x4, w3, b4], (0, 1, 2)),
        Check("conv2d_stride2", lambda a, w, b: ad.conv2d(a, w, b, stride=2), [x4, w3, b4], (0, 1, 2)),
        Check("conv2d_1x1_chw", lambda a, w: ad.conv2d(a, w), [x4[0], w1], (0, 1)),
        Check("avg_pool", lambda a: ad.avg_pool(a, 2), [x4], (0,)),
        Check("avg_pool_overlap", lambda a: ad.avg_pool(a, 3, 2), [x4], (0,)),
        Check("bilinear_upsample", lambda a: ad.bilinear_upsample(a, 2), [x4], (0,)),
        Check("bilinear_upsample_size", lambda a: ad.bilinear_upsample(a, size=(10, 13)), [x4], (0,)),
        Check("backproject", lambda i, g: backproject_op(i, g, cam, spec)[0],
              [image[None], ground[None]], (0, 1)),
        Check("lane_loss", lambda p: lane_loss(p, target), [rng.standard_normal(target.shape)], (0,)),
        Check("ground_loss", lambda p: ground_loss(p, gtg), [pred_g], (0,)),
    ]


def run_suite(seed: int = 0, dtypes=(np.float32, np.float64)) -> Dict[str, Dict[str, float]]:
    """Maximum relative error per op and precision (three random directions each)."""
    results: Dict[str, Dict[str, float]] = {}
    for check in default_checks(seed):
        for dtype in dtypes:
            rng = np.random.default_rng([seed, len(results), np.dtype(dtype).itemsize])
            err = max(directional_error(check.fn, check.inputs, check.wrt, dtype, rng) for _ in range(3))
            results.setdefault(check.name, {})[np.dtype(dtype).name] = err
    return results


def passes(results: Dict[str, Dict[str, float]]) -> bool:
    return all(err <= TOLERANCE[np.dtype(dt).type] for per in results.values() for dt, err in per.items())
