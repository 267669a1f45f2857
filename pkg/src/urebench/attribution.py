"""Input attributions: integrated gradients, noise tunnel, GradientSHAP,
Grad-CAM and occlusion, plus the band score of a map.

A *model* here is any callable taking a batch ``Tensor[B, *x.shape]`` and
returning logits ``Tensor[B, K]`` built from :mod:`urebench.autodiff` ops.
Grad-CAM additionally needs ``forward_with_activations``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from .spectral import ImageTensor, bilinear_resize, write_image, read_grid


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    target_class: int
    baseline_ref: str = "zeros"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution values must be finite")

    @property
    def grid(self) -> np.ndarray:
        v = self.values
        return v[0] if v.ndim == 3 and v.shape[0] == 1 else v

    def save(self, path) -> None:
        path = Path(path)
        write_image(self.grid.astype(np.float32), path)
        sidecar = {"method": self.method, "target_class": self.target_class,
                   "baseline_ref": self.baseline_ref, **self.meta}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AttributionMap":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        return cls(read_grid(path), meta.pop("method"), meta.pop("target_class"), meta.pop("baseline_ref"), meta)


class NetFunction:
    """A :class:`~urebench.model.ResidualNet` as a deterministic function.

    Stochastic nets get one noise realization per ``seed``, shared by every
    row of every batch, so repeated calls evaluate the same function.
    """

    def __init__(self, net: M.ResidualNet, seed: int = 0):
        self.net = net
        self.seed = seed

    def with_seed(self, seed: int) -> "NetFunction":
        return NetFunction(self.net, seed)

    def _rng(self):
        return M.pass_rng(self.seed, 0) if self.net.noise_active else None

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return M.forward_pass(self.net, x, self._rng(), shared_noise=True)

    def forward_with_activations(self, x: ad.Tensor):
        acts = []
        logits = M.forward_pass(self.net, x, self._rng(), shared_noise=True, capture=acts)
        return logits, acts


def _array(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.values.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def model_output(model, x, target: int) -> float:
    x = _array(x)
    return float(model(ad.Tensor(x[None])).data[0, target])


def target_gradients(model, points: np.ndarray, target: int, batch_size: int = 32):
    """Outputs ``F_target`` and gradients at each row of ``points``."""
    grads = np.empty(points.shape, dtype=np.float64)
    outs = np.empty(len(points), dtype=np.float64)
    for start in range(0, len(points), batch_size):
        xb = ad.Tensor(points[start:start + batch_size], requires_grad=True)
        logits = model(xb)
        if target < 0 or target >= logits.shape[1]:
            raise ValueError(f"target {target} outside [0, {logits.shape[1]})")
        selected = logits[:, target]
        ad.backward(ad.tsum(selected))
        grads[start:start + len(xb.data)] = xb.grad if xb.grad is not None else 0.0
        outs[start:start + len(xb.data)] = selected.data
    return outs, grads


def integrated_gradients(model, x, baseline, target: int, steps: int = 64, batch_size: int = 32) -> AttributionMap:
    """Midpoint-rule integrated gradients along the straight path baseline -> x."""
    x, b = _array(x), _array(baseline)
    if x.shape != b.shape:
        raise ValueError(f"input shape {x.shape} != baseline shape {b.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    points = b[None] + alphas.reshape((-1,) + (1,) * x.ndim) * (x - b)[None]
    _, grads = target_gradients(model, points, target, batch_size)
    values = (x - b) * grads.mean(axis=0)
    return AttributionMap(values, "ig", target, _describe(b), {"steps": steps})


def _describe(b: np.ndarray) -> str:
    return "zeros" if not np.any(b) else f"array(mean={b.mean():.6g})"


def completeness_gap(attr: AttributionMap, model, x, baseline, target: int) -> float:
    delta = model_output(model, x, target) - model_output(model, baseline, target)
    return abs(float(attr.values.sum()) - delta)


def noise_tunnel(base_method, model, x, baseline, target: int, n_samples: int = 8, nt_sigma: float = 0.1,
                 seed: int = 0, **method_kwargs) -> AttributionMap:
    """SmoothGrad-style average of ``base_method`` over noisy copies of ``x``.

    Copies are clipped to [0, 1].  Models exposing ``with_seed`` (stochastic
    nets) are re-seeded per copy so the average also spans noise realizations;
    copy 0 keeps the model's own seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if nt_sigma < 0:
        raise ValueError("nt_sigma must be >= 0")
    x = _array(x)
    rng = np.random.default_rng(seed)
    total = None
    for i in range(n_samples):
        xi = x if nt_sigma == 0 else np.clip(x + rng.normal(0.0, nt_sigma, size=x.shape), 0.0, 1.0)
        mi = model.with_seed(M._mix(model.seed, i)) if hasattr(model, "with_seed") and i > 0 else model
        a = base_method(mi, xi, baseline, target, **method_kwargs)
        total = a.values if total is None else total + a.values
    meta = dict(a.meta, nt_samples=n_samples, nt_sigma=nt_sigma, seed=seed)
    return AttributionMap(total / n_samples, a.method + "+nt", target, a.baseline_ref, meta)


def gradient_shap(model, x, baselines, target: int, n_samples: int = 64, seed: int = 0,
                  batch_size: int = 32) -> AttributionMap:
    """Expected ``(x - b) * grad F`` at ``b + alpha (x - b)`` over random baselines and alphas."""
    x = _array(x)
    baselines = [_array(b) for b in baselines]
    if not baselines:
        raise ValueError("gradient_shap needs at least one baseline")
    for b in baselines:
        if b.shape != x.shape:
            raise ValueError(f"baseline shape {b.shape} != input shape {x.shape}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(baselines), size=n_samples)
    alphas = rng.uniform(0.0, 1.0, size=n_samples)
    base = np.stack([baselines[k] for k in picks])
    diffs = x[None] - base
    points = base + alphas.reshape((-1,) + (1,) * x.ndim) * diffs
    _, grads = target_gradients(model, points, target, batch_size)
    values = (diffs * grads).mean(axis=0)
    return AttributionMap(values, "gradshap", target, f"{len(baselines)} baselines",
                          {"n_samples": n_samples, "seed": seed})


def grad_cam(model, x, target: int, layer: int = -1) -> AttributionMap:
    """Grad-CAM at activation ``layer`` (0 = stem output, k = output of block k)."""
    x = _array(x)
    xt = ad.Tensor(x[None], requires_grad=True)
    logits, acts = model.forward_with_activations(xt)
    n = len(acts)
    if not -n <= layer < n:
        raise ValueError(f"layer {layer} out of range for {n} activations")
    act = acts[layer]
    if act.data.ndim != 4:
        raise ValueError(f"activation {layer} has shape {act.shape}, expected [1,C,h,w]")
    ad.backward(logits[0, target])
    grad = act.grad if act.grad is not None else np.zeros(act.shape)
    weights = grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, act.data[0].astype(np.float64), axes=1), 0.0)
    h, w = x.shape[-2:]
    cam = bilinear_resize(cam, h, w)
    return AttributionMap(cam.reshape(x.shape), "gradcam", target, "none", {"layer": layer})


def occlusion(model, x, baseline_value: float, target: int, window=(8, 8), stride: int = 4,
              batch_size: int = 32) -> AttributionMap:
    """Mean drop of ``F_target`` over all occluding windows covering each pixel."""
    x = _array(x)
    grid_shape = x.shape[-2:]
    wh, ww = window
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if wh < 1 or ww < 1 or wh > grid_shape[0] or ww > grid_shape[1]:
        raise ValueError(f"window {window} does not fit image {grid_shape}")
    rows = range(0, grid_shape[0] - wh + 1, stride)
    cols = range(0, grid_shape[1] - ww + 1, stride)
    positions = [(r, c) for r in rows for c in cols]
    reference = model_output(model, x, target)
    drops = np.empty(len(positions))
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        batch = np.repeat(x[None], len(chunk), axis=0)
        for k, (r, c) in enumerate(chunk):
            batch[k, ..., r:r + wh, c:c + ww] = baseline_value
        drops[start:start + len(chunk)] = reference - model(ad.Tensor(batch)).data[:, target]
    total = np.zeros(grid_shape)
    count = np.zeros(grid_shape)
    for (r, c), d in zip(positions, drops):
        total[r:r + wh, c:c + ww] += d
        count[r:r + wh, c:c + ww] += 1
    values = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return AttributionMap(values.reshape(x.shape), "occlusion", target, f"constant {baseline_value}",
                          {"window": list(window), "stride": stride})


def band_score(attr) -> float:
    """1 - (mean within-row variance of |A|) / (variance of |A|).

    Rows are frequency, columns time, so 1 means perfectly horizontal bands.
    Maps with total variance below 1e-12 score 0.
    """
    a = attr.grid if isinstance(attr, AttributionMap) else np.asarray(attr, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError(f"band_score needs an [H, W>=2] map, got {a.shape}")
    a = np.abs(a)
    total = a.var()
    if total < 1e-12:
        return 0.0
    return float(np.clip(1.0 - a.var(axis=1).mean() / total, 0.0, 1.0))


METHODS = ("ig", "ig-nt", "gradshap", "gradcam", "occlusion")


def explain(method: str, model, x, target: int, *, steps: int = 32, nt_samples: int = 8, nt_sigma: float = 0.1,
            shap_samples: int = 64, seed: int = 0, occlusion_window=(8, 8), occlusion_stride: int = 4) -> AttributionMap:
    """Dispatch by CLI method name with a zero-image baseline."""
    x = _array(x)
    zeros = np.zeros_like(x)
    if method == "ig":
        return integrated_gradients(model, x, zeros, target, steps)
    if method == "ig-nt":
        return noise_tunnel(integrated_gradients, model, x, zeros, target, nt_samples, nt_sigma, seed, steps=steps)
    if method == "gradshap":
        rng = np.random.default_rng(seed)
        baselines = [zeros, np.clip(rng.normal(0.5, 0.25, size=x.shape), 0, 1)]
        return gradient_shap(model, x, baselines, target, shap_samples, seed)
    if method == "gradcam":
        return grad_cam(model, x, target)
    if method == "occlusion":
        return occlusion(model, x, 0.0, target, occlusion_window, occlusion_stride)
    raise ValueError(f"unknown attribution method {method!r}; choose from {', '.join(METHODS)}")
