"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The desk-scale experiment (criteria 3, 5 and 6) runs the full pipeline once
with the built-in default config and is shared through a module fixture.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from urebench import attribution as A
from urebench import autodiff as ad
from urebench import config as C
from urebench import model as M
from urebench import workbench as W
from urebench.evaluation import classification_report
from urebench.spectral import dft_naive, fft_radix2

from .gradcheck import PRIMITIVE_CASES, check_gradients
from .test_evaluation import brute_force

SHAPES_PER_PRIMITIVE = 20


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = C.ExperimentConfig()
    start = time.perf_counter()
    W.run_pipeline(cfg, out, W.STAGES, ("ig-nt",), 5)
    elapsed = time.perf_counter() - start
    return cfg, W.Layout(cfg, out), elapsed


# -- 1 ------------------------------------------------------------------------

def test_autodiff_gradients(criterion):
    start = time.perf_counter()
    failures, worst = [], 0.0
    for name, build in sorted(PRIMITIVE_CASES.items()):
        for k in range(SHAPES_PER_PRIMITIVE):
            inputs, fn = build(np.random.default_rng([k, len(name), 7]))
            score = check_gradients(fn, inputs)
            worst = max(worst, score)
            if score > 1.0:
                failures.append(f"{name}#{k}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 10.0
    criterion(1, ok, f"{len(PRIMITIVE_CASES)} primitives x {SHAPES_PER_PRIMITIVE} shapes, worst score "
                     f"{worst:.3f} (<= 1), failures {failures or 'none'}, {elapsed:.1f}s (< 10s)")
    assert ok


# -- 2 ------------------------------------------------------------------------

def test_fft_correctness(criterion):
    rng = np.random.default_rng(2)
    dft_err = max(np.max(np.abs(fft_radix2(x) - dft_naive(x)))
                  for x in (rng.standard_normal(1024) + 1j * rng.standard_normal(1024) for _ in range(5)))
    parseval, round_trip = 0.0, 0.0
    for _ in range(20):
        x = rng.standard_normal(1024) + 1j * rng.standard_normal(1024)
        spec = fft_radix2(x)
        energy = np.sum(np.abs(x) ** 2)
        parseval = max(parseval, abs(energy - np.sum(np.abs(spec) ** 2) / 1024) / energy)
        round_trip = max(round_trip, np.max(np.abs(fft_radix2(spec, inverse=True) - x)))
    ok = dft_err < 1e-4 and parseval < 1e-5 and round_trip < 1e-5
    criterion(2, ok, f"max |FFT - DFT| {dft_err:.2e} (< 1e-4), Parseval rel {parseval:.2e}, "
                     f"round trip {round_trip:.2e} (< 1e-5)")
    assert ok


# -- 3 ------------------------------------------------------------------------

class LinearImage:
    def __init__(self, w):
        self.w = ad.Tensor(w.reshape(-1, 1))

    def __call__(self, x):
        return ad.dense(ad.reshape(x, (x.shape[0], -1)), self.w, ad.Tensor(np.zeros(1)))


class Combination:
    def __init__(self, a, f, b, g):
        self.a, self.f, self.b, self.g = a, f, b, g

    def __call__(self, x):
        return ad.add(ad.mul(self.f(x), self.a), ad.mul(self.g(x), self.b))


def _gap(model, x, baseline, target, steps):
    return A.completeness_gap(A.integrated_gradients(model, x, baseline, target, steps), model, x, baseline, target)


def test_integrated_gradient_axioms(criterion, experiment):
    rng = np.random.default_rng(3)
    w = rng.standard_normal((1, 64, 64))
    x, b = rng.random((1, 64, 64)), rng.random((1, 64, 64)) * 0.1
    linear_err = np.max(np.abs(A.integrated_gradients(LinearImage(w), x, b, 0, 16).values - w * (x - b)))

    # refinement on the trained deterministic desk-scale net, one correctly classified test image per class
    cfg, layout, _ = experiment
    det = A.NetFunction(W.load_nets(cfg, layout, "explain")["deterministic"])
    images, labels, _ = W.load_split(layout.dataset, "test")
    preds = M.predict(det.net, images)[0]
    picks = [int(np.flatnonzero((preds == labels) & (labels == c))[0]) for c in range(cfg.dataset.n_classes)]
    zeros = np.zeros((1, 64, 64))
    violations, converged = [], True
    for i in picks:
        target = int(labels[i])
        gaps = {s: _gap(det, images[i], zeros, target, s) for s in (16, 32, 64, 128, 256)}
        for s in (16, 64):
            if gaps[2 * s] > gaps[s] + 1e-4:
                violations.append(f"img{i} s={s}: {gaps[s]:.4f}->{gaps[2 * s]:.4f}")
        delta = A.model_output(det, images[i], target) - A.model_output(det, zeros, target)
        converged &= gaps[256] <= 0.02 * abs(delta) + 1e-3

    nets = []
    for seed in (1, 2):
        net = M.ResidualNet(replace(cfg.net_config(False), init_seed=seed))
        for p in net.parameters():
            p.tensor.data = (np.random.default_rng(seed).standard_normal(p.data.shape) * 0.2).astype(np.float32)
        nets.append(A.NetFunction(net))
    a_coef, b_coef, target = 0.6, -1.4, 2
    combined = A.integrated_gradients(Combination(a_coef, nets[0], b_coef, nets[1]), x, zeros, target, 16).values
    parts = (a_coef * A.integrated_gradients(nets[0], x, zeros, target, 16).values
             + b_coef * A.integrated_gradients(nets[1], x, zeros, target, 16).values)
    linearity_err = np.max(np.abs(combined - parts))

    ok = linear_err < 1e-5 and not violations and linearity_err < 1e-4
    criterion(3, ok, f"linear exactness {linear_err:.2e} (< 1e-5); refinement violations "
                     f"{violations or 'none'}; linearity axiom {linearity_err:.2e} (< 1e-4); "
                     f"256-step gap within 2% of |dF|: {converged}")
    assert ok


# -- 4 ------------------------------------------------------------------------

def test_sde_reduction_and_noise_statistics(criterion):
    mismatches = 0
    for k in range(100):
        rng = np.random.default_rng([4, k])
        base = dict(n_classes=int(rng.integers(2, 5)), n_blocks=int(rng.integers(1, 4)),
                    channels=int(rng.integers(1, 4)), image_h=int(rng.integers(3, 9)),
                    image_w=int(rng.integers(3, 9)), init_seed=k)
        det = M.ResidualNet(M.ResidualNetConfig(**base))
        for p in det.parameters():
            p.tensor.data = (rng.standard_normal(p.data.shape) * 0.5).astype(np.float32)
        sto = M.ResidualNet(M.ResidualNetConfig(**base, stochastic=True, sde_sigma=0.0, mc_samples=3))
        sto.load_state_dict(det.state_dict())
        x = rng.random((2, 1, base["image_h"], base["image_w"]))
        for mode in ("train", "eval"):
            mismatches += M.forward(det, x, mode, seed=k).data.tobytes() != M.forward(sto, x, mode, seed=k).data.tobytes()

    sigma, dt, n = 0.1, 1.0, 10_000
    cfg = M.ResidualNetConfig(n_classes=2, channels=1, stochastic=True, sde_sigma=sigma, dt=dt, image_h=1, image_w=1)
    block = M.ResidualNet(cfg).blocks[0]
    for p in block.params():
        p.tensor.data[...] = 0
    inc = M.block_forward(ad.Tensor(np.zeros((n, 1, 1, 1))), block, cfg, np.random.default_rng(4)).data.astype(float)
    target = sigma ** 2 * dt
    var_se = target * math.sqrt(2 / (n - 1))
    mean_ok = abs(inc.mean()) < 3 * sigma * math.sqrt(dt / n)
    var_ok = abs(inc.var(ddof=1) - target) <= 3 * var_se
    ok = mismatches == 0 and mean_ok and var_ok
    criterion(4, ok, f"sigma=0 mismatches {mismatches}/200 forwards on 100 nets; increment mean {inc.mean():.2e}, "
                     f"variance {inc.var(ddof=1):.5f} vs {target:g} +- {3 * var_se:.5f}")
    assert ok


# -- 5 ------------------------------------------------------------------------

def _macro_f1(layout, variant):
    return {r["noise_sigma"]: r["macro_f1"] for r in json.loads((layout.sweep / f"{variant}.json").read_text())}


def test_desk_scale_robustness_contrast(criterion, experiment):
    cfg, layout, elapsed = experiment
    train = W.load_split(layout.dataset, "train")[1]
    test = W.load_split(layout.dataset, "test")[1]
    det, sto = _macro_f1(layout, "deterministic"), _macro_f1(layout, "stochastic")
    checks = {
        "split 420/180": (len(train), len(test)) == (420, 180),
        "clean det >= 0.95": det[0.0] >= 0.95,
        "clean sto >= 0.95": sto[0.0] >= 0.95,
        "sto >= det + 0.20 at 0.5": sto[0.5] >= det[0.5] + 0.20,
        "det drop > 0.30 at 0.5": det[0.5] < det[0.0] - 0.30,
        "runtime < 15 min": elapsed < 15 * 60,
    }
    ok = all(checks.values())
    grid = ", ".join(f"{s:g}: det {det[s]:.3f} / sto {sto[s]:.3f}" for s in sorted(det))
    failed = [k for k, v in checks.items() if not v]
    criterion(5, ok, f"macro-F1 {grid}; pipeline {elapsed / 60:.1f} min; failed checks {failed or 'none'}")
    assert ok


# -- 6 ------------------------------------------------------------------------

def test_band_score_contrast(criterion, experiment):
    _, layout, _ = experiment
    summary = json.loads((layout.explain / "band_summary.json").read_text())
    det, sto = summary["means"]["deterministic/ig-nt"], summary["means"]["stochastic/ig-nt"]
    ok = summary["n_samples"] == 30 and sto >= det + 0.10 and summary["input_mean"] > 0.9
    criterion(6, ok, f"IG+NT band score det {det:.3f}, sto {sto:.3f} (need +0.10); inputs "
                     f"{summary['input_mean']:.3f} (> 0.9); {summary['n_samples']} samples")
    assert ok


# -- 7 ------------------------------------------------------------------------

def test_metrics_oracle(criterion):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        k, n = int(rng.integers(2, 19)), int(rng.integers(1, 200))
        preds, truth = rng.integers(k, size=n), rng.integers(k, size=n)
        rep = classification_report(preds, truth, k)
        mismatches += [(r.precision, r.recall, r.f1) for r in rep.per_class] != brute_force(preds, truth, k)
    truth = np.repeat(np.arange(18), 10)
    rep = classification_report(np.full(truth.size, 3), truth, 18)
    zero_rows = sum(1 for r in rep.per_class if (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0))
    ok = mismatches == 0 and zero_rows == 17
    criterion(7, ok, f"{mismatches} mismatches in 1000 random cases; constant predictor leaves {zero_rows}/17 "
                     f"other rows at 0.000000")
    assert ok


# -- 8 ------------------------------------------------------------------------

def reduced_config() -> C.ExperimentConfig:
    cfg = C.ExperimentConfig(seed=11)
    return replace(
        cfg,
        dataset=replace(cfg.dataset, n_classes=3, segment_len=2048, segments_per_class=10),
        spectral=replace(cfg.spectral, window_size=128, hop=64, image_h=16, image_w=16),
        model=replace(cfg.model, n_blocks=2, channels=4),
        train=replace(cfg.train, epochs=10, batch_size=8, lr=1e-2),
        eval=replace(cfg.eval, mc_samples=2),
        attribution=replace(cfg.attribution, steps=4, nt_samples=2, samples_per_class=1),
    )


def _artifacts(out: Path, pattern: str) -> dict:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob(pattern))}


def test_reproducible_pipeline(criterion, tmp_path):
    cfg = reduced_config()
    runs = []
    for name in ("first", "second"):
        W.run_pipeline(cfg, tmp_path / name, W.STAGES, ("ig-nt", "gradcam"))
        runs.append((_artifacts(tmp_path / name, "report-*/*.csv"), _artifacts(tmp_path / name, "*.ppm")))
    (csv_a, ppm_a), (csv_b, ppm_b) = runs
    ok = bool(csv_a) and bool(ppm_a) and csv_a == csv_b and ppm_a == ppm_b
    criterion(8, ok, f"{len(csv_a)} report CSVs and {len(ppm_a)} heatmaps byte-identical across two runs: "
                     f"{csv_a == csv_b and ppm_a == ppm_b}")
    assert ok
