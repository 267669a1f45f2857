"""Classification metrics and the Gaussian-noise robustness sweep."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .spectral import ImageTensor


@dataclass
class ClassRow:
    class_id: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    per_class: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    noise_sigma: float = 0.0
    model_tag: str = ""

    @property
    def n_samples(self) -> int:
        return sum(r.support for r in self.per_class)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_matrix(preds, truth, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if preds.shape != truth.shape:
        raise ValueError(f"{preds.size} predictions for {truth.size} labels")
    for name, arr in (("predictions", preds), ("labels", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def classification_report(preds, truth, n_classes: int, noise_sigma: float = 0.0, model_tag: str = "") -> EvalReport:
    """Per-class precision/recall/F1 with 0/0 cells reported as 0, plus macro means."""
    cm = confusion_matrix(preds, truth, n_classes)
    if cm.sum() < 1:
        raise ValueError("need at least one prediction")
    rows = []
    for c in range(n_classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        rows.append(ClassRow(c, p, r, _ratio(2 * p * r, p + r), int(cm[c, :].sum())))
    return EvalReport(
        rows,
        float(np.mean([r.precision for r in rows])),
        float(np.mean([r.recall for r in rows])),
        float(np.mean([r.f1 for r in rows])),
        float(np.trace(cm) / cm.sum()),
        noise_sigma,
        model_tag,
    )


def add_gaussian_noise(img, sigma: float, seed) -> ImageTensor | np.ndarray:
    """``img + N(0, sigma^2)`` elementwise; no clipping."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    values = img.values if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float32)
    if sigma == 0:
        out = values.copy()
    else:
        out = (values + np.random.default_rng(seed).normal(0.0, sigma, size=values.shape)).astype(np.float32)
    if isinstance(img, ImageTensor):
        return ImageTensor(out, dict(img.provenance, noise_sigma=sigma))
    return out


def noise_seed(seed: int, sigma: float, index: int) -> list:
    """Seed material for sample ``index`` at level ``sigma``; sigma enters in micro-units."""
    return [seed, int(round(sigma * 1_000_000)), index]


def robustness_sweep(classify, images, labels, sigmas, seed: int = 0, n_classes: int | None = None,
                     model_tag: str = "") -> list[EvalReport]:
    """One report per noise level, the clean level 0 always first.

    ``classify`` maps a batch of images ``[N, 1, H, W]`` to integer labels; a
    :class:`~urebench.model.ResidualNet` is accepted directly and classified
    with :func:`~urebench.model.predict` under ``seed``.
    """
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("sigma grid must be non-empty")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("test set is empty")
    if isinstance(classify, M.ResidualNet):
        net = classify
        n_classes = n_classes or net.config.n_classes
        model_tag = model_tag or ("stochastic" if net.config.stochastic else "deterministic")

        def classify(batch):
            return M.predict(net, batch, seed=seed)[0]
    if n_classes is None:
        raise ValueError("n_classes is required for a plain classifier")
    grid = [0.0] + [float(s) for s in sigmas if float(s) != 0.0]
    reports = []
    for sigma in grid:
        noisy = np.stack([add_gaussian_noise(img, sigma, noise_seed(seed, sigma, i)) for i, img in enumerate(images)])
        preds = np.asarray(classify(noisy), dtype=np.int64)
        reports.append(classification_report(preds, labels, n_classes, sigma, model_tag))
    return reports


@dataclass
class ComparisonRow:
    sigma: float
    macro_f1_a: float
    macro_f1_b: float
    delta: float
    verdict: str


@dataclass
class Comparison:
    tag_a: str
    tag_b: str
    rows: list = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = [f"| sigma | {self.tag_a} macro-F1 | {self.tag_b} macro-F1 | delta (b - a) | verdict |",
                 "|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.sigma:g} | {r.macro_f1_a:.6f} | {r.macro_f1_b:.6f} | {r.delta:+.6f} | {r.verdict} |")
        return "\n".join(lines) + "\n"


def compare_reports(a, b, tolerance: float = 1e-9) -> Comparison:
    """Per-sigma macro-F1 deltas ``b - a``."""
    sig_a = [r.noise_sigma for r in a]
    sig_b = [r.noise_sigma for r in b]
    if sig_a != sig_b:
        raise ValueError(f"sigma grids differ: {sig_a} vs {sig_b}")
    tag_a = a[0].model_tag if a and a[0].model_tag else "a"
    tag_b = b[0].model_tag if b and b[0].model_tag else "b"
    cmp = Comparison(tag_a, tag_b)
    for ra, rb in zip(a, b):
        delta = rb.macro_f1 - ra.macro_f1
        if delta > tolerance:
            verdict = f"{tag_b} better"
        elif delta < -tolerance:
            verdict = f"{tag_a} better"
        else:
            verdict = "tie"
        cmp.rows.append(ComparisonRow(ra.noise_sigma, ra.macro_f1, rb.macro_f1, delta, verdict))
    return cmp
