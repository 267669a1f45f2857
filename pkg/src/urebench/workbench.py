"""Pipeline orchestration and artifact emission.

Each stage writes into ``<out>/<stage>-<digest>/`` where the digest covers
everything the stage depends on, so differently configured runs never share
a directory.  A stage directory holding ``stage.json`` is complete and is
reused as-is.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import attribution as A
from . import evaluation as E
from . import model as M
from .config import ExperimentConfig, serialize
from .signalgen import notch_filter, segment, synthesize_recording, write_raw
from .spectral import ImageTensor, read_grid, stft, to_image, write_image

log = logging.getLogger(__name__)

STAGES = ("generate", "train", "sweep", "explain", "report")
VARIANTS = ("deterministic", "stochastic")


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, missing: Path):
        super().__init__(f"stage {stage!r} needs {missing}, which does not exist; run the upstream stage first")
        self.stage = stage
        self.missing = missing


def _sha(payload: str | bytes) -> str:
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def file_digest(path) -> str:
    return _sha(Path(path).read_bytes())


def _section_text(cfg: ExperimentConfig, *names) -> str:
    return json.dumps({n: asdict(getattr(cfg, n)) if n != "seed" else cfg.seed for n in names},
                      sort_keys=True, default=str)


def seed_for(cfg: ExperimentConfig, *parts: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *parts]).generate_state(1)[0])


class Layout:
    """Stage directory names for one config."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg, self.out = cfg, Path(out)
        self.dataset_key = _sha(_section_text(cfg, "seed", "dataset", "spectral"))[:12]
        self.train_key = _sha(self.dataset_key + _section_text(cfg, "model", "train"))[:12]
        self.sweep_key = _sha(self.train_key + _section_text(cfg, "eval"))[:12]
        self.explain_key = _sha(self.train_key + _section_text(cfg, "eval", "attribution"))[:12]
        self.report_key = _sha(self.sweep_key + self.explain_key)[:12]

    @property
    def dataset(self) -> Path:
        return self.out / f"dataset-{self.dataset_key}"

    @property
    def train(self) -> Path:
        return self.out / f"train-{self.train_key}"

    @property
    def sweep(self) -> Path:
        return self.out / f"sweep-{self.sweep_key}"

    @property
    def explain(self) -> Path:
        return self.out / f"explain-{self.explain_key}"

    @property
    def report(self) -> Path:
        return self.out / f"report-{self.report_key}"

    def evaluate(self) -> Path:
        return self.out / f"evaluate-{self.sweep_key}"


def _complete(path: Path) -> bool:
    return (path / "stage.json").exists()


def _mark(path: Path, stage: str, **info) -> None:
    (path / "stage.json").write_text(json.dumps({"stage": stage, **info}, indent=2, sort_keys=True) + "\n")


def _require(stage: str, path: Path) -> None:
    if not _complete(path):
        raise MissingPrerequisite(stage, path)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def stage_generate(cfg: ExperimentConfig, layout: Layout) -> Path:
    root = layout.dataset
    if _complete(root):
        return root
    d, s = cfg.dataset, cfg.spectral
    (root / "images").mkdir(parents=True, exist_ok=True)
    if d.write_raw:
        (root / "raw").mkdir(exist_ok=True)
    profiles = cfg.resolved_profiles()
    split_rng = np.random.default_rng(seed_for(cfg, 1))
    entries, seeds = [], {}
    for p in profiles:
        seed = seed_for(cfg, 2, p.class_id)
        seeds[p.class_id] = seed
        duration = d.segments_per_class * d.segment_len / d.sample_rate
        rec = synthesize_recording(p, duration, d.sample_rate, seed)
        if d.notch_hz:
            rec = notch_filter(rec, d.notch_hz, d.notch_quality)
        if d.write_raw:
            write_raw(rec, root / "raw" / f"class{p.class_id}.ure")
        segs = segment(rec, d.segment_len)
        n_train = int(round(d.train_fraction * len(segs)))
        order = split_rng.permutation(len(segs))
        train_idx = set(order[:n_train].tolist())
        for i, seg in enumerate(segs):
            img = to_image(stft(seg, s.window_size, s.hop, s.window), s.image_h, s.image_w)
            rel = f"images/c{p.class_id}_{i:04d}.img"
            write_image(img, root / rel)
            entries.append({"path": rel, "class_id": p.class_id, "segment": i,
                            "split": "train" if i in train_idx else "test"})
    manifest = {
        "classes": [p.name or f"class{p.class_id}" for p in profiles],
        "profiles": [p.to_dict() for p in profiles],
        "seeds": {str(k): v for k, v in seeds.items()},
        "sample_rate": d.sample_rate,
        "segment_len": d.segment_len,
        "spectral": asdict(s),
        "segments": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _mark(root, "generate")
    return root


def load_split(root: Path, split: str):
    manifest = json.loads((root / "manifest.json").read_text())
    rows = [e for e in manifest["segments"] if e["split"] == split]
    images = np.stack([read_grid(root / e["path"])[None] for e in rows]) if rows else np.zeros((0, 1, 1, 1))
    labels = np.array([e["class_id"] for e in rows], dtype=np.int64)
    return images.astype(np.float32), labels, rows


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _net_path(root: Path, variant: str) -> Path:
    return root / f"{variant}.ckpt"


def stage_train(cfg: ExperimentConfig, layout: Layout) -> Path:
    _require("train", layout.dataset)
    root = layout.train
    if _complete(root):
        return root
    root.mkdir(parents=True, exist_ok=True)
    images, labels, _ = load_split(layout.dataset, "train")
    t = cfg.train
    for k, variant in enumerate(VARIANTS):
        net = M.ResidualNet(cfg.net_config(stochastic=variant == "stochastic"))
        history = M.train(net, images, labels, t.epochs, t.batch_size, t.lr, seed=seed_for(cfg, 3, t.seed, k))
        M.save(net, _net_path(root, variant), _sha(serialize(cfg)))
        M.write_training_log(history, root / f"{variant}_training.csv")
    _mark(root, "train", lr=t.lr, epochs=t.epochs)
    return root


def load_nets(cfg: ExperimentConfig, layout: Layout, stage: str) -> dict:
    nets = {}
    for variant in VARIANTS:
        path = _net_path(layout.train, variant)
        if not path.exists():
            raise MissingPrerequisite(stage, path)
        nets[variant], _ = M.load(path, cfg.net_config(stochastic=variant == "stochastic"))
    return nets


# ---------------------------------------------------------------------------
# sweep / evaluate
# ---------------------------------------------------------------------------

def _report_json(reports) -> list:
    return [asdict(r) for r in reports]


def reports_from_json(rows) -> list:
    out = []
    for r in rows:
        per = [E.ClassRow(**c) for c in r.pop("per_class")]
        out.append(E.EvalReport(per_class=per, **r))
    return out


def stage_sweep(cfg: ExperimentConfig, layout: Layout, sigmas=None, root: Path | None = None) -> Path:
    _require("sweep", layout.train)
    root = root or layout.sweep
    if _complete(root):
        return root
    nets = load_nets(cfg, layout, "sweep")
    images, labels, _ = load_split(layout.dataset, "test")
    if len(images) == 0:
        raise ValueError("test split is empty")
    sigmas = cfg.eval.sigmas if sigmas is None else sigmas
    root.mkdir(parents=True, exist_ok=True)
    for variant, net in nets.items():
        reports = E.robustness_sweep(net, images, labels, sigmas, seed=seed_for(cfg, 4, cfg.eval.seed),
                                     model_tag=variant)
        (root / f"{variant}.json").write_text(json.dumps(_report_json(reports), indent=2) + "\n")
    _mark(root, "sweep", no_clip=True, mc_samples=cfg.eval.mc_samples)
    return root


def load_sweep(root: Path, stage: str) -> dict:
    out = {}
    for variant in VARIANTS:
        path = root / f"{variant}.json"
        if not path.exists():
            raise MissingPrerequisite(stage, path)
        out[variant] = reports_from_json(json.loads(path.read_text()))
    return out


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def pick_samples(preds: dict, labels: np.ndarray, n_classes: int, per_class: int) -> list[int]:
    """First ``per_class`` test indices per class that every model classifies correctly."""
    ok = np.ones(len(labels), dtype=bool)
    for p in preds.values():
        ok &= p == labels
    chosen = []
    for c in range(n_classes):
        chosen.extend(np.flatnonzero(ok & (labels == c))[:per_class].tolist())
    return chosen


def stage_explain(cfg: ExperimentConfig, layout: Layout, methods=None, samples_per_class=None) -> Path:
    _require("explain", layout.train)
    a = cfg.attribution
    methods = tuple(methods or a.methods)
    per_class = samples_per_class or a.samples_per_class
    root = layout.explain
    if methods != a.methods or per_class != a.samples_per_class:
        root = root.with_name(root.name + "-" + _sha(json.dumps([methods, per_class]))[:8])
    if _complete(root):
        return root
    nets = load_nets(cfg, layout, "explain")
    images, labels, rows = load_split(layout.dataset, "test")
    eval_seed = seed_for(cfg, 4, cfg.eval.seed)
    preds = {v: M.predict(net, images, seed=eval_seed)[0] for v, net in nets.items()}
    chosen = pick_samples(preds, labels, cfg.dataset.n_classes, per_class)
    root.mkdir(parents=True, exist_ok=True)
    scores = []
    for variant, net in nets.items():
        for method in methods:
            out_dir = root / variant / method
            out_dir.mkdir(parents=True, exist_ok=True)
            for idx in chosen:
                seed = seed_for(cfg, 5, a.seed, idx)
                fn = A.NetFunction(net, seed)
                attr = A.explain(method, fn, images[idx], int(labels[idx]), steps=a.steps,
                                 nt_samples=a.nt_samples, nt_sigma=a.nt_sigma, shap_samples=a.shap_samples,
                                 seed=seed)
                stem = f"c{labels[idx]}_{Path(rows[idx]['path']).stem}"
                attr.meta["source"] = rows[idx]["path"]
                attr.save(out_dir / f"{stem}.img")
                (out_dir / f"{stem}.ppm").write_bytes(render_heatmap(attr, images[idx]))
                scores.append({"variant": variant, "method": method, "class_id": int(labels[idx]),
                               "sample": rows[idx]["path"], "band_score": A.band_score(attr)})
    input_scores = [A.band_score(images[i]) for i in chosen]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "method", "class", "sample", "band_score"])
    for s in scores:
        writer.writerow([s["variant"], s["method"], s["class_id"], s["sample"], f"{s['band_score']:.6f}"])
    (root / "band_scores.csv").write_text(buf.getvalue())
    summary = {"input_mean": float(np.mean(input_scores)) if input_scores else 0.0, "n_samples": len(chosen),
               "means": {}}
    for variant in nets:
        for method in methods:
            vals = [s["band_score"] for s in scores if s["variant"] == variant and s["method"] == method]
            summary["means"][f"{variant}/{method}"] = float(np.mean(vals)) if vals else 0.0
    (root / "band_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _mark(root, "explain", methods=list(methods), samples_per_class=per_class)
    return root


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def stage_report(cfg: ExperimentConfig, layout: Layout) -> Path:
    _require("report", layout.sweep)
    root = layout.report
    if _complete(root):
        return root
    sweeps = load_sweep(layout.sweep, "report")
    root.mkdir(parents=True, exist_ok=True)
    for variant, reports in sweeps.items():
        emit_tables(reports, root / f"{variant}_robustness")
    cmp = E.compare_reports(sweeps["deterministic"], sweeps["stochastic"])
    (root / "comparison.md").write_text(cmp.to_markdown())
    lines = ["# Robustness and attribution summary", "", "## Macro-F1 under input noise", "", cmp.to_markdown()]
    band = layout.explain / "band_summary.json"
    if band.exists():
        summary = json.loads(band.read_text())
        lines += ["## Band score of attributions", "", "| model / method | mean band score |", "|---|---|"]
        for key, val in summary["means"].items():
            lines.append(f"| {key} | {val:.6f} |")
        lines.append(f"| clean inputs | {summary['input_mean']:.6f} |")
        lines.append("")
    (root / "summary.md").write_text("\n".join(lines))
    _mark(root, "report")
    return root


def _table_rows(reports):
    for r in reports:
        for c in r.per_class:
            yield [str(c.class_id), f"{r.noise_sigma:g}", f"{c.precision:.6f}", f"{c.recall:.6f}",
                   f"{c.f1:.6f}", str(c.support)]
        yield ["average", f"{r.noise_sigma:g}", f"{r.macro_precision:.6f}", f"{r.macro_recall:.6f}",
               f"{r.macro_f1:.6f}", str(r.n_samples)]


HEADER = ["class", "sigma", "precision", "recall", "f1", "support"]


def emit_tables(reports, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and a Markdown twin ``<path>.md`` with the same numbers."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to emit")
    path = Path(path)
    rows = list(_table_rows(reports))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    writer.writerows(rows)
    md = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    md += ["| " + " | ".join(r) + " |" for r in rows]
    csv_path, md_path = path.with_suffix(".csv"), path.with_suffix(".md")
    try:
        csv_path.write_text(buf.getvalue())
        md_path.write_text("\n".join(md) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write tables to {path}: {exc.strerror}") from exc
    return csv_path, md_path


def render_heatmap(attr, underlay) -> bytes:
    """Side-by-side binary PPM: grayscale underlay | green (+) / red (-) attribution."""
    grid = attr.grid if isinstance(attr, A.AttributionMap) else np.asarray(attr, dtype=np.float64)
    under = underlay.grid if isinstance(underlay, ImageTensor) else np.asarray(underlay, dtype=np.float64)
    if under.ndim == 3:
        under = under[0]
    if grid.shape != under.shape:
        raise ValueError(f"attribution shape {grid.shape} != underlay shape {under.shape}")
    h, w = grid.shape
    left = np.clip(np.rint(np.clip(under, 0.0, 1.0) * 255), 0, 255).astype(np.uint8)
    pix = np.zeros((h, 2 * w, 3), dtype=np.uint8)
    pix[:, :w, :] = left[:, :, None]
    peak = float(np.abs(grid).max())
    if peak > 0:
        scaled = grid / peak
        pix[:, w:, 1] = np.rint(np.clip(scaled, 0, 1) * 255).astype(np.uint8)
        pix[:, w:, 0] = np.rint(np.clip(-scaled, 0, 1) * 255).astype(np.uint8)
    return f"P6\n{2 * w} {h}\n255\n".encode("ascii") + pix.tobytes()


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def _inventory(out: Path, dirs) -> list:
    items = []
    for d in dirs:
        if not d.exists():
            continue
        for p in sorted(d.rglob("*")):
            if p.is_file():
                items.append({"path": str(p.relative_to(out)), "sha256": file_digest(p), "bytes": p.stat().st_size})
    return items


def run_pipeline(cfg: ExperimentConfig, out, stages=STAGES, explain_methods=None, samples_per_class=None) -> dict:
    """Run the requested stages in canonical order; returns the run metadata."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    layout = Layout(cfg, out)
    timings, touched = {}, []
    for stage in STAGES:
        if stage not in stages:
            continue
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        if stage == "generate":
            touched.append(stage_generate(cfg, layout))
        elif stage == "train":
            touched.append(stage_train(cfg, layout))
        elif stage == "sweep":
            touched.append(stage_sweep(cfg, layout))
        elif stage == "explain":
            touched.append(stage_explain(cfg, layout, explain_methods, samples_per_class))
        elif stage == "report":
            touched.append(stage_report(cfg, layout))
        timings[stage] = round(time.perf_counter() - t0, 3)
    meta = {
        "config_digest": cfg.digest(),
        "tool_version": __version__,
        "seeds": {"run": cfg.seed, "train": cfg.train.seed, "eval": cfg.eval.seed, "attribution": cfg.attribution.seed},
        "stages": [s for s in STAGES if s in stages],
        "timings_s": timings,
        "settings": {"lr": cfg.train.lr, "noise_clipping": False, "mc_samples": cfg.eval.mc_samples,
                     "sde_sigma": cfg.model.sde_sigma, "dt": cfg.model.dt, "spectral": asdict(cfg.spectral)},
        "directories": [str(p.relative_to(out)) for p in touched],
        "inventory": _inventory(out, touched),
    }
    (out / "config.ini").write_text(serialize(cfg))
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
