"""Experiment configuration: sectioned ``key = value`` text.

Profiles are optional ``[profile.N]`` sections; without them a built-in
harmonic-comb family is used for ``dataset.n_classes`` classes.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .model import ResidualNetConfig
from .signalgen import DeviceProfile, Harmonic, check_profile_set


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DatasetConfig:
    n_classes: int = 6
    sample_rate: int = 8192
    segment_len: int = 8192
    segments_per_class: int = 100
    train_fraction: float = 0.7
    notch_hz: float = 0.0
    notch_quality: float = 5.0
    write_raw: bool = True
    profiles: tuple = ()


@dataclass(frozen=True)
class SpectralConfig:
    window: str = "hann"
    window_size: int = 256
    hop: int = 128
    image_h: int = 64
    image_w: int = 64


@dataclass(frozen=True)
class ModelSection:
    n_blocks: int = 4
    channels: int = 8
    sde_sigma: float = 0.1
    dt: float = 1.0
    train_noise: bool = True
    init_seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    sigmas: tuple = (0.1, 0.25, 0.5)
    mc_samples: int = 8
    seed: int = 0


@dataclass(frozen=True)
class AttributionConfig:
    methods: tuple = ("ig-nt",)
    steps: int = 16
    nt_samples: int = 4
    nt_sigma: float = 0.1
    shap_samples: int = 32
    samples_per_class: int = 5
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)

    def net_config(self, stochastic: bool) -> ResidualNetConfig:
        m = self.model
        return ResidualNetConfig(
            n_classes=self.dataset.n_classes, n_blocks=m.n_blocks, channels=m.channels,
            stochastic=stochastic, sde_sigma=m.sde_sigma, dt=m.dt, mc_samples=self.eval.mc_samples,
            train_noise=m.train_noise, image_h=self.spectral.image_h, image_w=self.spectral.image_w,
            init_seed=m.init_seed,
        )

    def resolved_profiles(self) -> list[DeviceProfile]:
        if self.dataset.profiles:
            return list(self.dataset.profiles)
        return default_profiles(self.dataset.n_classes, self.dataset.sample_rate)

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


# comb spacing (Hz), harmonic count, optional (AM rate, depth)
_FAMILY = [
    (320.0, 8, None),
    (192.0, 12, None),
    (512.0, 6, None),
    (256.0, 10, (8.0, 0.3)),
    (448.0, 7, (5.0, 0.3)),
    (384.0, 9, (12.0, 0.3)),
    (224.0, 11, None),
    (576.0, 5, (6.0, 0.3)),
    (288.0, 9, (10.0, 0.3)),
    (640.0, 5, None),
]


def default_profiles(n_classes: int, sample_rate: int = 8192) -> list[DeviceProfile]:
    """Steady harmonic combs, one per class, distinguished by spacing and AM."""
    import numpy as np

    if not 1 <= n_classes <= len(_FAMILY):
        raise ConfigError("dataset.n_classes", f"built-in profiles cover 1..{len(_FAMILY)} classes")
    out = []
    for cid in range(n_classes):
        f0, nh, am = _FAMILY[cid]
        rng = np.random.default_rng([7, cid])
        harmonics = tuple(
            Harmonic(f0 * k, round(1.0 / k ** 0.5, 6), round(float(rng.uniform(0, 2 * np.pi)), 6))
            for k in range(1, nh + 1) if f0 * k < 0.45 * sample_rate
        )
        out.append(DeviceProfile(cid, harmonics, am, 2.5, 0.1, f"comb{int(f0)}"))
    return out


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------

_SECTIONS = ("dataset", "spectral", "model", "train", "eval", "attribution")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_profile(p: DeviceProfile) -> dict:
    return {
        "class_id": str(p.class_id),
        "name": p.name,
        "harmonics": "; ".join(f"{h.frequency!r} {h.amplitude!r} {h.phase!r}" for h in p.harmonics),
        "am_mod": "none" if p.am_mod is None else f"{p.am_mod[0]!r} {p.am_mod[1]!r}",
        "drift_ppm": repr(p.drift_ppm),
        "noise_floor": repr(p.noise_floor),
    }


def serialize(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": str(cfg.seed)}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(section, f.name)) for f in fields(section) if f.name != "profiles"}
    for p in cfg.dataset.profiles:
        cp[f"profile.{p.class_id}"] = _fmt_profile(p)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse_value(path: str, raw: str, kind, default):
    raw = raw.strip()
    try:
        if kind is bool or isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, int):
            return int(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _parse_profile(name: str, sec) -> DeviceProfile:
    try:
        harmonics = []
        for chunk in sec.get("harmonics", "").split(";"):
            if chunk.strip():
                f, a, ph = (float(v) for v in chunk.split())
                harmonics.append(Harmonic(f, a, ph))
        am_raw = sec.get("am_mod", "none").strip()
        am = None if am_raw.lower() == "none" else tuple(float(v) for v in am_raw.split())
        return DeviceProfile(
            class_id=int(sec["class_id"]), harmonics=tuple(harmonics), am_mod=am,
            drift_ppm=float(sec.get("drift_ppm", "0")), noise_floor=float(sec.get("noise_floor", "0")),
            name=sec.get("name", ""),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from None


_SECTION_TYPES = {
    "dataset": DatasetConfig, "spectral": SpectralConfig, "model": ModelSection,
    "train": TrainConfig, "eval": EvalConfig, "attribution": AttributionConfig,
}


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    known = set(_SECTIONS) | {"run"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("profile."):
            raise ConfigError(sec, "unknown section")
    seed = int(_parse_value("run.seed", cp.get("run", "seed", fallback="0"), int, 0))
    parts = {}
    for name, typ in _SECTION_TYPES.items():
        defaults = typ()
        values = {}
        if cp.has_section(name):
            valid = {f.name for f in fields(typ) if f.name != "profiles"}
            for key, raw in cp[name].items():
                if key not in valid:
                    raise ConfigError(f"{name}.{key}", "unknown key")
                values[key] = _parse_value(f"{name}.{key}", raw, None, getattr(defaults, key))
        parts[name] = replace(defaults, **values)
    profiles = tuple(sorted((_parse_profile(s, cp[s]) for s in cp.sections() if s.startswith("profile.")),
                            key=lambda p: p.class_id))
    if profiles:
        parts["dataset"] = replace(parts["dataset"], profiles=profiles)
    cfg = ExperimentConfig(seed=seed, **parts)
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    from pathlib import Path

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse(text)


def validate(cfg: ExperimentConfig) -> None:
    d, s, m, t, e, a = cfg.dataset, cfg.spectral, cfg.model, cfg.train, cfg.eval, cfg.attribution
    checks = [
        ("dataset.n_classes", d.n_classes >= 2, "need at least 2 classes"),
        ("dataset.train_fraction", 0 < d.train_fraction < 1, "must lie in (0, 1)"),
        ("dataset.sample_rate", d.sample_rate > 0, "must be positive"),
        ("dataset.segment_len", d.segment_len >= s.window_size, "must cover at least one STFT window"),
        ("dataset.segments_per_class", d.segments_per_class >= 2, "need at least 2 segments per class"),
        ("spectral.window", s.window in ("hann", "rect"), "must be hann or rect"),
        ("spectral.window_size", s.window_size >= 2 and s.window_size & (s.window_size - 1) == 0,
         "must be a power of two"),
        ("spectral.hop", s.hop >= 1, "must be >= 1"),
        ("spectral.image_h", s.image_h >= 1, "must be >= 1"),
        ("spectral.image_w", s.image_w >= 2, "must be >= 2"),
        ("model.n_blocks", m.n_blocks >= 1, "must be >= 1"),
        ("model.channels", m.channels >= 1, "must be >= 1"),
        ("model.sde_sigma", m.sde_sigma >= 0, "must be >= 0"),
        ("model.dt", m.dt > 0, "must be > 0"),
        ("train.epochs", t.epochs >= 0, "must be >= 0"),
        ("train.batch_size", t.batch_size >= 1, "must be >= 1"),
        ("train.lr", t.lr >= 0, "must be >= 0"),
        ("eval.sigmas", len(e.sigmas) >= 1 and all(v >= 0 for v in e.sigmas), "need non-negative levels"),
        ("eval.mc_samples", e.mc_samples >= 1, "must be >= 1"),
        ("attribution.steps", a.steps >= 1, "must be >= 1"),
        ("attribution.nt_samples", a.nt_samples >= 1, "must be >= 1"),
        ("attribution.nt_sigma", a.nt_sigma >= 0, "must be >= 0"),
        ("attribution.samples_per_class", a.samples_per_class >= 1, "must be >= 1"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(path, msg)
    from .attribution import METHODS

    for method in a.methods:
        if method not in METHODS:
            raise ConfigError("attribution.methods", f"unknown method {method!r}")
    if d.profiles:
        if len(d.profiles) != d.n_classes:
            raise ConfigError("dataset.profiles", f"{len(d.profiles)} profiles for {d.n_classes} classes")
        try:
            check_profile_set(d.profiles)
        except ValueError as exc:
            raise ConfigError("dataset.profiles", str(exc)) from None
        if sorted(p.class_id for p in d.profiles) != list(range(d.n_classes)):
            raise ConfigError("dataset.profiles", "class ids must be 0..n_classes-1")
    if d.notch_hz and not 0 < d.notch_hz < d.sample_rate / 2:
        raise ConfigError("dataset.notch_hz", "must lie below Nyquist")
    for p in cfg.resolved_profiles():
        try:
            p.check_nyquist(d.sample_rate)
        except ValueError as exc:
            raise ConfigError(f"profile.{p.class_id}", str(exc)) from None
