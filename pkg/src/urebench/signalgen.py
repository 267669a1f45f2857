"""Synthetic steady-state device emissions, raw recording I/O and segmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

RAW_MAGIC = b"URE1"
RAW_HEADER = struct.Struct("<4sIQ")


class RawFormatError(ValueError):
    """Base class for malformed raw recording files."""


class BadMagicError(RawFormatError):
    pass


class TruncatedPayloadError(RawFormatError):
    pass


class NonFiniteSampleError(RawFormatError):
    def __init__(self, index: int):
        super().__init__(f"sample {index} is not finite")
        self.index = index


@dataclass(frozen=True)
class Harmonic:
    frequency: float
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class DeviceProfile:
    """Abstract emitter: a sum of stable sinusoids plus background noise.

    ``am_mod`` is an optional ``(rate_hz, depth)`` amplitude modulation applied
    to all harmonics; ``drift_ppm`` ramps every instantaneous frequency
    linearly from nominal to ``f * (1 + drift_ppm * 1e-6)`` over the recording.
    """

    class_id: int
    harmonics: tuple[Harmonic, ...] = ()
    am_mod: tuple[float, float] | None = None
    drift_ppm: float = 0.0
    noise_floor: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "harmonics", tuple(
            h if isinstance(h, Harmonic) else Harmonic(*h) for h in self.harmonics))
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        for h in self.harmonics:
            if h.amplitude < 0:
                raise ValueError(f"harmonic amplitude must be >= 0, got {h.amplitude}")
            if h.frequency < 0:
                raise ValueError(f"harmonic frequency must be >= 0, got {h.frequency}")
        if self.am_mod is not None:
            rate, depth = self.am_mod
            if not 0.0 <= depth <= 1.0:
                raise ValueError(f"AM depth must lie in [0, 1], got {depth}")
            if rate < 0:
                raise ValueError(f"AM rate must be >= 0, got {rate}")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be >= 0")

    def check_nyquist(self, sample_rate: float) -> None:
        nyquist = sample_rate / 2
        for h in self.harmonics:
            top = h.frequency * (1 + max(self.drift_ppm, 0.0) * 1e-6)
            if top >= nyquist:
                raise ValueError(
                    f"harmonic at {h.frequency} Hz violates Nyquist ({nyquist} Hz) for class {self.class_id}")

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "name": self.name,
            "harmonics": [[h.frequency, h.amplitude, h.phase] for h in self.harmonics],
            "am_mod": list(self.am_mod) if self.am_mod is not None else None,
            "drift_ppm": self.drift_ppm,
            "noise_floor": self.noise_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        am = d.get("am_mod")
        return cls(
            class_id=int(d["class_id"]),
            harmonics=tuple(Harmonic(*map(float, h)) for h in d.get("harmonics", ())),
            am_mod=tuple(map(float, am)) if am is not None else None,
            drift_ppm=float(d.get("drift_ppm", 0.0)),
            noise_floor=float(d.get("noise_floor", 0.0)),
            name=d.get("name", ""),
        )


def check_profile_set(profiles) -> None:
    ids = [p.class_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError(f"class ids must be unique, got {ids}")


@dataclass
class TimeSeries:
    samples: np.ndarray
    sample_rate: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError("time series must be non-empty")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        bad = np.flatnonzero(~np.isfinite(self.samples))
        if bad.size:
            raise NonFiniteSampleError(int(bad[0]))

    def __len__(self) -> int:
        return self.samples.size


def synthesize_recording(profile: DeviceProfile, duration: float, sample_rate: float, seed: int) -> TimeSeries:
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n = int(round(duration * sample_rate))
    if n < 1:
        raise ValueError("duration * sample_rate must be at least 1")
    profile.check_nyquist(sample_rate)

    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    # phase of a linear frequency ramp f(t) = f0 (1 + k t / T): 2π f0 (t + k t² / 2T)
    k = profile.drift_ppm * 1e-6
    warped = t + k * t * t / (2 * duration)
    x = np.zeros(n)
    for h in profile.harmonics:
        x += h.amplitude * np.sin(2 * np.pi * h.frequency * warped + h.phase)
    if profile.am_mod is not None:
        rate, depth = profile.am_mod
        x *= 1.0 + depth * np.sin(2 * np.pi * rate * t)
    if profile.noise_floor > 0:
        x += rng.normal(0.0, profile.noise_floor, size=n)
    return TimeSeries(x, sample_rate, {"class_id": profile.class_id, "seed": seed})


def segment(ts: TimeSeries, segment_len: int) -> list[TimeSeries]:
    """Non-overlapping fixed windows; a trailing partial window is dropped."""
    if segment_len < 1:
        raise ValueError(f"segment_len must be >= 1, got {segment_len}")
    count = len(ts) // segment_len
    return [
        TimeSeries(ts.samples[i * segment_len:(i + 1) * segment_len], ts.sample_rate, dict(ts.meta, segment=i))
        for i in range(count)
    ]


def notch_filter(ts: TimeSeries, center: float, quality: float) -> TimeSeries:
    """Second-order IIR notch (single pass, causal)."""
    nyquist = ts.sample_rate / 2
    if not 0 < center < nyquist:
        raise ValueError(f"notch center {center} Hz must lie in (0, {nyquist}) Hz")
    if quality <= 0:
        raise ValueError(f"quality must be positive, got {quality}")
    b, a = sps.iirnotch(center, quality, fs=ts.sample_rate)
    return TimeSeries(sps.lfilter(b, a, ts.samples), ts.sample_rate, dict(ts.meta))


def write_raw(ts: TimeSeries, path) -> None:
    payload = np.asarray(ts.samples, dtype="<f4")
    Path(path).write_bytes(RAW_HEADER.pack(RAW_MAGIC, int(ts.sample_rate), payload.size) + payload.tobytes())


def load_raw_recording(path) -> TimeSeries:
    blob = Path(path).read_bytes()
    if len(blob) < RAW_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {RAW_HEADER.size}-byte header")
    magic, rate, count = RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    have = (len(blob) - RAW_HEADER.size) // 4
    if have < count:
        raise TruncatedPayloadError(f"{path}: header declares {count} samples, file holds {have}")
    samples = np.frombuffer(blob, dtype="<f4", count=count, offset=RAW_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        raise NonFiniteSampleError(int(bad[0]))
    return TimeSeries(samples.astype(np.float64), float(rate))
