"""Synthetic two-talker mixtures, PCM16 WAV I/O, manifests and cropping."""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class WavFormatError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio only")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("non-finite audio samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


# WAV ------------------------------------------------------------------------

_PCM = 1


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    """Write 16-bit PCM mono with the canonical 44-byte header."""
    pcm = quantize_pcm16(audio.samples).tobytes()
    rate = int(audio.sample_rate)
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, _PCM, 1, rate, rate * 2, 2, 16,
        b"data", len(pcm),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pcm)


def read_wav(path) -> AudioBuffer:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing data chunk")
    codec, channels, rate, _, _, bits = fmt
    if codec != _PCM:
        raise WavFormatError(f"{path}: unsupported codec {codec} (only PCM=1)")
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels, only mono is supported")
    if bits != 16:
        raise WavFormatError(f"{path}: {bits}-bit samples, only 16-bit is supported")
    if len(data) % 2:
        raise WavFormatError(f"{path}: truncated data chunk")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    return AudioBuffer(np.clip(pcm, -1.0, 1.0), rate)


# synthesis ------------------------------------------------------------------

@dataclass
class SynthSpec:
    duration_s: float = 1.0
    sample_rate: int = 8000
    f0_a: tuple[float, float] = (100.0, 150.0)
    f0_b: tuple[float, float] = (220.0, 320.0)
    harmonics: int = 5
    am_rate: tuple[float, float] = (1.0, 5.0)
    snr_db: tuple[float, float] = (-5.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        lo_a, hi_a = sorted(self.f0_a)
        lo_b, hi_b = sorted(self.f0_b)
        if not (hi_a < lo_b or hi_b < lo_a):
            raise ValueError("speaker f0 families must be disjoint")
        if not all(math.isfinite(v) for v in self.snr_db):
            raise ValueError("SNR range must be finite")
        if self.duration_s <= 0 or self.harmonics < 1:
            raise ValueError("duration and harmonics must be positive")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


def _harmonic_source(rng, n, sr, f0_range, harmonics, am_range) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(*f0_range)
    glide = 1.0 + rng.uniform(-0.03, 0.03) * np.linspace(-1.0, 1.0, n)
    phase = 2 * np.pi * np.cumsum(f0 * glide) / sr
    amps = rng.uniform(0.3, 1.0, harmonics) / np.arange(1, harmonics + 1)
    offsets = rng.uniform(0, 2 * np.pi, harmonics)
    sig = np.zeros(n)
    for h in range(harmonics):
        if f0 * (h + 1) * 1.03 < sr / 2:
            sig += amps[h] * np.sin((h + 1) * phase + offsets[h])
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(*am_range) * t + rng.uniform(0, 2 * np.pi))
    sig *= env
    return sig / np.sqrt(np.mean(sig * sig))


def synth_mixture(spec: SynthSpec, index: int):
    """Deterministic (mixture, [source_a, source_b], snr_db) for ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    n, sr = spec.num_samples, spec.sample_rate
    a = _harmonic_source(rng, n, sr, spec.f0_a, spec.harmonics, spec.am_rate)
    b = _harmonic_source(rng, n, sr, spec.f0_b, spec.harmonics, spec.am_rate)
    snr = float(rng.uniform(*spec.snr_db))
    s1 = 0.1 * 10 ** (snr / 20.0) * a
    s2 = 0.1 * b
    peak = np.max(np.abs(s1 + s2))
    if peak > 1.0:
        s1, s2 = s1 / peak, s2 / peak
    mix = s1 + s2
    return (AudioBuffer(mix, sr), [AudioBuffer(s1, sr), AudioBuffer(s2, sr)], snr)


# manifests ------------------------------------------------------------------

MANIFEST_FIELDS = ["mixture_path", "source1_path", "source2_path", "length_samples", "mix_snr_db"]


@dataclass
class MixtureRecord:
    mixture_path: Path
    source_paths: list[Path] = field(default_factory=list)
    length_samples: int = 0
    mix_snr_db: float = 0.0

    def load(self) -> tuple[AudioBuffer, list[AudioBuffer]]:
        mix = read_wav(self.mixture_path)
        srcs = [read_wav(p) for p in self.source_paths]
        for s in srcs:
            if s.sample_rate != mix.sample_rate or len(s) != len(mix):
                raise WavFormatError(f"{self.mixture_path}: sources do not match mixture")
        return mix, srcs


def build_dataset(root, count: int, spec: SynthSpec) -> Path:
    """Write ``<root>/{mix,s1,s2}/<index>.wav`` and ``<root>/manifest.csv``."""
    root = Path(root)
    for sub in ("mix", "s1", "s2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        mix, (s1, s2), snr = synth_mixture(spec, i)
        name = f"{i:05d}.wav"
        for sub, buf in (("mix", mix), ("s1", s1), ("s2", s2)):
            write_wav(root / sub / name, buf)
        rows.append([f"mix/{name}", f"s1/{name}", f"s2/{name}", len(mix), f"{snr:.6f}"])
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return manifest


def read_manifest(path) -> list[MixtureRecord]:
    """Parse a manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    base = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:3] != MANIFEST_FIELDS[:3]:
            raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            srcs = sorted(k for k in row if k.startswith("source") and k.endswith("_path"))
            resolve = lambda p: Path(p) if os.path.isabs(p) else base / p  # noqa: E731
            rec = MixtureRecord(resolve(row["mixture_path"]), [resolve(row[k]) for k in srcs],
                                int(row["length_samples"]), float(row["mix_snr_db"]))
            for p in [rec.mixture_path, *rec.source_paths]:
                if not p.exists():
                    raise FileNotFoundError(f"{path}: missing file {p}")
            records.append(rec)
    return records


# cropping -------------------------------------------------------------------

def crop_offset(length: int, crop_len: int, rng: np.random.Generator) -> int | None:
    if length <= crop_len:
        return None
    return int(rng.integers(0, length - crop_len + 1))


def crop_or_skip(x: AudioBuffer, seconds: float, rng: np.random.Generator | None = None,
                 offset: int | None = None) -> AudioBuffer:
    """Random contiguous ``seconds``-long crop; shorter input is returned unchanged."""
    if seconds <= 0:
        raise ValueError("crop length must be positive")
    crop_len = int(round(seconds * x.sample_rate))
    if len(x) <= crop_len:
        return x
    if offset is None:
        offset = crop_offset(len(x), crop_len, rng or np.random.default_rng())
    return AudioBuffer(x.samples[offset:offset + crop_len], x.sample_rate)


def crop_group(buffers: list[AudioBuffer], seconds: float,
               rng: np.random.Generator) -> list[AudioBuffer]:
    """Crop aligned buffers (mixture and sources) at one shared offset."""
    crop_len = int(round(seconds * buffers[0].sample_rate))
    off = crop_offset(len(buffers[0]), crop_len, rng)
    if off is None:
        return list(buffers)
    return [crop_or_skip(b, seconds, offset=off) for b in buffers]
