"""Synthetic corpus: procedural "pristine" scenes and periodic generator fingerprints.

Real images are colored 1/f^alpha textures with smooth gradients and soft
shapes. A "generator family" is modelled as an additive 2-d lattice: two
orthogonal cosine waves (plus harmonics) of a given period, rotated by the
family's orientation. Images are stored as 8-bit binary PPM and read back
as ``byte / 255``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

from .tensorcore import ContractError, RngStream

REAL = 0
FAKE = 1
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("id", "path", "label", "family", "split")
REAL_FAMILY = "real"


@dataclass
class SceneSpec:
    size: int = 64
    spectral_exponent: float = 1.5
    palette: list[tuple[float, float, float]] = field(default_factory=lambda: [(0.2, 0.3, 0.5), (0.8, 0.7, 0.4)])
    n_gradients: int = 1
    n_shapes: int = 2
    min_size: int = 1

    def validate(self) -> None:
        if self.size < max(self.min_size, 1):
            raise ContractError(f"scene size {self.size} is below the crop size {self.min_size}")
        if not 0.5 <= self.spectral_exponent <= 2.0:
            raise ContractError(f"spectral exponent must be in [0.5, 2], got {self.spectral_exponent}")
        if not 2 <= len(self.palette) <= 4:
            raise ContractError(f"palette needs 2-4 colors, got {len(self.palette)}")
        if self.n_gradients < 0 or self.n_shapes < 0:
            raise ContractError("gradient and shape counts must be non-negative")


@dataclass
class SceneDistribution:
    """Ranges from which per-image SceneSpecs are drawn."""

    size: int = 64
    spectral_exponent: tuple[float, float] = (1.0, 2.0)
    n_colors: tuple[int, int] = (2, 4)
    n_gradients: tuple[int, int] = (0, 2)
    n_shapes: tuple[int, int] = (0, 4)

    def sample(self, rng: RngStream, min_size: int = 1) -> SceneSpec:
        g = rng.generator()
        k = int(g.integers(self.n_colors[0], self.n_colors[1] + 1))
        palette = [tuple(float(v) for v in g.uniform(0.1, 0.9, size=3)) for _ in range(k)]
        return SceneSpec(
            size=self.size,
            spectral_exponent=float(g.uniform(*self.spectral_exponent)),
            palette=palette,
            n_gradients=int(g.integers(self.n_gradients[0], self.n_gradients[1] + 1)),
            n_shapes=int(g.integers(self.n_shapes[0], self.n_shapes[1] + 1)),
            min_size=min_size,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDistribution":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class FingerprintSpec:
    family_id: str
    period: int
    amplitude: float
    orientation: float = 0.0
    phase: float = 0.0
    harmonic_mix: tuple[float, ...] = (1.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "harmonic_mix", tuple(float(w) for w in self.harmonic_mix))
        if int(self.period) != self.period or self.period < 2:
            raise ContractError(f"fingerprint period must be an integer >= 2, got {self.period}")
        if not 0 <= self.amplitude <= 0.05:
            raise ContractError(f"fingerprint amplitude must be in [0, 0.05], got {self.amplitude}")
        if not self.harmonic_mix or sum(abs(w) for w in self.harmonic_mix) == 0:
            raise ContractError("harmonic_mix needs at least one nonzero weight")
        if self.family_id == REAL_FAMILY:
            raise ContractError(f"family id {REAL_FAMILY!r} is reserved for pristine images")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["harmonic_mix"] = list(self.harmonic_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FingerprintSpec":
        return cls(**d)


DEFAULT_FAMILIES = (
    FingerprintSpec("A", period=4, amplitude=0.03, orientation=0.0),
    FingerprintSpec("B", period=3, amplitude=0.03, orientation=30.0),
    FingerprintSpec("C", period=5, amplitude=0.03, orientation=60.0),
)


# --------------------------------------------------------------------------
# Synthesis
# --------------------------------------------------------------------------

def _power_law_field(size: int, alpha: float, gen: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-std field whose amplitude spectrum falls as 1/f^alpha."""
    white = gen.normal(size=(size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    spec = np.fft.rfft2(white) / f ** alpha
    spec[0, 0] = 0.0
    field_ = np.fft.irfft2(spec, s=(size, size))
    return field_ / field_.std()


def synth_real(spec: SceneSpec, rng: RngStream) -> np.ndarray:
    """Pristine stand-in: palette-mapped 1/f^alpha texture with gradients and soft shapes."""
    spec.validate()
    g = rng.generator()
    n = spec.size
    pal = np.asarray(spec.palette, dtype=np.float64)
    t = np.clip(0.5 + 0.2 * _power_law_field(n, spec.spectral_exponent, g), 0.0, 1.0)
    # piecewise-linear palette lookup along t
    pos = t * (len(pal) - 1)
    i0 = np.minimum(np.floor(pos).astype(int), len(pal) - 2)
    frac = (pos - i0)[..., None]
    img = pal[i0] * (1.0 - frac) + pal[i0 + 1] * frac
    img = img + 0.04 * _power_law_field(n, spec.spectral_exponent, g)[..., None] * g.uniform(0.5, 1.5, size=3)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(spec.n_gradients):
        ang = g.uniform(0, 2 * np.pi)
        ramp = ((xx - n / 2) * math.cos(ang) + (yy - n / 2) * math.sin(ang)) / n
        img = img + ramp[..., None] * g.uniform(-0.3, 0.3, size=3)
    for _ in range(spec.n_shapes):
        color = pal[int(g.integers(len(pal)))] + g.uniform(-0.1, 0.1, size=3)
        cx, cy = g.uniform(0, n, size=2)
        r = g.uniform(0.08, 0.3) * n
        if g.random() < 0.5:
            d = np.hypot(xx - cx, yy - cy) - r
        else:
            d = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r
        alpha = 0.7 * np.clip(0.5 - d / 1.5, 0.0, 1.0)[..., None]
        img = img * (1.0 - alpha) + color * alpha
    return np.clip(img, 0.0, 1.0)


def fingerprint_signal(shape: tuple[int, int], fp: FingerprintSpec) -> np.ndarray:
    """The additive lattice, ``H x W``, with peak magnitude at most ``fp.amplitude``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    th = math.radians(fp.orientation)
    d1 = xx * math.cos(th) + yy * math.sin(th)
    d2 = -xx * math.sin(th) + yy * math.cos(th)
    sig = np.zeros((h, w))
    for k, wk in enumerate(fp.harmonic_mix, start=1):
        if wk == 0:
            continue
        sig += wk * (np.cos(2 * np.pi * k * d1 / fp.period + fp.phase)
                     + np.cos(2 * np.pi * k * d2 / fp.period + fp.phase))
    return fp.amplitude * sig / (2.0 * sum(abs(w) for w in fp.harmonic_mix))


def inject_fingerprint(img: np.ndarray, fp: FingerprintSpec) -> np.ndarray:
    if fp.amplitude == 0:
        return np.array(img, dtype=np.float64, copy=True)
    sig = fingerprint_signal(img.shape[:2], fp)
    return np.clip(img + sig[..., None], 0.0, 1.0)


def radial_low_frequency_fraction(img: np.ndarray, cutoff: float = 0.1) -> float:
    """Fraction of (non-DC) spectral energy at radial frequency below ``cutoff`` cycles/px."""
    gray = np.asarray(img, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    p = np.abs(np.fft.fft2(gray - gray.mean())) ** 2
    fy = np.fft.fftfreq(gray.shape[0])[:, None]
    fx = np.fft.fftfreq(gray.shape[1])[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    total = p.sum()
    return float(p[(f > 0) & (f < cutoff)].sum() / total) if total > 0 else 0.0


# --------------------------------------------------------------------------
# Image files
# --------------------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = "PNG" if path.suffix.lower() == ".png" else "PPM"
    PILImage.fromarray(to_bytes(img), mode="RGB").save(path, format=fmt)


def read_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

class ManifestError(Exception):
    pass


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass


class MalformedRecordError(ManifestError):
    pass


class MissingImageError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


@dataclass(frozen=True)
class Record:
    id: str
    path: str
    label: int | None
    family: str
    split: str

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "path": self.path, "label": self.label,
                           "family": self.family, "split": self.split}, separators=(",", ":"))


@dataclass
class CorpusManifest:
    records: list[Record]

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def families(self, split: str | None = None) -> list[str]:
        recs = self.records if split is None else self.split(split)
        return sorted({r.family for r in recs if r.family != REAL_FAMILY})

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")


class Corpus:
    """A validated manifest plus lazy, cached image access."""

    def __init__(self, manifest: CorpusManifest, root: str | Path):
        self.manifest = manifest
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    @property
    def records(self) -> list[Record]:
        return self.manifest.records

    def split(self, name: str) -> list[Record]:
        return self.manifest.split(name)

    def image(self, record: Record) -> np.ndarray:
        img = self._cache.get(record.id)
        if img is None:
            img = read_image(self.root / record.path)
            self._cache[record.id] = img
        return img


def _parse_record(line: str, lineno: int) -> Record:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or set(obj) != set(MANIFEST_FIELDS):
        raise MalformedRecordError(f"line {lineno}: record must have exactly the fields {list(MANIFEST_FIELDS)}")
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise MalformedRecordError(f"line {lineno}: id must be a non-empty string")
    if obj["label"] not in (REAL, FAKE) or isinstance(obj["label"], bool):
        raise MalformedRecordError(f"record {rid!r}: label must be 0 (real) or 1 (fake)")
    if obj["split"] not in SPLITS:
        raise MalformedRecordError(f"record {rid!r}: split must be one of {SPLITS}")
    if not isinstance(obj["path"], str) or not isinstance(obj["family"], str):
        raise MalformedRecordError(f"record {rid!r}: path and family must be strings")
    return Record(rid, obj["path"], obj["label"], obj["family"], obj["split"])


def load_manifest(path: str | Path, training_families: Sequence[str] | None = None) -> Corpus:
    """Parse and validate a JSON-Lines manifest; images are loaded lazily."""
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        rec = _parse_record(line, lineno)
        if rec.id in seen:
            raise DuplicateIdError(f"duplicate record id {rec.id!r} at line {lineno}")
        seen.add(rec.id)
        if not (path.parent / rec.path).is_file():
            raise MissingImageError(f"record {rec.id!r}: image file not found: {rec.path}")
        records.append(rec)
    if training_families is not None:
        allowed = set(training_families) | {REAL_FAMILY}
        for rec in records:
            if rec.split in ("train", "val") and rec.family not in allowed:
                raise MalformedRecordError(
                    f"record {rec.id!r}: family {rec.family!r} is not a training family but sits in split {rec.split!r}")
    return Corpus(CorpusManifest(records), path.parent)


# --------------------------------------------------------------------------
# Corpus building
# --------------------------------------------------------------------------

def build_corpus(families: Sequence[FingerprintSpec], counts: dict[str, int], scenes: SceneDistribution,
                 out_dir: str | Path, rng: RngStream, training_families: Sequence[str] | None = None,
                 crop_size: int = 1, image_format: str = "ppm") -> CorpusManifest:
    """Write images plus ``manifest.jsonl`` under ``out_dir``.

    Each split is half real, half fake (real gets the smaller half for odd
    counts). Train/val fakes come from ``training_families`` (default: the
    first family); test fakes cycle through every family. Every record has
    its own scene draw, so no scene is shared between records or splits.
    """
    if not families:
        raise ContractError("build_corpus needs at least one fingerprint family")
    ids = [f.family_id for f in families]
    if len(set(ids)) != len(ids):
        raise ContractError(f"family ids must be unique, got {ids}")
    train_fams = list(training_families) if training_families else [families[0].family_id]
    if set(train_fams) - set(ids):
        raise ContractError(f"unknown training families {sorted(set(train_fams) - set(ids))}")
    if not set(ids) - set(train_fams):
        raise ContractError("at least one held-out family is required")
    for s in SPLITS:
        if counts.get(s, 0) < 1:
            raise ContractError(f"count for split {s!r} must be >= 1")
    by_id = {f.family_id: f for f in families}

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records: list[Record] = []
    for split in SPLITS:
        n = int(counts[split])
        n_real = n // 2
        pool = train_fams if split != "test" else ids
        for i in range(n):
            rid = f"{split}-{i:05d}"
            if i < n_real:
                label, fam = REAL, REAL_FAMILY
            else:
                label, fam = FAKE, pool[(i - n_real) % len(pool)]
            item = rng.child(f"item/{rid}")
            img = synth_real(scenes.sample(item.child("scene-spec"), min_size=crop_size), item.child("scene"))
            if label == FAKE:
                img = inject_fingerprint(img, by_id[fam])
            rel = f"images/{rid}.{image_format}"
            write_image(out / rel, img)
            records.append(Record(rid, rel, label, fam, split))
    manifest = CorpusManifest(records)
    manifest.write(out / "manifest.jsonl")
    return manifest
