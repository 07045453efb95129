"""Training-time augmentations and test-time perturbations.

Images are ``H x W x 3`` float64 arrays with values in [0, 1]. Every
transform returns a new array clamped to [0, 1]; identity parameters
return a bit-exact copy of the input.

Color jitter formulas (applied in this order, clamping after each step):

* brightness ``b``: ``x * b``
* contrast ``c``: ``c * x + (1 - c) * m`` with ``m`` the mean BT.601 luma of the image
* saturation ``s``: ``s * x + (1 - s) * g`` with ``g`` the per-pixel BT.601 luma
* hue ``h`` degrees: HSV hue rotated by ``h / 360`` (mod 1)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .tensorcore import ContractError, RngStream

LUMA = np.array([0.299, 0.587, 0.114])

# ITU T.81 Annex K tables
JPEG_LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)

JPEG_CHROMA_TABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.float64).reshape(8, 8)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0, :] = math.sqrt(1.0 / n)
    return m


DCT8 = _dct_matrix(8)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"image must be HxWx3, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractError("image height and width must be >= 1")
    return img


def _clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def quality_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a base quantization table."""
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    q = np.floor((base * scale + 50) / 100)
    return np.clip(q, 1, 255)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Lossy JPEG-style degradation (4:4:4, no entropy coding).

    RGB -> YCbCr, level shift, 8x8 orthonormal DCT, quantize with the
    IJG-scaled standard tables, dequantize, inverse DCT, back to RGB.
    Borders are edge-padded to whole blocks and cropped afterwards.
    """
    img = check_image(img)
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ContractError(f"jpeg quality must be an integer in [1, 100], got {quality!r}")
    h, w, _ = img.shape
    rgb = img * 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    ycc = np.stack([
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418688 * g - 0.081312 * b + 128.0,
    ])
    ph, pw = -h % 8, -w % 8
    if ph or pw:
        ycc = np.pad(ycc, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = ycc.shape[1:]
    blocks = (ycc - 128.0).reshape(3, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = DCT8 @ blocks @ DCT8.T
    tables = np.stack([quality_table(JPEG_LUMA_TABLE, quality),
                       quality_table(JPEG_CHROMA_TABLE, quality),
                       quality_table(JPEG_CHROMA_TABLE, quality)])[:, None, None]
    deq = np.round(coef / tables) * tables
    rec = (DCT8.T @ deq @ DCT8).transpose(0, 1, 3, 2, 4).reshape(3, H, W)[:, :h, :w] + 128.0
    y, cb, cr = rec[0], rec[1] - 128.0, rec[2] - 128.0
    out = np.stack([
        y + 1.402 * cr,
        y - 0.344136 * cb - 0.714136 * cr,
        y + 1.772 * cb,
    ], axis=-1) / 255.0
    return _clamp(out)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, reflect borders."""
    img = check_image(img)
    if sigma < 0:
        raise ContractError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="reflect") if out.shape[axis] > 1 else np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, wgt in enumerate(k):
            acc += wgt * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return _clamp(out)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma replicated on three channels."""
    img = check_image(img)
    y = img @ LUMA
    return _clamp(np.repeat(y[..., None], 3, axis=2))


def color_jitter(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                 saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    img = check_image(img)
    for name, v in (("brightness", brightness), ("contrast", contrast), ("saturation", saturation)):
        if v < 0:
            raise ContractError(f"{name} factor must be >= 0, got {v}")
    out = _clamp(img * brightness)
    m = float((out @ LUMA).mean())
    out = _clamp(contrast * out + (1.0 - contrast) * m)
    g = np.repeat((out @ LUMA)[..., None], 3, axis=2)
    out = _clamp(saturation * out + (1.0 - saturation) * g)
    if hue != 0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue / 360.0, 1.0)
        out = _clamp(hsv_to_rgb(hsv))
    return out


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    img = check_image(img)
    if sigma < 0:
        raise ContractError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noise = rng.generator().normal(0.0, sigma, size=img.shape)
    return _clamp(img + noise)


def cutout(img: np.ndarray, rect: tuple[int, int, int, int], fill: float = 0.5) -> np.ndarray:
    """Set pixels of ``rect = (x, y, w, h)`` to ``fill``; the rect is clipped to the image."""
    img = check_image(img)
    x, y, w, h = (int(v) for v in rect)
    out = img.copy()
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + max(w, 0), img.shape[1]), min(y + max(h, 0), img.shape[0])
    if x1 > x0 and y1 > y0:
        out[y0:y1, x0:x1, :] = fill
    return out


def random_crop(img: np.ndarray, size: int, rng: RngStream) -> np.ndarray:
    """Uniformly placed ``size x size`` crop; undersized inputs are reflect-padded first."""
    img = check_image(img)
    img = _pad_to(img, size)
    gen = rng.generator()
    oy = int(gen.integers(0, img.shape[0] - size + 1))
    ox = int(gen.integers(0, img.shape[1] - size + 1))
    return img[oy:oy + size, ox:ox + size].copy()


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    img = _pad_to(check_image(img), size)
    oy = (img.shape[0] - size) // 2
    ox = (img.shape[1] - size) // 2
    return img[oy:oy + size, ox:ox + size].copy()


def _pad_to(img: np.ndarray, size: int) -> np.ndarray:
    ph, pw = max(size - img.shape[0], 0), max(size - img.shape[1], 0)
    if not (ph or pw):
        return img
    mode = "reflect" if min(img.shape[:2]) > 1 else "edge"
    return np.pad(img, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)), mode=mode)


def resize_bilinear(img: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resampling by ``scale`` (half-pixel centres, no corner alignment).

    Output size is ``round(H * scale) x round(W * scale)``; output pixel ``j``
    samples source coordinate ``(j + 0.5) * H / H' - 0.5`` clamped to
    ``[0, H - 1]``.
    """
    img = check_image(img)
    if not scale > 0:
        raise ContractError(f"resize scale must be > 0, got {scale}")
    h, w = img.shape[:2]
    ho, wo = int(round(h * scale)), int(round(w * scale))
    if ho < 1 or wo < 1:
        raise ContractError(f"resize by {scale} gives degenerate size {ho}x{wo}")

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis_weights(h, ho)
    x0, x1, fx = axis_weights(w, wo)
    rows = img[y0] * (1.0 - fy)[:, None, None] + img[y1] * fy[:, None, None]
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return _clamp(out)


# --------------------------------------------------------------------------
# Configuration and view generation
# --------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    """Per-transform probabilities and parameter ranges for view generation."""

    p_jpeg: float = 0.5
    p_blur: float = 0.5
    p_color: float = 0.5
    p_grayscale: float = 0.1
    p_noise: float = 0.5
    p_cutout: float = 0.5
    jpeg_quality: tuple[int, int] = (30, 100)
    blur_sigma: tuple[float, float] = (0.0, 3.0)
    brightness: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.7, 1.3)
    saturation: tuple[float, float] = (0.7, 1.3)
    hue_degrees: tuple[float, float] = (-18.0, 18.0)
    noise_sigma: tuple[float, float] = (0.0, 0.06)
    cutout_fraction: tuple[float, float] = (0.1, 0.4)
    cutout_fill: float = 0.5
    crop_size: int = 96

    PROBS = ("p_jpeg", "p_blur", "p_color", "p_grayscale", "p_noise", "p_cutout")
    RANGES = ("jpeg_quality", "blur_sigma", "brightness", "contrast", "saturation",
              "hue_degrees", "noise_sigma", "cutout_fraction")

    def __post_init__(self):
        for name in self.RANGES:
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name in self.PROBS:
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"augment.{name} must be in [0, 1], got {p}")
        for name in self.RANGES:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"augment.{name} range is not ordered: {lo} > {hi}")
        lo, hi = self.jpeg_quality
        if lo < 1 or hi > 100:
            raise ContractError(f"augment.jpeg_quality must lie within [1, 100], got {self.jpeg_quality}")
        if self.blur_sigma[0] < 0 or self.noise_sigma[0] < 0:
            raise ContractError("augment sigma ranges must be non-negative")
        if min(self.brightness[0], self.contrast[0], self.saturation[0]) < 0:
            raise ContractError("augment color factors must be non-negative")
        if not 0 <= self.cutout_fraction[0] <= self.cutout_fraction[1] <= 1:
            raise ContractError("augment.cutout_fraction must lie within [0, 1]")
        if self.crop_size < 1:
            raise ContractError("augment.crop_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in self.RANGES:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**d)

    def disabled(self) -> "AugmentConfig":
        """Same ranges and crop size with every probability set to 0."""
        d = self.to_dict()
        for name in self.PROBS:
            d[name] = 0.0
        return AugmentConfig.from_dict(d)


def augment_chain(img: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """One random augmentation chain (without the final crop)."""
    gen = rng.generator()
    out = check_image(img)
    # every coin and parameter is drawn unconditionally so the stream layout
    # does not depend on which transforms fire
    coins = gen.random(6)
    q = int(gen.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
    sigma = gen.uniform(*cfg.blur_sigma)
    b, c, s = gen.uniform(*cfg.brightness), gen.uniform(*cfg.contrast), gen.uniform(*cfg.saturation)
    hue = gen.uniform(*cfg.hue_degrees)
    nsig = gen.uniform(*cfg.noise_sigma)
    frac = gen.uniform(*cfg.cutout_fraction)
    cx, cy = gen.random(2)

    if coins[0] < cfg.p_blur:
        out = gaussian_blur(out, sigma)
    if coins[1] < cfg.p_color:
        out = color_jitter(out, b, c, s, hue)
    if coins[2] < cfg.p_grayscale:
        out = to_grayscale(out)
    if coins[3] < cfg.p_noise:
        out = add_gaussian_noise(out, nsig, rng.child("noise"))
    if coins[4] < cfg.p_cutout:
        side = int(round(frac * cfg.crop_size))
        h, w = out.shape[:2]
        x = int(cx * max(w - side, 0) + 0.5)
        y = int(cy * max(h - side, 0) + 0.5)
        out = cutout(out, (x, y, side, side), cfg.cutout_fill)
    if coins[5] < cfg.p_jpeg:
        out = jpeg_roundtrip(out, q)
    return out


def make_view(img: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    return random_crop(augment_chain(img, cfg, rng.child("chain")), cfg.crop_size, rng.child("crop"))


def make_views(img: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    return make_view(img, cfg, rng.child("view0")), make_view(img, cfg, rng.child("view1"))


# --------------------------------------------------------------------------
# Test-time perturbations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    kind: str = "none"
    value: float | None = None

    def __post_init__(self):
        if self.kind == "jpeg":
            if self.value is None or int(self.value) != self.value or not 1 <= self.value <= 100:
                raise ContractError(f"jpeg perturbation needs integer quality in [1, 100], got {self.value}")
        elif self.kind == "rescale":
            if self.value is None or not self.value > 0:
                raise ContractError(f"rescale perturbation needs scale > 0, got {self.value}")
        elif self.kind != "none":
            raise ContractError(f"unknown perturbation kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "jpeg":
            return f"jpeg_q{int(self.value)}"
        return f"rescale_{self.value:g}"

    def apply(self, img: np.ndarray) -> np.ndarray:
        if self.kind == "jpeg":
            return jpeg_roundtrip(img, int(self.value))
        if self.kind == "rescale":
            return resize_bilinear(img, float(self.value))
        return img

    @classmethod
    def parse(cls, text: str) -> "Perturbation":
        """Parse ``none``, ``jpeg:Q`` or ``rescale:S``."""
        if text == "none":
            return cls()
        kind, _, val = text.partition(":")
        if kind == "jpeg":
            return cls("jpeg", int(val))
        if kind == "rescale":
            return cls("rescale", float(val))
        raise ContractError(f"cannot parse perturbation {text!r}")

    def __str__(self):
        if self.kind == "none":
            return "none"
        return f"{self.kind}:{int(self.value) if self.kind == 'jpeg' else self.value:g}"
