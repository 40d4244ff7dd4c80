"""Image/mask loading, resizing, intensity normalization, dihedral
augmentation, dataset splitting and a synthetic multi-scale generator."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, ValidationError

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")


@dataclass(frozen=True)
class Raster:
    """8-bit raster stored as an (H, W, C) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.dtype != np.uint8 or d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValidationError(f"raster must be uint8 (H, W, 1|3), got {d.dtype} {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValidationError(f"raster must be non-empty, got {d.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def samples(self) -> np.ndarray:
        """Row-major, channel-interleaved flat view."""
        return self.data.reshape(-1)

    @classmethod
    def from_array(cls, arr) -> "Raster":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(np.ascontiguousarray(arr, dtype=np.uint8))


@dataclass(frozen=True)
class ImageSample:
    image: Raster
    mask: Raster
    identifier: str

    def __post_init__(self):
        if self.mask.channels != 1:
            raise ValidationError(f"{self.identifier}: mask must be single-channel")
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise ValidationError(f"{self.identifier}: image and mask sizes differ")
        if not np.all((self.mask.data == 0) | (self.mask.data == 255)):
            raise ValidationError(f"{self.identifier}: mask must contain only 0 and 255")


class NormMode(str, enum.Enum):
    MINMAX = "minmax"
    RGB255 = "rgb255"


class Roi(str, enum.Enum):
    FOREGROUND_MASK = "foreground"
    WHOLE_IMAGE = "whole"


@dataclass(frozen=True)
class NormalizationParams:
    i_min: float = 0.0
    i_max: float = 255.0
    mode: NormMode = NormMode.MINMAX

    def __post_init__(self):
        object.__setattr__(self, "mode", NormMode(self.mode))
        if self.mode is NormMode.MINMAX and not self.i_min < self.i_max:
            raise ValidationError(f"need i_min < i_max, got {self.i_min} >= {self.i_max}")

    def to_dict(self) -> dict:
        return {"i_min": self.i_min, "i_max": self.i_max, "mode": self.mode.value}


# ---------------------------------------------------------------------------
# I/O


def _to_8bit(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype.kind in "iu" and arr.max(initial=0) <= 65535 and arr.min(initial=0) >= 0:
        v = arr.astype(np.int64)
        # round-half-up of v * 255 / 65535
        return ((v * 510 + 65535) // 131070).astype(np.uint8)
    if arr.dtype == bool:
        return arr.astype(np.uint8) * 255
    raise FormatError(f"unsupported sample type {arr.dtype}")


def load_raster(path) -> Raster:
    """Decode a PNG/PGM/PPM file to an 8-bit raster (16-bit sources rescaled)."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise FormatError(f"{path}: unsupported file type {path.suffix!r}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.array(img)
                wide = True
            elif mode in ("1", "L", "P", "LA", "PA"):
                arr = np.array(img.convert("L"))
                wide = False
            else:
                arr = np.array(img.convert("RGB"))
                wide = False
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from None
    if wide:
        arr = _to_8bit(arr.astype(np.int64))
    return Raster.from_array(_to_8bit(arr))


def save_raster(raster: Raster, path) -> Path:
    path = Path(path)
    d = raster.data
    img = Image.fromarray(d[:, :, 0] if d.shape[2] == 1 else d, mode="L" if d.shape[2] == 1 else "RGB")
    suffix = path.suffix.lower()
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}.get(suffix)
    if fmt is None:
        raise FormatError(f"{path}: unsupported output type {suffix!r}")
    img.save(path, format=fmt)
    return path


def load_mask(path) -> Raster:
    mask = load_raster(path)
    if mask.channels != 1:
        mask = Raster.from_array(mask.data.mean(axis=2).round().astype(np.uint8))
    if not np.all((mask.data == 0) | (mask.data == 255)):
        raise ValidationError(f"{path}: mask values must be 0 or 255")
    return mask


def load_dataset(root) -> List[ImageSample]:
    """Read ``images/<id>.(png|pgm|ppm)`` paired with ``masks/<id>.png``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FormatError(f"{root}: expected images/ and masks/ subdirectories")
    samples = []
    for img_path in sorted(img_dir.iterdir()):
        if img_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        mask_path = mask_dir / f"{img_path.stem}.png"
        if not mask_path.exists():
            raise FormatError(f"{img_path}: no matching mask {mask_path.name}")
        samples.append(ImageSample(load_raster(img_path), load_mask(mask_path), img_path.stem))
    if not samples:
        raise ValidationError(f"{root}: no images found")
    return samples


def write_dataset(samples: Sequence[ImageSample], root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        ext = ".pgm" if s.image.channels == 1 else ".ppm"
        save_raster(s.image, root / "images" / f"{s.identifier}{ext}")
        save_raster(s.mask, root / "masks" / f"{s.identifier}.png")
    return root


# ---------------------------------------------------------------------------
# resizing


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix with edge clamping."""
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(np.int64)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = _cubic(centers - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return m


def resize_plane(arr: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Separable bicubic resize of an (H, W, C) float array; no rounding."""
    h, w = arr.shape[:2]
    ry = _resize_matrix(h, target_h)
    rx = _resize_matrix(w, target_w)
    return np.einsum("yh,hwc,xw->yxc", ry, arr.astype(np.float64), rx)


def resize_bicubic(raster: Raster, target_w: int, target_h: int, is_mask: bool = False) -> Raster:
    if target_w < 2 or target_h < 2:
        raise ValidationError(f"resize target must be at least 2x2, got {target_w}x{target_h}")
    if (raster.width, raster.height) == (target_w, target_h):
        return raster
    out = resize_plane(raster.data, target_w, target_h)
    if is_mask:
        return Raster.from_array(np.where(out >= 128, 255, 0).astype(np.uint8))
    return Raster.from_array(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def resize_sample(sample: ImageSample, size: int) -> ImageSample:
    return ImageSample(
        resize_bicubic(sample.image, size, size),
        resize_bicubic(sample.mask, size, size, is_mask=True),
        sample.identifier,
    )


# ---------------------------------------------------------------------------
# normalization


def normalize(raster: Raster, params: NormalizationParams) -> np.ndarray:
    """Map intensities to [0, 1]; returns a float32 (H, W, C) array."""
    d = raster.data.astype(np.float64)
    if params.mode is NormMode.RGB255:
        out = d / 255.0
    else:
        if not params.i_min < params.i_max:
            raise ValidationError("need i_min < i_max")
        out = np.clip((d - params.i_min) / (params.i_max - params.i_min), 0.0, 1.0)
    return out.astype(np.float32)


def compute_norm_params(training: Sequence[ImageSample], roi: Roi = Roi.FOREGROUND_MASK) -> NormalizationParams:
    """Min/max intensity over the region of interest of all training images."""
    if not training:
        raise ValidationError("no training samples to compute normalization from")
    roi = Roi(roi)
    if any(s.image.channels != 1 for s in training):
        raise ValidationError("min-max normalization needs grayscale images; use RGB255 for colour data")
    lo, hi = math.inf, -math.inf
    for s in training:
        vals = s.image.data[..., 0]
        if roi is Roi.FOREGROUND_MASK:
            vals = vals[s.mask.data[..., 0] > 0]
        if vals.size:
            lo = min(lo, float(vals.min()))
            hi = max(hi, float(vals.max()))
    if lo == math.inf:
        raise ValidationError("every training mask is empty; cannot use the foreground region")
    if lo >= hi:
        raise ValidationError(f"degenerate intensity range [{lo}, {hi}]")
    return NormalizationParams(lo, hi, NormMode.MINMAX)


def default_norm_params(training: Sequence[ImageSample], roi: Roi = Roi.FOREGROUND_MASK) -> NormalizationParams:
    """RGB data is divided by 255; grayscale data is min-max normalized."""
    if training and training[0].image.channels == 3:
        return NormalizationParams(0.0, 255.0, NormMode.RGB255)
    return compute_norm_params(training, roi)


# ---------------------------------------------------------------------------
# dihedral augmentation
#
# An element (k, f) maps x -> rot90(fliplr(x) if f else x, k); rot90 is
# counter-clockwise, matching np.rot90 on the (H, W) axes.

D4: Tuple[Tuple[int, int], ...] = tuple((k, f) for f in (0, 1) for k in range(4))
D4_NAMES: Dict[Tuple[int, int], str] = {
    (0, 0): "id", (1, 0): "r90", (2, 0): "r180", (3, 0): "r270",
    (0, 1): "flip", (1, 1): "r90flip", (2, 1): "r180flip", (3, 1): "r270flip",
}

_ROT = np.array([[0, -1], [1, 0]])
_FLIP = np.array([[-1, 0], [0, 1]])


def _matrix(g: Tuple[int, int]) -> np.ndarray:
    k, f = g
    return np.linalg.matrix_power(_ROT, k) @ (_FLIP if f else np.eye(2, dtype=int))


def compose(a: Tuple[int, int], b: Tuple[int, int]) -> Tuple[int, int]:
    """The element equivalent to applying ``b`` first, then ``a``."""
    m = _matrix(a) @ _matrix(b)
    for g in D4:
        if np.array_equal(_matrix(g), m):
            return g
    raise AssertionError("D4 is closed under composition")


def inverse(g: Tuple[int, int]) -> Tuple[int, int]:
    k, f = g
    return (k, f) if f else ((-k) % 4, 0)


def apply_transform(arr: np.ndarray, g: Tuple[int, int]) -> np.ndarray:
    """Apply a D4 element to the first two (H, W) axes of ``arr``."""
    k, f = g
    if f:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(np.rot90(arr, k, axes=(0, 1)))


def dihedral_augment(sample: ImageSample) -> List[ImageSample]:
    """All 8 symmetries of the square, image and mask transformed together."""
    if sample.image.height != sample.image.width:
        raise ValidationError(f"{sample.identifier}: dihedral augmentation needs a square image")
    return [
        ImageSample(
            Raster(apply_transform(sample.image.data, g)),
            Raster(apply_transform(sample.mask.data, g)),
            f"{sample.identifier}_{D4_NAMES[g]}",
        )
        for g in D4
    ]


def augment_all(samples: Sequence[ImageSample]) -> List[ImageSample]:
    return [a for s in samples for a in dihedral_augment(s)]


# ---------------------------------------------------------------------------
# splitting


@dataclass
class Split:
    train: List[ImageSample]
    validation: List[ImageSample]
    test: List[ImageSample]

    def ids(self) -> Dict[str, List[str]]:
        return {k: [s.identifier for s in getattr(self, k)] for k in ("train", "validation", "test")}


def split_sizes(n: int) -> Tuple[int, int, int]:
    """(train, validation, test): 25% test, ~10% of the rest validation."""
    if n < 4:
        raise ValidationError(f"need at least 4 samples to split, got {n}")
    n_test = n // 4
    n_val = max(1, (n - n_test) // 10)
    return n - n_test - n_val, n_val, n_test


def split_dataset(samples: Sequence[ImageSample], seed: int, sizes: Tuple[int, int, int] = None) -> Split:
    """Seeded shuffle, then cut into train/validation/test.

    ``sizes`` overrides the default fractions; it must sum to len(samples).
    """
    n = len(samples)
    if n < 4:
        raise ValidationError(f"need at least 4 samples to split, got {n}")
    n_train, n_val, n_test = sizes if sizes is not None else split_sizes(n)
    if n_train + n_val + n_test != n or min(n_train, n_val) < 1 or n_test < 0:
        raise ValidationError(f"invalid split sizes {(n_train, n_val, n_test)} for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    picked = [samples[i] for i in order]
    return Split(
        train=picked[:n_train],
        validation=picked[n_train:n_train + n_val],
        test=picked[n_train + n_val:],
    )


# ---------------------------------------------------------------------------
# synthetic data


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _place(rng, size, r_lo, r_hi, occupied, margin, tries=200):
    for _ in range(tries):
        ry = rng.uniform(r_lo, r_hi)
        rx = rng.uniform(max(r_lo, 0.6 * ry), ry)
        cy = rng.uniform(ry + 1, size - ry - 1)
        cx = rng.uniform(ry + 1, size - ry - 1)
        theta = rng.uniform(0, math.pi)
        m = _ellipse_mask(size, cy, cx, ry, rx, theta)
        grown = _ellipse_mask(size, cy, cx, ry + margin, rx + margin, theta)
        if m.any() and not (grown & occupied).any():
            return m
    return None


def _background(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        tex += rng.uniform(6, 14) * np.sin(2 * math.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * math.pi))
    return rng.uniform(70, 100) + tex


def gen_synthetic(count: int, size: int, seed: int, multi_scale: bool = True) -> List[ImageSample]:
    """Noisy textured grayscale images with bright filled ellipses.

    With ``multi_scale`` each image holds one large ellipse (diameter >=
    size/3) and 2-4 small ones (diameter <= size/12), none touching.
    """
    if not isinstance(size, int) or size < 8 or size % 8:
        raise ValidationError(f"size must be a positive multiple of 8, got {size!r}")
    if count < 4:
        raise ValidationError(f"count must be at least 4, got {count}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        while True:
            occupied = np.zeros((size, size), dtype=bool)
            shapes = []
            if multi_scale:
                big = _place(rng, size, size / 6, size / 4, occupied, margin=2)
                if big is None:
                    continue
                shapes.append(big)
                occupied |= big
                small_hi = size / 24
                small_lo = min(1.5, small_hi)
                for _ in range(rng.integers(2, 5)):
                    m = _place(rng, size, small_lo, small_hi, occupied, margin=2)
                    if m is not None:
                        shapes.append(m)
                        occupied |= m
                if len(shapes) < 3:
                    continue
            else:
                for _ in range(rng.integers(1, 4)):
                    m = _place(rng, size, size / 12, size / 5, occupied, margin=1)
                    if m is not None:
                        shapes.append(m)
                        occupied |= m
                if not shapes:
                    continue
            break
        img = _background(rng, size)
        for m in shapes:
            img[m] = rng.uniform(150, 200)
        img += rng.normal(0.0, 10.0, size=(size, size))
        img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
        mask = np.where(occupied, 255, 0).astype(np.uint8)
        samples.append(ImageSample(Raster.from_array(img), Raster.from_array(mask), f"synth{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# network input


def to_arrays(samples: Sequence[ImageSample], params: NormalizationParams) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into (N, C, H, W) float32 images and (N, 1, H, W) {0,1} labels."""
    x = np.stack([normalize(s.image, params).transpose(2, 0, 1) for s in samples])
    y = np.stack([(s.mask.data.transpose(2, 0, 1) > 0).astype(np.float32) for s in samples])
    return x, y

