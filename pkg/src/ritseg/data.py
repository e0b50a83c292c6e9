"""Datasets, the gamma/CLAHE pre-processing chain, augmentations and a synthetic eye generator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .imageproc import NUM_CLASSES, clahe, gamma_correct, gaussian_blur

IMAGE_SUFFIXES = (".png", ".pgm")
SPLITS = ("train", "validation", "test")

# reference frame for the line-corruption centre box (rows x cols)
_REF_H, _REF_W = 400, 640

# OpenEDS training image whose eyeglass glints seed the starburst overlay
STARBURST_SOURCE_ID = "000000240768"
STARBURST_THRESHOLD = 0.9


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float in [0, 1]
    label: np.ndarray  # uint8 ids in 0..3

    def __post_init__(self) -> None:
        if self.image.shape != self.label.shape:
            raise DataError(f"{self.id}: image {self.image.shape} and label {self.label.shape} differ")
        if self.label.size and int(self.label.max()) >= NUM_CLASSES:
            raise DataError(f"{self.id}: label value {int(self.label.max())} out of range 0..3")


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    validation: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in SPLITS:
            ids = [s.id for s in getattr(self, name)]
            if len(ids) != len(set(ids)):
                raise DataError(f"duplicate sample ids in the {name} split")

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# file I/O


def read_gray(path: str | Path) -> np.ndarray:
    """8-bit grayscale PNG/PGM as uint8."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1", "I;16", "I"):
                im = im.convert("L")
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image")
    if arr.dtype != np.uint8:
        if arr.max() > 255:
            raise DataError(f"{path}: not an 8-bit image")
        arr = arr.astype(np.uint8)
    return arr


def write_gray(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    data = np.asarray(arr)
    if data.dtype != np.uint8:
        data = np.clip(np.rint(data), 0, 255).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    Image.fromarray(data, mode="L").save(path, format=fmt)


def image_to_float(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def float_to_image(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def _stems(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_split(root: str | Path, name: str) -> list[Sample]:
    base = Path(root) / name
    images, labels = _stems(base / "images"), _stems(base / "labels")
    for stem in sorted(images.keys() ^ labels.keys()):
        side = "label" if stem in images else "image"
        raise DataError(f"{name}/{stem}: no matching {side} file")
    samples = []
    for stem in sorted(images):
        img = read_gray(images[stem])
        lab = read_gray(labels[stem])
        if lab.size and lab.max() >= NUM_CLASSES:
            raise DataError(f"{name}/{stem}: label value {int(lab.max())} out of range 0..3")
        samples.append(Sample(stem, image_to_float(img), lab))
    return samples


def load_dataset(root: str | Path) -> DatasetSplit:
    """Read ``root/{train,validation,test}/{images,labels}``; missing splits load empty."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return DatasetSplit(*(load_split(root, name) for name in SPLITS))


def write_dataset(data: DatasetSplit, root: str | Path, suffix: str = ".png") -> None:
    root = Path(root)
    for name in SPLITS:
        for sub in ("images", "labels"):
            (root / name / sub).mkdir(parents=True, exist_ok=True)
        for s in data.split(name):
            write_gray(root / name / "images" / f"{s.id}{suffix}", float_to_image(s.image))
            write_gray(root / name / "labels" / f"{s.id}{suffix}", s.label)


# ---------------------------------------------------------------------------
# synthetic eyes


def _ellipse(yy, xx, cy, cx, ay, ax, theta=0.0):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def synth_sample(rng: np.random.Generator, height: int, width: int, sample_id: str) -> Sample:
    """One synthetic eye: pupil inside iris inside a scleral ellipse on skin."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scl_ay = rng.uniform(0.22, 0.32) * height
    scl_ax = rng.uniform(0.32, 0.42) * width
    scl_cy = height / 2 + rng.uniform(-0.08, 0.08) * height
    scl_cx = width / 2 + rng.uniform(-0.08, 0.08) * width
    tilt = rng.uniform(-0.2, 0.2)
    sclera = _ellipse(yy, xx, scl_cy, scl_cx, scl_ay, scl_ax, tilt)

    iris_r = rng.uniform(0.5, 0.75) * scl_ay
    iris_cy = scl_cy + rng.uniform(-0.25, 0.25) * scl_ay
    iris_cx = scl_cx + rng.uniform(-0.35, 0.35) * scl_ax
    iris = _ellipse(yy, xx, iris_cy, iris_cx, iris_r * rng.uniform(0.9, 1.1), iris_r) & sclera

    pupil_r = rng.uniform(0.3, 0.55) * iris_r
    pupil = _ellipse(
        yy,
        xx,
        iris_cy + rng.uniform(-0.15, 0.15) * iris_r,
        iris_cx + rng.uniform(-0.15, 0.15) * iris_r,
        pupil_r,
        pupil_r * rng.uniform(0.9, 1.1),
    ) & iris

    label = np.zeros((height, width), dtype=np.uint8)
    label[sclera] = 1
    label[iris] = 2
    label[pupil] = 3

    levels = np.array(
        [
            rng.uniform(0.45, 0.65),  # skin
            rng.uniform(0.7, 0.9),  # sclera
            rng.uniform(0.25, 0.42),  # iris
            rng.uniform(0.03, 0.12),  # pupil
        ]
    )
    img = levels[label]
    shade = 0.05 * np.sin(yy / height * rng.uniform(1, 3) + rng.uniform(0, 6)) * np.cos(
        xx / width * rng.uniform(1, 3)
    )
    img = img + shade + rng.normal(0.0, 0.02, size=img.shape)
    # on the 8-bit grid so a written dataset reads back exactly
    return Sample(sample_id, image_to_float(float_to_image(img)), label)


def synth_generate(n: int, seed: int, height: int = 128, width: int = 128) -> DatasetSplit:
    """``n`` training eyes plus max(1, n // 4) validation and test eyes each."""
    if height % 16 or width % 16:
        raise DataError(f"synthetic size {height}x{width} must be divisible by 16")
    if n < 1:
        raise DataError("need at least one synthetic sample")
    rng = np.random.default_rng(seed)
    extra = max(1, n // 4)
    counts = {"train": n, "validation": extra, "test": extra}
    parts = {}
    for name in SPLITS:
        parts[name] = [synth_sample(rng, height, width, f"{name}_{i:06d}") for i in range(counts[name])]
    return DatasetSplit(**parts)


# ---------------------------------------------------------------------------
# pre-processing


def preprocess(img: np.ndarray) -> np.ndarray:
    """Gamma 0.8, then CLAHE on an 8x8 grid with clip limit 1.5."""
    return clahe(gamma_correct(img, 0.8), (8, 8), 1.5)


def preprocess_split(samples: list[Sample]) -> list[Sample]:
    return [replace(s, image=preprocess(s.image)) for s in samples]


# ---------------------------------------------------------------------------
# starburst


def rotate180(a: np.ndarray) -> np.ndarray:
    return a[::-1, ::-1]


def make_starburst(source: np.ndarray, threshold: float) -> np.ndarray:
    """Overlay from the bright reflections of ``source``, symmetrized by a 180 degree turn."""
    picked = np.where(source >= threshold, source, 0.0)
    if not np.any(picked > 0):
        raise DataError(f"starburst threshold {threshold} selects no pixels")
    asset = np.maximum(picked, rotate180(picked))
    return asset / asset.max()


def procedural_starburst(height: int, width: int, seed: int = 0, rays: int = 12) -> np.ndarray:
    """Radial bright streaks around the image centre, standing in for eyeglass glints."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    radius = np.hypot(dy, dx)
    angle = np.arctan2(dy, dx)
    reach = 0.35 * min(height, width)
    field_ = np.zeros((height, width))
    for theta in rng.uniform(0, math.pi, size=rays):
        diff = np.angle(np.exp(1j * (angle - theta)))
        ray = np.exp(-(diff**2) / (2 * 0.02**2)) * np.exp(-radius / reach)
        field_ = np.maximum(field_, ray)
    for _ in range(rays // 2):
        gy = cy + rng.normal(0, 0.15 * height)
        gx = cx + rng.normal(0, 0.15 * width)
        glint = np.exp(-((yy - gy) ** 2 + (xx - gx) ** 2) / (2 * 1.5**2))
        field_ = np.maximum(field_, glint)
    field_ = np.maximum(field_, rotate180(field_))
    field_[field_ < 0.05] = 0.0
    return field_ / field_.max()


def default_starburst(samples: list[Sample], height: int, width: int, seed: int = 0) -> np.ndarray:
    """Overlay from the designated source image when it is among ``samples``, else procedural."""
    for s in samples:
        if s.id == STARBURST_SOURCE_ID and s.image.shape == (height, width):
            try:
                return make_starburst(s.image, STARBURST_THRESHOLD)
            except DataError:
                break
    return procedural_starburst(height, width, seed)


def shift(a: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    """out[r, c] = a[r - dy, c - dx]; vacated pixels take ``fill``."""
    h, w = a.shape
    out = np.full_like(a, fill)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_r = slice(max(-dy, 0), h - max(dy, 0))
    src_c = slice(max(-dx, 0), w - max(dx, 0))
    dst_r = slice(max(dy, 0), h - max(-dy, 0))
    dst_c = slice(max(dx, 0), w - max(-dx, 0))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out


def apply_starburst(img: np.ndarray, asset: np.ndarray, dy: int = 0, dx: int = 0) -> np.ndarray:
    return np.clip(img + shift(asset, dy, dx, 0.0), 0.0, 1.0)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    aug_prob: float = 0.2
    policy: str = "independent"  # or "one_of"
    blur_sigma: tuple[float, float] = (2.0, 7.0)
    blur_ksize: int = 7
    translate_max: int = 20
    line_count: tuple[int, int] = (2, 9)
    line_rows: tuple[float, float] = (120.0, 280.0)
    line_cols: tuple[float, float] = (192.0, 448.0)
    line_thickness: float = 2.0
    starburst_max_shift: int = 40
    use_starburst: bool = True
    starburst: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        for p in (self.flip_prob, self.aug_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        if self.policy not in ("independent", "one_of"):
            raise ConfigError(f"unknown augmentation policy {self.policy!r}")
        if self.blur_sigma[0] > self.blur_sigma[1] or self.line_count[0] > self.line_count[1]:
            raise ConfigError("empty augmentation range")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(flip_prob=0.0, aug_prob=0.0, **kw)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; independent of loader order."""
    return np.random.default_rng([seed, epoch, index])


def flip(sample: Sample) -> Sample:
    return Sample(sample.id, sample.image[:, ::-1].copy(), sample.label[:, ::-1].copy())


def translate(sample: Sample, dy: int, dx: int) -> Sample:
    return Sample(sample.id, shift(sample.image, dy, dx, 0.0), shift(sample.label, dy, dx, 0))


def draw_lines(img: np.ndarray, center: tuple[float, float], angles, thickness: float = 2.0) -> np.ndarray:
    """Full-image white chords through ``center`` at the given angles."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = img.copy()
    for theta in angles:
        dist = np.abs((yy - center[0]) * math.cos(theta) - (xx - center[1]) * math.sin(theta))
        out[dist < thickness / 2.0] = 1.0
    return out


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random flip (p=flip_prob) followed by translate, blur, lines and starburst.

    Under the "independent" policy each of the four fires with ``aug_prob``;
    under "one_of" a single one is picked with probability ``aug_prob``.
    Only flip and translate move the label.
    """
    use_star = config.use_starburst
    if use_star and config.aug_prob > 0 and config.starburst is None:
        raise ConfigError("starburst augmentation enabled but no starburst asset configured")
    if use_star and config.starburst is not None and config.starburst.shape != sample.image.shape:
        raise ConfigError(
            f"starburst asset {config.starburst.shape} does not match image {sample.image.shape}"
        )
    do_flip = rng.random() < config.flip_prob
    if config.policy == "independent":
        fire = rng.random(4) < config.aug_prob
    else:
        fire = np.zeros(4, dtype=bool)
        if rng.random() < config.aug_prob:
            fire[rng.integers(4)] = True
    if not use_star:
        fire[3] = False

    out = Sample(sample.id, sample.image, sample.label)
    if do_flip:
        out = flip(out)
    h, w = out.image.shape
    if fire[0]:
        m = config.translate_max
        dy = int(rng.integers(0, m + 1)) * (1 if rng.random() < 0.5 else -1)
        dx = int(rng.integers(0, m + 1)) * (1 if rng.random() < 0.5 else -1)
        out = translate(out, dy, dx)
    img = out.image
    if fire[1]:
        sigma = rng.uniform(*config.blur_sigma)
        img = np.clip(gaussian_blur(img, sigma, config.blur_ksize), 0.0, 1.0)
    if fire[2]:
        count = int(rng.integers(config.line_count[0], config.line_count[1] + 1))
        r0, r1 = (v * h / _REF_H for v in config.line_rows)
        c0, c1 = (v * w / _REF_W for v in config.line_cols)
        center = (rng.uniform(r0, r1), rng.uniform(c0, c1))
        img = draw_lines(img, center, rng.uniform(0, math.pi, size=count), config.line_thickness)
    if fire[3]:
        m = config.starburst_max_shift
        dy = int(rng.integers(-m, m + 1))
        dx = int(rng.integers(-m, m + 1))
        img = apply_starburst(img, config.starburst, dy, dx)
    return Sample(sample.id, img, out.label)
