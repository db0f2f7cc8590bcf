"""Procedural cell-image domains and dataset file I/O.

A :class:`DomainSpec` describes a family of microscope-like images: how many
cells per image (clipped normal), what the cells look like (bright or dark
gaussian blobs, rings, or textured blobs) and what they sit on (flat,
gradient, or smooth-noise backgrounds). :func:`generate_domain` renders
images with exact ground truth: dot annotations, the density map implied by
them, and the true cell-free background (the style image).

Construction guarantees the key invariant used throughout training: every
pixel farther than the domain's influence radius from all annotations is
bitwise equal to the style image, because cells are painted only inside
their footprint discs and images are kept on the 8-bit quantization grid
from the moment the background is rendered.

Datasets live on disk as ``images/*.png`` (8-bit), ``annotations/*.csv``
(header ``x,y``, one point per row, stem-matched to the image), and
optionally ``styles/*.png``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .density import DEFAULT_SIGMA, DensityMap, DotAnnotations, render_density_map
from .errors import DataError
from .seeding import rng_for
from .synthesis import StyleImage

__all__ = [
    "CELL_KINDS", "BACKGROUND_KINDS", "DomainSpec", "AnnotatedImage",
    "generate_domain", "toy_source_spec", "toy_target_spec",
    "save_annotated_dataset", "load_annotated_dataset",
    "save_image", "load_image", "save_density_map", "load_density_map",
    "Checkpoint", "save_checkpoint", "load_checkpoint", "quantize",
]

CELL_KINDS = ("gaussian_blob", "ring", "textured_blob")
BACKGROUND_KINDS = ("flat", "gradient", "noise")


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of one procedural cell-image domain."""

    name: str
    image_size: tuple = (64, 64)
    channels: int = 1
    count_mean: float = 20.0
    count_std: float = 7.0
    cell_kind: str = "gaussian_blob"
    cell_radius_range: tuple = (3.0, 5.0)
    cell_intensity_range: tuple = (0.6, 0.9)
    cell_polarity: int = 1  # +1 cells brighter than background, -1 darker
    background_kind: str = "flat"
    background_level_range: tuple = (0.1, 0.25)
    speckle_range: tuple = (0.0, 0.0)  # iid per-pixel noise amplitude
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 64 or w < 64:
            raise DataError(f"image_size {self.image_size} below the 64x64 minimum")
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")
        if self.count_mean < 0 or self.count_std < 0:
            raise DataError("cell count distribution needs mean >= 0 and std >= 0")
        if self.cell_kind not in CELL_KINDS:
            raise DataError(f"unknown cell kind {self.cell_kind!r}; choose from {CELL_KINDS}")
        if self.background_kind not in BACKGROUND_KINDS:
            raise DataError(
                f"unknown background kind {self.background_kind!r}; choose from {BACKGROUND_KINDS}")
        lo, hi = self.cell_radius_range
        if not 0 < lo <= hi:
            raise DataError(f"invalid cell radius range ({lo}, {hi})")
        lo, hi = self.cell_intensity_range
        if not 0 < lo <= hi <= 1:
            raise DataError(f"cell intensity range ({lo}, {hi}) must sit in (0, 1]")
        if self.cell_polarity not in (1, -1):
            raise DataError(f"cell polarity must be +1 or -1, got {self.cell_polarity}")
        lo, hi = self.background_level_range
        if not 0 <= lo <= hi <= 1:
            raise DataError(f"background level range ({lo}, {hi}) must sit in [0, 1]")
        lo, hi = self.speckle_range
        if not 0 <= lo <= hi:
            raise DataError(f"invalid speckle range ({lo}, {hi})")

    def influence_radius(self) -> float:
        """Distance beyond which a cell contributes exactly nothing."""
        return 2.0 * self.cell_radius_range[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name, "image_size": list(self.image_size),
            "channels": self.channels, "count_mean": self.count_mean,
            "count_std": self.count_std, "cell_kind": self.cell_kind,
            "cell_radius_range": list(self.cell_radius_range),
            "cell_intensity_range": list(self.cell_intensity_range),
            "cell_polarity": self.cell_polarity,
            "background_kind": self.background_kind,
            "background_level_range": list(self.background_level_range),
            "speckle_range": list(self.speckle_range), "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DomainSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown DomainSpec fields: {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("image_size", "cell_radius_range", "cell_intensity_range",
                    "background_level_range", "speckle_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class AnnotatedImage:
    """An image paired with dot annotations and, when known, its true style."""

    pixels: np.ndarray  # [H, W, C] in [0, 1]
    annotations: DotAnnotations
    style: StyleImage | None = None
    density: DensityMap | None = None
    name: str = ""

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.ndim != 3:
            raise DataError(f"image pixels must be HxWxC, got shape {p.shape}")
        if p.size and not np.all((p >= 0.0) & (p <= 1.0)):
            raise DataError("image pixels must lie in [0, 1]")
        h, w = p.shape[:2]
        if (self.annotations.image_height, self.annotations.image_width) != (h, w):
            raise DataError(
                f"annotation bounds {self.annotations.image_width}x"
                f"{self.annotations.image_height} do not match image {w}x{h}")
        self.pixels = p

    def with_density(self, sigma: float = DEFAULT_SIGMA) -> "AnnotatedImage":
        return replace(self, density=render_density_map(self.annotations, sigma=sigma))

    @property
    def count(self) -> int:
        return len(self.annotations)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] onto the 8-bit grid used by the PNG container."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def _value_noise(rng, h: int, w: int, cell: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1] (one octave)."""
    grid = rng.uniform(0.0, 1.0, (h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    fy = fy * fy * (3.0 - 2.0 * fy)
    fx = fx * fx * (3.0 - 2.0 * fx)
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    bl = grid[np.ix_(y0 + 1, x0)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    return tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx \
        + bl * fy * (1 - fx) + br * fy * fx


def _render_background(spec: DomainSpec, rng) -> np.ndarray:
    h, w = spec.image_size
    lo, hi = spec.background_level_range
    if spec.background_kind == "flat":
        base = np.full((h, w), rng.uniform(lo, hi))
    elif spec.background_kind == "gradient":
        theta = rng.uniform(0.0, 2.0 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = xx * math.cos(theta) + yy * math.sin(theta)
        span = proj.max() - proj.min()
        t = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)
        a, b = rng.uniform(lo, hi, size=2)
        base = a + (b - a) * t
    else:  # smooth multi-octave lattice noise
        octaves = [(16, 1.0), (8, 0.5), (4, 0.25)]
        mix = sum(amp * _value_noise(rng, h, w, cell) for cell, amp in octaves)
        mix /= sum(amp for _, amp in octaves)
        base = lo + (hi - lo) * mix
    s_lo, s_hi = spec.speckle_range
    if s_hi > 0:
        base = base + rng.uniform(s_lo, s_hi) * rng.standard_normal((h, w))
    pixels = np.repeat(base[:, :, None], spec.channels, axis=2)
    return quantize(pixels)


def _cell_profile(spec: DomainSpec, radius: float, d: np.ndarray, rng,
                  local_x: np.ndarray, local_y: np.ndarray) -> np.ndarray:
    """Unit-peak radial profile of one cell, exactly zero beyond 2*radius."""
    if spec.cell_kind == "gaussian_blob":
        sigma = radius / 2.0
        profile = np.exp(-(d * d) / (2.0 * sigma * sigma))
    elif spec.cell_kind == "ring":
        width = radius / 3.0
        profile = np.exp(-((d - radius) ** 2) / (2.0 * width * width))
    else:  # textured_blob: gaussian envelope x sinusoidal texture
        sigma = radius / 2.0
        envelope = np.exp(-(d * d) / (2.0 * sigma * sigma))
        freq = rng.uniform(0.5, 1.5)
        theta = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        axis = local_x * math.cos(theta) + local_y * math.sin(theta)
        profile = envelope * (0.7 + 0.3 * np.sin(2.0 * math.pi * freq * axis / radius + phase))
    return np.where(d <= 2.0 * radius, profile, 0.0)


def _paint_cell(pixels: np.ndarray, spec: DomainSpec, cx: float, cy: float,
                radius: float, intensity: float, rng) -> None:
    h, w = pixels.shape[:2]
    reach = int(math.ceil(2.0 * radius))
    x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 2)
    y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    local_x = xx - cx
    local_y = yy - cy
    d = np.sqrt(local_x ** 2 + local_y ** 2)
    profile = _cell_profile(spec, radius, d, rng, local_x, local_y)
    delta = spec.cell_polarity * intensity * profile[:, :, None]
    window = pixels[y0:y1, x0:x1]
    painted = quantize(window + delta)
    # Assign only where the cell actually contributes so untouched pixels
    # keep their exact background bits.
    mask = profile[:, :, None] > 0
    pixels[y0:y1, x0:x1] = np.where(mask, painted, window)


def generate_domain(spec: DomainSpec, n_images: int, seed=None) -> list:
    """Render ``n_images`` annotated images; pure in (spec, n_images, seed)."""
    if n_images < 0:
        raise DataError(f"n_images must be >= 0, got {n_images}")
    root = spec.seed if seed is None else seed
    h, w = spec.image_size
    margin = spec.influence_radius()
    if w - 2 * margin <= 1 or h - 2 * margin <= 1:
        raise DataError(
            f"cells of influence radius {margin} leave no interior in {w}x{h}")
    images = []
    for index in range(n_images):
        rng = rng_for(root, "domain", spec.name, "image", str(index))
        style_pixels = _render_background(spec, rng)
        pixels = style_pixels.copy()
        k = max(0, int(round(rng.normal(spec.count_mean, spec.count_std))))
        points = np.zeros((k, 2), dtype=np.float64)
        for j in range(k):
            cx = rng.uniform(margin, w - 1 - margin)
            cy = rng.uniform(margin, h - 1 - margin)
            radius = rng.uniform(*spec.cell_radius_range)
            intensity = rng.uniform(*spec.cell_intensity_range)
            _paint_cell(pixels, spec, cx, cy, radius, intensity, rng)
            points[j] = (cx, cy)
        annotations = DotAnnotations(points, image_width=w, image_height=h)
        images.append(AnnotatedImage(
            pixels=pixels, annotations=annotations,
            style=StyleImage(style_pixels, provenance="ground_truth"),
            name=f"{spec.name}_{index:04d}").with_density())
    return images


def toy_source_spec(seed: int = 0) -> DomainSpec:
    """Bright gaussian blobs on a dark speckled flat background."""
    return DomainSpec(
        name="toy_source", image_size=(64, 64), count_mean=20.0, count_std=7.0,
        cell_kind="gaussian_blob", cell_radius_range=(2.5, 4.0),
        cell_intensity_range=(0.5, 0.8), cell_polarity=1,
        background_kind="flat", background_level_range=(0.1, 0.25),
        speckle_range=(0.01, 0.03), seed=seed)


def toy_target_spec(seed: int = 0) -> DomainSpec:
    """Dark rings on a bright gradient background - inverted contrast and a
    different cell shape and background family from the source domain."""
    return DomainSpec(
        name="toy_target", image_size=(64, 64), count_mean=12.0, count_std=4.0,
        cell_kind="ring", cell_radius_range=(2.5, 4.0),
        cell_intensity_range=(0.4, 0.7), cell_polarity=-1,
        background_kind="gradient", background_level_range=(0.6, 0.85),
        speckle_range=(0.005, 0.015), seed=seed)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_image(pixels: np.ndarray, path) -> None:
    """Write an [0,1] float image as an 8-bit PNG (grayscale or RGB)."""
    p = np.asarray(pixels)
    if p.ndim == 2:
        p = p[:, :, None]
    if p.ndim != 3 or p.shape[2] not in (1, 3):
        raise DataError(f"cannot save image of shape {np.asarray(pixels).shape}")
    data = np.round(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        img = Image.fromarray(data[:, :, 0], mode="L")
    else:
        img = Image.fromarray(data, mode="RGB")
    img.save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read a PNG back into an [H, W, C] float64 array on the 8-bit grid."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            raise DataError(
                f"{path}: unsupported image mode {img.mode!r}; datasets use "
                "8-bit grayscale or RGB PNGs")
        data = np.asarray(img, dtype=np.float64) / 255.0
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def save_density_map(density: DensityMap, path) -> None:
    np.save(path, density.values.astype(np.float64), allow_pickle=False)


def load_density_map(path, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    values = np.load(path, allow_pickle=False)
    return DensityMap(values=values, sigma=sigma)


def _write_annotations_csv(annotations: DotAnnotations, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "y"])
        for x, y in annotations.points:
            writer.writerow([repr(float(x)), repr(float(y))])


def _read_annotations_csv(path, width: int, height: int) -> DotAnnotations:
    points = []
    header_seen = False
    with open(path, "r", newline="") as handle:
        reader = csv.reader(handle)
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if not header_seen:
                if [c.strip().lower() for c in row] != ["x", "y"]:
                    raise DataError(
                        f"{path}: line {line_no} must be the header 'x,y', got {row}")
                header_seen = True
                continue
            if len(row) != 2:
                raise DataError(f"{path}: line {line_no} has {len(row)} fields, expected 2")
            try:
                points.append((float(row[0]), float(row[1])))
            except ValueError as exc:
                raise DataError(f"{path}: line {line_no} is not numeric: {exc}") from exc
    if not header_seen:
        raise DataError(f"{path}: missing 'x,y' header row")
    pts = np.array(points, dtype=np.float64).reshape(-1, 2)
    return DotAnnotations(pts, image_width=width, image_height=height)


def save_annotated_dataset(samples, root) -> None:
    """Write ``images/*.png``, ``annotations/*.csv`` and, for samples that
    carry one, ``styles/*.png``; names are zero-padded sample indices unless
    the sample supplies its own."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    if any(getattr(s, "style", None) is not None for s in samples):
        (root / "styles").mkdir(exist_ok=True)
    for index, sample in enumerate(samples):
        stem = getattr(sample, "name", "") or f"img_{index:04d}"
        save_image(sample.pixels, root / "images" / f"{stem}.png")
        _write_annotations_csv(sample.annotations, root / "annotations" / f"{stem}.csv")
        if getattr(sample, "style", None) is not None:
            save_image(sample.style.pixels, root / "styles" / f"{stem}.png")


def load_annotated_dataset(root) -> list:
    """Read a dataset directory back; see :func:`save_annotated_dataset`."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset directory {root} does not exist")
    image_dir = root / "images"
    if not image_dir.exists():
        return []
    samples = []
    for image_path in sorted(image_dir.glob("*.png")):
        stem = image_path.stem
        pixels = load_image(image_path)
        csv_path = root / "annotations" / f"{stem}.csv"
        if not csv_path.exists():
            raise DataError(f"missing annotation file for stem {stem!r} "
                            f"(expected {csv_path})")
        h, w = pixels.shape[:2]
        annotations = _read_annotations_csv(csv_path, width=w, height=h)
        style_path = root / "styles" / f"{stem}.png"
        style = None
        if style_path.exists():
            style = StyleImage(load_image(style_path), provenance="ground_truth")
        samples.append(AnnotatedImage(
            pixels=pixels, annotations=annotations, style=style,
            name=stem).with_density())
    return samples
