"""Four-step few-shot synthesis of annotated target-domain images.

Given a handful of annotated real images: (1) crop a 32x32 patch around
every annotated cell, (2) fill the cut-out regions by diffusion inpainting
to recover a cell-free style image, (3) train a small fully-connected GAN
on the patches to generate more, (4) composite random numbers of (augmented)
patches onto (augmented) style images at random locations - recording the
exact locations, so every synthesized image carries exact density ground
truth.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .density import DEFAULT_SIGMA, DensityMap, DotAnnotations, render_density_map
from .errors import DataError
from .seeding import rng_for, seed_for
from .tensor import Tensor

PATCH_SIZE = 32
FEATHER_FULL_RADIUS = 10.0  # alpha == 1 inside this distance
FEATHER_ZERO_RADIUS = 16.0  # alpha == 0 at and beyond this distance


@dataclass
class CellPatch:
    """One cell crop, 32x32, channels last, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.shape[:2] != (PATCH_SIZE, PATCH_SIZE):
            raise DataError(f"cell patches are {PATCH_SIZE}x{PATCH_SIZE}, got {p.shape[:2]}")
        self.pixels = np.clip(p, 0.0, 1.0)


@dataclass
class StyleImage:
    """Cell-free background content of an image."""

    pixels: np.ndarray  # [H, W, C] in [0, 1]
    provenance: str = "inpainted"  # inpainted | augmented | decoder_output | ground_truth

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = p[:, :, None]
        self.pixels = p


@dataclass
class SynthesizedSample:
    """One generated training item with exact ground truth."""

    image: np.ndarray  # [H, W, C]
    density: DensityMap
    style: StyleImage
    annotations: DotAnnotations
    rng_seed: int


# ---------------------------------------------------------------------------
# step 1: patch extraction
# ---------------------------------------------------------------------------

def extract_patches(img):
    """Crop one 32x32 patch per annotation; windows that cross the image edge
    are completed by reflect padding. Also returns the binary hole mask
    covering the union of the (clipped) crop squares.
    """
    pixels = np.asarray(img.pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w = pixels.shape[:2]
    ann = img.annotations
    half = PATCH_SIZE // 2
    padded = np.pad(pixels, ((half, half), (half, half), (0, 0)), mode="reflect")
    patches = []
    hole_mask = np.zeros((h, w), dtype=bool)
    for x, y in ann.points:
        cx, cy = int(np.floor(x)), int(np.floor(y))
        # Padded coordinates are shifted by `half`, so the window starts at
        # the original (cy - half) + half = cy.
        patches.append(CellPatch(padded[cy:cy + PATCH_SIZE, cx:cx + PATCH_SIZE]))
        hole_mask[max(0, cy - half):min(h, cy + half),
                  max(0, cx - half):min(w, cx + half)] = True
    return patches, hole_mask


# ---------------------------------------------------------------------------
# step 2: diffusion inpainting
# ---------------------------------------------------------------------------

_NEIGHBORHOODS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def inpaint(img, mask, iterations=5000, kernel=8, tolerance=1e-4):
    """Fill masked pixels by iterative neighborhood diffusion.

    Each sweep sets every masked pixel to the mean of its available
    neighbors - unmasked pixels, or masked ones filled in a previous sweep -
    so values propagate inward from the hole boundary. Stops when the
    largest per-pixel change drops below `tolerance` (after every masked
    pixel has been reached) or at the iteration cap. Unmasked pixels are
    returned bit-identical.
    """
    pixels = np.asarray(img.pixels if hasattr(img, "pixels") else img, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pixels.shape[:2]:
        raise DataError(f"mask shape {mask.shape} does not match image {pixels.shape[:2]}")
    if kernel not in _NEIGHBORHOODS:
        raise DataError(f"kernel must be 4 or 8 neighbors, got {kernel}")
    if mask.all():
        raise DataError("cannot inpaint a fully masked image: no boundary information")
    out = pixels.copy()
    if not mask.any():
        return StyleImage(out, provenance="inpainted")

    offsets = _NEIGHBORHOODS[kernel]
    available = ~mask
    values = np.where(mask[:, :, None], 0.0, out)
    h, w = mask.shape

    def shifted(arr, dy, dx, fill=0.0):
        pad = np.pad(arr, ((1, 1), (1, 1)) + ((0, 0),) * (arr.ndim - 2),
                     constant_values=fill)
        return pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    for _ in range(iterations):
        weight = np.zeros((h, w))
        acc = np.zeros_like(values)
        for dy, dx in offsets:
            avail = shifted(available.astype(np.float64), dy, dx)
            acc += shifted(values, dy, dx) * avail[:, :, None]
            weight += avail
        reachable = mask & (weight > 0)
        if not reachable.any():
            raise DataError("masked region is disconnected from any known pixel")
        new_values = values.copy()
        new_values[reachable] = acc[reachable] / weight[reachable][:, None]
        change = np.abs(new_values - values)[mask].max() if mask.any() else 0.0
        filled_everything = (available | reachable)[mask].all()
        values = new_values
        available = available | reachable
        if filled_everything and change < tolerance:
            break
    out[mask] = values[mask]
    return StyleImage(out, provenance="inpainted")


# ---------------------------------------------------------------------------
# step 3: patch GAN
# ---------------------------------------------------------------------------

@dataclass
class GanConfig:
    latent_dim: int = 32
    hidden: int = 128
    steps: int = 2000
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 8
    seed: int = 0


@dataclass
class PatchGenerator:
    """Trained generator/discriminator pair for 32x32 cell patches."""

    generator: dict  # name -> Tensor
    discriminator: dict
    latent_dim: int
    channels: int
    training_log: list = field(default_factory=list)  # (d_loss, g_loss) per step

    def generate(self, latents):
        h = Tensor(np.asarray(latents, dtype=T.default_dtype()))
        g = self.generator
        for i in range(3):
            h = T.relu(T.dense(h, g[f"fc{i}.w"], g[f"fc{i}.b"]))
        return T.sigmoid(T.dense(h, g["fc3.w"], g["fc3.b"]))

    def _generate_from(self, latent_tensor):
        h = latent_tensor
        g = self.generator
        for i in range(3):
            h = T.relu(T.dense(h, g[f"fc{i}.w"], g[f"fc{i}.b"]))
        return T.sigmoid(T.dense(h, g["fc3.w"], g["fc3.b"]))

    def discriminate_logits(self, flat):
        h = flat if isinstance(flat, Tensor) else Tensor(np.asarray(flat, dtype=T.default_dtype()))
        d = self.discriminator
        for i in range(3):
            h = T.leaky_relu(T.dense(h, d[f"fc{i}.w"], d[f"fc{i}.b"]))
        return T.dense(h, d["fc3.w"], d["fc3.b"])

    def discriminate(self, flat):
        """Discriminator probability, strictly inside (0, 1)."""
        return T.sigmoid(self.discriminate_logits(flat))


def _dense_stack(prefix, sizes, rng, final_scale=1.0):
    params = {}
    last = len(sizes) - 2
    for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / fin) * (final_scale if i == last else 1.0)
        params[f"fc{i}.w"] = Tensor(rng.standard_normal((fout, fin)) * std,
                                    requires_grad=True, name=f"{prefix}.fc{i}.w")
        params[f"fc{i}.b"] = Tensor(np.zeros(fout), requires_grad=True,
                                    name=f"{prefix}.fc{i}.b")
    return params


def _ensure_min_patches(patches, minimum, rng):
    """Augment copies of the originals until at least `minimum` are present."""
    if not patches:
        raise DataError("cannot train the patch generator without patches")
    pool = list(patches)
    i = 0
    while len(pool) < minimum:
        pool.append(augment(patches[i % len(patches)], rng=rng))
        i += 1
    return pool


def train_patch_gan(patches, cfg: GanConfig = None) -> PatchGenerator:
    """Alternating non-saturating GAN training on flattened patches.

    Both losses are computed from discriminator logits through softplus for
    stability; the discriminator's probability output stays a strict
    sigmoid. Deterministic given cfg.seed.
    """
    cfg = cfg or GanConfig()
    rng = rng_for(cfg.seed, "gan", "train")
    pool = _ensure_min_patches(patches, 8, rng_for(cfg.seed, "gan", "augment"))
    channels = pool[0].pixels.shape[2]
    flat_dim = PATCH_SIZE * PATCH_SIZE * channels
    real = np.stack([p.pixels.reshape(flat_dim) for p in pool])

    init_rng = rng_for(cfg.seed, "gan", "init")
    hid = cfg.hidden
    # The generator's output layer starts near zero so early samples sit by
    # sigmoid's midpoint: large He-scale logits saturate the head, and a
    # saturated generator receives almost no gradient and cannot recover.
    gan = PatchGenerator(
        generator=_dense_stack("g", (cfg.latent_dim, hid, hid, hid, flat_dim),
                               init_rng, final_scale=0.01),
        discriminator=_dense_stack("d", (flat_dim, hid, hid, hid, 1), init_rng),
        latent_dim=cfg.latent_dim,
        channels=channels,
    )
    g_params = list(gan.generator.values())
    d_params = list(gan.discriminator.values())
    g_opt = T.AdamState(learning_rate=cfg.learning_rate, beta1=cfg.beta1)
    d_opt = T.AdamState(learning_rate=cfg.learning_rate, beta1=cfg.beta1)

    for _ in range(cfg.steps):
        batch = real[rng.integers(0, len(real), cfg.batch_size)]
        z = rng.standard_normal((cfg.batch_size, cfg.latent_dim))

        # Discriminator: push real logits up, fake logits down.
        fake = gan._generate_from(Tensor(z.astype(T.default_dtype()))).detach()
        d_loss = T.mean_all(T.softplus(-gan.discriminate_logits(batch))) + \
            T.mean_all(T.softplus(gan.discriminate_logits(fake)))
        T.zero_grad(d_params)
        T.backward(d_loss)
        T.adam_step(d_params, d_opt)

        # Generator: non-saturating objective on fresh latents.
        z2 = rng.standard_normal((cfg.batch_size, cfg.latent_dim))
        regenerated = gan._generate_from(Tensor(z2.astype(T.default_dtype()),
                                                requires_grad=False))
        g_loss = T.mean_all(T.softplus(-gan.discriminate_logits(regenerated)))
        T.zero_grad(g_params + d_params)
        T.backward(g_loss)
        T.adam_step(g_params, g_opt)

        gan.training_log.append((d_loss.item(), g_loss.item()))
    return gan


def sample_patches(gen: PatchGenerator, n, seed) -> list:
    """Draw n patches from the generator; values clamped to [0, 1]."""
    if n < 0:
        raise DataError(f"cannot sample {n} patches")
    if n == 0:
        return []
    z = rng_for(seed, "gan", "sample").standard_normal((n, gen.latent_dim))
    flat = gen.generate(z).data
    shaped = flat.reshape(n, PATCH_SIZE, PATCH_SIZE, gen.channels)
    return [CellPatch(shaped[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# step 4: augmentation and compositing
# ---------------------------------------------------------------------------

SCALE_RANGE = (0.8, 1.2)


@dataclass
class AugmentSpec:
    """One geometric transform: k quarter turns, flips, then scaling."""

    rotations: int = 0  # multiples of 90 degrees, 0..3
    flip_horizontal: bool = False
    flip_vertical: bool = False
    scale: float = 1.0


def random_augment_spec(rng, scale_range=SCALE_RANGE) -> AugmentSpec:
    return AugmentSpec(
        rotations=int(rng.integers(0, 4)),
        flip_horizontal=bool(rng.integers(0, 2)),
        flip_vertical=bool(rng.integers(0, 2)),
        scale=float(rng.uniform(*scale_range)),
    )


def _rescale_keep_extent(pixels, scale):
    """Nearest-neighbor rescale, then center-crop or reflect-pad back."""
    h, w = pixels.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    rows = np.minimum((np.arange(nh) / scale).astype(int), h - 1)
    cols = np.minimum((np.arange(nw) / scale).astype(int), w - 1)
    scaled = pixels[np.ix_(rows, cols)]
    if nh >= h:  # crop the center window
        top, left = (nh - h) // 2, (nw - w) // 2
        return scaled[top:top + h, left:left + w]
    pad_top = (h - nh) // 2
    pad_left = (w - nw) // 2
    return np.pad(scaled,
                  ((pad_top, h - nh - pad_top), (pad_left, w - nw - pad_left), (0, 0)),
                  mode="reflect")


def augment_pixels(pixels, spec: AugmentSpec, scale_range=SCALE_RANGE):
    lo, hi = scale_range
    if not (lo <= spec.scale <= hi):
        raise DataError(f"scale {spec.scale} outside allowed range [{lo}, {hi}]")
    if spec.rotations % 2 and pixels.shape[0] != pixels.shape[1]:
        raise DataError("quarter-turn rotation would change the extent of a "
                        f"non-square {pixels.shape[0]}x{pixels.shape[1]} image")
    out = pixels
    if spec.rotations % 4:
        out = np.rot90(out, k=spec.rotations % 4, axes=(0, 1))
    if spec.flip_horizontal:
        out = out[:, ::-1]
    if spec.flip_vertical:
        out = out[::-1, :]
    if spec.scale != 1.0:
        out = _rescale_keep_extent(out, spec.scale)
    return np.ascontiguousarray(out)


def augment(item, spec: AugmentSpec = None, rng=None, scale_range=SCALE_RANGE):
    """Apply a geometric augmentation; draws a random spec when none given.

    The identity spec returns bitwise-equal pixels. Extent is always
    preserved (scaling re-crops or reflect-pads).
    """
    if spec is None:
        if rng is None:
            raise DataError("augment needs an AugmentSpec or an rng to draw one")
        spec = random_augment_spec(rng, scale_range)
        pixels = item.pixels if hasattr(item, "pixels") else np.asarray(item)
        if spec.rotations % 2 and pixels.shape[0] != pixels.shape[1]:
            # Non-square inputs only support half turns; snap the draw down.
            spec = AugmentSpec(spec.rotations - 1, spec.flip_horizontal,
                               spec.flip_vertical, spec.scale)
    if isinstance(item, CellPatch):
        return CellPatch(augment_pixels(item.pixels, spec, scale_range))
    if isinstance(item, StyleImage):
        return StyleImage(augment_pixels(item.pixels, spec, scale_range),
                          provenance="augmented")
    return augment_pixels(np.asarray(item), spec, scale_range)


def feather_alpha(hard_paste=False):
    """Raised-cosine alpha over the 32x32 window: 1 inside radius 10, easing
    to 0 at radius 16, measured from the window center."""
    if hard_paste:
        return np.ones((PATCH_SIZE, PATCH_SIZE, 1))
    center = (PATCH_SIZE - 1) / 2.0
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
    d = np.sqrt((yy - center) ** 2 + (xx - center) ** 2)
    ramp = 0.5 * (1.0 + np.cos(np.pi * (d - FEATHER_FULL_RADIUS)
                               / (FEATHER_ZERO_RADIUS - FEATHER_FULL_RADIUS)))
    alpha = np.where(d <= FEATHER_FULL_RADIUS, 1.0,
                     np.where(d >= FEATHER_ZERO_RADIUS, 0.0, ramp))
    return alpha[:, :, None]


def compose_image(style: StyleImage, patch_pool, count_range, seed,
                  min_center_distance=12.0, hard_paste=False,
                  augment_patches=True, scale_range=SCALE_RANGE,
                  sigma=DEFAULT_SIGMA) -> SynthesizedSample:
    """Paste k ~ U[lo, hi] patches at rejection-sampled locations.

    Centers keep a 16 px margin so every window fits, and (optionally) a
    minimum mutual distance. Pixels outside every pasted alpha support are
    bitwise equal to the style image. The density map is rendered from the
    exact chosen centers.
    """
    lo, hi = count_range
    if not (0 <= lo <= hi):
        raise DataError(f"invalid count range ({lo}, {hi})")
    pixels = style.pixels
    h, w = pixels.shape[:2]
    half = PATCH_SIZE // 2
    if h < PATCH_SIZE + 1 or w < PATCH_SIZE + 1:
        raise DataError(f"style image {h}x{w} too small for the {half} px margin")
    rng = rng_for(seed, "compose")
    k = int(rng.integers(lo, hi + 1))

    centers = []
    attempts = 0
    while len(centers) < k:
        if attempts >= 1000 * k:
            raise DataError(
                f"could not place {k} cells with min distance {min_center_distance} "
                f"in {h}x{w} after {attempts} attempts; lower the density or the distance")
        attempts += 1
        cx = int(rng.integers(half, w - half))
        cy = int(rng.integers(half, h - half))
        if all((cx - ox) ** 2 + (cy - oy) ** 2 >= min_center_distance ** 2
               for ox, oy in centers):
            centers.append((cx, cy))

    image = pixels.copy()
    alpha = feather_alpha(hard_paste)
    for cx, cy in centers:
        patch = patch_pool[int(rng.integers(0, len(patch_pool)))] if patch_pool \
            else None
        if patch is None:
            raise DataError("compose_image needs a non-empty patch pool for k > 0")
        if augment_patches:
            patch = augment(patch, rng=rng, scale_range=scale_range)
        window = image[cy - half:cy + half, cx - half:cx + half]
        blended = alpha * patch.pixels + (1.0 - alpha) * window
        image[cy - half:cy + half, cx - half:cx + half] = \
            np.where(alpha > 0, blended, window)

    points = np.array([(float(cx), float(cy)) for cx, cy in centers],
                      dtype=np.float64).reshape(-1, 2)
    annotations = DotAnnotations(points, w, h)
    density = render_density_map(annotations, sigma)
    return SynthesizedSample(image=image, density=density, style=style,
                             annotations=annotations, rng_seed=int(seed))


# ---------------------------------------------------------------------------
# the four steps end to end
# ---------------------------------------------------------------------------

@dataclass
class SynthesisConfig:
    num_images: int = 100
    count_range: tuple = (5, 25)
    gan: GanConfig = field(default_factory=GanConfig)
    generated_patches: int = 64
    include_real_patches: bool = True
    min_center_distance: float = 12.0
    hard_paste: bool = False
    augment_patches: bool = True
    augment_styles: bool = True
    scale_range: tuple = SCALE_RANGE
    sigma: float = DEFAULT_SIGMA
    seed: int = 0
    workers: int = 1


def synthesize_dataset(few, cfg: SynthesisConfig = None):
    """Run steps 1-4 over the few annotated images.

    Returns (samples, styles, gan): the synthesized samples, the inpainted
    style image of each input (the style ground truth for later fine-tuning
    on the real images), and the trained patch generator.
    """
    cfg = cfg or SynthesisConfig()
    if not few:
        raise DataError("synthesize_dataset needs at least one annotated image")

    real_patches = []
    styles = []
    for img in few:
        patches, hole_mask = extract_patches(img)
        real_patches.extend(patches)
        styles.append(inpaint(img, hole_mask))

    gan_cfg = replace(cfg.gan, seed=seed_for(cfg.seed, "synthesis", "gan"))
    gan = train_patch_gan(real_patches, gan_cfg)
    pool = sample_patches(gan, cfg.generated_patches,
                          seed_for(cfg.seed, "synthesis", "patch-pool"))
    if cfg.include_real_patches:
        pool = real_patches + pool

    def build_one(index):
        style = styles[index % len(styles)]
        if cfg.augment_styles:
            style = augment(style, rng=rng_for(cfg.seed, "synthesis", "style", index),
                            scale_range=cfg.scale_range)
        return compose_image(
            style, pool, cfg.count_range,
            seed=seed_for(cfg.seed, "synthesis", "sample", index),
            min_center_distance=cfg.min_center_distance,
            hard_paste=cfg.hard_paste,
            augment_patches=cfg.augment_patches,
            scale_range=cfg.scale_range,
            sigma=cfg.sigma,
        )

    indices = range(cfg.num_images)
    if cfg.workers > 1:
        with concurrent.futures.ThreadPoolExecutor(cfg.workers) as pool_exec:
            samples = list(pool_exec.map(build_one, indices))
    else:
        samples = [build_one(i) for i in indices]
    return samples, styles, gan
