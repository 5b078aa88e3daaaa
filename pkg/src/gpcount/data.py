"""Synthetic dot-crowd images: generation, splitting, and disk round-trip.

Images are grayscale in [0, 1]: a smooth textured background plus white
noise, with each annotated point rendered as a soft bright disc.  A
``DomainStyle`` bundles the appearance knobs so two datasets can be given a
controlled appearance gap while sharing the same annotation statistics.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .density import PointAnnotation
from .errors import ConfigError, GenerationError, ParseError

# Minimum center-to-center spacing between rendered dots, in pixels.  Two
# dots closer than this would coincide, destroying the count signal.
MIN_DOT_SEPARATION = 1.0
# Placement margin keeps disc centers off the exact border.
EDGE_MARGIN = 1.0

BACKGROUND_LEVEL = 0.15


@dataclass(frozen=True)
class DomainStyle:
    """Appearance parameters for one synthetic domain."""
    dot_radius: float = 1.8
    dot_intensity: float = 0.8
    background_noise_std: float = 0.05
    background_texture_scale: float = 8.0
    seed_offset: int = 0

    def __post_init__(self):
        if not self.dot_radius > 0.0:
            raise ConfigError(f"dot_radius must be > 0, got {self.dot_radius}")
        if not 0.0 < self.dot_intensity <= 1.0:
            raise ConfigError(
                f"dot_intensity must be in (0, 1], got {self.dot_intensity}")
        if self.background_noise_std < 0.0:
            raise ConfigError("background_noise_std must be >= 0")
        if not self.background_texture_scale >= 1.0:
            raise ConfigError("background_texture_scale must be >= 1")


@dataclass
class AnnotatedImage:
    """One grayscale image with its point annotations."""
    id: str
    pixels: np.ndarray
    points: tuple[PointAnnotation, ...] = ()

    def __post_init__(self):
        self.points = tuple(self.points)

    @property
    def gt_count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SplitConfig:
    """How to carve a dataset into labeled and unlabeled parts."""
    labeled_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(
                f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")


# Crowd extent per dot: the cluster radius grows like sqrt(count) so local
# density stays roughly constant and the occupied area tracks the count, the
# way denser crowds fill more of a real photograph.  The cluster is framed at
# the image center so extent (and hence count) is the dominant source of
# variation between images.
CLUSTER_RADIUS_PER_SQRT_DOT = 2.6
CLUSTER_RADIUS_MIN = 3.0

# Per-image exposure: each image scales the style's dot intensity by a factor
# drawn from this range, the way lighting varies between photographs.  Counts
# are invariant to it, so a counting model must learn brightness-invariant
# features rather than a single fixed intensity-to-density calibration.
DOT_INTENSITY_MODULATION_RANGE = (0.2, 1.0)


def _place_points(rng, n: int, height: int, width: int) -> list[PointAnnotation]:
    lo_x, hi_x = EDGE_MARGIN, width - EDGE_MARGIN
    lo_y, hi_y = EDGE_MARGIN, height - EDGE_MARGIN
    radius = min(max(CLUSTER_RADIUS_MIN,
                     CLUSTER_RADIUS_PER_SQRT_DOT * math.sqrt(max(n, 1))),
                 0.5 * min(height, width) - EDGE_MARGIN)
    cx, cy = 0.5 * width, 0.5 * height
    placed: list[tuple[float, float]] = []
    attempts_left = 200 * max(n, 1)
    while len(placed) < n:
        if attempts_left <= 0:
            raise GenerationError(
                f"could not place {n} dots with {MIN_DOT_SEPARATION} px "
                f"separation in a {width}x{height} image")
        attempts_left -= 1
        # Uniform over the cluster disc.
        r = radius * math.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        x = min(max(cx + r * math.cos(theta), lo_x), hi_x)
        y = min(max(cy + r * math.sin(theta), lo_y), hi_y)
        ok = True
        for qx, qy in placed:
            if (x - qx) ** 2 + (y - qy) ** 2 < MIN_DOT_SEPARATION ** 2:
                ok = False
                break
        if ok:
            placed.append((x, y))
    return [PointAnnotation(x, y) for x, y in placed]


def _render(rng, points, height: int, width: int, style: DomainStyle) -> np.ndarray:
    # Smooth texture: coarse noise bilinearly stretched up to full size.
    cells_y = max(2, int(round(height / style.background_texture_scale)))
    cells_x = max(2, int(round(width / style.background_texture_scale)))
    coarse = rng.normal(0.0, 2.0 * style.background_noise_std, (cells_y, cells_x))
    yy = np.linspace(0.0, cells_y - 1.0, height)
    xx = np.linspace(0.0, cells_x - 1.0, width)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, cells_y - 1)
    x1 = np.minimum(x0 + 1, cells_x - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    texture = ((1 - fy) * (1 - fx) * coarse[np.ix_(y0, x0)]
               + (1 - fy) * fx * coarse[np.ix_(y0, x1)]
               + fy * (1 - fx) * coarse[np.ix_(y1, x0)]
               + fy * fx * coarse[np.ix_(y1, x1)])
    img = BACKGROUND_LEVEL + texture
    img += rng.normal(0.0, style.background_noise_std, (height, width))

    # Soft discs: flat-ish core with a smooth falloff near the radius.  The
    # whole image shares one exposure factor on the style's intensity.
    exposure = rng.uniform(*DOT_INTENSITY_MODULATION_RANGE)
    cy = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cx = np.arange(width, dtype=np.float64)[None, :] + 0.5
    r2 = style.dot_radius * style.dot_radius
    for p in points:
        d2 = (cx - p.x) ** 2 + (cy - p.y) ** 2
        img += exposure * style.dot_intensity * np.exp(-(d2 * d2) / (r2 * r2))
    return np.clip(img, 0.0, 1.0)


def generate_dataset(n_images: int, size, count_range: tuple[int, int],
                     style: DomainStyle | None = None, seed: int = 0,
                     id_prefix: str = "im") -> list[AnnotatedImage]:
    """Generate ``n_images`` annotated dot images, fully determined by ``seed``.

    ``size`` is (H, W) or a single int for square images.  ``count_range``
    is an inclusive (min, max) range; each image's dot count is drawn
    uniformly from it.
    """
    style = style or DomainStyle()
    n_images = int(n_images)
    if isinstance(size, (tuple, list)):
        height, width = int(size[0]), int(size[1])
    else:
        height = width = int(size)
    lo, hi = int(count_range[0]), int(count_range[1])
    if n_images < 0:
        raise ConfigError("n_images must be >= 0")
    if height < 8 or width < 8:
        raise ConfigError(f"image extents must be >= 8, got {height}x{width}")
    if lo < 0 or hi < lo:
        raise ConfigError(f"invalid count range ({lo}, {hi})")
    # Capacity check: with the minimum separation each dot claims a few
    # pixels; beyond a quarter of the image area placement cannot succeed.
    if hi > (height * width) // 4:
        raise GenerationError(
            f"count range up to {hi} is infeasible for a "
            f"{height}x{width} image")
    images = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, style.seed_offset, i])
        n_dots = int(rng.integers(lo, hi + 1))
        points = _place_points(rng, n_dots, height, width)
        pixels = _render(rng, points, height, width, style)
        images.append(AnnotatedImage(f"{id_prefix}{i:04d}", pixels, points))
    return images


def split_dataset(images: list[AnnotatedImage],
                  cfg: SplitConfig) -> tuple[list[AnnotatedImage], list[AnnotatedImage]]:
    """Split into (labeled, unlabeled) by a seeded shuffle.

    The labeled part has ceil(fraction * n) images.  Unlabeled images keep
    their annotations only so evaluation code can analyze pseudo-label
    quality; training must not read them.
    """
    if not images:
        raise ConfigError("split_dataset: dataset is empty")
    n = len(images)
    n_labeled = math.ceil(cfg.labeled_fraction * n)
    order = np.random.default_rng(cfg.seed).permutation(n)
    labeled = [images[i] for i in order[:n_labeled]]
    unlabeled = [images[i] for i in order[n_labeled:]]
    return labeled, unlabeled


def flip_horizontal(image: AnnotatedImage) -> AnnotatedImage:
    """Mirror an image (and its annotations) about the vertical axis."""
    width = image.pixels.shape[1]
    pixels = np.ascontiguousarray(image.pixels[:, ::-1])
    points = [PointAnnotation(width - p.x, p.y) for p in image.points]
    return replace(image, pixels=pixels, points=points)


def crop(image: AnnotatedImage, y0: int, x0: int, size: int) -> AnnotatedImage:
    """Take a square sub-image, keeping (and shifting) the points inside it."""
    h, w = image.pixels.shape
    if not (0 <= y0 and 0 <= x0 and y0 + size <= h and x0 + size <= w):
        raise ConfigError(f"crop ({y0},{x0})+{size} exceeds image {h}x{w}")
    pixels = np.ascontiguousarray(image.pixels[y0:y0 + size, x0:x0 + size])
    points = [PointAnnotation(p.x - x0, p.y - y0) for p in image.points
              if x0 <= p.x < x0 + size and y0 <= p.y < y0 + size]
    return replace(image, id=f"{image.id}_crop{y0}_{x0}", pixels=pixels,
                   points=points)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------
# <id>.img : line "H W", then H lines of W pixel values (repr round-trip)
# <id>.pts : one "x y" line per point (may be empty)
# manifest.txt : ordered ids, one per line


def save_dataset(images: list[AnnotatedImage], directory: str):
    os.makedirs(directory, exist_ok=True)
    for img in images:
        h, w = img.pixels.shape
        lines = [f"{h} {w}"]
        for row in img.pixels:
            lines.append(" ".join(repr(float(v)) for v in row))
        with open(os.path.join(directory, f"{img.id}.img"), "w") as f:
            f.write("\n".join(lines) + "\n")
        with open(os.path.join(directory, f"{img.id}.pts"), "w") as f:
            for p in img.points:
                f.write(f"{float(p.x)!r} {float(p.y)!r}\n")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        for img in images:
            f.write(img.id + "\n")


def _parse_pixels(path: str) -> np.ndarray:
    with open(path) as f:
        raw = f.read().split("\n")
    header = raw[0].split()
    if len(header) != 2:
        raise ParseError(f"{path}:1: expected header 'H W', got {raw[0]!r}")
    try:
        h, w = int(header[0]), int(header[1])
    except ValueError as exc:
        raise ParseError(f"{path}:1: non-integer extents in header") from exc
    if h < 1 or w < 1:
        raise ParseError(f"{path}:1: extents must be positive")
    values: list[float] = []
    for ln, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        for tok in line.split():
            try:
                v = float(tok)
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: bad pixel value {tok!r}") from exc
            if not (0.0 <= v <= 1.0) or not math.isfinite(v):
                raise ParseError(
                    f"{path}:{ln}: pixel value {tok} outside [0, 1]")
            values.append(v)
    if len(values) != h * w:
        raise ParseError(
            f"{path}: expected {h * w} pixel values, found {len(values)}")
    return np.asarray(values, dtype=np.float64).reshape(h, w)


def _parse_points(path: str, height: int, width: int) -> list[PointAnnotation]:
    points = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                continue
            toks = line.split()
            if len(toks) != 2:
                raise ParseError(f"{path}:{ln}: expected 'x y', got {line!r}")
            try:
                x, y = float(toks[0]), float(toks[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: bad coordinate") from exc
            if not (0.0 <= x < width and 0.0 <= y < height):
                raise ParseError(
                    f"{path}:{ln}: point ({x}, {y}) outside {width}x{height}")
            points.append(PointAnnotation(x, y))
    return points


def load_dataset(directory: str) -> list[AnnotatedImage]:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise ParseError(f"{manifest}: missing manifest")
    with open(manifest) as f:
        ids = [line.strip() for line in f if line.strip()]
    images = []
    for image_id in ids:
        try:
            pixels = _parse_pixels(os.path.join(directory, f"{image_id}.img"))
            points = _parse_points(os.path.join(directory, f"{image_id}.pts"),
                                   pixels.shape[0], pixels.shape[1])
        except OSError as exc:
            raise ParseError(f"{manifest}: cannot read files for "
                             f"'{image_id}': {exc}") from exc
        images.append(AnnotatedImage(image_id, pixels, points))
    return images
