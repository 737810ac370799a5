"""Slide preprocessing: tissue segmentation, tiling, blur and ink filtering,
color adaptation, augmentation and tile embedding."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv
from skimage.filters import threshold_otsu

from . import mil, nn
from .errors import DegenerateLabelsError, EmptyBagError, InvalidInputError, ShapeError

log = logging.getLogger(__name__)

TILE = 128
MIN_TISSUE_FRACTION = 0.25
# glass is near-white; stained tissue sits well above this saturation
BACKGROUND_SATURATION = 0.1


@dataclass
class SlideImage:
    pixels: np.ndarray
    magnification: str = "20X"
    mpp: float = 0.24

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError("slide pixels must be an H x W x 3 uint8 array")
        if min(self.pixels.shape[:2]) < 256:
            raise ShapeError(f"slide must be at least 256x256, got {self.pixels.shape[:2]}")


@dataclass
class Tile:
    pixels: np.ndarray
    origin: Tuple[int, int] = (0, 0)
    index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (TILE, TILE, 3):
            raise ShapeError(f"tile must be {TILE}x{TILE}x3, got {self.pixels.shape}")


def _pixels(tile) -> np.ndarray:
    return tile.pixels if isinstance(tile, Tile) else np.asarray(tile)


# ---------------------------------------------------------------------------
# slide I/O: PNG or binary PPM plus a one-line sidecar "<file>.meta"


def read_slide(path) -> SlideImage:
    path = Path(path)
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    meta = {}
    side = path.with_name(path.name + ".meta")
    if side.exists():
        for item in side.read_text().split():
            key, _, value = item.partition("=")
            meta[key] = value
    return SlideImage(pixels, meta.get("magnification", "20X"), float(meta.get("mpp", 0.24)))


def write_slide(path, slide: SlideImage) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(slide.pixels, "RGB").save(path, format=fmt)
    path.with_name(path.name + ".meta").write_text(f"magnification={slide.magnification} mpp={slide.mpp}\n")


# ---------------------------------------------------------------------------
# segmentation and tiling


def segment_tissue(slide: SlideImage, min_spread: float = 0.05) -> np.ndarray:
    """Otsu threshold on HSV saturation followed by a 3x3 open and close.

    A slide whose saturation range is below ``min_spread`` has nothing to
    separate and yields an empty mask. When even the low-saturation Otsu class
    is too saturated to be glass, the slide has no background and Otsu would
    split tissue from nuclei; every pixel above ``BACKGROUND_SATURATION`` is
    tissue then.
    """
    sat = rgb2hsv(slide.pixels)[..., 1]
    if float(sat.max() - sat.min()) < min_spread:
        return np.zeros(sat.shape, dtype=bool)
    t = threshold_otsu(sat)
    if sat[sat <= t].mean() > BACKGROUND_SATURATION:
        t = BACKGROUND_SATURATION
    mask = sat > t
    se = np.ones((3, 3), dtype=bool)
    mask = ndimage.binary_opening(mask, structure=se, iterations=1)
    return ndimage.binary_closing(mask, structure=se, iterations=1, border_value=0)


def downsample2(pixels: np.ndarray) -> np.ndarray:
    """2x box-filter downsample (20X -> 10X)."""
    h, w = pixels.shape[0] // 2 * 2, pixels.shape[1] // 2 * 2
    p = pixels[:h, :w].astype(np.float64)
    return p.reshape(h // 2, 2, w // 2, 2, *p.shape[2:]).mean(axis=(1, 3))


def tile_slide(slide: SlideImage, mask: np.ndarray, min_tissue: float = MIN_TISSUE_FRACTION) -> List[Tile]:
    """Non-overlapping 128x128 tiles at 10X with at least ``min_tissue`` tissue coverage.

    Tile origins are in full-resolution slide coordinates.
    """
    if mask.shape != slide.pixels.shape[:2]:
        raise ShapeError("mask does not match slide")
    small = np.clip(np.rint(downsample2(slide.pixels)), 0, 255).astype(np.uint8)
    cover = downsample2(mask.astype(np.float64))
    tiles = []
    for r in range(0, small.shape[0] - TILE + 1, TILE):
        for c in range(0, small.shape[1] - TILE + 1, TILE):
            if cover[r:r + TILE, c:c + TILE].mean() >= min_tissue:
                tiles.append(Tile(small[r:r + TILE, c:c + TILE].copy(), (2 * r, 2 * c), len(tiles)))
    return tiles


# ---------------------------------------------------------------------------
# blur


def grayscale(pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def laplacian(gray: np.ndarray) -> np.ndarray:
    g = np.pad(np.asarray(gray, dtype=np.float64), 1, mode="edge")
    return g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]


def laplacian_variance(tile) -> float:
    """Population variance of the 4-neighbour Laplacian of the grayscale tile (replicated borders)."""
    p = _pixels(tile)
    gray = grayscale(p) if p.ndim == 3 else np.asarray(p, dtype=np.float64)
    return float(np.var(laplacian(gray)))


@dataclass
class FilterLog:
    rejected: List[dict] = field(default_factory=list)


def blur_filter(tiles: Sequence, threshold: float):
    """Keep tiles whose Laplacian variance is at least ``threshold``; returns ``(kept, FilterLog)``."""
    if threshold < 0:
        raise InvalidInputError("blur threshold must be >= 0")
    kept, flog = [], FilterLog()
    for i, t in enumerate(tiles):
        v = laplacian_variance(t)
        if v >= threshold:
            kept.append(t)
        else:
            flog.rejected.append({"position": i, "origin": getattr(t, "origin", None), "reason": "blur", "score": v})
    return kept, flog


def calibrate_blur_threshold(sharp_tiles: Sequence, percentile: float = 1.0) -> float:
    """Blur threshold at the given percentile of sharp-tile Laplacian variances."""
    if not len(sharp_tiles):
        raise InvalidInputError("blur calibration needs at least one sharp tile")
    return float(np.percentile([laplacian_variance(t) for t in sharp_tiles], percentile))


# ---------------------------------------------------------------------------
# ink


def color_histogram(tile, bins: int = 8) -> np.ndarray:
    """Joint RGB histogram (``bins**3`` features), normalized to sum to 1."""
    p = _pixels(tile).reshape(-1, 3).astype(np.int64)
    q = p * bins // 256
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    hist = np.bincount(idx, minlength=bins ** 3).astype(np.float64)
    return hist / hist.sum()


def ink_features(tiles: Sequence) -> np.ndarray:
    # sqrt spreads the mass of rare colours (ink strokes) away from zero
    return np.sqrt(np.stack([color_histogram(t) for t in tiles]))


INK_HEADS = {"ink": ("ink", "clean")}


@dataclass
class InkConfig:
    width: int = 64
    dropout_rate: float = 0.0
    val_fraction: float = 0.25
    fit: mil.FitConfig = field(default_factory=lambda: mil.FitConfig(max_epochs=30, patience=5, lr=1e-3))
    seed: int = 0


def train_ink_detector(slides: Sequence[Tuple[Sequence, bool]], config: InkConfig = InkConfig()) -> mil.BagModel:
    """Attention-MIL ink detector trained from slide-level labels.

    ``slides`` holds ``(tiles, has_ink)`` pairs. A stratified share of slides is
    held out for early stopping.
    """
    labels = [bool(lab) for _, lab in slides]
    if len(set(labels)) < 2:
        raise DegenerateLabelsError("ink detector needs both inked and ink-free slides")
    for i, (tiles, _) in enumerate(slides):
        if not len(tiles):
            raise EmptyBagError(f"slide {i} has no tiles")
    bags = [mil.SpecimenBag(f"slide-{i}", ink_features(tiles), lab) for i, (tiles, lab) in enumerate(slides)]
    rng = np.random.default_rng(config.seed)
    train, val = [], []
    for value in (True, False):
        group = [b for b in bags if b.label == value]
        n_val = max(1, int(round(config.val_fraction * len(group)))) if len(group) > 1 else 0
        perm = rng.permutation(len(group))
        val += [group[i] for i in perm[:n_val]]
        train += [group[i] for i in perm[n_val:]]
    model = mil.BagModel.init(bags[0].tiles.shape[1], INK_HEADS, width=config.width,
                              dropout_rate=config.dropout_rate, seed=[config.seed, 11])
    objective = mil.SingleHeadObjective("ink", lambda b: 0 if b.label else 1)
    model, _ = mil.fit(model, train, val or train, objective, config.fit)
    return model


def slide_ink_probability(model: mil.BagModel, tiles: Sequence) -> float:
    out = mil.bag_forward(model, ink_features(tiles))
    return float(out.probs["ink"][0])


def ink_scores(model: mil.BagModel, tiles: Sequence) -> np.ndarray:
    """Per-tile ink probability: the ink head applied to each tile's own encoding."""
    if not len(tiles):
        return np.zeros(0)
    H, _ = nn.forward(model.encoder, ink_features(tiles))
    head = model.head("ink")
    return nn.softmax(H @ head.weight.T + head.bias)[:, 0]


def ink_filter(tiles: Sequence, model: mil.BagModel, cutoff: float = 0.5):
    """Drop tiles whose ink score exceeds ``cutoff``; returns ``(kept, FilterLog)``."""
    scores = ink_scores(model, tiles)
    kept, flog = [], FilterLog()
    for i, (t, s) in enumerate(zip(tiles, scores)):
        if s > cutoff:
            flog.rejected.append({"position": i, "origin": getattr(t, "origin", None), "reason": "ink", "score": float(s)})
        else:
            kept.append(t)
    return kept, flog


# ---------------------------------------------------------------------------
# color adaptation


@dataclass(frozen=True)
class RefColorStats:
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise InvalidInputError("color stats need three means and three positive stds")

    @classmethod
    def from_tiles(cls, tiles: Sequence):
        p = np.concatenate([_pixels(t).reshape(-1, 3) for t in tiles]).astype(np.float64)
        return cls(tuple(float(x) for x in p.mean(axis=0)), tuple(float(x) for x in p.std(axis=0)))


def adapt_colors(tiles: Sequence, stats: RefColorStats) -> List:
    """Per-channel affine map so the tile population matches the reference mean and std.

    A channel with zero variance is passed through unchanged (with a warning).
    Outputs are rounded and clamped to 8-bit.
    """
    if not len(tiles):
        return []
    stack = np.stack([_pixels(t) for t in tiles]).astype(np.float64)
    flat = stack.reshape(-1, 3)
    mu, sd = flat.mean(axis=0), flat.std(axis=0)
    out = stack.copy()
    for ch in range(3):
        if sd[ch] == 0:
            warnings.warn(f"channel {ch} has zero variance; left unchanged", stacklevel=2)
            continue
        out[..., ch] = (stack[..., ch] - mu[ch]) * (stats.std[ch] / sd[ch]) + stats.mean[ch]
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    result = []
    for t, px in zip(tiles, out):
        result.append(Tile(px, t.origin, t.index) if isinstance(t, Tile) else px)
    return result


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    max_jitter: float = 0.15
    noise_var: float = 0.001
    rotations: Tuple[int, ...] = (0, 1, 2, 3)


def augment(tile, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()):
    """Random brightness/hue/contrast/saturation jitter, Gaussian noise and a 90-degree rotation."""
    px = _pixels(tile)
    x = px.astype(np.float64) / 255.0
    j = config.max_jitter
    brightness, hue, contrast, saturation = rng.uniform(-j, j, size=4) if j > 0 else np.zeros(4)
    x = x * (1.0 + brightness)
    mean = x.mean()
    x = (x - mean) * (1.0 + contrast) + mean
    gray = grayscale(x)[..., None]
    x = gray + (x - gray) * (1.0 + saturation)
    if hue != 0.0:
        hsv = rgb2hsv(np.clip(x, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        x = hsv2rgb(hsv)
    if config.noise_var > 0:
        x = x + rng.normal(0.0, np.sqrt(config.noise_var), size=x.shape)
    k = int(rng.choice(config.rotations)) if len(config.rotations) > 1 else int(config.rotations[0])
    x = np.rot90(x, k=k, axes=(0, 1))
    out = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    return Tile(out, tile.origin, tile.index) if isinstance(tile, Tile) else out


# ---------------------------------------------------------------------------
# embedding


@dataclass
class BuiltinEmbedder:
    """Seeded random projection of the normalized tile, followed by tanh.

    The tile is average-pooled by ``pool`` in each spatial direction before
    flattening, which keeps the projection matrix small.
    """

    dim: int = 1024
    seed: int = 0
    pool: int = 4
    bias: Optional[np.ndarray] = None
    _proj: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def n_in(self) -> int:
        return (TILE // self.pool) ** 2 * 3

    @property
    def projection(self) -> np.ndarray:
        if self._proj is None:
            rng = np.random.default_rng([self.seed, 404])
            p = rng.normal(size=(self.dim, self.n_in))
            self._proj = p / np.linalg.norm(p, axis=1, keepdims=True)
        return self._proj

    def features(self, tiles: Sequence) -> np.ndarray:
        rows = []
        for t in tiles:
            p = _pixels(t).astype(np.float64)
            k = self.pool
            p = p.reshape(TILE // k, k, TILE // k, k, 3).mean(axis=(1, 3)).reshape(-1)
            sd = p.std()
            rows.append((p - p.mean()) / sd if sd > 0 else p - p.mean())
        return np.stack(rows)

    def embed(self, tiles: Sequence, specimen_id: Optional[str] = None) -> np.ndarray:
        if not len(tiles):
            return np.zeros((0, self.dim))
        z = self.features(tiles) @ self.projection.T
        if self.bias is not None:
            z = z + self.bias
        return np.tanh(z)


@dataclass
class ExternalEmbedder:
    """Precomputed embeddings looked up by ``(specimen_id, tile index)``."""

    vectors: dict

    @classmethod
    def from_file(cls, path):
        from .persistence import read_embeddings
        return cls(read_embeddings(path))

    def embed(self, tiles: Sequence, specimen_id: Optional[str] = None) -> np.ndarray:
        if specimen_id not in self.vectors:
            raise InvalidInputError(f"no precomputed embeddings for specimen {specimen_id!r}")
        table = self.vectors[specimen_id]
        rows = []
        for t in tiles:
            i = t.index if isinstance(t, Tile) else int(t)
            if not 0 <= i < len(table):
                raise InvalidInputError(f"specimen {specimen_id!r} has no embedding for tile {i}")
            rows.append(table[i])
        return np.asarray(rows, dtype=np.float64)


def embed(tiles: Sequence, embedder, specimen_id: Optional[str] = None) -> np.ndarray:
    return embedder.embed(tiles, specimen_id)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class QCResult:
    tiles: List[Tile]
    embeddings: np.ndarray
    log: List[dict]


def run_qc(slides: Sequence[SlideImage], embedder, ink_model: Optional[mil.BagModel] = None,
           blur_threshold: float = 0.0, color_stats: Optional[RefColorStats] = None,
           ink_cutoff: float = 0.5, specimen_id: Optional[str] = None) -> QCResult:
    """Segment, tile, ink-filter, blur-filter, color-adapt and embed every slide of a specimen."""
    tiles: List[Tile] = []
    for s in slides:
        for t in tile_slide(s, segment_tissue(s)):
            tiles.append(Tile(t.pixels, t.origin, len(tiles)))
    events = []
    if ink_model is not None:
        tiles, flog = ink_filter(tiles, ink_model, ink_cutoff)
        events += flog.rejected
    tiles, flog = blur_filter(tiles, blur_threshold)
    events += flog.rejected
    if color_stats is not None:
        tiles = adapt_colors(tiles, color_stats)
    emb = embed(tiles, embedder, specimen_id) if tiles else np.zeros((0, getattr(embedder, "dim", 0)))
    return QCResult(tiles, emb, events)
