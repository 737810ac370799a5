"""Synthetic data for desk-scale experiments.

Embedding bags are drawn around per-class prototypes. The three melanocytic
prototypes sit on a line (low -> intermediate -> high) so adjacent grades are
more confusable than distant ones. Reviewer discordance is simulated with a
row-stochastic confusion kernel, and small RGB slides exercise the image QC.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .mil import SpecimenBag
from .taxonomy import CLASSES, MELANOCYTIC, SpecimenClass, consensus, diagnoses_for

# relative frequencies of diagnoses within each class, from the reference-lab counts
_DIAGNOSIS_WEIGHTS = {
    SpecimenClass.BASALOID: {"Nodular Basal Cell Carcinoma": 404, "Basal Cell Carcinoma, NOS": 123,
                             "Basal Cell Carcinoma, Morphea type": 7, "Pilomatrixoma": 5,
                             "Infiltrative Basal Cell Carcinoma": 5},
    SpecimenClass.SQUAMOUS: {"Invasive Squamous Cell Carcinoma": 269, "Squamous Cell Carcinoma in situ": 254,
                             "Fibrokeratoma": 4, "Warty Dyskeratorma": 3},
    SpecimenClass.MEL_HIGH: {"Melanoma": 102},
    SpecimenClass.MEL_INT: {"Melanoma In Situ": 202, "Severe Dysplasia": 9},
    SpecimenClass.MEL_LOW: {"Conventional Melanocytic Nevus": 368, "Mild Dysplasia": 289,
                            "Moderate Dysplasia": 75, "Halo Nevus": 14, "Dysplastic Nevus, NOS": 12,
                            "Spitz Nevus": 2, "Blue Nevus": 2},
    SpecimenClass.OTHER: {"Other Diagnoses": 1},
}


def _unit(v):
    return v / np.linalg.norm(v)


@dataclass
class PrototypeSet:
    class_protos: Dict[SpecimenClass, np.ndarray]
    background: np.ndarray
    delta: float
    sigma: float
    seed: int

    @classmethod
    def make(cls, dim: int = 128, delta: float = 0.6, sigma: float = 0.5, seed: int = 0):
        rng = np.random.default_rng([seed, 101])
        protos = {c: _unit(rng.normal(size=dim)) for c in CLASSES}
        background = _unit(rng.normal(size=dim))
        low = protos[SpecimenClass.MEL_LOW]
        direction = rng.normal(size=dim)
        direction = _unit(direction - direction.dot(low) * low)
        protos[SpecimenClass.MEL_INT] = _unit(low + delta * direction)
        protos[SpecimenClass.MEL_HIGH] = _unit(low + 2 * delta * direction)
        return cls(protos, background, delta, sigma, seed)

    @property
    def dim(self) -> int:
        return self.background.shape[0]


@dataclass(frozen=True)
class BagParams:
    n_tiles: Tuple[int, int] = (20, 200)
    diagnostic_fraction: Tuple[float, float] = (0.05, 0.4)

    def __post_init__(self):
        lo, hi = self.n_tiles
        flo, fhi = self.diagnostic_fraction
        if not (1 <= lo <= hi) or not (0.0 < flo <= fhi <= 1.0):
            raise InvalidInputError(f"invalid bag parameters {self}")


@dataclass(frozen=True)
class DomainShift:
    """Affine distortion ``x -> (1 - mix) x + mix Q x + offset`` of embeddings from another lab."""

    mix: float = 0.5
    offset_norm: float = 1.0
    scale: float = 1.0
    seed: int = 0

    def apply(self, tiles: np.ndarray) -> np.ndarray:
        dim = tiles.shape[1]
        rng = np.random.default_rng([self.seed, 202])
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        offset = self.offset_norm * _unit(rng.normal(size=dim))
        return self.scale * ((1.0 - self.mix) * tiles + self.mix * tiles @ q.T) + offset


def gen_specimen(cls, prototypes: PrototypeSet, params: BagParams, rng: np.random.Generator,
                 specimen_id: str = "s0", lab_id: str = "ref", split: str = "train",
                 shift: Optional[DomainShift] = None) -> SpecimenBag:
    cls = SpecimenClass(cls)
    n = int(rng.integers(params.n_tiles[0], params.n_tiles[1] + 1))
    frac = float(rng.uniform(*params.diagnostic_fraction))
    n_diag = min(n, max(1, int(round(n * frac))))
    diag_idx = np.sort(rng.permutation(n)[:n_diag])
    tiles = prototypes.background + prototypes.sigma * rng.normal(size=(n, prototypes.dim))
    tiles[diag_idx] = prototypes.class_protos[cls] + prototypes.sigma * rng.normal(size=(n_diag, prototypes.dim))
    if shift is not None:
        tiles = shift.apply(tiles)
    names = list(_DIAGNOSIS_WEIGHTS[cls])
    w = np.array([_DIAGNOSIS_WEIGHTS[cls][k] for k in names], dtype=float)
    diagnosis = names[int(rng.choice(len(names), p=w / w.sum()))]
    return SpecimenBag(specimen_id, tiles, cls, lab_id, split, diagnosis, diag_idx)


def split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    """Integer split sizes by largest remainder; ties go to the earlier split."""
    raw = [n * f for f in fractions]
    base = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


SPLITS = ("train", "val", "test")


def gen_dataset(counts: Mapping, prototypes: PrototypeSet, fractions: Sequence[float] = (0.7, 0.15, 0.15),
                params: BagParams = BagParams(), seed: int = 0, lab_id: str = "ref",
                shift: Optional[DomainShift] = None, id_prefix: Optional[str] = None) -> List[SpecimenBag]:
    """Stratified synthetic dataset; every class's specimens are split by ``fractions``."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InvalidInputError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    prefix = id_prefix or lab_id
    bags = []
    for ci, cls in enumerate(CLASSES):
        n = int(counts.get(cls, counts.get(cls.value, 0)))
        if n < 1:
            raise InvalidInputError(f"class {cls.value} needs at least one specimen")
        order_rng = np.random.default_rng([seed, ci, 7])
        sizes = split_counts(n, fractions)
        labels = np.repeat(np.arange(3), sizes)[order_rng.permutation(n)]
        for i in range(n):
            rng = np.random.default_rng([seed, ci, i])
            bags.append(gen_specimen(cls, prototypes, params, rng, f"{prefix}-{cls.value}-{i:04d}",
                                     lab_id, SPLITS[labels[i]], shift))
    return bags


# ---------------------------------------------------------------------------
# reviewer discordance


DEFAULT_DIAGONAL = {
    SpecimenClass.MEL_LOW: 0.80,
    SpecimenClass.MEL_INT: 0.75,
    SpecimenClass.MEL_HIGH: 0.85,
    SpecimenClass.BASALOID: 0.95,
    SpecimenClass.SQUAMOUS: 0.95,
    SpecimenClass.OTHER: 0.95,
}


def make_kernel(diagonal: Optional[Mapping] = None, adjacent_share: float = 0.8) -> np.ndarray:
    """6x6 reviewer confusion kernel, rows indexed by true class in ``CLASSES`` order.

    Melanocytic errors stay melanocytic: ``adjacent_share`` of the error mass goes
    to neighbouring grades and the remainder to the far grade (intermediate has
    two neighbours and no far grade). Non-melanocytic errors spread evenly over
    the other non-melanocytic classes.
    """
    diag = dict(DEFAULT_DIAGONAL)
    if diagonal:
        diag.update({SpecimenClass(k): float(v) for k, v in diagonal.items()})
    k = np.zeros((6, 6))
    idx = {c: i for i, c in enumerate(CLASSES)}
    non_mel = [c for c in CLASSES if c not in MELANOCYTIC]
    for c in CLASSES:
        d = diag[c]
        k[idx[c], idx[c]] = d
        err = 1.0 - d
        if c in MELANOCYTIC:
            pos = MELANOCYTIC.index(c)
            adj = [m for m in MELANOCYTIC if abs(MELANOCYTIC.index(m) - pos) == 1]
            far = [m for m in MELANOCYTIC if abs(MELANOCYTIC.index(m) - pos) == 2]
            share = adjacent_share if far else 1.0
            for m in adj:
                k[idx[c], idx[m]] += err * share / len(adj)
            for m in far:
                k[idx[c], idx[m]] += err * (1.0 - share) / len(far)
        else:
            others = [m for m in non_mel if m != c]
            for m in others:
                k[idx[c], idx[m]] += err / len(others)
    validate_kernel(k)
    return k


def identity_kernel() -> np.ndarray:
    return np.eye(6)


def validate_kernel(kernel: np.ndarray) -> None:
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (6, 6) or np.any(kernel < 0) or not np.allclose(kernel.sum(axis=1), 1.0, atol=1e-12):
        raise InvalidInputError("reviewer kernel must be a 6x6 row-stochastic matrix")
    if np.any(np.diag(kernel) < 0.5):
        raise InvalidInputError("reviewer kernel diagonal must be >= 0.5")


def simulate_reviews(true_class, kernel: np.ndarray, n_reviewers: int, rng: np.random.Generator) -> List[SpecimenClass]:
    if n_reviewers not in (3, 5):
        raise InvalidInputError("n_reviewers must be 3 or 5")
    validate_kernel(kernel)
    row = np.asarray(kernel, dtype=float)[CLASSES.index(SpecimenClass(true_class))]
    draws = rng.choice(6, size=n_reviewers, p=row / row.sum())
    return [CLASSES[i] for i in draws]


def simulate_panel(bags: Sequence[SpecimenBag], kernel: np.ndarray, seed: int = 0) -> Dict[str, List[SpecimenClass]]:
    """Five independent reviews per melanocytic bag (the last two are used only on a 2/3 split)."""
    out = {}
    for bag in bags:
        if SpecimenClass(bag.label) in MELANOCYTIC:
            out[bag.specimen_id] = simulate_reviews(bag.label, kernel, 5, np.random.default_rng([seed, 303, _id_int(bag.specimen_id)]))
    return out


def _id_int(specimen_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(specimen_id.encode(), digest_size=8).digest(), "little")


def apply_consensus_filter(bags: Sequence[SpecimenBag], reviews: Mapping[str, Sequence]):
    """Split melanocytic bags by panel consensus.

    Returns ``(consensus_set, non_consensus_set)``. Consensus bags carry the
    consensus label; excluded bags carry the first reviewer's label.
    Non-melanocytic bags are never reviewed and go to the consensus set as-is.
    """
    kept, excluded = [], []
    for bag in bags:
        if SpecimenClass(bag.label) not in MELANOCYTIC:
            kept.append(bag)
            continue
        r = list(reviews[bag.specimen_id])
        decision = consensus(r[:3], r[3:5] if len(r) >= 5 else None)
        if decision.excluded:
            excluded.append(replace(bag, label=SpecimenClass(r[0])))
        else:
            kept.append(replace(bag, label=decision.outcome))
    return kept, excluded


def retention_rate(bags: Sequence[SpecimenBag], reviews: Mapping[str, Sequence]) -> float:
    mel = [b for b in bags if SpecimenClass(b.label) in MELANOCYTIC]
    if not mel:
        return float("nan")
    kept, _ = apply_consensus_filter(mel, reviews)
    return len(kept) / len(mel)


# ---------------------------------------------------------------------------
# slides

_TISSUE_COLORS = {
    SpecimenClass.BASALOID: (150, 90, 170),
    SpecimenClass.SQUAMOUS: (215, 130, 175),
    SpecimenClass.MEL_LOW: (200, 120, 170),
    SpecimenClass.MEL_INT: (185, 105, 160),
    SpecimenClass.MEL_HIGH: (170, 90, 150),
    SpecimenClass.OTHER: (225, 150, 190),
}
INK_COLORS = {"blue": (20, 40, 200), "green": (20, 150, 40), "black": (15, 15, 15)}


@dataclass
class SyntheticSlide:
    pixels: np.ndarray
    tissue_mask: np.ndarray
    ink_mask: np.ndarray
    blur_mask: np.ndarray
    ink_color: Optional[str] = None
    magnification: str = "20X"
    mpp: float = 0.24


def _blob_mask(shape, rng, n_blobs: int, fill: float):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        ry, rx = rng.uniform(0.5, 1.0) * fill * h / 2, rng.uniform(0.5, 1.0) * fill * w / 2
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return mask


def _texture(shape, rng, color):
    """Pink/purple tissue with dark nuclei and fine grain."""
    h, w = shape
    base = np.empty((h, w, 3))
    base[:] = color
    base += rng.normal(0, 12.0, size=(h, w, 3))
    n_nuclei = int(h * w / 180)
    ys, xs = rng.integers(0, h, n_nuclei), rng.integers(0, w, n_nuclei)
    nuclei = np.zeros((h, w), dtype=bool)
    nuclei[ys, xs] = True
    nuclei = ndimage.binary_dilation(nuclei, iterations=1)
    base[nuclei] = np.array([90, 40, 120]) + rng.normal(0, 10.0, size=(int(nuclei.sum()), 3))
    return base


def gen_synthetic_slide(cls=SpecimenClass.OTHER, ink: bool = False, blur: bool = False,
                        rng: Optional[np.random.Generator] = None, size: Tuple[int, int] = (1024, 1024),
                        tissue: str = "blob", blur_sigma: float = 3.0) -> SyntheticSlide:
    """White canvas with textured tissue, optional ink strokes and an optional blurred band.

    ``tissue`` is ``"blob"``, ``"full"`` or ``"half"`` (left half). The blurred
    region covers whole 256x256 blocks so it lines up with 10X tiles.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = size
    if tissue == "full":
        tmask = np.ones((h, w), dtype=bool)
    elif tissue == "half":
        tmask = np.zeros((h, w), dtype=bool)
        tmask[:, : w // 2] = True
    else:
        tmask = _blob_mask((h, w), rng, n_blobs=int(rng.integers(1, 3)), fill=0.8)
    background = np.clip(np.array([242.0, 240.0, 244.0]) + rng.normal(0, 2.0, size=(h, w, 3)), 0, 255)
    tex = _texture((h, w), rng, _TISSUE_COLORS[SpecimenClass(cls)])
    img = np.where(tmask[..., None], tex, background)

    blur_mask = np.zeros((h, w), dtype=bool)
    if blur:
        block = 256
        rows, cols = h // block, w // block
        pick = rng.permutation(rows * cols)[: max(1, (rows * cols) // 2)]
        for p in pick:
            r, c = divmod(int(p), cols)
            blur_mask[r * block:(r + 1) * block, c * block:(c + 1) * block] = True
        blurred = np.stack([ndimage.gaussian_filter(img[..., k], blur_sigma) for k in range(3)], axis=-1)
        img = np.where(blur_mask[..., None], blurred, img)

    ink_mask = np.zeros((h, w), dtype=bool)
    ink_color = None
    if ink:
        ink_color = list(INK_COLORS)[int(rng.integers(len(INK_COLORS)))]
        for _ in range(int(rng.integers(2, 5))):
            y0, x0 = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
            angle = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.3, 0.6) * min(h, w)
            t = np.linspace(0, 1, int(length))
            ys = np.clip((y0 + np.sin(angle) * length * t + 20 * np.sin(6 * t)).astype(int), 0, h - 1)
            xs = np.clip((x0 + np.cos(angle) * length * t).astype(int), 0, w - 1)
            ink_mask[ys, xs] = True
        ink_mask = ndimage.binary_dilation(ink_mask, iterations=int(rng.integers(6, 12)))
        img[ink_mask] = np.array(INK_COLORS[ink_color], dtype=float)

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticSlide(pixels, tmask, ink_mask, blur_mask, ink_color)
