"""Attention-based multiple-instance learning over specimen bags.

A :class:`BagModel` encodes every tile with a four-layer MLP, pools the encoded
tiles with gated attention and feeds the pooled vector to one or more softmax
task heads. Gradients are derived by hand; see :func:`bag_backward`.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import nn
from .errors import DegenerateLabelsError, EmptyBagError, InvalidInputError, ShapeError

log = logging.getLogger(__name__)

# encoder activations: the first layer is linear, the three after it are ReLU
ENCODER_ACTIVATIONS = ("none", "relu", "relu", "relu")

HIGH_VS_INT = "high_vs_int"
HIGH_VS_REST = "high_vs_rest"
INT_VS_REST = "int_vs_rest"
SUSPECT_VS_REST = "suspect_vs_rest"
REST_CLASSES = "rest_classes"


@dataclass
class SpecimenBag:
    specimen_id: str
    tiles: np.ndarray
    label: object = None
    lab_id: str = "ref"
    split: str = "train"
    diagnosis: Optional[str] = None
    # generator-side ground truth, never used for training
    diagnostic_idx: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.tiles = np.asarray(self.tiles, dtype=np.float64)
        if self.tiles.ndim != 2:
            raise ShapeError(f"{self.specimen_id}: tiles must be an n x dim matrix")
        if self.tiles.shape[0] == 0:
            raise EmptyBagError(f"{self.specimen_id}: bag has no tiles")
        if not np.all(np.isfinite(self.tiles)):
            raise InvalidInputError(f"{self.specimen_id}: non-finite embedding")

    @property
    def n_tiles(self) -> int:
        return self.tiles.shape[0]


@dataclass
class AttentionParams:
    V: np.ndarray
    U: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.V.shape != self.U.shape or self.w.shape != (self.V.shape[0],) or self.V.shape[0] < 1:
            raise ShapeError(f"bad attention shapes {self.V.shape} {self.U.shape} {self.w.shape}")

    @property
    def dim(self) -> int:
        return self.V.shape[0]


@dataclass
class TaskHead:
    name: str
    classes: tuple
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        k = len(self.classes)
        if self.weight.shape[0] != k or self.bias.shape != (k,):
            raise ShapeError(f"head {self.name}: {k} classes but weight {self.weight.shape}")


@dataclass
class BagModel:
    encoder: nn.MLPParams
    attention: AttentionParams
    heads: tuple
    dropout_rate: float = 0.5

    def __post_init__(self):
        self.heads = tuple(self.heads)
        h = self.encoder.n_out
        if self.attention.V.shape[1] != h or any(hd.weight.shape[1] != h for hd in self.heads):
            raise ShapeError("attention/head input width must equal encoder output width")
        names = [hd.name for hd in self.heads]
        if len(set(names)) != len(names):
            raise InvalidInputError(f"duplicate head names {names}")

    @classmethod
    def init(cls, in_dim: int, heads: Mapping[str, Sequence[str]], width: int = 1024,
             attention_dim: Optional[int] = None, dropout_rate: float = 0.5, seed=0):
        """Fresh model with encoder widths ``in -> w -> w -> w/2 -> w/2`` and ``Da = w/4``."""
        rng = np.random.default_rng(seed)
        widths = (in_dim, width, width, width // 2, width // 2)
        encoder = nn.MLPParams.init(widths, ENCODER_ACTIVATIONS, rng)
        h = widths[-1]
        da = attention_dim or max(1, width // 4)
        attention = AttentionParams(
            nn.glorot_uniform(rng, da, h), nn.glorot_uniform(rng, da, h),
            nn.glorot_uniform(rng, 1, da)[0])
        task_heads = [TaskHead(name, classes, nn.glorot_uniform(rng, len(classes), h), np.zeros(len(classes)))
                      for name, classes in heads.items()]
        return cls(encoder, attention, task_heads, dropout_rate)

    @property
    def in_dim(self) -> int:
        return self.encoder.n_in

    def head(self, name: str) -> TaskHead:
        for hd in self.heads:
            if hd.name == name:
                return hd
        raise KeyError(name)

    @property
    def head_names(self) -> tuple:
        return tuple(hd.name for hd in self.heads)

    def arrays(self) -> List[np.ndarray]:
        out = self.encoder.arrays() + [self.attention.V, self.attention.U, self.attention.w]
        for hd in self.heads:
            out += [hd.weight, hd.bias]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "BagModel":
        n_enc = 2 * len(self.encoder.layers)
        enc = self.encoder.with_arrays(arrays[:n_enc])
        V, U, w = arrays[n_enc:n_enc + 3]
        rest = list(arrays[n_enc + 3:])
        heads = [TaskHead(hd.name, hd.classes, rest[2 * i], rest[2 * i + 1]) for i, hd in enumerate(self.heads)]
        return BagModel(enc, AttentionParams(V, U, w), heads, self.dropout_rate)

    def copy(self) -> "BagModel":
        return self.with_arrays([a.copy() for a in self.arrays()])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gated_scores(H, att: AttentionParams):
    T = np.tanh(H @ att.V.T)
    G = _sigmoid(H @ att.U.T)
    return (T * G) @ att.w, T, G


def _pool(H, scores):
    """Softmax-normalized pooling, summed in ascending-score order so the result
    does not depend on tile order."""
    order = np.argsort(scores, axis=-1, kind="stable")
    s = np.take_along_axis(scores, order, axis=-1)
    e = np.exp(s - s[..., -1:])
    a_sorted = e / np.sum(e, axis=-1, keepdims=True)
    H_sorted = np.take_along_axis(H, order[..., None], axis=-2)
    pooled = np.einsum("...n,...nh->...h", a_sorted, H_sorted)
    weights = np.empty_like(a_sorted)
    np.put_along_axis(weights, order, a_sorted, axis=-1)
    return pooled, weights


def attention_pool(encoded: np.ndarray, attention: AttentionParams):
    """Pool ``n x h`` tile encodings into one vector; returns ``(pooled, weights)``."""
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 2 or encoded.shape[0] == 0:
        raise EmptyBagError("attention pooling needs at least one tile")
    scores, _, _ = _gated_scores(encoded, attention)
    return _pool(encoded, scores)


@dataclass
class BagOutput:
    probs: Dict[str, np.ndarray]
    logits: Dict[str, np.ndarray]
    weights: np.ndarray
    pooled: np.ndarray
    _enc_cache: object = field(repr=False, default=None)
    _att: tuple = field(repr=False, default=())
    _model: object = field(repr=False, default=None)


def _tiles_of(bag) -> np.ndarray:
    tiles = bag.tiles if hasattr(bag, "tiles") else bag
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim != 2 or tiles.shape[0] == 0:
        raise EmptyBagError("bag has no tiles")
    return tiles


def bag_forward(model: BagModel, bag, dropout: Optional[nn.DropoutSpec] = None, seed=None) -> BagOutput:
    """One forward pass over a bag (a :class:`SpecimenBag` or an ``n x dim`` array).

    ``dropout`` defaults to off; its rate is taken from the model when only a
    mode string is given.
    """
    tiles = _tiles_of(bag)
    if tiles.shape[1] != model.in_dim:
        raise ShapeError(f"embedding width {tiles.shape[1]} != model input {model.in_dim}")
    if dropout is None:
        dropout = nn.DropoutSpec(model.dropout_rate, "off")
    elif isinstance(dropout, str):
        dropout = nn.DropoutSpec(model.dropout_rate, dropout)
    H, cache = nn.forward(model.encoder, tiles, dropout, rng_seed=seed)
    scores, T, G = _gated_scores(H, model.attention)
    pooled, weights = _pool(H, scores)
    logits, probs = {}, {}
    for hd in model.heads:
        z = hd.weight @ pooled + hd.bias
        logits[hd.name] = z
        probs[hd.name] = nn.softmax(z)
    return BagOutput(probs, logits, weights, pooled, cache, (H, T, G), model)


def bag_backward(model: BagModel, out: BagOutput, dlogits: Mapping[str, np.ndarray]) -> List[np.ndarray]:
    """Parameter gradients (ordered like :meth:`BagModel.arrays`) given logit gradients per head.

    Heads missing from ``dlogits`` receive exactly zero gradient.
    """
    if out._model is not model:
        raise InvalidInputError("output was produced by a different model")
    H, T, G = out._att
    a, z = out.weights, out.pooled
    head_grads = []
    dz = np.zeros_like(z)
    for hd in model.heads:
        g = dlogits.get(hd.name)
        if g is None:
            head_grads += [np.zeros_like(hd.weight), np.zeros_like(hd.bias)]
            continue
        g = np.asarray(g, dtype=np.float64)
        head_grads += [np.outer(g, z), g.copy()]
        dz += hd.weight.T @ g

    att = model.attention
    dH = np.outer(a, dz)
    da = H @ dz
    ds = a * (da - np.dot(a, da))
    TG = T * G
    dw = TG.T @ ds
    dTG = np.outer(ds, att.w)
    dP = dTG * G * (1.0 - T * T)
    dQ = dTG * T * G * (1.0 - G)
    dV = dP.T @ H
    dU = dQ.T @ H
    dH += dP @ att.V + dQ @ att.U
    enc_grads, _ = nn.backward(out._enc_cache, dH, model.encoder)
    return enc_grads + [dV, dU, dw] + head_grads


def mc_pass_seed(seed, t: int):
    """Seed for Monte Carlo pass ``t``; ``bag_forward(..., seed=mc_pass_seed(s, t))`` reproduces it."""
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(t)]


def mc_forward(model: BagModel, bag, n_passes: int, seed, rate: Optional[float] = None,
               max_elements: int = 4_000_000) -> Dict[str, np.ndarray]:
    """Probabilities of ``n_passes`` dropout-sampled forward passes, ``(T, k)`` per head.

    Pass ``t`` uses the same masks as ``bag_forward(model, bag, "mc_sample",
    seed=mc_pass_seed(seed, t))``; the deterministic prefix of the encoder (up
    to the first dropout) is evaluated once and shared across passes.
    """
    tiles = _tiles_of(bag)
    if tiles.shape[1] != model.in_dim:
        raise ShapeError(f"embedding width {tiles.shape[1]} != model input {model.in_dim}")
    rate = model.dropout_rate if rate is None else rate
    layers = model.encoder.layers
    if rate == 0.0:
        out = bag_forward(model, tiles, nn.DropoutSpec(0.0, "off"))
        return {k: np.repeat(v[None, :], n_passes, axis=0) for k, v in out.probs.items()}

    first = next(i for i, layer in enumerate(layers) if layer.activation == "relu")
    prefix, _ = nn.forward(nn.MLPParams(layers[:first + 1]), tiles)
    rest = nn.MLPParams(layers[first + 1:]) if first + 1 < len(layers) else None
    widths = model.encoder.dropout_widths()
    n = tiles.shape[0]

    chunk = max(1, int(max_elements // max(1, n * max(widths))))
    result = {hd.name: [] for hd in model.heads}
    for start in range(0, n_passes, chunk):
        ts = range(start, min(n_passes, start + chunk))
        per_pass = [nn.draw_masks(widths, (n,), rate, np.random.default_rng(mc_pass_seed(seed, t))) for t in ts]
        masks = [np.stack([m[i] for m in per_pass]) for i in range(len(widths))]
        H = prefix[None, :, :] * masks[0]
        if rest is not None:
            H, _ = nn.forward(rest, H, nn.DropoutSpec(rate, "mc_sample"), masks=masks[1:])
        scores, _, _ = _gated_scores(H, model.attention)
        pooled, _ = _pool(H, scores)
        for hd in model.heads:
            result[hd.name].append(nn.softmax(pooled @ hd.weight.T + hd.bias))
    return {k: np.concatenate(v, axis=0) for k, v in result.items()}


# Which suspect-subclassifier tasks a ground-truth group trains, and the target
# index within each task's (first, second) output pair.
TASK_MASK = {
    "high": {HIGH_VS_INT: 0, HIGH_VS_REST: 0},
    "int": {HIGH_VS_INT: 1, INT_VS_REST: 0},
    "rest": {HIGH_VS_REST: 1, INT_VS_REST: 1},
}
SUSPECT_SUB_HEADS = {
    HIGH_VS_INT: ("mel_high", "mel_int"),
    HIGH_VS_REST: ("mel_high", "rest"),
    INT_VS_REST: ("mel_int", "rest"),
}


def masked_loss(logits: Mapping[str, np.ndarray], group: str, mask: Mapping = TASK_MASK):
    """Mean cross-entropy over the tasks active for ``group``; inactive heads get zero gradient."""
    if group not in mask:
        raise InvalidInputError(f"unknown label group {group!r}; expected one of {sorted(mask)}")
    active = mask[group]
    total = 0.0
    grads = {}
    for name, z in logits.items():
        if name in active:
            loss, g = nn.softmax_cross_entropy(z[None, :], [active[name]])
            total += loss
            grads[name] = g[0] / len(active)
        else:
            grads[name] = np.zeros_like(z)
    return total / len(active), grads


class SingleHeadObjective:
    """Cross-entropy on one head; ``target_fn(bag)`` returns the class index."""

    def __init__(self, head: str, target_fn: Callable):
        self.head = head
        self.target_fn = target_fn

    def target(self, bag):
        return self.target_fn(bag)

    def loss(self, logits, target):
        loss, g = nn.softmax_cross_entropy(logits[self.head][None, :], [target])
        return loss, {self.head: g[0]}


class MaskedMultiTaskObjective:
    """Masked multi-task loss; ``group_fn(bag)`` returns ``"high"``, ``"int"`` or ``"rest"``."""

    def __init__(self, group_fn: Callable, mask: Mapping = TASK_MASK):
        self.group_fn = group_fn
        self.mask = mask

    def target(self, bag):
        return self.group_fn(bag)

    def loss(self, logits, target):
        return masked_loss(logits, target, self.mask)


@dataclass
class FitConfig:
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulate: int = 1
    class_weighted: bool = False
    seed: int = 0


@dataclass
class FitLog:
    epochs: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def evaluate_loss(model: BagModel, bags: Sequence, objective, weights=None) -> float:
    total, norm = 0.0, 0.0
    for bag in bags:
        target = objective.target(bag)
        out = bag_forward(model, bag)
        loss, _ = objective.loss(out.logits, target)
        w = 1.0 if weights is None else weights[target]
        total += w * loss
        norm += w
    return total / norm


def _class_weights(targets: Sequence) -> Dict:
    counts = Counter(targets)
    n, k = len(targets), len(counts)
    return {t: n / (k * c) for t, c in counts.items()}


def fit(model: BagModel, train_bags: Sequence, val_bags: Sequence, objective,
        config: FitConfig = FitConfig()):
    """Train with per-bag Adam updates and early stopping on validation loss.

    Returns ``(best_model, FitLog)``. The parameters with the lowest validation
    loss are kept, including the starting parameters, so ``max_epochs=0``
    returns the model unchanged.
    """
    if not train_bags or not val_bags:
        raise InvalidInputError("fit needs nonempty train and validation sets")
    targets = [objective.target(b) for b in train_bags]
    if len(set(targets)) < 2:
        raise DegenerateLabelsError(f"training labels are degenerate: only {set(targets)}")
    weights = _class_weights(targets) if config.class_weighted else None

    rng = np.random.default_rng(config.seed)
    params = model.arrays()
    state = nn.AdamState.zeros_like(params, lr=config.lr, beta1=config.beta1,
                                    beta2=config.beta2, eps=config.eps)
    train_drop = nn.DropoutSpec(model.dropout_rate, "train")
    fitlog = FitLog()
    best_model = model
    best_loss = evaluate_loss(model, val_bags, objective, weights)
    fitlog.best_val_loss = best_loss
    fitlog.epochs.append({"epoch": 0, "train_loss": float("nan"), "val_loss": best_loss})

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_bags))
        acc, n_acc, running = None, 0, 0.0
        for i in order:
            bag, target = train_bags[i], targets[i]
            out = bag_forward(model, bag, train_drop, seed=rng)
            loss, dlog = objective.loss(out.logits, target)
            grads = bag_backward(model, out, dlog)
            if weights is not None:
                w = weights[target]
                loss *= w
                grads = [g * w for g in grads]
            running += loss
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            n_acc += 1
            if n_acc == config.accumulate:
                params, state = nn.adam_step(params, [a / n_acc for a in acc], state)
                model = model.with_arrays(params)
                acc, n_acc = None, 0
        if acc is not None:
            params, state = nn.adam_step(params, [a / n_acc for a in acc], state)
            model = model.with_arrays(params)

        val_loss = evaluate_loss(model, val_bags, objective, weights)
        fitlog.epochs.append({"epoch": epoch, "train_loss": running / len(order), "val_loss": val_loss})
        log.debug("epoch %d train %.4f val %.4f", epoch, running / len(order), val_loss)
        if val_loss < best_loss:
            best_loss, best_model = val_loss, model
            fitlog.best_epoch, fitlog.best_val_loss = epoch, val_loss
        elif epoch - fitlog.best_epoch >= config.patience:
            break
    return best_model, fitlog
