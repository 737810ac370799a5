"""A small dense network engine with explicit reverse-mode gradients.

Everything runs in float64. Arrays are plain numpy arrays; a "layer" is a weight
matrix of shape ``(out, in)``, a bias of shape ``(out,)`` and an activation name.
Forward passes accept inputs with any number of leading dimensions so the same
code serves single bags ``(n, in)`` and stacked Monte Carlo passes ``(T, n, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import InvalidCacheError, InvalidInputError, NondeterministicClosureError, ShapeError

ACTIVATIONS = ("relu", "none")
DROPOUT_MODES = ("off", "train", "mc_sample")


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weight.shape}, {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MLPParams:
    layers: List[Dense]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def init(cls, widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        """``widths`` lists every width including the input, e.g. ``(in, 1024, 1024, 512, 512)``."""
        if len(activations) != len(widths) - 1:
            raise InvalidInputError("need one activation per layer")
        layers = [
            Dense(glorot_uniform(rng, n_out, n_in), np.zeros(n_out), act)
            for n_in, n_out, act in zip(widths[:-1], widths[1:], activations)
        ]
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def arrays(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MLPParams":
        it = iter(arrays)
        return MLPParams([Dense(next(it), next(it), layer.activation) for layer in self.layers])

    def dropout_widths(self) -> List[int]:
        return [layer.n_out for layer in self.layers if layer.activation == "relu"]


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.5
    mode: str = "off"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidInputError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in DROPOUT_MODES:
            raise InvalidInputError(f"unknown dropout mode {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode != "off" and self.rate > 0.0


def draw_masks(widths: Sequence[int], lead_shape: tuple, rate: float, rng: np.random.Generator):
    """Scaled keep-masks, one per ReLU layer; surviving units are multiplied by 1/(1-rate)."""
    scale = 1.0 / (1.0 - rate)
    return [(rng.random(lead_shape + (w,)) >= rate) * scale for w in widths]


@dataclass
class ForwardCache:
    params: MLPParams
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    output_shape: tuple = field(default=())


def forward(params: MLPParams, x: np.ndarray, dropout: DropoutSpec = DropoutSpec(mode="off"),
            rng_seed=None, masks=None):
    """Run the MLP; returns ``(output, cache)``.

    Dropout masks come from ``masks`` when given, otherwise they are drawn from
    ``np.random.default_rng(rng_seed)`` (or from ``rng_seed`` itself if it is a
    Generator) in layer order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_in:
        raise ShapeError(f"input width {x.shape[-1]} != layer input {params.n_in}")
    if dropout.active and masks is None:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        masks = draw_masks(params.dropout_widths(), x.shape[:-1], dropout.rate, rng)
    mask_iter = iter(masks) if dropout.active else None

    inputs, preacts, used = [], [], []
    h = x
    for layer in params.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
            if mask_iter is not None:
                m = next(mask_iter)
                h = h * m
                used.append(m)
            else:
                used.append(None)
        else:
            h = z
            used.append(None)
    return h, ForwardCache(params, inputs, preacts, used, h.shape)


def backward(cache: ForwardCache, upstream: np.ndarray, params: Optional[MLPParams] = None):
    """Gradients for a 2-D forward pass; returns ``(param_grads, input_grad)``.

    ``param_grads`` is ordered like :meth:`MLPParams.arrays`.
    """
    if not isinstance(cache, ForwardCache):
        raise InvalidCacheError("backward needs the cache returned by forward")
    if params is not None and params is not cache.params:
        raise InvalidCacheError("cache was produced by a different parameter set")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.output_shape:
        raise InvalidCacheError(f"upstream grad shape {g.shape} != forward output {cache.output_shape}")
    if g.ndim != 2:
        raise InvalidCacheError("backward supports 2-D activations only")

    grads = []
    for layer, h_in, z, m in zip(reversed(cache.params.layers), reversed(cache.inputs),
                                 reversed(cache.preacts), reversed(cache.masks)):
        if layer.activation == "relu":
            if m is not None:
                g = g * m
            g = g * (z > 0.0)
        grads.append(g.sum(axis=0))
        grads.append(g.T @ h_in)
        g = g @ layer.weight
    grads.reverse()
    return grads, g


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets):
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets))
    n, k = logits.shape
    if targets.shape != (n,) or not np.issubdtype(targets.dtype, np.integer):
        raise InvalidInputError("targets must be one integer class index per row")
    if np.any(targets < 0) or np.any(targets >= k):
        raise InvalidInputError(f"target index out of range 0..{k - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, targets]))
    grad = softmax(logits)
    grad[rows, targets] -= 1.0
    return loss, grad / n


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, step=t)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(closure: Callable, params: Sequence[np.ndarray], tolerance: float = 1e-4,
               step: float = 1e-5, max_entries: Optional[int] = None, seed: int = 0,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure(params) -> (loss, grads)`` must be deterministic; it is evaluated
    twice up front and rejected if the two losses differ. With ``max_entries``
    a seeded sample of entries is checked instead of all of them.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    loss_a, grads = closure(params)
    loss_b, _ = closure(params)
    if loss_a != loss_b:
        raise NondeterministicClosureError(
            "grad_check requires a deterministic closure (dropout must be off)")

    index = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_entries is not None and max_entries < len(index):
        pick = np.random.default_rng(seed).choice(len(index), size=max_entries, replace=False)
        index = [index[k] for k in np.sort(pick)]

    worst_err, worst_at = 0.0, ()
    for i, j in index:
        flat = params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, _ = closure(params)
        flat[j] = orig - step
        down, _ = closure(params)
        flat[j] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grads[i].reshape(-1)[j]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst_err:
            worst_err, worst_at = err, (i, j, analytic, numeric)
    return GradCheckReport(worst_err, len(index), tolerance, worst_at)
