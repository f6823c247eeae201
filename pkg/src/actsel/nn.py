"""Dense networks with analytic gradients, the two loss families, and AdamW.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``x @ W + b``. Everything is float64.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

ACTIVATIONS = ("tanh", "relu")
HEADS = ("classifier", "encoder")
LOSS_KINDS = ("xent", "contrastive", "act_dot")


class ConfigurationError(ValueError):
    """Model or batch shapes that cannot work together."""


class NumericError(FloatingPointError):
    """Non-finite values reached a loss."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one dense network.

    ``layer_widths`` holds the input width followed by the hidden widths; the
    head adds a final linear map to ``out_dim`` (number of classes for a
    classifier, embedding width for an encoder).
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    head: str = "classifier"
    out_dim: int = 10

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 1:
            raise ConfigurationError("layer_widths needs at least the input width")
        if any(w <= 0 for w in widths) or self.out_dim <= 0:
            raise ConfigurationError(f"widths must be positive, got {widths} -> {self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.head == "classifier" and self.out_dim < 2:
            raise ConfigurationError("a classifier needs at least 2 classes")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.layer_widths + (self.out_dim,)

    def inference_flops(self) -> int:
        """Multiply-add FLOPs of one forward pass for a single example."""
        d = self.dims
        return sum(2 * d[i] * d[i + 1] for i in range(len(d) - 1))

    def scaled(self, factor: float) -> "ModelSpec":
        """Same architecture with every hidden width multiplied by ``factor``."""
        hidden = tuple(max(1, int(round(w * factor))) for w in self.layer_widths[1:])
        return ModelSpec((self.input_dim,) + hidden, self.activation, self.head, self.out_dim)

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "head": self.head,
            "out_dim": self.out_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", "tanh"),
                   d.get("head", "classifier"), int(d.get("out_dim", 10)))


@dataclass
class ModelParams:
    spec: ModelSpec
    weights: list
    biases: list

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def replace(self, arrays) -> "ModelParams":
        arrays = list(arrays)
        return ModelParams(self.spec, arrays[0::2], arrays[1::2])

    def copy(self) -> "ModelParams":
        return self.replace([a.copy() for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec) -> "ModelParams":
        return self.replace(_split_like(self.arrays(), vec))

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def inference_flops(self) -> int:
        return self.spec.inference_flops()

    def spec_dict(self) -> dict:
        return {"kind": "net", "spec": self.spec.to_dict()}


@dataclass
class TwoTowerParams:
    """Image and text encoders trained jointly with a contrastive loss."""

    image: ModelParams
    text: ModelParams

    def arrays(self) -> list:
        return self.image.arrays() + self.text.arrays()

    def replace(self, arrays) -> "TwoTowerParams":
        arrays = list(arrays)
        k = len(self.image.arrays())
        return TwoTowerParams(self.image.replace(arrays[:k]), self.text.replace(arrays[k:]))

    def copy(self) -> "TwoTowerParams":
        return TwoTowerParams(self.image.copy(), self.text.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec) -> "TwoTowerParams":
        return self.replace(_split_like(self.arrays(), vec))

    @property
    def num_params(self) -> int:
        return self.image.num_params + self.text.num_params

    def inference_flops(self) -> int:
        return self.image.spec.inference_flops() + self.text.spec.inference_flops()

    def spec_dict(self) -> dict:
        return {"kind": "two_tower", "image": self.image.spec.to_dict(),
                "text": self.text.spec.to_dict()}


def _split_like(arrays, vec):
    vec = np.asarray(vec, dtype=np.float64)
    out, i = [], 0
    for a in arrays:
        out.append(vec[i:i + a.size].reshape(a.shape).copy())
        i += a.size
    if i != vec.size:
        raise ConfigurationError(f"flat vector has {vec.size} entries, expected {i}")
    return out


def spec_digest(params) -> str:
    blob = json.dumps(params.spec_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def same_architecture(a, b) -> bool:
    return a.spec_dict() == b.spec_dict()


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    weights, biases = [], []
    d = spec.dims
    for i in range(len(d) - 1):
        bound = 1.0 / math.sqrt(d[i])
        weights.append(rng.uniform(-bound, bound, size=(d[i], d[i + 1])))
        biases.append(np.zeros(d[i + 1]))
    return ModelParams(spec, weights, biases)


def init_two_tower(image_spec: ModelSpec, text_spec: ModelSpec, rng) -> TwoTowerParams:
    if image_spec.head != "encoder" or text_spec.head != "encoder":
        raise ConfigurationError("two-tower models need encoder heads")
    if image_spec.out_dim != text_spec.out_dim:
        raise ConfigurationError("towers must share the embedding width")
    return TwoTowerParams(init_params(image_spec, rng), init_params(text_spec, rng))


@dataclass(frozen=True)
class TwoTowerSpec:
    image: ModelSpec
    text: ModelSpec

    def __post_init__(self):
        if self.image.head != "encoder" or self.text.head != "encoder":
            raise ConfigurationError("two-tower models need encoder heads")
        if self.image.out_dim != self.text.out_dim:
            raise ConfigurationError("towers must share the embedding width")

    def inference_flops(self) -> int:
        return self.image.inference_flops() + self.text.inference_flops()

    def scaled(self, factor: float) -> "TwoTowerSpec":
        return TwoTowerSpec(self.image.scaled(factor), self.text.scaled(factor))

    def to_dict(self) -> dict:
        return {"image": self.image.to_dict(), "text": self.text.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TwoTowerSpec":
        return cls(ModelSpec.from_dict(d["image"]), ModelSpec.from_dict(d["text"]))


def init_model(spec, rng):
    """Fresh parameters for a :class:`ModelSpec` or :class:`TwoTowerSpec`."""
    if isinstance(spec, TwoTowerSpec):
        return init_two_tower(spec.image, spec.text, rng)
    return init_params(spec, rng)


def params_from_spec_dict(d: dict, arrays=None):
    """Zero-filled (or ``arrays``-filled) parameters for a ``spec_dict()`` payload."""
    if d["kind"] == "two_tower":
        spec = TwoTowerSpec(ModelSpec.from_dict(d["image"]), ModelSpec.from_dict(d["text"]))
        template = init_two_tower(spec.image, spec.text, np.random.default_rng(0))
    else:
        template = init_params(ModelSpec.from_dict(d["spec"]), np.random.default_rng(0))
    template = zeros_like(template)
    return template if arrays is None else template.replace(arrays)


def zeros_like(params):
    return params.replace([np.zeros_like(a) for a in params.arrays()])


# ---------------------------------------------------------------- forward

def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(np.float64)


def _forward(params: ModelParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ConfigurationError(
            f"batch of shape {x.shape} does not fit input width {params.spec.input_dim}")
    inputs, pre = [], []
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = z if i == last else _act(params.spec.activation, z)
    cache = {"inputs": inputs, "pre": pre}
    if params.spec.head == "encoder":
        norm = np.sqrt((a * a).sum(axis=1, keepdims=True))
        norm = np.maximum(norm, 1e-12)
        cache["norm"] = norm
        a = a / norm
    return a, cache


def forward(params, x):
    """Logits for a classifier, unit-norm embeddings for an encoder."""
    return _forward(params, x)[0]


def _backprop(params: ModelParams, cache, out, d_out, want_deltas=False):
    """Push ``d_out`` (gradient w.r.t. the network output) back to the weights."""
    if params.spec.head == "encoder":
        # d(h/|h|) = (d - z (z.d)) / |h|
        d_out = (d_out - out * (out * d_out).sum(axis=1, keepdims=True)) / cache["norm"]
    grads_w, grads_b, deltas = [], [], []
    delta = d_out
    n_layers = len(params.weights)
    for i in reversed(range(n_layers)):
        a_in = cache["inputs"][i]
        grads_w.append(a_in.T @ delta)
        grads_b.append(delta.sum(axis=0))
        if want_deltas:
            deltas.append(delta)
        if i > 0:
            da = delta @ params.weights[i].T
            a_prev = a_in
            delta = da * _act_grad(params.spec.activation, cache["pre"][i - 1], a_prev)
    grads_w.reverse()
    grads_b.reverse()
    deltas.reverse()
    return ModelParams(params.spec, grads_w, grads_b), deltas


# ---------------------------------------------------------------- losses

def cross_entropy_per_example(logits, labels, smoothing: float = 0.0):
    """Softmax cross-entropy per row, target mixed with uniform by ``smoothing``."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return kernels.softmax_xent_rows(logits, labels, float(smoothing))[0]


def _softmax(s, axis):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _logsumexp(s, axis):
    m = s.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def contrastive_losses(z_im, z_txt, temperature: float = 1.0):
    """Per-example symmetric InfoNCE and per-example actor (negative dot) loss.

    Returns ``(learn, act)`` with ``learn[i] = l_im,txt[i] + l_txt,im[i]`` and
    ``act[i] = -z_im[i] . z_txt[i]``.
    """
    z_im = np.asarray(z_im, dtype=np.float64)
    z_txt = np.asarray(z_txt, dtype=np.float64)
    if z_im.shape != z_txt.shape:
        raise ConfigurationError(f"embedding shapes differ: {z_im.shape} vs {z_txt.shape}")
    act = -(z_im * z_txt).sum(axis=1)
    if z_im.shape[0] < 2:
        raise ConfigurationError("contrastive loss needs at least 2 pairs in the batch")
    s = (z_im @ z_txt.T) / temperature
    diag = np.diag(s)
    learn = (_logsumexp(s, 1) - diag) + (_logsumexp(s, 0) - diag)
    return learn, act


def actor_dot_loss(z_im, z_txt):
    return -(np.asarray(z_im) * np.asarray(z_txt)).sum(axis=1)


# ---------------------------------------------------------------- gradients

def _is_two_tower(params):
    return isinstance(params, TwoTowerParams)


def _check_kind(params, loss_kind):
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    if (loss_kind == "xent") == _is_two_tower(params):
        raise ConfigurationError(f"loss {loss_kind!r} does not fit {type(params).__name__}")


def per_example_losses(params, x, y, loss_kind, smoothing=0.0, temperature=1.0):
    _check_kind(params, loss_kind)
    if loss_kind == "xent":
        return cross_entropy_per_example(forward(params, x), y, smoothing)
    za, zb = forward(params.image, x), forward(params.text, y)
    if loss_kind == "act_dot":
        return actor_dot_loss(za, zb)
    return contrastive_losses(za, zb, temperature)[0]


def loss_and_grad(params, x, y, loss_kind, smoothing=0.0, temperature=1.0):
    """Mean loss over the batch and its exact gradient (same type as ``params``)."""
    _check_kind(params, loss_kind)
    if loss_kind == "xent":
        logits, cache = _forward(params, x)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        losses, dlogits = kernels.softmax_xent_rows(
            np.ascontiguousarray(logits), np.ascontiguousarray(y, dtype=np.int64), float(smoothing))
        n = logits.shape[0]
        grads, _ = _backprop(params, cache, logits, dlogits / n)
        return float(losses.mean()), grads
    za, ca = _forward(params.image, x)
    zb, cb = _forward(params.text, y)
    n = za.shape[0]
    if loss_kind == "act_dot":
        loss = float(actor_dot_loss(za, zb).mean())
        dza, dzb = -zb / n, -za / n
    else:
        if n < 2:
            raise ConfigurationError("contrastive loss needs at least 2 pairs in the batch")
        s = (za @ zb.T) / temperature
        diag = np.diag(s)
        loss = float(((_logsumexp(s, 1) - diag) + (_logsumexp(s, 0) - diag)).mean())
        ds = (_softmax(s, 1) + _softmax(s, 0) - 2.0 * np.eye(n)) / (n * temperature)
        dza, dzb = ds @ zb, ds.T @ za
    ga, _ = _backprop(params.image, ca, za, dza)
    gb, _ = _backprop(params.text, cb, zb, dzb)
    return loss, TwoTowerParams(ga, gb)


def backward(params, x, y, loss_kind, smoothing=0.0, temperature=1.0):
    """Gradient of the mean loss."""
    return loss_and_grad(params, x, y, loss_kind, smoothing, temperature)[1]


def _net_example_deltas(params, cache, out, d_out):
    _, deltas = _backprop(params, cache, out, d_out, want_deltas=True)
    return deltas


def per_example_sq_grad_norms(params, x, y, loss_kind, smoothing=0.0):
    """Squared norm of each example's own loss gradient.

    Uses ``|d vec(a delta^T)|^2 = |a|^2 |delta|^2`` per layer, so no per-example
    gradient is materialised.
    """
    _check_kind(params, loss_kind)
    if loss_kind == "contrastive":
        raise ConfigurationError("contrastive loss does not decompose per example")

    def net_norms(p, cache, out, d_out):
        deltas = _net_example_deltas(p, cache, out, d_out)
        total = np.zeros(out.shape[0])
        for a_in, delta in zip(cache["inputs"], deltas):
            total += (delta * delta).sum(axis=1) * ((a_in * a_in).sum(axis=1) + 1.0)
        return total

    if loss_kind == "xent":
        logits, cache = _forward(params, x)
        _, dlogits = kernels.softmax_xent_rows(
            np.ascontiguousarray(logits), np.ascontiguousarray(y, dtype=np.int64), float(smoothing))
        return net_norms(params, cache, logits, dlogits)
    za, ca = _forward(params.image, x)
    zb, cb = _forward(params.text, y)
    return net_norms(params.image, ca, za, -zb) + net_norms(params.text, cb, zb, -za)


def per_example_grads(params, x, y, loss_kind, smoothing=0.0):
    """Matrix of flattened per-example gradients, shape ``(n, num_params)``."""
    _check_kind(params, loss_kind)
    if loss_kind == "contrastive":
        raise ConfigurationError("contrastive loss does not decompose per example")

    def net_grads(p, cache, out, d_out):
        deltas = _net_example_deltas(p, cache, out, d_out)
        cols = []
        for a_in, delta in zip(cache["inputs"], deltas):
            cols.append(np.einsum("ni,no->nio", a_in, delta).reshape(a_in.shape[0], -1))
            cols.append(delta)
        return np.concatenate(cols, axis=1)

    if loss_kind == "xent":
        logits, cache = _forward(params, x)
        _, dlogits = kernels.softmax_xent_rows(
            np.ascontiguousarray(logits), np.ascontiguousarray(y, dtype=np.int64), float(smoothing))
        return net_grads(params, cache, logits, dlogits)
    za, ca = _forward(params.image, x)
    zb, cb = _forward(params.text, y)
    return np.concatenate([net_grads(params.image, ca, za, -zb),
                           net_grads(params.text, cb, zb, -za)], axis=1)


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.arrays()))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    return grads.replace([g * (max_norm / norm) for g in grads.arrays()])


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    base_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 1000
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params, base_lr=1e-3, total_steps=1000, warmup_steps=None,
                   weight_decay=1e-3) -> OptimizerState:
    if warmup_steps is None:
        warmup_steps = max(1, total_steps // 100)
    zeros = [np.zeros_like(a) for a in params.arrays()]
    return OptimizerState(zeros, [z.copy() for z in zeros], 0, base_lr, int(warmup_steps),
                          int(total_steps), weight_decay)


def schedule(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to 1, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_step(params, grads, state: OptimizerState, lr_scale: float = 1.0):
    """One AdamW update. Returns ``(new_params, new_state)``; inputs are untouched."""
    arrays, g_arrays = params.arrays(), grads.arrays()
    if len(arrays) != len(state.m) or any(a.shape != m.shape for a, m in zip(arrays, state.m)):
        raise ConfigurationError("optimizer state does not match parameters")
    lr = schedule(state.step, state.warmup_steps, state.total_steps) * state.base_lr * lr_scale
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, g_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        new_p.append(p - lr * update)
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(new_m, new_v, t, state.base_lr, state.warmup_steps,
                               state.total_steps, state.weight_decay, state.beta1,
                               state.beta2, state.eps)
    return params.replace(new_p), new_state
