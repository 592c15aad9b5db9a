"""A minimal post-LN multi-head transformer classifier in numpy.

Each block is ``x -> LN(sum_h softmax(Q_h K_h^T / sqrt(d_head)) V_h W_O^h^T + b_O + x)``
followed by ``x -> LN(relu(x W_i^T + b_i) W_o^T + b_o + x)``. The token
representations are mean-pooled and fed to a linear classifier. There is no
positional encoding, dropout or masking.

Biases are stored as 1-D arrays; the row-vector conventions of the matrix
formulas apply with broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .errors import ConfigError, InputError, NumericError

LN_EPS = 1e-5
HEAD_TENSORS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo")
ATTN_TENSORS = ("bo", "ln_gain", "ln_bias")
FFN_TENSORS = ("wi", "bi", "wo", "bo", "ln_gain", "ln_bias")


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    n_classes: int
    seq_len: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if value < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {value}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )

    @classmethod
    def from_dict(cls, data: dict) -> "TransformerConfig":
        data = dict(data)
        if "d_head" not in data and "d_model" in data and "n_heads" in data:
            data["d_head"] = data["d_model"] // data["n_heads"]
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = names - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**{k: data[k] for k in names})

    def to_dict(self) -> dict:
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class AttentionHeadParams:
    wq: np.ndarray  # (d_head, d_model)
    bq: np.ndarray  # (d_head,)
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # (d_model, d_head)


@dataclass(frozen=True, eq=False)
class AttentionLayerParams:
    heads: tuple[AttentionHeadParams, ...]
    bo: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray


@dataclass(frozen=True, eq=False)
class FfnParams:
    wi: np.ndarray  # (d_ff, d_model)
    bi: np.ndarray  # (d_ff,)
    wo: np.ndarray  # (d_model, d_ff)
    bo: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray


@dataclass(frozen=True, eq=False)
class Block:
    attn: AttentionLayerParams
    ffn: FfnParams


@dataclass(frozen=True, eq=False)
class TransformerModel:
    config: TransformerConfig
    embedding: np.ndarray  # (vocab_size, d_model)
    blocks: tuple[Block, ...]
    classifier_w: np.ndarray  # (n_classes, d_model)
    classifier_b: np.ndarray  # (n_classes,)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return named_tensors(self)


# ---------------------------------------------------------------------------
# Canonical tensor layout


def tensor_shapes(config: TransformerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; fixes flattening, distance and file order."""
    d, dh, dff = config.d_model, config.d_head, config.d_ff
    head_shapes = {
        "wq": (dh, d), "bq": (dh,), "wk": (dh, d), "bk": (dh,),
        "wv": (dh, d), "bv": (dh,), "wo": (d, dh),
    }
    ffn_shapes = {
        "wi": (dff, d), "bi": (dff,), "wo": (d, dff), "bo": (d,),
        "ln_gain": (d,), "ln_bias": (d,),
    }
    out: list[tuple[str, tuple[int, ...]]] = [("embedding", (config.vocab_size, d))]
    for l in range(config.n_layers):
        for h in range(config.n_heads):
            out += [(f"layer.{l}.attn.head.{h}.{k}", head_shapes[k]) for k in HEAD_TENSORS]
        out += [(f"layer.{l}.attn.{k}", (d,)) for k in ATTN_TENSORS]
        out += [(f"layer.{l}.ffn.{k}", ffn_shapes[k]) for k in FFN_TENSORS]
    out += [("classifier.w", (config.n_classes, d)), ("classifier.b", (config.n_classes,))]
    return out


def named_tensors(model: TransformerModel) -> list[tuple[str, np.ndarray]]:
    out = [("embedding", model.embedding)]
    for l, block in enumerate(model.blocks):
        for h, head in enumerate(block.attn.heads):
            out += [(f"layer.{l}.attn.head.{h}.{k}", getattr(head, k)) for k in HEAD_TENSORS]
        out += [(f"layer.{l}.attn.{k}", getattr(block.attn, k)) for k in ATTN_TENSORS]
        out += [(f"layer.{l}.ffn.{k}", getattr(block.ffn, k)) for k in FFN_TENSORS]
    out += [("classifier.w", model.classifier_w), ("classifier.b", model.classifier_b)]
    return out


def from_tensors(config: TransformerConfig, tensors: dict[str, np.ndarray]) -> TransformerModel:
    """Build a model from a name -> array mapping, checking every shape."""
    arrays = {}
    for name, shape in tensor_shapes(config):
        if name not in tensors:
            raise ConfigError(f"missing tensor {name}")
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != shape:
            raise ConfigError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        arrays[name] = arr
    extra = set(tensors) - set(arrays)
    if extra:
        raise ConfigError(f"unexpected tensors: {sorted(extra)}")

    blocks = []
    for l in range(config.n_layers):
        heads = tuple(
            AttentionHeadParams(**{k: arrays[f"layer.{l}.attn.head.{h}.{k}"] for k in HEAD_TENSORS})
            for h in range(config.n_heads)
        )
        attn = AttentionLayerParams(heads=heads, **{k: arrays[f"layer.{l}.attn.{k}"] for k in ATTN_TENSORS})
        ffn = FfnParams(**{k: arrays[f"layer.{l}.ffn.{k}"] for k in FFN_TENSORS})
        blocks.append(Block(attn, ffn))
    return TransformerModel(
        config=config,
        embedding=arrays["embedding"],
        blocks=tuple(blocks),
        classifier_w=arrays["classifier.w"],
        classifier_b=arrays["classifier.b"],
    )


def n_params(config: TransformerConfig) -> int:
    return sum(math.prod(shape) for _, shape in tensor_shapes(config))


def flatten(model: TransformerModel) -> np.ndarray:
    return np.concatenate([t.ravel() for _, t in named_tensors(model)])


def unflatten(config: TransformerConfig, vec: np.ndarray) -> TransformerModel:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n_params(config),):
        raise ConfigError(f"parameter vector has shape {vec.shape}, expected ({n_params(config)},)")
    tensors, offset = {}, 0
    for name, shape in tensor_shapes(config):
        size = math.prod(shape)
        tensors[name] = vec[offset : offset + size].reshape(shape)
        offset += size
    return from_tensors(config, tensors)


def map_tensors(fn: Callable[..., np.ndarray], *models: TransformerModel) -> TransformerModel:
    """Apply ``fn`` tensor-wise across models sharing one config."""
    config = models[0].config
    for m in models[1:]:
        if m.config != config:
            raise ConfigError("models have different configurations")
    columns = [named_tensors(m) for m in models]
    tensors = {}
    for entries in zip(*columns):
        name = entries[0][0]
        tensors[name] = np.asarray(fn(*(t for _, t in entries)), dtype=np.float64)
    return from_tensors(config, tensors)


def models_equal(a: TransformerModel, b: TransformerModel) -> bool:
    """Bit-for-bit equality of configs and every tensor."""
    if a.config != b.config:
        return False
    return all(
        x.shape == y.shape and x.tobytes() == y.tobytes()
        for (_, x), (_, y) in zip(named_tensors(a), named_tensors(b))
    )


def random_model(config: TransformerConfig, seed: int, scale: float = 0.5) -> TransformerModel:
    """i.i.d. N(0, scale^2) weights and biases; LayerNorm gain 1 and bias 0."""
    if not isinstance(config, TransformerConfig):
        raise ConfigError("config must be a TransformerConfig")
    if not math.isfinite(scale) or scale < 0:
        raise ConfigError(f"scale must be finite and non-negative, got {scale}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config):
        if name.endswith("ln_gain"):
            tensors[name] = np.ones(shape)
        elif name.endswith("ln_bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = scale * rng.standard_normal(shape)
    return from_tensors(config, tensors)


def zero_model(config: TransformerConfig) -> TransformerModel:
    return random_model(config, seed=0, scale=0.0)


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class Trace:
    """Intermediate activations of a batched forward pass, one entry per layer."""

    attn_input: list[np.ndarray] = field(default_factory=list)  # (B, n, d_model)
    attn_probs: list[np.ndarray] = field(default_factory=list)  # (B, H, n, n)
    head_concat: list[np.ndarray] = field(default_factory=list)  # (B, n, d_model)
    ffn_input: list[np.ndarray] = field(default_factory=list)  # (B, n, d_model)
    ffn_hidden: list[np.ndarray] = field(default_factory=list)  # (B, n, d_ff)
    pooled: np.ndarray | None = None  # (B, d_model)


def check_tokens(config: TransformerConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != config.seq_len:
        raise InputError(f"token sequences must have length {config.seq_len}, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise InputError("tokens must be integers")
    if arr.size and (arr.min() < 0 or arr.max() >= config.vocab_size):
        raise InputError(f"token ids must lie in [0, {config.vocab_size})")
    return arr.astype(np.int64, copy=False)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = np.mean(centred * centred, axis=-1, keepdims=True)
    return centred / np.sqrt(var + LN_EPS) * gain + bias


def attention_layer(attn: AttentionLayerParams, x: np.ndarray, trace: Trace | None = None) -> np.ndarray:
    d_head = attn.heads[0].wq.shape[0]
    mixed = np.zeros_like(x)
    probs, outs = [], []
    for head in attn.heads:
        q = x @ head.wq.T + head.bq
        k = x @ head.wk.T + head.bk
        v = x @ head.wv.T + head.bv
        p = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(d_head))
        o = p @ v
        mixed = mixed + o @ head.wo.T
        if trace is not None:
            probs.append(p)
            outs.append(o)
    if trace is not None:
        trace.attn_input.append(x)
        trace.attn_probs.append(np.stack(probs, axis=1))
        trace.head_concat.append(np.concatenate(outs, axis=-1))
    return layer_norm(mixed + attn.bo + x, attn.ln_gain, attn.ln_bias)


def ffn_layer(ffn: FfnParams, x: np.ndarray, trace: Trace | None = None) -> np.ndarray:
    hidden = np.maximum(x @ ffn.wi.T + ffn.bi, 0.0)
    if trace is not None:
        trace.ffn_input.append(x)
        trace.ffn_hidden.append(hidden)
    return layer_norm(hidden @ ffn.wo.T + ffn.bo + x, ffn.ln_gain, ffn.ln_bias)


def forward_batch(model: TransformerModel, tokens, trace: Trace | None = None) -> np.ndarray:
    """Logits of shape (B, n_classes) for a (B, seq_len) batch of token ids."""
    tokens = check_tokens(model.config, tokens)
    x = model.embedding[tokens]
    for block in model.blocks:
        x = attention_layer(block.attn, x, trace)
        x = ffn_layer(block.ffn, x, trace)
    pooled = x.mean(axis=1)
    if trace is not None:
        trace.pooled = pooled
    return pooled @ model.classifier_w.T + model.classifier_b


def forward(model: TransformerModel, tokens, trace: bool = False):
    """Logits for one sequence; with ``trace=True`` also return the activation :class:`Trace`."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise InputError("forward expects a single token sequence")
    t = Trace() if trace else None
    logits = forward_batch(model, tokens[None, :], t)[0]
    return (logits, t) if trace else logits


# ---------------------------------------------------------------------------
# Data and loss


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    tokens: np.ndarray  # (N, seq_len) int64
    labels: np.ndarray  # (N,) int64
    seed: int = 0

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def items(self) -> list[tuple[np.ndarray, int]]:
        return [(self.tokens[i], int(self.labels[i])) for i in range(len(self))]

    def head(self, n: int) -> "SyntheticDataset":
        return SyntheticDataset(self.tokens[:n], self.labels[:n], self.seed)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticDataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
        )


def check_dataset(config: TransformerConfig, data: SyntheticDataset) -> None:
    if len(data) == 0:
        raise InputError("dataset is empty")
    check_tokens(config, data.tokens)
    if data.labels.min() < 0 or data.labels.max() >= config.n_classes:
        raise InputError(f"labels must lie in [0, {config.n_classes})")


def gen_synthetic(config: TransformerConfig, teacher: TransformerModel, n_items: int, seed: int) -> SyntheticDataset:
    """Uniform random token sequences labelled by the teacher's argmax class."""
    if n_items < 1:
        raise InputError("n_items must be >= 1")
    if teacher.config != config:
        raise ConfigError("teacher config differs from requested config")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, config.vocab_size, size=(n_items, config.seq_len), dtype=np.int64)
    labels = np.argmax(forward_batch(teacher, tokens), axis=1).astype(np.int64)
    return SyntheticDataset(tokens, labels, seed)


def random_tokens(config: TransformerConfig, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, config.vocab_size, size=(n, config.seq_len), dtype=np.int64)


def per_item_losses(model: TransformerModel, tokens, labels) -> np.ndarray:
    logits = forward_batch(model, tokens)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return logz - z[np.arange(len(labels)), labels]


def loss(model: TransformerModel, data: SyntheticDataset) -> float:
    """Mean cross-entropy of the model on the dataset."""
    check_dataset(model.config, data)
    return float(np.mean(per_item_losses(model, data.tokens, data.labels)))


def accuracy(model: TransformerModel, data: SyntheticDataset) -> float:
    check_dataset(model.config, data)
    pred = np.argmax(forward_batch(model, data.tokens), axis=1)
    return float(np.mean(pred == data.labels))


# ---------------------------------------------------------------------------
# Activation statistics and gradients


@dataclass
class ActivationRecord:
    """Accumulated input Gram matrices ``X^T X`` of every linear map.

    Keys: ``layer.{l}.attn.qkv`` (shared input of all per-head Q/K/V maps),
    ``layer.{l}.attn.o`` (concatenated head outputs feeding W_O),
    ``layer.{l}.ffn.wi``, ``layer.{l}.ffn.wo`` and ``classifier``.
    """

    grams: dict[str, np.ndarray]
    counts: dict[str, int]


def _gram(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    return flat.T @ flat


def capture_activations(model: TransformerModel, data: SyntheticDataset) -> ActivationRecord:
    check_dataset(model.config, data)
    trace = Trace()
    forward_batch(model, data.tokens, trace)
    grams, counts = {}, {}

    def put(key: str, x: np.ndarray) -> None:
        grams[key] = _gram(x)
        counts[key] = int(np.prod(x.shape[:-1]))

    for l in range(model.config.n_layers):
        put(f"layer.{l}.attn.qkv", trace.attn_input[l])
        put(f"layer.{l}.attn.o", trace.head_concat[l])
        put(f"layer.{l}.ffn.wi", trace.ffn_input[l])
        put(f"layer.{l}.ffn.wo", trace.ffn_hidden[l])
    put("classifier", trace.pooled)
    return ActivationRecord(grams, counts)


def default_fd_steps(theta: np.ndarray) -> np.ndarray:
    return 1e-4 * (1.0 + np.abs(theta))


def fd_gradients(model: TransformerModel, tokens, labels, step: float | None = None) -> np.ndarray:
    """Central-difference gradients of each item's loss, shape (B, n_params).

    ``step=None`` uses ``1e-4 * (1 + |theta_i|)`` per coordinate.
    """
    tokens = check_tokens(model.config, tokens)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if step is not None and not step > 0:
        raise InputError("finite-difference step must be positive")
    config = model.config
    theta = flatten(model)
    steps = default_fd_steps(theta) if step is None else np.full_like(theta, float(step))
    grads = np.empty((tokens.shape[0], theta.shape[0]))
    work = theta.copy()
    for i in range(theta.shape[0]):
        h = steps[i]
        work[i] = theta[i] + h
        up = per_item_losses(unflatten(config, work), tokens, labels)
        work[i] = theta[i] - h
        down = per_item_losses(unflatten(config, work), tokens, labels)
        work[i] = theta[i]
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
            raise NumericError(f"non-finite loss while differentiating parameter {i}")
        grads[:, i] = (up - down) / (2.0 * h)
    return grads


def fd_gradient(model: TransformerModel, item: tuple, step: float | None = None) -> np.ndarray:
    """Flat central-difference gradient of one ``(tokens, label)`` item's loss."""
    tokens, label = item
    return fd_gradients(model, np.asarray(tokens)[None, :], [label], step)[0]

