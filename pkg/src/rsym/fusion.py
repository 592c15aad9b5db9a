"""Model merging operators (simple, Fisher-weighted, RegMean) with optional matching first."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .matching import MatchOptions, MatchReport, match_to_anchor
from .model import (
    SyntheticDataset,
    TransformerModel,
    capture_activations,
    check_dataset,
    fd_gradients,
    flatten,
    from_tensors,
    map_tensors,
    named_tensors,
    unflatten,
)

FUSION_KINDS = ("simple", "fisher", "regmean")


@dataclass(frozen=True)
class FusionMethod:
    """Merge operator and its hyperparameters.

    ``ridge=None`` picks ``1e-6 * trace(G) / dim`` per linear map.
    ``fisher_items=None`` uses every item of each dataset.
    """

    kind: str = "simple"
    weights: tuple[float, ...] | None = None
    fisher_items: int | None = None
    fisher_eps: float = 1e-8
    ridge: float | None = None
    off_diag: float = 0.9

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise InputError(f"unknown fusion method {self.kind!r}; expected one of {FUSION_KINDS}")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            object.__setattr__(self, "weights", w)
            if any(not math.isfinite(x) for x in w) or abs(sum(w) - 1.0) > 1e-12:
                raise InputError("fusion weights must be finite and sum to 1")
        if self.ridge is not None and not self.ridge >= 0:
            raise InputError("ridge must be >= 0")
        if not 0.0 < self.off_diag <= 1.0:
            raise InputError("off_diag scale must lie in (0, 1]")
        if self.fisher_items is not None and self.fisher_items < 1:
            raise InputError("fisher_items must be >= 1")
        if not self.fisher_eps > 0:
            raise InputError("fisher_eps must be > 0")


def _check_models(models: Sequence[TransformerModel]) -> None:
    if len(models) < 1:
        raise InputError("no models to fuse")
    config = models[0].config
    if any(m.config != config for m in models):
        raise ConfigError("models have different configurations")


def fuse_simple(models: Sequence[TransformerModel], weights: Sequence[float] | None = None) -> TransformerModel:
    """Weighted parameter average (uniform by default)."""
    _check_models(models)
    k = len(models)
    if weights is None:
        return map_tensors(lambda *ts: sum(ts) / k, *models)
    w = FusionMethod(weights=tuple(weights)).weights
    if len(w) != k:
        raise InputError(f"got {len(w)} weights for {k} models")
    return map_tensors(lambda *ts: sum(wi * t for wi, t in zip(w, ts)), *models)


@dataclass
class FisherWeights:
    values: list[np.ndarray]  # one flat non-negative vector per model
    eps: float


def diagonal_fisher(model: TransformerModel, data: SyntheticDataset, n_items: int | None = None) -> np.ndarray:
    """Mean squared per-item loss gradient (finite differences) in canonical parameter order."""
    check_dataset(model.config, data)
    if n_items is not None:
        if n_items > len(data):
            raise InputError(f"fisher_items={n_items} exceeds dataset size {len(data)}")
        data = data.head(n_items)
    grads = fd_gradients(model, data.tokens, data.labels)
    return np.mean(grads * grads, axis=0)


def fuse_fisher(
    models: Sequence[TransformerModel], datasets: Sequence[SyntheticDataset], method: FusionMethod | None = None
) -> TransformerModel:
    """Elementwise ``sum_i (F_i + eps) theta_i / sum_i (F_i + eps)``.

    The floor ``eps`` is added to every model's Fisher so parameters no model's
    loss depends on fall back to the plain average.
    """
    method = method or FusionMethod("fisher")
    _check_models(models)
    if len(datasets) != len(models):
        raise InputError("fisher fusion needs one dataset per model")
    fisher = FisherWeights([diagonal_fisher(m, d, method.fisher_items) for m, d in zip(models, datasets)], method.fisher_eps)
    num = np.zeros_like(fisher.values[0])
    den = np.zeros_like(fisher.values[0])
    for m, f in zip(models, fisher.values):
        w = f + fisher.eps
        num += w * flatten(m)
        den += w
    merged = num / den
    if not np.all(np.isfinite(merged)):
        raise NumericError("Fisher merge produced non-finite parameters")
    return unflatten(models[0].config, merged)


def _scale_off_diagonal(g: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return g
    return gamma * g + (1.0 - gamma) * np.diag(np.diag(g))


def regmean_solve(
    grams: Sequence[np.ndarray], weights: Sequence[np.ndarray], ridge: float | None = None, off_diag: float = 1.0
) -> np.ndarray:
    """Merged weight ``W`` (out x in) minimising ``sum_i ||X_i W^T - X_i W_i^T||^2``.

    ``W^T = (sum G_i + lam I)^-1 (sum G_i W_i^T + lam mean_i W_i^T)``; the ridge
    pulls towards the plain average, so identical inputs are reproduced exactly.
    """
    gs = [_scale_off_diagonal(np.asarray(g, dtype=np.float64), off_diag) for g in grams]
    dim = gs[0].shape[0]
    total = sum(gs)
    lam = 1e-6 * float(np.trace(total)) / dim if ridge is None else float(ridge)
    rhs = sum(g @ w.T for g, w in zip(gs, weights)) + lam * (sum(w.T for w in weights) / len(weights))
    lhs = total + lam * np.eye(dim)
    try:
        cond = np.linalg.cond(lhs)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"condition number {cond:.3g}")
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"RegMean Gram system is singular: {exc}") from exc
    return sol.T


def fuse_regmean(
    models: Sequence[TransformerModel], datasets: Sequence[SyntheticDataset], method: FusionMethod | None = None
) -> TransformerModel:
    """RegMean: closed-form regression merge of the attention and FFN linear maps.

    Embeddings, biases, LayerNorm parameters and the classifier head are
    simple-averaged.
    """
    method = method or FusionMethod("regmean")
    _check_models(models)
    if len(datasets) != len(models):
        raise InputError("regmean fusion needs one dataset per model")
    config = models[0].config
    records = [capture_activations(m, d) for m, d in zip(models, datasets)]
    merged = fuse_simple(models)
    tensors = dict(named_tensors(merged))

    def solve(key: str, ws: list[np.ndarray]) -> np.ndarray:
        return regmean_solve([r.grams[key] for r in records], ws, method.ridge, method.off_diag)

    for l in range(config.n_layers):
        for h in range(config.n_heads):
            for name in ("wq", "wk", "wv"):
                ws = [getattr(m.blocks[l].attn.heads[h], name) for m in models]
                tensors[f"layer.{l}.attn.head.{h}.{name}"] = solve(f"layer.{l}.attn.qkv", ws)
        # W_O acts on the concatenated head outputs as a single d_model x d_model map
        wo = solve(
            f"layer.{l}.attn.o",
            [np.concatenate([hd.wo for hd in m.blocks[l].attn.heads], axis=1) for m in models],
        )
        for h, part in enumerate(np.split(wo, config.n_heads, axis=1)):
            tensors[f"layer.{l}.attn.head.{h}.wo"] = part
        tensors[f"layer.{l}.ffn.wi"] = solve(f"layer.{l}.ffn.wi", [m.blocks[l].ffn.wi for m in models])
        tensors[f"layer.{l}.ffn.wo"] = solve(f"layer.{l}.ffn.wo", [m.blocks[l].ffn.wo for m in models])
    return from_tensors(config, tensors)


def fuse(
    models: Sequence[TransformerModel],
    datasets: Sequence[SyntheticDataset] | None = None,
    method: FusionMethod | None = None,
    match_first: bool = False,
    match_opts: MatchOptions | None = None,
    anchor_index: int = 0,
) -> tuple[TransformerModel, list[MatchReport | None]]:
    """Optionally match all models to one anchor, then merge them."""
    method = method or FusionMethod()
    _check_models(models)
    reports: list[MatchReport | None] = []
    models = list(models)
    if match_first:
        models, reports = match_to_anchor(models, anchor_index, match_opts)
    if method.kind == "simple":
        merged = fuse_simple(models, method.weights)
    else:
        if datasets is None:
            raise InputError(f"{method.kind} fusion requires datasets")
        fn = fuse_fisher if method.kind == "fisher" else fuse_regmean
        merged = fn(models, datasets, method)
    return merged, reports
