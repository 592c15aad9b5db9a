"""Parameter matching: move a source model inside its equivalence class towards an anchor.

FFN blocks are matched by a linear assignment over hidden units, attention
heads by a closed-form orthogonal Procrustes solution per (Q, K) and (V, O)
pair, and finally a per-head scalar rescaling is fitted by solving a quartic
optimality condition. The anchor is never modified, and every step applies a
symmetry, so the matched model computes exactly the same function as the
source.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .analysis import param_distance
from .errors import ConfigError, DimensionError, InputError, ValidationError
from .model import AttentionHeadParams, Block, FfnParams, TransformerConfig, TransformerModel
from .numerics import hungarian_max, real_roots_quartic, svd
from .symmetry import (
    HeadTransform,
    LayerTransform,
    SymmetryTransform,
    apply_ffn_permutation,
    rescale_head,
    rotate_head,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchOptions:
    enable_ffn: bool = True
    enable_attn: bool = True
    enable_rescale: bool = True
    layer_subset: frozenset[int] | None = None
    parallel_degree: int = 1

    def __post_init__(self):
        if self.parallel_degree < 1:
            raise InputError("parallel_degree must be >= 1")
        if self.layer_subset is not None:
            object.__setattr__(self, "layer_subset", frozenset(int(i) for i in self.layer_subset))

    @classmethod
    def tail(cls, n_layers: int, k: int, **kwargs) -> "MatchOptions":
        """Match only the last ``k`` layers."""
        if not 0 <= k <= n_layers:
            raise InputError(f"tail size must lie in [0, {n_layers}], got {k}")
        return cls(layer_subset=frozenset(range(n_layers - k, n_layers)), **kwargs)

    def selected_layers(self, n_layers: int) -> list[int]:
        if self.layer_subset is None:
            return list(range(n_layers))
        bad = [i for i in self.layer_subset if not 0 <= i < n_layers]
        if bad:
            raise InputError(f"layer indices {sorted(bad)} out of range for {n_layers} layers")
        return sorted(self.layer_subset)

    def to_dict(self) -> dict:
        return {
            "enable_ffn": self.enable_ffn,
            "enable_attn": self.enable_attn,
            "enable_rescale": self.enable_rescale,
            "layer_subset": None if self.layer_subset is None else sorted(self.layer_subset),
        }


@dataclass
class LayerMatchReport:
    """Objective values of one layer; ``None`` where the step was disabled."""

    layer: int
    ffn_before: float | None = None
    ffn_after: float | None = None
    attn_before: float | None = None
    attn_after: float | None = None
    rescale_before: float | None = None
    rescale_after: float | None = None
    rescale_fallbacks: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MatchReport:
    transform: SymmetryTransform
    layers: list[LayerMatchReport]
    distance_before: float
    distance_after: float
    wall_time: float
    options: MatchOptions = field(default_factory=MatchOptions)

    def to_dict(self, include_timing: bool = True) -> dict:
        """Report as plain data; execution details (time, thread count) only with ``include_timing``."""
        out = {
            "options": self.options.to_dict(),
            "distance_before": self.distance_before,
            "distance_after": self.distance_after,
            "layers": [lr.to_dict() for lr in self.layers],
            "transform": self.transform.to_dict(),
        }
        if include_timing:
            out["wall_time"] = self.wall_time
            out["parallel_degree"] = self.options.parallel_degree
        return out


# ---------------------------------------------------------------------------
# Objectives (squared distances over the parameters each step can move)


def _sq(x: np.ndarray) -> float:
    return float(np.sum(x * x))


def ffn_objective(src: FfnParams, anchor: FfnParams) -> float:
    return _sq(src.wi - anchor.wi) + _sq(src.bi - anchor.bi) + _sq(src.wo - anchor.wo)


def qk_objective(src: AttentionHeadParams, anchor: AttentionHeadParams) -> float:
    return _sq(src.wq - anchor.wq) + _sq(src.bq - anchor.bq) + _sq(src.wk - anchor.wk) + _sq(src.bk - anchor.bk)


def vo_objective(src: AttentionHeadParams, anchor: AttentionHeadParams) -> float:
    return _sq(src.wv - anchor.wv) + _sq(src.bv - anchor.bv) + _sq(src.wo - anchor.wo)


def head_objective(src: AttentionHeadParams, anchor: AttentionHeadParams) -> float:
    return qk_objective(src, anchor) + vo_objective(src, anchor)


# ---------------------------------------------------------------------------
# FFN


def _check_same_shapes(a, b, names: Iterable[str]) -> None:
    for n in names:
        if getattr(a, n).shape != getattr(b, n).shape:
            raise DimensionError(f"{n} shapes differ: {getattr(a, n).shape} vs {getattr(b, n).shape}")


def ffn_cost(src: FfnParams, anchor: FfnParams) -> np.ndarray:
    """Similarity ``C[i, j]`` between source hidden unit ``i`` and anchor unit ``j``."""
    return src.wi @ anchor.wi.T + np.outer(src.bi, anchor.bi) + src.wo.T @ anchor.wo


def match_ffn(src: FfnParams, anchor: FfnParams) -> tuple[np.ndarray, FfnParams]:
    _check_same_shapes(src, anchor, ("wi", "bi", "wo", "bo"))
    perm = hungarian_max(ffn_cost(src, anchor))
    return perm, apply_ffn_permutation(src, perm)


# ---------------------------------------------------------------------------
# Attention


def procrustes(m: np.ndarray) -> np.ndarray:
    """Orthogonal ``R`` maximising ``<R, m>_F``: ``U V^T`` from the SVD of ``m``."""
    u, _, v = svd(m)
    return u @ v.T


def qk_cross(src: AttentionHeadParams, anchor: AttentionHeadParams) -> np.ndarray:
    return src.wq @ anchor.wq.T + src.wk @ anchor.wk.T + np.outer(src.bq, anchor.bq) + np.outer(src.bk, anchor.bk)


def vo_cross(src: AttentionHeadParams, anchor: AttentionHeadParams) -> np.ndarray:
    return src.wv @ anchor.wv.T + src.wo.T @ anchor.wo + np.outer(src.bv, anchor.bv)


def match_attention_head(
    src: AttentionHeadParams, anchor: AttentionHeadParams
) -> tuple[np.ndarray, np.ndarray, AttentionHeadParams]:
    """Closed-form rotation of one source head onto the anchor head (anchor rotation fixed to I)."""
    _check_same_shapes(src, anchor, ("wq", "bq", "wk", "bk", "wv", "bv", "wo"))
    r_qk = procrustes(qk_cross(src, anchor))
    r_vo = procrustes(vo_cross(src, anchor))
    return r_qk, r_vo, rotate_head(src, r_qk, r_vo)


# ---------------------------------------------------------------------------
# Rescaling


def _scale_objective(a: float, n1: float, p: float, m1: float, k: float, const: float) -> float:
    # ||a X1 - X2||^2 + ||Y1 / a - Y2||^2 expanded
    return a * a * n1 - 2.0 * a * p + m1 / (a * a) - 2.0 * k / a + const


def optimal_scale(x1: Sequence[np.ndarray], x2: Sequence[np.ndarray], y1: Sequence[np.ndarray], y2: Sequence[np.ndarray]) -> tuple[float, bool]:
    """Scalar ``a`` minimising ``sum ||a x1 - x2||^2 + sum ||y1 / a - y2||^2``.

    Candidates are the real non-zero roots of
    ``n1 a^4 - p a^3 + k a - m1 = 0`` together with ``a = 1``. Returns the
    selected scale and whether the root finder produced no usable candidate.
    """
    n1 = sum(_sq(x) for x in x1)
    p = sum(float(np.sum(a * b)) for a, b in zip(x1, x2))
    m1 = sum(_sq(y) for y in y1)
    k = sum(float(np.sum(a * b)) for a, b in zip(y1, y2))
    const = sum(_sq(x) for x in x2) + sum(_sq(y) for y in y2)
    try:
        roots = real_roots_quartic(n1, -p, 0.0, k, -m1)
    except ValidationError:
        roots = []
    candidates = [r for r in roots if r != 0.0 and np.isfinite(r)]
    if not candidates:
        return 1.0, True
    best, best_val = 1.0, _scale_objective(1.0, n1, p, m1, k, const)
    # a = 1 is kept unless a root is better beyond rounding noise
    slack = 1e-13 * (n1 + m1 + abs(p) + abs(k) + const)
    for r in candidates:
        val = _scale_objective(r, n1, p, m1, k, const)
        if val < best_val - slack:
            best, best_val = r, val
    return float(best), False


def qk_scale(src: AttentionHeadParams, anchor: AttentionHeadParams) -> tuple[float, bool]:
    return optimal_scale((src.wq, src.bq), (anchor.wq, anchor.bq), (src.wk, src.bk), (anchor.wk, anchor.bk))


def vo_scale(src: AttentionHeadParams, anchor: AttentionHeadParams) -> tuple[float, bool]:
    return optimal_scale((src.wv, src.bv), (anchor.wv, anchor.bv), (src.wo,), (anchor.wo,))


def match_rescaling(src: AttentionHeadParams, anchor: AttentionHeadParams) -> tuple[float, float, AttentionHeadParams]:
    """Fit the Q/K and V/O scale factors of an (already rotated) source head."""
    _check_same_shapes(src, anchor, ("wq", "bq", "wk", "bk", "wv", "bv", "wo"))
    a_qk, _ = qk_scale(src, anchor)
    a_vo, _ = vo_scale(src, anchor)
    return a_qk, a_vo, rescale_head(src, a_qk, a_vo)


# ---------------------------------------------------------------------------
# Whole models


def _identity_layer(config: TransformerConfig) -> LayerTransform:
    eye = np.eye(config.d_head)
    return LayerTransform(np.arange(config.d_ff), tuple(HeadTransform(eye, eye) for _ in range(config.n_heads)))


def match_layer(
    layer: int, src: Block, anchor: Block, opts: MatchOptions
) -> tuple[Block, LayerTransform, LayerMatchReport]:
    """Match one block: FFN permutation, then per head rotation and rescaling."""
    report = LayerMatchReport(layer=layer)
    d_ff = src.ffn.wi.shape[0]
    d_head = src.attn.heads[0].wq.shape[0]

    ffn, perm = src.ffn, np.arange(d_ff)
    if opts.enable_ffn:
        report.ffn_before = ffn_objective(src.ffn, anchor.ffn)
        perm, ffn = match_ffn(src.ffn, anchor.ffn)
        report.ffn_after = ffn_objective(ffn, anchor.ffn)

    heads, transforms = [], []
    attn_before = attn_after = scale_before = scale_after = 0.0
    for head, ref in zip(src.attn.heads, anchor.attn.heads):
        r_qk = r_vo = np.eye(d_head)
        a_qk = a_vo = 1.0
        if opts.enable_attn:
            attn_before += head_objective(head, ref)
            r_qk, r_vo, head = match_attention_head(head, ref)
            attn_after += head_objective(head, ref)
        if opts.enable_rescale:
            scale_before += head_objective(head, ref)
            a_qk, qk_failed = qk_scale(head, ref)
            a_vo, vo_failed = vo_scale(head, ref)
            report.rescale_fallbacks += int(qk_failed) + int(vo_failed)
            head = rescale_head(head, a_qk, a_vo)
            scale_after += head_objective(head, ref)
        heads.append(head)
        transforms.append(HeadTransform(r_qk, r_vo, a_qk, a_vo))
    if opts.enable_attn:
        report.attn_before, report.attn_after = attn_before, attn_after
    if opts.enable_rescale:
        report.rescale_before, report.rescale_after = scale_before, scale_after
    if report.rescale_fallbacks:
        log.warning("layer %d: %d rescaling fits fell back to a = 1", layer, report.rescale_fallbacks)

    block = Block(replace(src.attn, heads=tuple(heads)), ffn)
    return block, LayerTransform(perm, tuple(transforms)), report


def match_model(
    src: TransformerModel, anchor: TransformerModel, opts: MatchOptions | None = None
) -> tuple[TransformerModel, MatchReport]:
    """Align ``src`` to ``anchor`` within the symmetry class of ``src``."""
    opts = opts or MatchOptions()
    if src.config != anchor.config:
        raise ConfigError("source and anchor configurations differ")
    config = src.config
    selected = opts.selected_layers(config.n_layers)
    start = time.perf_counter()

    def unit(l: int):
        return match_layer(l, src.blocks[l], anchor.blocks[l], opts)

    if opts.parallel_degree > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=opts.parallel_degree) as pool:
            results = list(pool.map(unit, selected))
    else:
        results = [unit(l) for l in selected]

    blocks = list(src.blocks)
    layer_transforms = [_identity_layer(config) for _ in range(config.n_layers)]
    reports = []
    for l, (block, lt, rep) in zip(selected, results):
        blocks[l] = block
        layer_transforms[l] = lt
        reports.append(rep)
    matched = replace(src, blocks=tuple(blocks))
    elapsed = time.perf_counter() - start

    report = MatchReport(
        transform=SymmetryTransform(tuple(layer_transforms)),
        layers=reports,
        distance_before=param_distance(src, anchor),
        distance_after=param_distance(matched, anchor),
        wall_time=elapsed,
        options=opts,
    )
    return matched, report


def match_to_anchor(
    models: Sequence[TransformerModel], anchor_index: int = 0, opts: MatchOptions | None = None
) -> tuple[list[TransformerModel], list[MatchReport | None]]:
    """Match every model to ``models[anchor_index]``; the anchor's report slot is ``None``."""
    if len(models) < 2:
        raise InputError("need at least two models")
    if not 0 <= anchor_index < len(models):
        raise InputError(f"anchor index {anchor_index} out of range for {len(models)} models")
    anchor = models[anchor_index]
    for m in models:
        if m.config != anchor.config:
            raise ConfigError("models have different configurations")
    out: list[TransformerModel] = []
    reports: list[MatchReport | None] = []
    for i, m in enumerate(models):
        if i == anchor_index:
            out.append(anchor)
            reports.append(None)
        else:
            matched, rep = match_model(m, anchor, opts)
            out.append(matched)
            reports.append(rep)
    return out, reports
