"""Function-preserving reparameterisations of the transformer.

Three families act on disjoint parameter groups of every block:

* a permutation of the FFN hidden units (rows of ``wi``/``bi``, columns of ``wo``);
* per attention head, an orthogonal ``r_qk`` acting on the query/key subspace
  and an orthogonal ``r_vo`` acting on the value/output subspace;
* per head, scalars ``a_qk`` (Q scaled by ``a``, K by ``1/a``) and ``a_vo``
  (V scaled by ``a``, O by ``1/a``).

Orthogonal here means the full group ``R R^T = I``; reflections are allowed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .model import AttentionHeadParams, AttentionLayerParams, Block, FfnParams, TransformerConfig, TransformerModel
from .numerics import is_orthogonal, is_permutation, random_orthogonal

ORTHO_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class HeadTransform:
    r_qk: np.ndarray
    r_vo: np.ndarray
    a_qk: float = 1.0
    a_vo: float = 1.0


@dataclass(frozen=True, eq=False)
class LayerTransform:
    ffn_perm: np.ndarray
    heads: tuple[HeadTransform, ...]


@dataclass(frozen=True, eq=False)
class SymmetryTransform:
    """One member of the equivalence class, given layer by layer.

    ``ffn_perm[i] = j`` sends hidden unit ``i`` to position ``j``. For every
    head, ``W_Q -> a_qk r_qk^T W_Q`` and ``W_K -> r_qk^T W_K / a_qk`` (biases
    alike), ``W_V -> a_vo r_vo^T W_V`` and ``W_O -> W_O r_vo / a_vo``.
    """

    layers: tuple[LayerTransform, ...]

    def compose(self, other: "SymmetryTransform") -> "SymmetryTransform":
        """Transform equal to applying ``self`` first and then ``other``."""
        if len(self.layers) != len(other.layers):
            raise DimensionError("transforms cover different numbers of layers")
        layers = []
        for first, second in zip(self.layers, other.layers):
            heads = tuple(
                HeadTransform(
                    r_qk=h1.r_qk @ h2.r_qk,
                    r_vo=h1.r_vo @ h2.r_vo,
                    a_qk=h1.a_qk * h2.a_qk,
                    a_vo=h1.a_vo * h2.a_vo,
                )
                for h1, h2 in zip(first.heads, second.heads)
            )
            layers.append(LayerTransform(ffn_perm=second.ffn_perm[first.ffn_perm], heads=heads))
        return SymmetryTransform(tuple(layers))

    def inverse(self) -> "SymmetryTransform":
        layers = []
        for lt in self.layers:
            heads = tuple(
                HeadTransform(r_qk=h.r_qk.T.copy(), r_vo=h.r_vo.T.copy(), a_qk=1.0 / h.a_qk, a_vo=1.0 / h.a_vo)
                for h in lt.heads
            )
            layers.append(LayerTransform(ffn_perm=np.argsort(lt.ffn_perm), heads=heads))
        return SymmetryTransform(tuple(layers))

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "ffn_perm": [int(i) for i in lt.ffn_perm],
                    "heads": [
                        {
                            "r_qk": h.r_qk.tolist(),
                            "r_vo": h.r_vo.tolist(),
                            "a_qk": float(h.a_qk),
                            "a_vo": float(h.a_vo),
                        }
                        for h in lt.heads
                    ],
                }
                for lt in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SymmetryTransform":
        return cls(
            tuple(
                LayerTransform(
                    ffn_perm=np.asarray(lt["ffn_perm"], dtype=np.intp),
                    heads=tuple(
                        HeadTransform(
                            r_qk=np.asarray(h["r_qk"], dtype=np.float64),
                            r_vo=np.asarray(h["r_vo"], dtype=np.float64),
                            a_qk=float(h["a_qk"]),
                            a_vo=float(h["a_vo"]),
                        )
                        for h in lt["heads"]
                    ),
                )
                for lt in data["layers"]
            )
        )


def identity_transform(config: TransformerConfig) -> SymmetryTransform:
    eye = np.eye(config.d_head)
    head = HeadTransform(eye, eye)
    layer = LayerTransform(np.arange(config.d_ff), tuple(head for _ in range(config.n_heads)))
    return SymmetryTransform(tuple(layer for _ in range(config.n_layers)))


def apply_ffn_permutation(ffn: FfnParams, perm) -> FfnParams:
    """``W_i -> P^T W_i``, ``b_i -> b_i P``, ``W_o -> W_o P`` with ``P[i, perm[i]] = 1``."""
    perm = np.asarray(perm)
    d_ff = ffn.wi.shape[0]
    if not is_permutation(perm, d_ff):
        raise DimensionError(f"expected a permutation of {d_ff} hidden units")
    src = np.argsort(perm)  # position j receives unit src[j]
    return replace(ffn, wi=ffn.wi[src], bi=ffn.bi[src], wo=ffn.wo[:, src])


def _check_rotations(rs: Sequence[np.ndarray], n_heads: int, d_head: int, what: str) -> None:
    if len(rs) != n_heads:
        raise DimensionError(f"expected {n_heads} {what} matrices, got {len(rs)}")
    for r in rs:
        if np.shape(r) != (d_head, d_head):
            raise DimensionError(f"{what} must be {d_head}x{d_head}, got {np.shape(r)}")
        if not is_orthogonal(r, ORTHO_TOL):
            raise ValidationError(f"{what} is not orthogonal within {ORTHO_TOL}")


def rotate_head(head: AttentionHeadParams, r_qk: np.ndarray, r_vo: np.ndarray) -> AttentionHeadParams:
    return AttentionHeadParams(
        wq=r_qk.T @ head.wq,
        bq=head.bq @ r_qk,
        wk=r_qk.T @ head.wk,
        bk=head.bk @ r_qk,
        wv=r_vo.T @ head.wv,
        bv=head.bv @ r_vo,
        wo=head.wo @ r_vo,
    )


def rescale_head(head: AttentionHeadParams, a_qk: float, a_vo: float) -> AttentionHeadParams:
    return AttentionHeadParams(
        wq=a_qk * head.wq,
        bq=a_qk * head.bq,
        wk=head.wk / a_qk,
        bk=head.bk / a_qk,
        wv=a_vo * head.wv,
        bv=a_vo * head.bv,
        wo=head.wo / a_vo,
    )


def apply_attention_rotation(attn: AttentionLayerParams, r_qk: Sequence[np.ndarray], r_vo: Sequence[np.ndarray]) -> AttentionLayerParams:
    n_heads = len(attn.heads)
    d_head = attn.heads[0].wq.shape[0]
    _check_rotations(r_qk, n_heads, d_head, "r_qk")
    _check_rotations(r_vo, n_heads, d_head, "r_vo")
    heads = tuple(rotate_head(h, np.asarray(rq, float), np.asarray(rv, float)) for h, rq, rv in zip(attn.heads, r_qk, r_vo))
    return replace(attn, heads=heads)


def apply_rescaling(attn: AttentionLayerParams, a_qk: Sequence[float], a_vo: Sequence[float]) -> AttentionLayerParams:
    n_heads = len(attn.heads)
    if len(a_qk) != n_heads or len(a_vo) != n_heads:
        raise DimensionError(f"expected {n_heads} scale factors per pair")
    for a in (*a_qk, *a_vo):
        if not np.isfinite(a) or a == 0:
            raise ValidationError(f"scale factors must be finite and non-zero, got {a}")
    heads = tuple(rescale_head(h, float(aq), float(av)) for h, aq, av in zip(attn.heads, a_qk, a_vo))
    return replace(attn, heads=heads)


def random_symmetry(config: TransformerConfig, seed: int) -> SymmetryTransform:
    """Uniform permutations, Haar orthogonal matrices and log-uniform scales in [0.5, 2]."""
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(config.n_layers):
        perm = rng.permutation(config.d_ff).astype(np.intp)
        heads = []
        for _ in range(config.n_heads):
            r_qk = random_orthogonal(config.d_head, int(rng.integers(2**63)))
            r_vo = random_orthogonal(config.d_head, int(rng.integers(2**63)))
            a_qk, a_vo = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=2))
            heads.append(HeadTransform(r_qk, r_vo, float(a_qk), float(a_vo)))
        layers.append(LayerTransform(perm, tuple(heads)))
    return SymmetryTransform(tuple(layers))


def _check_transform(config: TransformerConfig, t: SymmetryTransform) -> None:
    if len(t.layers) != config.n_layers:
        raise DimensionError(f"transform has {len(t.layers)} layers, model has {config.n_layers}")
    for lt in t.layers:
        if len(lt.heads) != config.n_heads:
            raise DimensionError(f"transform has {len(lt.heads)} heads per layer, model has {config.n_heads}")
        if np.shape(lt.ffn_perm) != (config.d_ff,):
            raise DimensionError(f"FFN permutation must have length {config.d_ff}")


def transform_block(block: Block, lt: LayerTransform) -> Block:
    """Permutation, then rotation, then rescaling of one block."""
    ffn = apply_ffn_permutation(block.ffn, lt.ffn_perm)
    attn = apply_attention_rotation(block.attn, [h.r_qk for h in lt.heads], [h.r_vo for h in lt.heads])
    attn = apply_rescaling(attn, [h.a_qk for h in lt.heads], [h.a_vo for h in lt.heads])
    return Block(attn, ffn)


def apply_model_symmetry(model: TransformerModel, t: SymmetryTransform, parallel: int = 1) -> TransformerModel:
    """Apply ``t`` to every block; embedding, classifier, ``b_O`` and LayerNorm stay as they are."""
    _check_transform(model.config, t)
    pairs = list(zip(model.blocks, t.layers))
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            blocks = list(pool.map(lambda bt: transform_block(*bt), pairs))
    else:
        blocks = [transform_block(b, lt) for b, lt in pairs]
    return replace(model, blocks=tuple(blocks))
