"""Parameter distances, loss interpolation curves and functional-equivalence checks."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .model import SyntheticDataset, TransformerModel, flatten, forward_batch, loss, random_tokens, unflatten


def _same_config(a: TransformerModel, b: TransformerModel) -> None:
    if a.config != b.config:
        raise ConfigError("models have different configurations")


def param_distance(a: TransformerModel, b: TransformerModel) -> float:
    """L2 norm of the difference of the canonical flattened parameter vectors."""
    _same_config(a, b)
    return float(np.linalg.norm(flatten(a) - flatten(b)))


def interpolate(a: TransformerModel, b: TransformerModel, alpha: float) -> TransformerModel:
    """``alpha * a + (1 - alpha) * b``, evaluated as ``b + alpha (a - b)`` so equal endpoints stay exact."""
    _same_config(a, b)
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    tb = flatten(b)
    return unflatten(a.config, tb + alpha * (flatten(a) - tb))


@dataclass
class LossCurve:
    alphas: np.ndarray
    losses: np.ndarray
    loss_a: float
    loss_b: float
    barrier: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("alpha,loss\n")
        for a, l in zip(self.alphas, self.losses):
            buf.write(f"{a:.17g},{l:.17g}\n")
        buf.write(f"# barrier={self.barrier:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossCurve":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "alpha,loss":
            raise FormatError("loss curve CSV must start with the header 'alpha,loss'")
        alphas, losses, barrier = [], [], None
        for ln in lines[1:]:
            if ln.startswith("#"):
                key, _, value = ln[1:].strip().partition("=")
                if key == "barrier":
                    barrier = float(value)
                continue
            try:
                a, l = ln.split(",")
                alphas.append(float(a))
                losses.append(float(l))
            except ValueError as exc:
                raise FormatError(f"malformed loss curve row: {ln!r}") from exc
        if barrier is None or len(alphas) < 2:
            raise FormatError("loss curve CSV lacks rows or the barrier line")
        alphas_arr, losses_arr = np.array(alphas), np.array(losses)
        return cls(alphas_arr, losses_arr, float(losses_arr[-1]), float(losses_arr[0]), barrier)


def loss_barrier(alphas: np.ndarray, losses: np.ndarray, loss_a: float, loss_b: float) -> float:
    """Largest excess of the path loss over the straight line between the endpoint losses, floored at 0."""
    excess = losses - (alphas * loss_a + (1.0 - alphas) * loss_b)
    return max(0.0, float(np.max(excess)))


def interpolate_losses(a: TransformerModel, b: TransformerModel, data: SyntheticDataset, n_points: int = 25) -> LossCurve:
    """Loss along ``theta(alpha) = alpha * theta_a + (1 - alpha) * theta_b`` on a uniform grid."""
    _same_config(a, b)
    if n_points < 3:
        raise InputError("n_points must be >= 3")
    alphas = np.linspace(0.0, 1.0, n_points)
    ta, tb = flatten(a), flatten(b)
    losses = np.empty(n_points)
    for i, alpha in enumerate(alphas):
        if alpha == 1.0:
            model = a
        elif alpha == 0.0:
            model = b
        else:
            model = unflatten(a.config, tb + alpha * (ta - tb))
        losses[i] = loss(model, data)
    loss_a, loss_b = float(losses[-1]), float(losses[0])
    return LossCurve(alphas, losses, loss_a, loss_b, loss_barrier(alphas, losses, loss_a, loss_b))


@dataclass
class EquivalenceReport:
    max_abs_logit_diff: float
    mean_abs_diff: float
    n_inputs: int


def equivalence_check(a: TransformerModel, b: TransformerModel, n_inputs: int = 100, seed: int = 0) -> EquivalenceReport:
    """Compare the logits of two models on ``n_inputs`` seeded random sequences."""
    _same_config(a, b)
    if n_inputs < 1:
        raise InputError("n_inputs must be >= 1")
    tokens = random_tokens(a.config, n_inputs, seed)
    diff = np.abs(forward_batch(a, tokens) - forward_batch(b, tokens))
    return EquivalenceReport(float(diff.max()), float(diff.mean()), n_inputs)
