"""Triplet and reconstruction objectives.

Distances in the triplet objective are squared Euclidean. The sketch
reconstruction loss combines squared coordinate errors with softmax
cross-entropy over the three pen-state logits, averaged over steps and
optionally weighted per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from sketchadapt.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    lambda_tri: float = 0.7
    lambda_rec: float = 0.3

    def validate(self) -> None:
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.lambda_tri < 0 or self.lambda_rec < 0 or self.lambda_tri + self.lambda_rec <= 0:
            raise ConfigError("loss weights must be nonnegative and not both zero")


def squared_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).sum(dim=-1)


def triplet_loss(f_sketch, f_pos, f_neg, margin: float) -> torch.Tensor:
    """max{0, m + d(s, p+) - d(s, p-)} with squared Euclidean d.

    Inputs may be single vectors or batches; the hinge is applied per item.
    """
    if not (f_sketch.shape == f_pos.shape == f_neg.shape):
        raise ShapeError(
            f"embedding shapes disagree: {tuple(f_sketch.shape)}, "
            f"{tuple(f_pos.shape)}, {tuple(f_neg.shape)}"
        )
    gap = margin + squared_distance(f_sketch, f_pos) - squared_distance(f_sketch, f_neg)
    return torch.clamp(gap, min=0.0)


def sketch_recon_steps(psi: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-step loss vector: squared coordinate errors plus pen-state CE."""
    if psi.ndim != 2 or psi.shape[1] != 5:
        raise ShapeError(f"predictions must be (T, 5), got {tuple(psi.shape)}")
    if psi.shape != target.shape:
        raise ShapeError(f"prediction/target lengths disagree: {psi.shape[0]} vs {target.shape[0]}")
    tgt = target.to(psi.dtype)
    coord = ((psi[:, :2] - tgt[:, :2]) ** 2).sum(dim=1)
    ce = -(tgt[:, 2:] * F.log_softmax(psi[:, 2:], dim=1)).sum(dim=1)
    return coord + ce


def sketch_recon_loss(psi: torch.Tensor, target: torch.Tensor, eta: torch.Tensor | None = None):
    """(1/T) sum_t eta_t * (coordinate MSE + pen-state CE); eta defaults to ones."""
    steps = sketch_recon_steps(psi, target)
    if eta is None:
        return steps.mean()
    if eta.shape != (steps.shape[0],):
        raise ShapeError(f"eta must have shape ({steps.shape[0]},), got {tuple(eta.shape)}")
    return (eta * steps).mean()


def photo_recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel difference over all entries."""
    if pred.shape != target.shape:
        raise ShapeError(f"edgemap shapes disagree: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target.to(pred.dtype)) ** 2).mean()
