"""Training losses: pretext CE, main-task CE, and the adversarial pair.

The 2-D losses are normalized to means over supervised cells by default so
the loss weights stay scale-free across image sizes; `normalization="sum"`
restores the raw per-image sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import IGNORE_LABEL


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    lambda_p: float = 1.0
    lambda_adv: float = 0.01
    lambda_d: float = 1.0

    def validate(self) -> None:
        if min(self.lambda_p, self.lambda_adv, self.lambda_d) < 0:
            raise LossError("loss weights must be non-negative")


def _check_logits(logits: torch.Tensor) -> None:
    if not torch.all(torch.isfinite(logits)):
        raise LossError("non-finite logits")


def pretext_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean CE over the rotated copies; with complete groups of 4 this is
    the per-image 1/4-average of the per-rotation CE, then the batch mean."""
    _check_logits(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise LossError(f"pretext label {int(labels.max())} >= "
                        f"K={logits.shape[1]}")
    return F.cross_entropy(logits, labels)


def classification_loss(logits: torch.Tensor,
                        labels: torch.Tensor) -> torch.Tensor:
    _check_logits(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise LossError("class label out of range")
    return F.cross_entropy(logits, labels)


def segmentation_loss(logits: torch.Tensor, label_map: torch.Tensor,
                      normalization: str = "mean") -> torch.Tensor:
    """Pixel CE over non-IGNORE pixels: mean over supervised pixels, or the
    raw per-image sum averaged over the batch."""
    _check_logits(logits)
    label_map = torch.as_tensor(label_map, dtype=torch.long)
    valid = label_map != IGNORE_LABEL
    if not bool(valid.any()):
        raise LossError("no supervised pixels")
    if int(label_map[valid].max()) >= logits.shape[1]:
        raise LossError("segmentation label out of range")
    if normalization == "mean":
        return F.cross_entropy(logits, label_map, ignore_index=IGNORE_LABEL)
    if normalization == "sum":
        per_pixel = F.cross_entropy(logits, label_map,
                                    ignore_index=IGNORE_LABEL,
                                    reduction="none")
        return per_pixel.sum(dim=(1, 2)).mean()
    raise LossError(f"unknown normalization {normalization!r}")


def _domain_ce(Z: torch.Tensor, channel: int,
               normalization: str) -> torch.Tensor:
    if Z.shape[1] != 2:
        raise LossError(f"domain map must have 2 channels, got {Z.shape[1]}")
    _check_logits(Z)
    logp = F.log_softmax(Z, dim=1)[:, channel]
    if normalization == "mean":
        return -logp.mean()
    if normalization == "sum":
        return -logp.sum(dim=(1, 2)).mean()
    raise LossError(f"unknown normalization {normalization!r}")


def discriminator_loss(Z: torch.Tensor, z: int,
                       normalization: str = "mean") -> torch.Tensor:
    """2-D CE training D to output channel z (0 target, 1 source)."""
    if z not in (0, 1):
        raise LossError(f"domain label must be 0 or 1, got {z}")
    return _domain_ce(Z, z, normalization)


def adversarial_loss(Z: torch.Tensor, z: int,
                     normalization: str = "mean") -> torch.Tensor:
    """Label-flipped counterpart: push D toward the wrong domain channel.
    Identity: adversarial_loss(Z, z) == discriminator_loss(Z, 1 - z)."""
    if z not in (0, 1):
        raise LossError(f"domain label must be 0 or 1, got {z}")
    return _domain_ce(Z, 1 - z, normalization)


def joint_objective(main_loss, p_loss, weights: LossWeights):
    weights.validate()
    return main_loss + weights.lambda_p * p_loss


def full_objective(main_loss, p_loss, adv_loss, d_loss,
                   weights: LossWeights):
    weights.validate()
    return (main_loss + weights.lambda_p * p_loss
            + weights.lambda_adv * adv_loss + weights.lambda_d * d_loss)
