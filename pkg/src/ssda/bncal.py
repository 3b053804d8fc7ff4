"""Post-training BN calibration: refit running statistics on target images
with every learnable parameter frozen."""

from __future__ import annotations

import torch
import torch.nn as nn

from .data import DataError, DatasetManifest, ManifestDataset, batch_iterator
from .model import to_tensor_batch


def _bn_layers(net) -> list:
    return [m for m in net.modules() if isinstance(m, nn.BatchNorm2d)]


def calibrate(encoder, main_head, target_train: DatasetManifest,
              passes: int = 5, batch_size: int = 16, seed: int = 0,
              momentum: float = 0.1) -> None:
    """Replace BN running stats of E and S (in place) by moving-average
    statistics over `passes` sweeps of the target training images.

    Stats are reset to (0, 1) first so old source-biased values do not
    linger; gamma/beta and all weights are untouched. Heads without BN are
    unchanged entirely; the pretext head and discriminator are irrelevant
    at inference and skipped.

    The sweep runs in eval mode and applies the moving-average update just
    before each layer normalizes, with the variance taken around the
    updated running mean. Unlike the train-mode update (whose running
    variance averages within-batch variances and so underestimates the
    dataset variance by O(1/batch_size)), this update's fixed point is
    the full-dataset statistics that bn_stat_oracle computes. The returned
    stats are additionally averaged over the final pass, which cancels the
    batch-to-batch fluctuation a constant-momentum average never sheds.
    """
    if len(target_train) == 0:
        raise DataError("empty target set")
    if passes < 1:
        raise DataError("passes must be >= 1")
    dataset = ManifestDataset(target_train)
    layers = _bn_layers(encoder) + _bn_layers(main_head)
    hooks = []

    def make_hook(bn):
        def hook(module, inputs):
            x = inputs[0].detach()
            m = x.mean(dim=(0, 2, 3))
            bn.running_mean.mul_(1.0 - momentum).add_(m, alpha=momentum)
            centered = x - bn.running_mean.view(1, -1, 1, 1)
            v = centered.pow(2).mean(dim=(0, 2, 3))
            bn.running_var.mul_(1.0 - momentum).add_(v, alpha=momentum)
        return hook

    for bn in layers:
        bn.reset_running_stats()
        hooks.append(bn.register_forward_pre_hook(make_hook(bn)))
    encoder.eval()
    main_head.eval()
    totals = None
    snapshots = 0
    try:
        with torch.no_grad():
            for epoch in range(passes):
                final_pass = epoch == passes - 1
                for idx in batch_iterator(len(dataset), batch_size,
                                          seed + epoch):
                    batch = to_tensor_batch([dataset.image(i) for i in idx])
                    main_head(encoder(batch))
                    if final_pass:
                        if totals is None:
                            totals = [[bn.running_mean.clone(),
                                       bn.running_var.clone()]
                                      for bn in layers]
                        else:
                            for acc, bn in zip(totals, layers):
                                acc[0] += bn.running_mean
                                acc[1] += bn.running_var
                        snapshots += 1
    finally:
        for h in hooks:
            h.remove()
    for bn, (mean_sum, var_sum) in zip(layers, totals):
        bn.running_mean.copy_(mean_sum / snapshots)
        bn.running_var.copy_(var_sum / snapshots)


def bn_stat_oracle(encoder, main_head, dataset_manifest: DatasetManifest,
                   batch_size: int = 32) -> dict:
    """Exact per-channel mean/variance of every BN layer's input over the
    whole dataset, in one pass, with no moving-average approximation.

    Uses eval-mode forwards so each layer's input is computed from the
    frozen parameters, which is the fixed point calibrate() approaches.
    Returns {layer_index: (mean, var)} in the same order calibrate visits
    the layers.
    """
    dataset = ManifestDataset(dataset_manifest)
    layers = _bn_layers(encoder) + _bn_layers(main_head)
    sums = {i: None for i in range(len(layers))}
    sqsums = {i: None for i in range(len(layers))}
    counts = {i: 0 for i in range(len(layers))}
    hooks = []

    def make_hook(i):
        def hook(module, inputs, output):
            x = inputs[0].detach().double()
            s = x.sum(dim=(0, 2, 3))
            sq = (x * x).sum(dim=(0, 2, 3))
            if sums[i] is None:
                sums[i] = s
                sqsums[i] = sq
            else:
                sums[i] += s
                sqsums[i] += sq
            counts[i] += x.numel() // x.shape[1]
        return hook

    for i, bn in enumerate(layers):
        hooks.append(bn.register_forward_hook(make_hook(i)))
    encoder.eval()
    main_head.eval()
    try:
        with torch.no_grad():
            n = len(dataset)
            for start in range(0, n, batch_size):
                idx = range(start, min(start + batch_size, n))
                batch = to_tensor_batch([dataset.image(i) for i in idx])
                main_head(encoder(batch))
    finally:
        for h in hooks:
            h.remove()
    out = {}
    for i in range(len(layers)):
        mean = sums[i] / counts[i]
        var = sqsums[i] / counts[i] - mean * mean
        out[i] = (mean, torch.clamp(var, min=0.0))
    return out
