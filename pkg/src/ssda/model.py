"""Networks: shared encoder E, main head S, pretext head P, discriminator D.

Built on torch so gradient accumulation in `.grad` carries the joint
training semantics directly; the finite-difference checker below is an
independent numeric oracle over the same parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ConfigurationError


@dataclass
class ArchitectureSpec:
    channels: tuple = (32, 64, 128, 128)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    feature_tap: str = "middle"  # {"middle", "final"}

    def validate(self) -> None:
        if self.feature_tap not in ("middle", "final"):
            raise ConfigurationError(f"unknown feature tap "
                                     f"{self.feature_tap!r}")
        if len(self.channels) != 4:
            raise ConfigurationError("encoder has exactly 4 blocks")


class Encoder(nn.Module):
    """4 conv blocks (3x3 conv, BN, ReLU), stride-2 downsampling entering
    blocks 2 and 3; middle tap after block 2, final tap after block 4."""

    def __init__(self, arch: ArchitectureSpec, in_channels: int = 3):
        super().__init__()
        arch.validate()
        self.name = "encoder"
        self.arch = arch
        ch = arch.channels
        strides = (1, 2, 2, 1)
        blocks = []
        prev = in_channels
        for c, s in zip(ch, strides):
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=s, padding=1, bias=False),
                nn.BatchNorm2d(c, eps=arch.bn_eps, momentum=arch.bn_momentum),
                nn.ReLU(inplace=True)))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.middle_channels = ch[1]
        self.final_channels = ch[3]
        self.downsample_factor = 4

    def forward(self, x):
        return self.features(x)["final"]

    def features(self, x):
        h = self.blocks[0](x)
        h = self.blocks[1](h)
        middle = h
        h = self.blocks[2](h)
        h = self.blocks[3](h)
        return {"middle": middle, "final": h}


class ClassifierHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.name = "main_head"
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, feats):
        pooled = feats.mean(dim=(2, 3))
        return self.fc(pooled)


class SegmentationHead(nn.Module):
    """1x1 conv to C channels, then bilinear upsampling back to input
    resolution; `pre_upsample` exposes the prediction layer the
    discriminator and the final-tap pretext head consume."""

    def __init__(self, in_channels: int, num_classes: int,
                 upsample_factor: int):
        super().__init__()
        self.name = "main_head"
        self.conv = nn.Conv2d(in_channels, num_classes, 1)
        self.upsample_factor = upsample_factor

    def pre_upsample(self, feats):
        return self.conv(feats)

    def forward(self, feats):
        logits = self.conv(feats)
        return F.interpolate(logits, scale_factor=self.upsample_factor,
                             mode="bilinear", align_corners=False)


class PretextHead(nn.Module):
    def __init__(self, in_channels: int, num_labels: int, tap: str):
        super().__init__()
        self.name = "pretext_head"
        self.tap = tap
        self.fc = nn.Linear(in_channels, num_labels)

    def forward(self, feats):
        pooled = feats.mean(dim=(2, 3))
        return self.fc(pooled)


class Discriminator(nn.Module):
    """3 stride-2 conv layers (64, 128, 2) over softmaxed main-task
    probabilities; channel 0 scores target, channel 1 source."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.name = "discriminator"
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 128, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(128, 2, 3, stride=2, padding=1))
        self.in_channels = in_channels

    def forward(self, probs):
        if probs.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"discriminator expects {self.in_channels} channels, "
                f"got {probs.shape[1]}")
        return self.net(probs)


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = float(np.sqrt(2.0 / fan_in))
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_networks(arch: ArchitectureSpec, task: str, num_pretext_labels: int,
                   num_classes: int, seed: int, in_channels: int = 3):
    """Deterministically initialized (E, S, P, D) for the given task."""
    if num_pretext_labels not in (4, 16):
        raise ConfigurationError(
            f"pretext label count must be 4 or 16, got {num_pretext_labels}")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    arch.validate()
    gen = torch.Generator().manual_seed(seed)
    encoder = Encoder(arch, in_channels)
    if task == "classification":
        main = ClassifierHead(encoder.final_channels, num_classes)
    elif task == "segmentation":
        main = SegmentationHead(encoder.final_channels, num_classes,
                                encoder.downsample_factor)
    else:
        raise ConfigurationError(f"unknown task {task!r}")
    if arch.feature_tap == "middle":
        tap_channels = encoder.middle_channels
    elif task == "segmentation":
        tap_channels = num_classes  # pre-upsample prediction map
    else:
        tap_channels = encoder.final_channels
    pretext = PretextHead(tap_channels, num_pretext_labels, arch.feature_tap)
    disc = Discriminator(num_classes)
    for net in (encoder, main, pretext, disc):
        _init_module(net, gen)
    return encoder, main, pretext, disc


def forward_main(encoder, main_head, batch, mode: str = "train"):
    """Unnormalized main-task logits: B x C or B x C x H x W."""
    _set_mode(mode, encoder, main_head)
    return main_head(encoder(batch))


def forward_pretext(encoder, pretext_head, patches, mode: str = "train",
                    main_head=None):
    """K-way pretext logits from the configured feature tap."""
    _set_mode(mode, encoder, pretext_head)
    feats = encoder.features(patches)
    if pretext_head.tap == "middle":
        tapped = feats["middle"]
    elif isinstance(main_head, SegmentationHead):
        _set_mode(mode, main_head)
        tapped = main_head.pre_upsample(feats["final"])
    else:
        tapped = feats["final"]
    return pretext_head(tapped)


def forward_discriminator(disc, probs):
    """Domain map Z (B x 2 x H' x W') over softmaxed main-task output."""
    return disc(probs)


def main_probability_map(encoder, main_head, batch, mode: str = "train"):
    """Softmax probabilities shaped as a map for the discriminator;
    classification logits become a 1x1 spatial map."""
    _set_mode(mode, encoder, main_head)
    logits = main_head(encoder(batch))
    if logits.dim() == 2:
        logits = logits[:, :, None, None]
    return torch.softmax(logits, dim=1)


def _set_mode(mode: str, *nets) -> None:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    for net in nets:
        net.train(mode == "train")


def to_tensor_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Stack HxWxCh numpy images into an NCHW tensor."""
    arr = np.stack([np.transpose(img, (2, 0, 1)) for img in images])
    return torch.as_tensor(arr, dtype=dtype)


@dataclass
class GradCheckEntry:
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: list = field(default_factory=list)


def gradient_check(modules, loss_fn, coords_per_tensor: int = 20,
                   tolerance: float = 1e-4, h_scale: float = 1e-4,
                   seed: int = 0) -> GradCheckReport:
    """Central finite differences vs autograd over every parameter tensor.

    `loss_fn()` must re-evaluate the loss from the modules' current
    parameters with BN frozen (modules are put in eval mode here) so the
    loss is a deterministic function of the parameters. All arithmetic runs
    in float64.
    """
    for m in modules:
        m.double().eval()
    params = []
    for m in modules:
        for name, p in m.named_parameters():
            params.append((f"{getattr(m, 'name', type(m).__name__)}.{name}",
                           p))

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss in gradient check")
    for _, p in params:
        p.grad = None
    loss.backward()

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in params:
        flat = p.detach().view(-1)
        n = flat.numel()
        k = min(coords_per_tensor, n)
        idx = rng.choice(n, size=k, replace=False)
        grad = (p.grad.view(-1) if p.grad is not None
                else torch.zeros_like(flat))
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            analytic = grad[i].item()
            best_rel, best_num = None, None
            # a ReLU kink inside the stencil corrupts the estimate; retry
            # with smaller steps, which clears the kink (float64 keeps the
            # cancellation noise far below tolerance down to h ~ 1e-6)
            base = h_scale * max(abs(orig), 1.0)
            for h in (base, 0.1 * base, 0.01 * base, 0.001 * base):
                with torch.no_grad():
                    flat[i] = orig + h
                    lp = loss_fn().item()
                    flat[i] = orig - h
                    lm = loss_fn().item()
                    flat[i] = orig
                numeric = (lp - lm) / (2 * h)
                denom = max(abs(numeric), abs(analytic))
                rel = 0.0 if denom < 1e-7 else abs(numeric - analytic) / denom
                if best_rel is None or rel < best_rel:
                    best_rel, best_num = rel, numeric
                if best_rel <= tolerance:
                    break
            entries.append(GradCheckEntry(
                name, np.unravel_index(i, p.shape), analytic, best_num,
                best_rel))
    entries.sort(key=lambda e: -e.rel_error)
    worst = entries[:10]
    max_rel = worst[0].rel_error if worst else 0.0
    return GradCheckReport(max_rel, max_rel <= tolerance, worst)


def save_checkpoint(path: str, nets: dict, arch: ArchitectureSpec,
                    task: str, num_classes: int, num_pretext_labels: int,
                    config_hash: str = "", extra: dict | None = None) -> None:
    payload = {
        "state": {name: net.state_dict() for name, net in nets.items()},
        "arch": {"channels": list(arch.channels), "bn_eps": arch.bn_eps,
                 "bn_momentum": arch.bn_momentum,
                 "feature_tap": arch.feature_tap},
        "task": task,
        "num_classes": num_classes,
        "num_pretext_labels": num_pretext_labels,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str):
    """Rebuild (E, S, P, D) from a checkpoint; shape mismatches fail loudly
    via strict state_dict loading."""
    payload = torch.load(path, weights_only=False)
    a = payload["arch"]
    arch = ArchitectureSpec(tuple(a["channels"]), a["bn_eps"],
                            a["bn_momentum"], a["feature_tap"])
    nets = build_networks(arch, payload["task"],
                          payload["num_pretext_labels"],
                          payload["num_classes"], seed=0)
    names = ("encoder", "main_head", "pretext_head", "discriminator")
    for name, net in zip(names, nets):
        net.load_state_dict(payload["state"][name], strict=True)
    return nets, arch, payload


def parameter_hash(nets, include_bn_stats: bool = False) -> str:
    """Hash of learnable tensors (and optionally BN buffers), for the
    frozen-parameter guarantee in BN calibration."""
    h = hashlib.sha256()
    for net in nets:
        for name, p in sorted(net.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        if include_bn_stats:
            for name, b in sorted(net.named_buffers()):
                h.update(name.encode())
                h.update(b.detach().cpu().numpy().tobytes())
    return h.hexdigest()
