"""Joint training loop: pretext + main-task gradient accumulation on the
shared encoder, the adversarial prediction-layer extension, and the
SRC/TAR reference baselines."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L
from .config import OptimizerConfig, TrainConfig
from .data import (ConfigurationError, ManifestDataset, batch_iterator,
                   load_manifest, manifest_path)
from .evaluation import evaluate
from .model import (ArchitectureSpec, build_networks, forward_discriminator,
                    forward_main, forward_pretext, main_probability_map,
                    save_checkpoint, to_tensor_batch)
from .pretext import PretextConfig, build_pretext_pool


class TrainingDiverged(Exception):
    pass


@dataclass
class StepReport:
    iter: int
    L_p: float | None = None
    L_main: float | None = None
    L_adv: float | None = None
    L_d: float | None = None
    grad_norm_E: float = 0.0

    def check_finite(self) -> None:
        for name in ("L_p", "L_main", "L_adv", "L_d"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise TrainingDiverged(f"{name} is non-finite: {v}")


def make_optimizer(params, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.kind != "sgd-momentum":
        raise ConfigurationError(f"unknown optimizer kind {cfg.kind!r}")
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _zero_grads(*nets) -> None:
    for net in nets:
        net.zero_grad(set_to_none=True)


def _grad_norm(net) -> float:
    total = 0.0
    for p in net.parameters():
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def _main_loss(logits, labels, cfg: TrainConfig):
    if cfg.task == "classification":
        return L.classification_loss(logits, labels)
    return L.segmentation_loss(logits, labels, cfg.loss_normalization)


def train_step_alg1(encoder, main_head, pretext_head, opts,
                    pretext_batch, sup_batch, cfg: TrainConfig,
                    step: int = 0) -> StepReport:
    """One joint step: pretext backward through P and E, update P; main
    backward through S and E accumulating onto E; update E and S."""
    patches, p_labels = pretext_batch
    images, labels = sup_batch
    _zero_grads(encoder, main_head, pretext_head)

    p_logits = forward_pretext(encoder, pretext_head, patches, "train",
                               main_head)
    lp = L.pretext_loss(p_logits, p_labels)
    (cfg.weights.lambda_p * lp).backward()
    opts["pretext_head"].step()

    logits = forward_main(encoder, main_head, images, "train")
    lmain = _main_loss(logits, labels, cfg)
    lmain.backward()
    report = StepReport(step, L_p=float(lp.detach()), L_main=float(lmain.detach()),
                        grad_norm_E=_grad_norm(encoder))
    report.check_finite()
    opts["encoder"].step()
    opts["main_head"].step()
    return report


def train_step_main(encoder, main_head, opts, sup_batch, cfg: TrainConfig,
                    step: int = 0) -> StepReport:
    """SRC/TAR baseline step: supervised main task only."""
    images, labels = sup_batch
    _zero_grads(encoder, main_head)
    logits = forward_main(encoder, main_head, images, "train")
    lmain = _main_loss(logits, labels, cfg)
    lmain.backward()
    report = StepReport(step, L_main=float(lmain.detach()),
                        grad_norm_E=_grad_norm(encoder))
    report.check_finite()
    opts["encoder"].step()
    opts["main_head"].step()
    return report


def _adversarial_losses(encoder, main_head, disc, src_images, tgt_images,
                        loss_fn, normalization: str):
    """Evaluate a domain loss on both domains' prediction maps.

    Runs E and S in eval mode: the adversarial phases must not perturb BN
    running statistics owned by the Algorithm-1 steps (this also makes the
    zero-weight reduction to plain joint training exact)."""
    probs_t = main_probability_map(encoder, main_head, tgt_images, "eval")
    probs_s = main_probability_map(encoder, main_head, src_images, "eval")
    lt = loss_fn(forward_discriminator(disc, probs_t), 0, normalization)
    ls = loss_fn(forward_discriminator(disc, probs_s), 1, normalization)
    return lt, ls


def train_step_adversarial(encoder, main_head, pretext_head, disc, opts,
                           pretext_batch, sup_batch, adv_src_images,
                           adv_tgt_images, cfg: TrainConfig,
                           step: int = 0) -> StepReport:
    """Adversarial extension: pretext -> main -> generator accumulation on
    E -> single E+S update -> discriminator update with E frozen."""
    _zero_grads(encoder, main_head, pretext_head, disc)

    lp = None
    if cfg.pretext_mode != "none":
        patches, p_labels = pretext_batch
        p_logits = forward_pretext(encoder, pretext_head, patches, "train",
                                   main_head)
        lp_t = L.pretext_loss(p_logits, p_labels)
        (cfg.weights.lambda_p * lp_t).backward()
        opts["pretext_head"].step()
        lp = float(lp_t.detach())

    images, labels = sup_batch
    logits = forward_main(encoder, main_head, images, "train")
    lmain = _main_loss(logits, labels, cfg)
    lmain.backward()

    # generator phase: only E accumulates; S and D frozen
    for p in list(main_head.parameters()) + list(disc.parameters()):
        p.requires_grad_(False)
    lt, ls = _adversarial_losses(encoder, main_head, disc, adv_src_images,
                                 adv_tgt_images, L.adversarial_loss,
                                 cfg.loss_normalization)
    ladv = lt if cfg.adv_target_only else 0.5 * (lt + ls)
    (cfg.weights.lambda_adv * ladv).backward()
    for p in list(main_head.parameters()) + list(disc.parameters()):
        p.requires_grad_(True)

    report = StepReport(step, L_p=lp, L_main=float(lmain.detach()),
                        L_adv=float(ladv.detach()), grad_norm_E=_grad_norm(encoder))
    opts["encoder"].step()
    opts["main_head"].step()

    # discriminator phase: E and S see no gradient
    with torch.no_grad():
        probs_t = main_probability_map(encoder, main_head, adv_tgt_images,
                                       "eval")
        probs_s = main_probability_map(encoder, main_head, adv_src_images,
                                       "eval")
    disc.zero_grad(set_to_none=True)
    ld = 0.5 * (L.discriminator_loss(forward_discriminator(disc, probs_t),
                                     0, cfg.loss_normalization)
                + L.discriminator_loss(forward_discriminator(disc, probs_s),
                                       1, cfg.loss_normalization))
    (cfg.weights.lambda_d * ld).backward()
    opts["discriminator"].step()

    report.L_d = float(ld.detach())
    report.check_finite()
    return report


class _SupervisedStream:
    """Cycling labeled batches from one domain."""

    def __init__(self, dataset: ManifestDataset, batch_size: int, seed: int,
                 task: str):
        self.dataset = dataset
        self.task = task
        self._it = batch_iterator(len(dataset), batch_size, seed, cycle=True)

    def next(self):
        idx = next(self._it)
        images = to_tensor_batch([self.dataset.image(i) for i in idx])
        labels = [self.dataset.label(i) for i in idx]
        if self.task == "classification":
            labels = torch.as_tensor(labels, dtype=torch.long)
        else:
            labels = torch.as_tensor(np.stack(labels), dtype=torch.long)
        return images, labels


class _ImageStream:
    """Cycling unlabeled image batches (adversarial phases)."""

    def __init__(self, dataset: ManifestDataset, batch_size: int, seed: int):
        self.dataset = dataset
        self._it = batch_iterator(len(dataset), batch_size, seed, cycle=True)

    def next(self):
        idx = next(self._it)
        return to_tensor_batch([self.dataset.image(i) for i in idx])


class _PretextStream:
    def __init__(self, pool, images_per_batch: int):
        self._it = pool.sample_batches(images_per_batch)

    def next(self):
        batch = next(self._it)
        patches = to_tensor_batch([s.patch for s in batch])
        labels = torch.as_tensor([s.label for s in batch], dtype=torch.long)
        return patches, labels


def train(data_root: str, cfg: TrainConfig, out_dir: str,
          arch: ArchitectureSpec | None = None) -> dict:
    """Run one full training per the config; writes metrics.jsonl plus best
    and last checkpoints under out_dir and returns a summary dict."""
    cfg.validate()
    torch.set_num_threads(1)  # determinism of the numeric path
    torch.manual_seed(cfg.seed)
    os.makedirs(out_dir, exist_ok=True)

    src_train = load_manifest(manifest_path(data_root, "source", "train"),
                              "train")
    tgt_train = load_manifest(manifest_path(data_root, "target", "train"),
                              "train")
    src_test = load_manifest(manifest_path(data_root, "source", "test"),
                             "test")
    tgt_test = load_manifest(manifest_path(data_root, "target", "test"),
                             "test")
    num_classes = src_train.num_classes

    arch = arch or ArchitectureSpec(feature_tap=cfg.feature_tap)
    arch.feature_tap = cfg.feature_tap
    encoder, main_head, pretext_head, disc = build_networks(
        arch, cfg.task, cfg.num_pretext_labels, num_classes, cfg.seed)
    nets = {"encoder": encoder, "main_head": main_head,
            "pretext_head": pretext_head, "discriminator": disc}
    opts = {name: make_optimizer(net.parameters(),
                                 cfg.disc_optimizer
                                 if name == "discriminator"
                                 else cfg.optimizer)
            for name, net in nets.items()}

    sup_manifest = tgt_train if cfg.train_domain == "target" else src_train
    sup_dataset = ManifestDataset(sup_manifest)
    tgt_train_dataset = ManifestDataset(tgt_train)
    sup_stream = _SupervisedStream(sup_dataset, cfg.batch_size_source,
                                   cfg.seed + 11, cfg.task)

    taint_datasets = [tgt_train_dataset]
    if cfg.train_domain == "target":
        taint_datasets.append(sup_dataset)

    pretext_stream = None
    if cfg.pretext_mode != "none":
        pcfg = PretextConfig(cfg.pretext_mode, cfg.crop_size,
                             cfg.expand_all_rotations)
        pool = build_pretext_pool(
            tgt_train, src_train if cfg.pretext_mode == "MixRot" else None,
            pcfg, cfg.seed + 23)
        taint_datasets.append(pool._datasets[0])  # pool's target dataset
        pretext_stream = _PretextStream(pool, cfg.batch_size_target)

    adv_src_stream = adv_tgt_stream = None
    if cfg.adversarial:
        adv_src_stream = _ImageStream(ManifestDataset(src_train),
                                      cfg.batch_size_source, cfg.seed + 31)
        adv_tgt_stream = _ImageStream(tgt_train_dataset,
                                      cfg.batch_size_target, cfg.seed + 37)

    metric_name = "accuracy" if cfg.task == "classification" else "miou"
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    best_path = os.path.join(out_dir, "checkpoint_best.pt")
    last_path = os.path.join(out_dir, "checkpoint_last.pt")
    best_metric = -1.0
    diverged = False

    def save(path: str, it: int) -> None:
        save_checkpoint(path, nets, arch, cfg.task, num_classes,
                        cfg.num_pretext_labels, cfg.config_hash(),
                        extra={"iter": it})

    def run_eval(it: int, log) -> dict:
        out = {}
        for dom, manifest in (("source", src_test), ("target", tgt_test)):
            rec = evaluate(encoder, main_head, manifest, cfg.task)
            value = getattr(rec, metric_name)
            out[dom] = value
            log.write(json.dumps({"iter": it, "eval": {
                "domain": dom, "metric": metric_name,
                "value": value}}) + "\n")
        return out

    last_eval = {}
    with open(metrics_path, "w", encoding="utf-8") as log:
        for it in range(cfg.max_iters):
            try:
                if cfg.pretext_mode == "none" and not cfg.adversarial:
                    rep = train_step_main(encoder, main_head, opts,
                                          sup_stream.next(), cfg, it)
                elif not cfg.adversarial:
                    rep = train_step_alg1(encoder, main_head, pretext_head,
                                          opts, pretext_stream.next(),
                                          sup_stream.next(), cfg, it)
                else:
                    rep = train_step_adversarial(
                        encoder, main_head, pretext_head, disc, opts,
                        pretext_stream.next() if pretext_stream else None,
                        sup_stream.next(), adv_src_stream.next(),
                        adv_tgt_stream.next(), cfg, it)
            except TrainingDiverged:
                diverged = True
                break
            log.write(json.dumps({"iter": it, "L_p": rep.L_p,
                                  "L_main": rep.L_main, "L_adv": rep.L_adv,
                                  "L_d": rep.L_d,
                                  "grad_norm_E": rep.grad_norm_E}) + "\n")
            if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.max_iters:
                last_eval = run_eval(it + 1, log)
                save(last_path, it + 1)
                if last_eval["target"] > best_metric:
                    best_metric = last_eval["target"]
                    save(best_path, it + 1)
        if cfg.max_iters == 0:
            last_eval = run_eval(0, log)
            save(last_path, 0)
            save(best_path, 0)
            best_metric = last_eval["target"]

    if diverged and not os.path.exists(last_path):
        save(last_path, 0)

    summary = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "metric": metric_name,
        "final": last_eval,
        "best_target": best_metric,
        "diverged": diverged,
        "target_train_label_reads": sum(d.label_reads
                                        for d in taint_datasets),
        "checkpoint_best": best_path,
        "checkpoint_last": last_path,
        "metrics_log": metrics_path,
    }
    with open(os.path.join(out_dir, "train_summary.json"), "w",
              encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return summary
