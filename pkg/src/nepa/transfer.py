"""Downstream evaluation: linear classification on the last embedding,
end-to-end fine-tuning with the causal/bidirectional and frozen-embedding
options, and linear probing of frozen features.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import data as D
from . import tensor as T
from .errors import ConfigError
from .optim import (AdamWConfig, AdamWState, ScheduleConfig, adamw_step, llrd_factor,
                    lr_at)
from .rng import make_rng, truncated_normal
from .tensor import GradTape, Tensor


@dataclass
class FinetuneConfig:
    attention_mode: str = "bidirectional"
    freeze_patch_embed: bool = True
    epochs: int = 5
    head_init_std: float = 0.01
    drop_path_rate: float = 0.0  # accepted for config compatibility; 0 at this scale
    base_lr: float = 1e-3
    batch_size: int = 64
    warmup_epochs: float = 0.5
    min_lr: float = 0.0
    llrd_start: float = 0.35
    llrd_end: float = 1.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999

    def validate(self) -> None:
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.drop_path_rate != 0.0:
            raise ConfigError("drop_path_rate is fixed at 0 at this scale")
        if not (0 < self.llrd_start <= self.llrd_end):
            raise ConfigError("llrd must satisfy 0 < start <= end")


def init_head(dim: int, n_classes: int, seed: int, std: float = 0.01) -> dict[str, Tensor]:
    rng = make_rng(seed, 0x4EAD)
    return {
        "head.w": Tensor(truncated_normal(rng, (dim, n_classes), std=std), requires_grad=True),
        "head.b": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
    }


def classify(images: Tensor, params: bb.BackboneParams, cfg: bb.BackboneConfig,
             head: dict[str, Tensor]) -> Tensor:
    """Logits from a linear head on the final-layernormed last embedding."""
    if head["head.w"].shape[0] != cfg.dim:
        raise ConfigError(
            f"head width {head['head.w'].shape[0]} != backbone dim {cfg.dim}")
    seq = bb.forward(images, params, cfg)
    t = seq.h_out.shape[1]
    feat = T.reshape(T.narrow(seq.h_out, 1, t - 1, 1), (images.shape[0], cfg.dim))
    return T.add(T.matmul(feat, head["head.w"]), head["head.b"])


def cross_entropy(logits: Tensor, target_dist: np.ndarray) -> Tensor:
    """Mean CE against a (possibly smoothed or mixed) label distribution."""
    logp = T.log_softmax_lastdim(logits)
    picked = T.tsum(T.mul(logp, Tensor(target_dist.astype(logits.data.dtype))), axis=-1)
    return T.neg(T.tmean(picked))


def evaluate_accuracy(params: bb.BackboneParams, cfg: bb.BackboneConfig,
                      head: dict[str, Tensor], dataset, batch_size: int = 128) -> float:
    hits = 0
    total = 0
    for images, labels in D.batch_iter(dataset, batch_size, shuffle_seed=0, epoch=0,
                                       shuffle=False, drop_last=False):
        logits = classify(Tensor(images), params, cfg, head)
        hits += int((logits.data.argmax(axis=1) == labels).sum())
        total += len(labels)
    return hits / max(total, 1)


def _llrd_scales(params: bb.BackboneParams, head: dict[str, Tensor],
                 progress: float, sched: ScheduleConfig) -> dict[str, float]:
    n_layers = params.config.depth + 1
    scales = {name: llrd_factor(params.layer_group(name), n_layers, progress, sched)
              for name, _ in params.named()}
    for name in head:
        scales[name] = llrd_factor(n_layers, n_layers, progress, sched)
    return scales


def finetune(params: bb.BackboneParams, cfg: bb.BackboneConfig, train_ds, eval_ds,
             ft: FinetuneConfig, aug: D.AugmentConfig, seed: int = 0,
             trace: list | None = None):
    """Train head plus (unfrozen) backbone; returns (params, head, trace rows).

    The trace accumulates ``(epoch, split, metric, value)`` rows. Attention
    mode is switched on the config; the pretraining weights are untouched
    when epochs == 0 apart from the freshly initialized head.
    """
    ft.validate()
    aug.validate()
    cfg = dataclasses.replace(cfg, attention_mode=ft.attention_mode)
    params = params.copy()
    head = init_head(cfg.dim, train_ds.n_classes, seed, ft.head_init_std)
    all_params: dict[str, Tensor] = dict(params.named())
    all_params.update(head)

    steps_per_epoch = max(1, len(train_ds) // ft.batch_size)
    total_steps = max(1, ft.epochs * steps_per_epoch)
    sched = ScheduleConfig(
        base_lr=ft.base_lr, batch_size=ft.batch_size,
        warmup_steps=min(total_steps, int(round(ft.warmup_epochs * steps_per_epoch))),
        total_steps=total_steps, min_lr=ft.min_lr,
        llrd_start=ft.llrd_start, llrd_end=ft.llrd_end)
    sched.validate()
    adam = AdamWState(all_params, AdamWConfig(
        beta1=ft.beta1, beta2=ft.beta2, weight_decay=ft.weight_decay))
    frozen = {"patch_proj.w", "patch_proj.b"} if ft.freeze_patch_embed else set()
    rng = make_rng(seed, 0xF17E)
    trace = trace if trace is not None else []

    k = train_ds.n_classes
    step = 0
    for epoch in range(ft.epochs):
        losses = []
        for images, labels in D.batch_iter(train_ds, ft.batch_size,
                                           shuffle_seed=seed, epoch=epoch):
            dist = D.smooth_labels(D.one_hot(labels, k), aug.label_smoothing, k)
            if aug.use_mixup or aug.use_cutmix:
                images, dist, _ = D.mixup_cutmix(images, dist, aug, rng)
            with GradTape() as tape:
                logits = classify(Tensor(images), params, cfg, head)
                loss = cross_entropy(logits, dist)
            tape.backward(loss)
            progress = step / max(1, total_steps - 1)
            adamw_step(all_params, adam, lr_at(step, sched),
                       lr_scale=_llrd_scales(params, head, progress, sched),
                       frozen=frozen)
            losses.append(loss.item())
            step += 1
        trace.append((epoch, "train", "loss", float(np.mean(losses))))
        acc = evaluate_accuracy(params, cfg, head, eval_ds)
        trace.append((epoch, "eval", "accuracy", acc))
    return params, head, trace


def extract_features(params: bb.BackboneParams, cfg: bb.BackboneConfig, dataset,
                     pooling: str, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-backbone features: last embedding or the mean over positions."""
    if pooling not in ("last", "avg"):
        raise ConfigError(f"unknown pooling {pooling!r}")
    feats = []
    labels_all = []
    for images, labels in D.batch_iter(dataset, batch_size, shuffle_seed=0, epoch=0,
                                       shuffle=False, drop_last=False):
        seq = bb.forward(Tensor(images), params, cfg)
        h = seq.h_out.data
        feats.append(h[:, -1, :] if pooling == "last" else h.mean(axis=1))
        labels_all.append(labels)
    return np.concatenate(feats), np.concatenate(labels_all)


def linear_probe(params: bb.BackboneParams, cfg: bb.BackboneConfig, train_ds, eval_ds,
                 pooling: str = "avg", seed: int = 0, steps: int = 300,
                 lr: float = 0.05) -> float:
    """Train only a linear classifier on frozen features; returns eval accuracy."""
    xtr, ytr = extract_features(params, cfg, train_ds, pooling)
    xte, yte = extract_features(params, cfg, eval_ds, pooling)
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-6
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd

    k = train_ds.n_classes
    head = init_head(cfg.dim, k, seed, std=0.01)
    adam = AdamWState(head, AdamWConfig(beta2=0.999, weight_decay=0.0))
    onehot = D.one_hot(ytr, k)
    xtr_t = Tensor(xtr.astype(np.float32))
    for step in range(steps):
        with GradTape() as tape:
            logits = T.add(T.matmul(xtr_t, head["head.w"]), head["head.b"])
            loss = cross_entropy(logits, onehot)
        tape.backward(loss)
        adamw_step(head, adam, lr * 0.5 * (1 + np.cos(np.pi * step / steps)))
    logits = xte @ head["head.w"].data + head["head.b"].data
    return float((logits.argmax(axis=1) == yte).mean())
