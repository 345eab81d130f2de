"""Pretraining loop: next-embedding prediction with AdamW, EMA, periodic
checkpoints, and a per-step loss log.

Batches are a pure function of (seed, epoch, position), so the sample stream
never depends on loop state; the only stateful randomness (crop and mask
draws) comes from one generator whose bit state rides along in checkpoints.
Resuming therefore reproduces the uninterrupted run exactly, loss for loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backbone as bb
from . import data as D
from .config import RunConfig
from .errors import CheckpointError, ConfigError
from .objective import ObjectiveConfig, training_step_forward
from .optim import (AdamWState, EMAState, ScheduleConfig, TrainState,
                    adamw_step, load_train_state, lr_at, save_train_state)
from .rng import make_rng, restore_rng, rng_state, truncated_normal
from .tensor import GradTape, Tensor


@dataclass
class PretrainState:
    bcfg: bb.BackboneConfig
    obj: ObjectiveConfig
    bparams: bb.BackboneParams
    all_params: dict[str, Tensor]
    adam: AdamWState
    ema: EMAState
    sched: ScheduleConfig
    rng: np.random.Generator
    step: int = 0

    @property
    def mask_token(self) -> Optional[Tensor]:
        return self.all_params.get("objective.mask_token")


def init_pretrain_state(rc: RunConfig) -> PretrainState:
    bcfg = rc.backbone_config()
    bcfg.validate()
    obj = rc.objective_config()
    bparams = bb.BackboneParams.init(bcfg, seed=rc.seed)
    all_params: dict[str, Tensor] = dict(bparams.named())
    if obj.mask_ratio > 0.0:
        token = truncated_normal(make_rng(rc.seed, 0x3A5C), (bcfg.dim,), std=0.02)
        all_params["objective.mask_token"] = Tensor(token, requires_grad=True)
    adam = AdamWState(all_params, rc.adamw_config())
    ema = EMAState(all_params, decay=rc.raw["optim"]["ema_decay"])
    sched = rc.schedule_config()
    sched.validate()
    rng = make_rng(rc.seed, 0x5007)
    return PretrainState(bcfg=bcfg, obj=obj, bparams=bparams, all_params=all_params,
                         adam=adam, ema=ema, sched=sched, rng=rng)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(seed, epoch, 0x0BDE).permutation(n)


def _batch(dataset, order: np.ndarray, k: int, batch_size: int) -> np.ndarray:
    idx = order[k * batch_size:(k + 1) * batch_size]
    return np.stack([dataset.sample(int(i)).pixels for i in idx]).astype(np.float32)


def pretrain_steps(state: PretrainState, dataset, n_steps: int, seed: int,
                   aug: Optional[D.AugmentConfig] = None) -> list[tuple[int, float, float]]:
    """Advance the loop by n_steps; returns (step, loss, lr) rows."""
    B = state.sched.batch_size
    steps_per_epoch = len(dataset) // B
    if steps_per_epoch == 0:
        raise ConfigError(f"dataset of {len(dataset)} too small for batch size {B}")
    rows = []
    order = None
    order_epoch = -1
    for _ in range(n_steps):
        epoch, k = divmod(state.step, steps_per_epoch)
        if epoch != order_epoch:
            order = _epoch_order(len(dataset), seed, epoch)
            order_epoch = epoch
        images = _batch(dataset, order, k, B)
        if aug is not None and aug.use_rrc:
            images = np.stack([
                D.random_resized_crop(img, state.rng, aug.rrc_scale, state.bcfg.image_size)
                for img in images])
        lr = lr_at(state.step, state.sched)
        with GradTape() as tape:
            loss, _ = training_step_forward(
                Tensor(images), state.bparams, state.bcfg, state.obj,
                mask_token=state.mask_token, rng=state.rng)
        tape.backward(loss)
        adamw_step(state.all_params, state.adam, lr)
        state.ema.update(state.all_params)
        state.step += 1
        rows.append((state.step, loss.item(), lr))
    return rows


def save_pretrain_checkpoint(path, state: PretrainState, rc: RunConfig) -> None:
    ts = TrainState(params=state.all_params, adam=state.adam, ema=state.ema,
                    step=state.step, rng_state=rng_state(state.rng),
                    meta={"config": rc.raw, "kind": "pretrain"})
    save_train_state(path, ts)


def load_pretrained(path, use_ema: bool = True):
    """(BackboneParams, BackboneConfig, RunConfig meta) from a checkpoint."""
    ts = load_train_state(path)
    meta_cfg = ts.meta.get("config")
    if not meta_cfg:
        raise CheckpointError(f"{path}: checkpoint carries no config metadata")
    rc = RunConfig.from_dict(meta_cfg)
    bcfg = rc.backbone_config()
    source = ts.ema.as_tensors() if (use_ema and ts.ema is not None) else ts.params
    tensors = {name: t for name, t in source.items() if not name.startswith("objective.")}
    return bb.BackboneParams(bcfg, tensors), bcfg, rc


def resume_pretrain_state(path, rc: RunConfig) -> PretrainState:
    ts = load_train_state(path)
    saved = ts.meta.get("config")
    if saved and saved.get("model") != rc.raw["model"]:
        raise CheckpointError("checkpoint model config differs from the run config")
    state = init_pretrain_state(rc)
    for name, t in ts.params.items():
        if name not in state.all_params:
            raise CheckpointError(f"checkpoint parameter {name!r} unknown to this config")
        state.all_params[name].data[...] = t.data
    state.adam = ts.adam
    if ts.ema is None:
        raise CheckpointError("pretrain checkpoint lacks EMA records")
    state.ema = ts.ema
    state.step = ts.step
    if ts.rng_state is not None:
        state.rng = restore_rng(ts.rng_state)
    return state


def run_pretrain(rc: RunConfig, resume: Optional[str] = None) -> dict:
    """Full pretraining command: loop, loss CSV, curve figure, checkpoints."""
    from .analysis import export_csv
    from .figures import save_loss_curve

    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rc.echo()
    train_ds, _ = rc.datasets()
    if resume:
        state = resume_pretrain_state(resume, rc)
    else:
        state = init_pretrain_state(rc)
    total = rc.raw["pretrain"]["steps"] or rc.raw["optim"]["total_steps"]
    every = rc.raw["pretrain"]["checkpoint_every"]
    aug = rc.augment_config()

    rows: list[tuple[int, float, float]] = []
    while state.step < total:
        chunk = min(every, total - state.step) if every > 0 else total - state.step
        rows.extend(pretrain_steps(state, train_ds, chunk, rc.seed, aug))
        if every > 0 and state.step < total:
            save_pretrain_checkpoint(out / f"ckpt_step{state.step}.nepa", state, rc)

    ckpt = out / "ckpt_final.nepa"
    save_pretrain_checkpoint(ckpt, state, rc)
    csv_path = out / "loss.csv"
    export_csv([(s, repr(l), repr(lr)) for s, l, lr in rows], csv_path,
               header=("step", "loss", "lr"))
    save_loss_curve([r[0] for r in rows], [r[1] for r in rows], out / "loss_curve.png")
    return {"rows": rows, "checkpoint": ckpt, "loss_csv": csv_path, "state": state}
