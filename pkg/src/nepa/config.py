"""Run configuration: a JSON document validated against a full schema.

Every field is checked before any compute; unknown keys are rejected with
their dotted path. Each command echoes the fully resolved document (defaults
filled in) next to its outputs, so a run can be reproduced from its artifacts
alone.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .data import DEFAULT_CLASSES, AugmentConfig, FolderDataset, SynthDataset, SynthSpec
from .errors import ConfigError
from .objective import ObjectiveConfig
from .optim import AdamWConfig, ScheduleConfig
from .transfer import FinetuneConfig

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/run",
    "model": {
        "image_size": 32,
        "patch_size": 8,
        "channels": 3,
        "dim": 64,
        "depth": 6,
        "heads": 4,
        "mlp_ratio": 4.0,
        "use_rope": True,
        "rope_mode": "2d-axial",
        "use_layerscale": True,
        "layerscale_init": 1e-5,
        "use_qknorm": True,
        "mlp_kind": "swiglu",
        "use_learnable_posembed": True,
        "attention_mode": "causal",
    },
    "objective": {
        "shift": True,
        "stop_grad": True,
        "mask_ratio": 0.0,
    },
    "optim": {
        "base_lr": 3e-4,
        "batch_size": 64,
        "warmup_steps": 150,
        "total_steps": 3000,
        "min_lr": 0.0,
        "weight_decay": 0.05,
        "beta1": 0.9,
        "beta2": 0.95,
        "eps": 1e-8,
        "ema_decay": 0.9999,
    },
    "data": {
        "kind": "synthetic",  # "synthetic" | "folder"
        "root": "",
        "test_root": "",
        "classes": list(DEFAULT_CLASSES),
        "color_mode": "contrast",
        "noise_std": 0.05,
        "pos_jitter": 0.2,
        "scale_range": [0.25, 0.42],
        "rot_jitter": math.pi,
        "data_seed": 0,
        "train_size": 8192,
        "test_size": 1024,
    },
    "augment": {
        "rrc_scale": [0.2, 1.0],
        "mixup_alpha": 0.8,
        "cutmix_alpha": 1.0,
        "label_smoothing": 0.1,
        "use_rrc": False,
        "use_mixup": True,
        "use_cutmix": True,
    },
    "pretrain": {
        "steps": 0,  # 0: run optim.total_steps
        "checkpoint_every": 0,  # 0: final checkpoint only
    },
    "finetune": {
        "checkpoint": "",
        "use_ema": True,
        "attention_mode": "bidirectional",
        "freeze_patch_embed": True,
        "epochs": 5,
        "head_init_std": 0.01,
        "drop_path_rate": 0.0,
        "base_lr": 1e-3,
        "batch_size": 64,
        "warmup_epochs": 0.5,
        "min_lr": 0.0,
        "llrd_start": 0.35,
        "llrd_end": 1.0,
        "weight_decay": 0.05,
        "beta1": 0.9,
        "beta2": 0.999,
    },
    "probe": {
        "checkpoint": "",
        "use_ema": True,
        "pooling": "both",  # "last" | "avg" | "both"
        "steps": 300,
        "lr": 0.05,
    },
    "analyze": {
        "checkpoint": "",
        "use_ema": True,
        "image_index": 0,
        "queries": [0],
        "layers": "all",  # "all" or a list of layer indices
        "heads": "all",
    },
    "ablate": {
        "steps": 400,
        "collapse_steps": 1500,  # the no-stop-grad run needs ~1k steps to collapse
        "shortcut_steps": 200,
        "finetune_epochs": 2,
        "mask_ratios": [0.0, 0.4, 0.6],
    },
}

# keys whose value may be either a string sentinel or a list
_UNION_KEYS = {"analyze.layers", "analyze.heads"}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        here = f"{path}.{key}" if path else key
        if key not in user:
            out[key] = copy.deepcopy(dval)
            continue
        uval = user[key]
        if isinstance(dval, dict):
            if not isinstance(uval, dict):
                raise ConfigError(f"config field {here}: expected an object")
            out[key] = _merge(dval, uval, here)
        elif here in _UNION_KEYS:
            if not isinstance(uval, (str, list)):
                raise ConfigError(f"config field {here}: expected 'all' or a list")
            out[key] = copy.deepcopy(uval)
        else:
            if not _type_ok(dval, uval):
                raise ConfigError(
                    f"config field {here}: expected {type(dval).__name__}, "
                    f"got {type(uval).__name__}")
            out[key] = copy.deepcopy(uval)
    for key in user:
        if key not in defaults:
            here = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {here}")
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        return cls.from_dict(user)

    @classmethod
    def from_dict(cls, user: dict) -> "RunConfig":
        rc = cls(raw=_merge(DEFAULTS, user))
        rc.backbone_config().validate()
        rc.objective_config().validate()
        rc.schedule_config().validate()
        rc.augment_config().validate()
        rc.finetune_config().validate()
        if rc.raw["data"]["kind"] not in ("synthetic", "folder"):
            raise ConfigError(f"data.kind must be synthetic or folder, "
                              f"got {rc.raw['data']['kind']!r}")
        if rc.raw["probe"]["pooling"] not in ("last", "avg", "both"):
            raise ConfigError(f"probe.pooling must be last, avg, or both")
        return rc

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    def with_seed(self, seed: int) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = seed
        return RunConfig(raw=raw)

    def echo(self, out_dir: Path | None = None) -> Path:
        """Write the resolved config beside the run outputs."""
        out = Path(out_dir) if out_dir is not None else self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved.json"
        path.write_text(json.dumps(self.raw, indent=2, sort_keys=True) + "\n")
        return path

    # typed views -----------------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.raw["model"])

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(**self.raw["objective"])

    def schedule_config(self) -> ScheduleConfig:
        o = self.raw["optim"]
        return ScheduleConfig(base_lr=o["base_lr"], batch_size=o["batch_size"],
                              warmup_steps=o["warmup_steps"], total_steps=o["total_steps"],
                              min_lr=o["min_lr"])

    def adamw_config(self) -> AdamWConfig:
        o = self.raw["optim"]
        return AdamWConfig(beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                           weight_decay=o["weight_decay"])

    def augment_config(self) -> AugmentConfig:
        a = self.raw["augment"]
        return AugmentConfig(rrc_scale=tuple(a["rrc_scale"]),
                             mixup_alpha=a["mixup_alpha"], cutmix_alpha=a["cutmix_alpha"],
                             label_smoothing=a["label_smoothing"], use_rrc=a["use_rrc"],
                             use_mixup=a["use_mixup"], use_cutmix=a["use_cutmix"])

    def finetune_config(self) -> FinetuneConfig:
        f = self.raw["finetune"]
        return FinetuneConfig(attention_mode=f["attention_mode"],
                              freeze_patch_embed=f["freeze_patch_embed"],
                              epochs=f["epochs"], head_init_std=f["head_init_std"],
                              drop_path_rate=f["drop_path_rate"], base_lr=f["base_lr"],
                              batch_size=f["batch_size"], warmup_epochs=f["warmup_epochs"],
                              min_lr=f["min_lr"], llrd_start=f["llrd_start"],
                              llrd_end=f["llrd_end"], weight_decay=f["weight_decay"],
                              beta1=f["beta1"], beta2=f["beta2"])

    def synth_spec(self) -> SynthSpec:
        d = self.raw["data"]
        return SynthSpec(classes=tuple(d["classes"]),
                         image_size=self.raw["model"]["image_size"],
                         noise_std=d["noise_std"], pos_jitter=d["pos_jitter"],
                         scale_range=tuple(d["scale_range"]), rot_jitter=d["rot_jitter"],
                         color_mode=d["color_mode"], seed=d["data_seed"])

    def datasets(self):
        """(train, test) pair per the data section."""
        d = self.raw["data"]
        if d["kind"] == "synthetic":
            spec = self.synth_spec()
            train = SynthDataset(spec, d["train_size"], offset=0)
            test = SynthDataset(spec, d["test_size"], offset=d["train_size"])
            return train, test
        if not d["root"]:
            raise ConfigError("data.kind folder requires data.root")
        train = FolderDataset(d["root"])
        test = FolderDataset(d["test_root"]) if d["test_root"] else train
        expected = (self.raw["model"]["channels"], self.raw["model"]["image_size"],
                    self.raw["model"]["image_size"])
        if train.image_shape != expected:
            raise ConfigError(f"folder images {train.image_shape} do not match model "
                              f"input {expected}")
        return train, test
