"""Next-embedding prediction loss with its ablation switches.

The default objective aligns the predictor output at position t with the
detached target embedding at t+1, both l2-normalized, and scores negative
cosine similarity averaged over the batch and the T-1 aligned pairs. The
switches turn off shifting (identity-mapping shortcut), the stop-gradient
barrier (collapse), or corrupt inputs with a learned mask token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backbone as bb
from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor


@dataclass
class ObjectiveConfig:
    shift: bool = True
    stop_grad: bool = True
    mask_ratio: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0,1), got {self.mask_ratio}")


def shift_pairs(pred: Tensor, target: Tensor, shift: bool = True) -> tuple[Tensor, Tensor]:
    """Align prediction at t with target at t+1; identity when shift is off."""
    if pred.shape != target.shape:
        raise ShapeError(f"shift_pairs: shapes differ, {pred.shape} vs {target.shape}")
    t = pred.shape[1]
    if not shift:
        return pred, target
    if t < 2:
        raise ShapeError(f"shift_pairs: need T >= 2 for a prediction target, got T={t}")
    return T.narrow(pred, 1, 0, t - 1), T.narrow(target, 1, 1, t - 1)


def nepa_loss(z: Tensor, h_out: Tensor, cfg: ObjectiveConfig) -> Tensor:
    """Negative mean cosine similarity between aligned (prediction, target) pairs.

    Targets pass through a stop-gradient barrier unless ablated. The result
    is a scalar in [-1, 1]; -1 means every aligned pair is positively
    collinear.
    """
    if z.shape != h_out.shape:
        raise ShapeError(f"nepa_loss: shapes differ, {z.shape} vs {h_out.shape}")
    if not (np.isfinite(z.data).all() and np.isfinite(h_out.data).all()):
        raise NumericError("nepa_loss: non-finite embeddings")
    target = T.stop_gradient(z) if cfg.stop_grad else z
    pred, target = shift_pairs(h_out, target, cfg.shift)
    pred = T.l2_normalize(pred)
    target = T.l2_normalize(target)
    cos = T.tsum(T.mul(pred, target), axis=-1)
    return T.neg(T.tmean(cos))


def mask_inputs(z: Tensor, mask_ratio: float, mask_token: Tensor,
                rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Replace floor(ratio*T) embeddings per sample with the mask token.

    Positions are drawn uniformly without replacement. Returns the corrupted
    sequence and the boolean mask for inspection; targets are never masked.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must be in [0,1), got {mask_ratio}")
    b, t, d = z.shape
    n_mask = int(mask_ratio * t)
    mask = np.zeros((b, t), dtype=bool)
    if n_mask == 0:
        return z, mask
    for i in range(b):
        mask[i, rng.choice(t, size=n_mask, replace=False)] = True
    keep = Tensor(np.repeat(~mask[:, :, None], d, axis=2).astype(z.data.dtype))
    drop = Tensor(np.repeat(mask[:, :, None], d, axis=2).astype(z.data.dtype))
    if mask_token.shape != (d,):
        raise ShapeError(f"mask_token shape {mask_token.shape} != ({d},)")
    z_masked = T.add(T.mul(z, keep), T.mul(mask_token, drop))
    return z_masked, mask


def training_step_forward(images: Tensor, params: bb.BackboneParams,
                          cfg: bb.BackboneConfig, obj: ObjectiveConfig,
                          mask_token: Optional[Tensor] = None,
                          rng: Optional[np.random.Generator] = None,
                          want_hidden: bool = False):
    """Compose embedding, optional input masking, prediction, and the loss.

    Returns (loss, EmbeddingSequence); the loss is ready for backward.
    """
    obj.validate()
    z = bb.embed(bb.patchify(bb.pixel_norm(images), cfg.patch_size), params)
    z_in = z
    if obj.mask_ratio > 0.0:
        if mask_token is None or rng is None:
            raise ConfigError("mask_ratio > 0 requires a mask_token and an rng")
        z_in, _ = mask_inputs(z, obj.mask_ratio, mask_token, rng)
    h_out, hidden, attn = bb.predict(z_in, params, cfg, want_hidden)
    seq = bb.EmbeddingSequence(z=z, h_out=h_out, hidden=hidden, attn=attn)
    return nepa_loss(z, h_out, obj), seq


def normalized_target_std(z: np.ndarray) -> float:
    """Across-patch spread of l2-normalized embeddings: mean per-dim stdev.

    Collapse drives this toward zero; healthy training keeps it near
    1/sqrt(dim).
    """
    flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    unit = flat / np.maximum(norms, 1e-12)
    return float(unit.std(axis=0).mean())
