"""Causal vision transformer: patch embedding, rotary positions, and the
autoregressive predictor with its switchable stabilization components
(RoPE, LayerScale, SwiGLU, QK-Norm).

The patch embedding is realized as unfold + affine, which is mathematically
identical to a strided convolution and much simpler to gradient-check. The
learnable positional table is added to the predictor input only; targets stay
position-free so the objective scores patch content, not location.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import make_rng, truncated_normal
from .tensor import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    use_rope: bool = True
    rope_mode: str = "2d-axial"  # "1d" | "2d-axial"
    use_layerscale: bool = True
    layerscale_init: float = 1e-5
    use_qknorm: bool = True
    mlp_kind: str = "swiglu"  # "gelu" | "swiglu"
    use_learnable_posembed: bool = True
    attention_mode: str = "causal"  # "causal" | "bidirectional"

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.rope_mode not in ("1d", "2d-axial"):
            raise ConfigError(f"unknown rope_mode {self.rope_mode!r}")
        if self.mlp_kind not in ("gelu", "swiglu"):
            raise ConfigError(f"unknown mlp_kind {self.mlp_kind!r}")
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.use_rope:
            if self.head_dim % 2 != 0:
                raise ConfigError(f"head_dim {self.head_dim} must be even with rope")
            if self.rope_mode == "2d-axial" and self.head_dim % 4 != 0:
                raise ConfigError(
                    f"head_dim {self.head_dim} must be a multiple of 4 for 2d-axial rope")
        if self.use_layerscale and self.layerscale_init <= 0:
            raise ConfigError(f"layerscale_init must be positive, got {self.layerscale_init}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_len(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        if self.mlp_kind == "gelu":
            return int(self.mlp_ratio * self.dim)
        # gated variant: 2/3 of the gelu width, rounded to a multiple of 8,
        # keeps the parameter count comparable (three matrices vs two)
        raw = 2.0 / 3.0 * self.mlp_ratio * self.dim
        return max(8, int(round(raw / 8.0)) * 8)

    def param_count(self) -> int:
        d, h = self.dim, self.mlp_hidden
        n = self.patch_len * d + d            # patch projection
        if self.use_learnable_posembed:
            n += self.seq_len * d             # positional table
        per_block = 4 * (d * d + d)           # q, k, v, o projections
        if self.use_layerscale:
            per_block += 2 * d
        if self.mlp_kind == "gelu":
            per_block += d * h + h + h * d + d
        else:
            per_block += 2 * (d * h + h) + h * d + d
        n += self.depth * per_block
        n += 2 * d                            # final layernorm affine
        return n


def _block_names(cfg: BackboneConfig, i: int) -> list[tuple[str, tuple]]:
    d, h = cfg.dim, cfg.mlp_hidden
    p = f"blocks.{i}"
    names = [
        (f"{p}.attn.wq", (d, d)), (f"{p}.attn.bq", (d,)),
        (f"{p}.attn.wk", (d, d)), (f"{p}.attn.bk", (d,)),
        (f"{p}.attn.wv", (d, d)), (f"{p}.attn.bv", (d,)),
        (f"{p}.attn.wo", (d, d)), (f"{p}.attn.bo", (d,)),
    ]
    if cfg.use_layerscale:
        names += [(f"{p}.ls1", (d,)), (f"{p}.ls2", (d,))]
    if cfg.mlp_kind == "gelu":
        names += [
            (f"{p}.mlp.w1", (d, h)), (f"{p}.mlp.b1", (h,)),
            (f"{p}.mlp.w2", (h, d)), (f"{p}.mlp.b2", (d,)),
        ]
    else:
        names += [
            (f"{p}.mlp.wg", (d, h)), (f"{p}.mlp.bg", (h,)),
            (f"{p}.mlp.wu", (d, h)), (f"{p}.mlp.bu", (h,)),
            (f"{p}.mlp.wd", (h, d)), (f"{p}.mlp.bd", (d,)),
        ]
    return names


def parameter_shapes(cfg: BackboneConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list; checkpoint record order follows this."""
    d = cfg.dim
    names = [("patch_proj.w", (cfg.patch_len, d)), ("patch_proj.b", (d,))]
    if cfg.use_learnable_posembed:
        names.append(("pos_embed", (cfg.seq_len, d)))
    for i in range(cfg.depth):
        names += _block_names(cfg, i)
    names += [("final_ln.g", (d,)), ("final_ln.b", (d,))]
    return names


class BackboneParams:
    """All learnable weights, keyed by hierarchical names."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config
        expected = parameter_shapes(config)
        for name, shape in expected:
            if name not in tensors:
                raise ConfigError(f"missing parameter {name}")
            if tensors[name].shape != shape:
                raise ShapeError(
                    f"parameter {name}: shape {tensors[name].shape} != expected {shape}")
        self.tensors = {name: tensors[name] for name, _ in expected}

    @classmethod
    def init(cls, config: BackboneConfig, seed: int, dtype=np.float32) -> "BackboneParams":
        config.validate()
        rng = make_rng(seed, 0xB0)
        tensors = {}
        for name, shape in parameter_shapes(config):
            if name.endswith((".ls1", ".ls2")):
                data = np.full(shape, config.layerscale_init, dtype=dtype)
            elif name == "final_ln.g":
                data = np.ones(shape, dtype=dtype)
            elif name == "final_ln.b" or name.split(".")[-1].startswith("b"):
                data = np.zeros(shape, dtype=dtype)
            else:
                data = truncated_normal(rng, shape, std=0.02, dtype=dtype)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named(self):
        return self.tensors.items()

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "BackboneParams":
        return BackboneParams(self.config, {
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self.named()
        })

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.named()
        })

    def layer_group(self, name: str) -> int:
        """LLRD group: patch embedding and positional table 0, block i at i+1,
        the final norm with whatever sits on top (depth+1)."""
        if name.startswith(("patch_proj", "pos_embed")):
            return 0
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        return self.config.depth + 1


@dataclass
class EmbeddingSequence:
    """Targets and predictor outputs for one batch of images."""

    z: Tensor                      # [B, T, dim] patch embeddings (targets)
    h_out: Tensor                  # [B, T, dim] predictor outputs, pre-shift
    hidden: Optional[list] = None  # per-layer activations as arrays
    attn: Optional[list] = None    # per-layer post-softmax weights [B,H,T,T]


# ---------------------------------------------------------------------------
# patch handling


def pixel_norm(images: Tensor) -> Tensor:
    """Map [0,1] pixels to [-1,1] at the model boundary.

    Centering removes the shared mean component of raw pixels; without it
    every patch embedding leans on one common direction and cosine scores
    saturate before any learning happens.
    """
    return T.mul_scalar(T.add_scalar(images, -0.5), 2.0)


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[B,C,H,W] -> [B,T,C*p*p] in row-major raster order, channel-major rows."""
    if images.ndim != 4:
        raise ShapeError(f"patchify: expected [B,C,H,W], got {images.shape}")
    b, c, h, w = images.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ConfigError(f"patchify: image {h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = T.reshape(images, (b, c, gh, patch_size, gw, patch_size))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch_size * patch_size))


def unpatchify(patches: Tensor, channels: int, image_size: int, patch_size: int) -> Tensor:
    """Exact inverse of patchify."""
    b, t, _ = patches.shape
    g = image_size // patch_size
    if t != g * g:
        raise ShapeError(f"unpatchify: {t} patches do not tile a {g}x{g} grid")
    x = T.reshape(patches, (b, g, g, channels, patch_size, patch_size))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (b, channels, image_size, image_size))


def embed(patches: Tensor, params: BackboneParams) -> Tensor:
    """Shared affine projection of flattened patches; no positional content."""
    w = params["patch_proj.w"]
    if patches.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"embed: patch rows of length {patches.shape[-1]} vs projection {w.shape}")
    return T.add(T.matmul(patches, w), params["patch_proj.b"])


# ---------------------------------------------------------------------------
# rotary position embedding


def rope_angles(positions: np.ndarray, head_dim: int, mode: str,
                base: float = 10000.0) -> np.ndarray:
    """Per-position, per-pair rotation angles, shape [T, head_dim//2].

    1d: all pairs driven by the scalar position with frequencies
    base^(-2j/head_dim). 2d-axial: the first half of the pairs rotates with
    the row coordinate and the second half with the column, each over a
    frequency ladder sized to head_dim/2.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if mode == "1d":
        if positions.ndim != 1:
            raise ShapeError(f"rope positions for 1d must be [T], got {positions.shape}")
        pairs = head_dim // 2
        freqs = base ** (-2.0 * np.arange(pairs) / head_dim)
        return positions[:, None] * freqs[None, :]
    if mode == "2d-axial":
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise ShapeError(f"rope positions for 2d-axial must be [T,2], got {positions.shape}")
        d_axis = head_dim // 2
        freqs = base ** (-2.0 * np.arange(d_axis // 2) / d_axis)
        row = positions[:, 0:1] * freqs[None, :]
        col = positions[:, 1:2] * freqs[None, :]
        return np.concatenate([row, col], axis=1)
    raise ConfigError(f"unknown rope_mode {mode!r}")


def grid_positions(grid: int, mode: str) -> np.ndarray:
    """Default patch coordinates for a raster-scanned square grid."""
    t = np.arange(grid * grid)
    if mode == "1d":
        return t
    return np.stack([t // grid, t % grid], axis=1)


def apply_rope(q: Tensor, k: Tensor, positions: np.ndarray, mode: str,
               base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Rotate q/k value pairs so attention logits depend on relative offsets.

    q, k: [..., T, head_dim]; positions: [T] (1d) or [T,2] (2d-axial).
    """
    head_dim = q.shape[-1]
    if head_dim % 2 != 0:
        raise ConfigError(f"apply_rope: head_dim {head_dim} must be even")
    angles = rope_angles(positions, head_dim, mode, base)
    cos = np.cos(angles).astype(q.data.dtype)
    sin = np.sin(angles).astype(q.data.dtype)
    return T.rope_rotate(q, cos, sin), T.rope_rotate(k, cos, sin)


# ---------------------------------------------------------------------------
# attention and blocks


def causal_mask(t: int, dtype) -> Tensor:
    """Additive [T,T] mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -np.inf
    return Tensor(m)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    x = T.reshape(x, (b, t, heads, d // heads))
    return T.transpose(x, (0, 2, 1, 3))  # [B, H, T, hd]


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, h * hd))


def attention(x: Tensor, params: BackboneParams, block: int, cfg: BackboneConfig,
              want_attn: bool = False):
    """Multi-head attention with optional causal masking, QK-Norm, and RoPE.

    Returns (output [B,T,dim], post-softmax weights as an array or None).
    QK-Norm is a parameter-free layernorm per head, applied before the rope
    rotation; rotations are isometries so the normalization statistics
    survive either ordering.
    """
    p = f"blocks.{block}.attn"
    b, t, d = x.shape
    q = _split_heads(T.add(T.matmul(x, params[f"{p}.wq"]), params[f"{p}.bq"]), cfg.heads)
    k = _split_heads(T.add(T.matmul(x, params[f"{p}.wk"]), params[f"{p}.bk"]), cfg.heads)
    v = _split_heads(T.add(T.matmul(x, params[f"{p}.wv"]), params[f"{p}.bv"]), cfg.heads)

    if cfg.use_qknorm:
        q = T.layernorm(q)
        k = T.layernorm(k)
    if cfg.use_rope:
        if cfg.rope_mode == "1d":
            positions = np.arange(t)
        else:
            if t != cfg.seq_len:
                raise ShapeError(
                    f"2d-axial rope needs the full {cfg.grid}x{cfg.grid} grid, got T={t}")
            positions = grid_positions(cfg.grid, cfg.rope_mode)
        q, k = apply_rope(q, k, positions, cfg.rope_mode)

    logits = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(cfg.head_dim))
    if cfg.attention_mode == "causal":
        logits = T.add(logits, causal_mask(t, x.data.dtype))
    weights = T.softmax_lastdim(logits)
    out = _merge_heads(T.matmul(weights, v))
    out = T.add(T.matmul(out, params[f"{p}.wo"]), params[f"{p}.bo"])
    return out, (weights.data.copy() if want_attn else None)


def _mlp(x: Tensor, params: BackboneParams, block: int, cfg: BackboneConfig) -> Tensor:
    p = f"blocks.{block}.mlp"
    if cfg.mlp_kind == "gelu":
        h = T.gelu(T.add(T.matmul(x, params[f"{p}.w1"]), params[f"{p}.b1"]))
        return T.add(T.matmul(h, params[f"{p}.w2"]), params[f"{p}.b2"])
    gate = T.silu(T.add(T.matmul(x, params[f"{p}.wg"]), params[f"{p}.bg"]))
    up = T.add(T.matmul(x, params[f"{p}.wu"]), params[f"{p}.bu"])
    return T.add(T.matmul(T.mul(gate, up), params[f"{p}.wd"]), params[f"{p}.bd"])


def block_forward(x: Tensor, params: BackboneParams, block: int, cfg: BackboneConfig,
                  want_attn: bool = False):
    """Pre-norm residual block: x + ls1*Attn(LN(x)), then + ls2*MLP(LN(.))."""
    a, attn_w = attention(T.layernorm(x), params, block, cfg, want_attn)
    if cfg.use_layerscale:
        a = T.mul(a, params[f"blocks.{block}.ls1"])
    x = T.add(x, a)
    m = _mlp(T.layernorm(x), params, block, cfg)
    if cfg.use_layerscale:
        m = T.mul(m, params[f"blocks.{block}.ls2"])
    return T.add(x, m), attn_w


def predict(z_input: Tensor, params: BackboneParams, cfg: BackboneConfig,
            want_hidden: bool = False):
    """Run the predictor over already-embedded inputs.

    Adds the positional table (when enabled), applies the blocks and the
    final layernorm. Returns (h_out, hidden, attn).
    """
    x = z_input
    if cfg.use_learnable_posembed:
        t = z_input.shape[1]
        pos = params["pos_embed"]
        if t != pos.shape[0]:
            raise ShapeError(f"sequence length {t} != positional table {pos.shape[0]}")
        x = T.add(x, pos)
    hidden = [x.data.copy()] if want_hidden else None
    attn = [] if want_hidden else None
    for i in range(cfg.depth):
        x, attn_w = block_forward(x, params, i, cfg, want_attn=want_hidden)
        if want_hidden:
            hidden.append(x.data.copy())
            attn.append(attn_w)
    h_out = T.layernorm(x, params["final_ln.g"], params["final_ln.b"])
    return h_out, hidden, attn


def forward(images: Tensor, params: BackboneParams, cfg: BackboneConfig,
            want_hidden: bool = False) -> EmbeddingSequence:
    """Full pass: targets z = embed(patchify(images)), h_out = predictor(z)."""
    z = embed(patchify(pixel_norm(images), cfg.patch_size), params)
    h_out, hidden, attn = predict(z, params, cfg, want_hidden)
    return EmbeddingSequence(z=z, h_out=h_out, hidden=hidden, attn=attn)


def with_attention_mode(cfg: BackboneConfig, mode: str) -> BackboneConfig:
    return dataclasses.replace(cfg, attention_mode=mode)
