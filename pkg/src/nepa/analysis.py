"""Diagnostics: per-query attention maps, predicted-embedding similarity maps,
and delimited exports.

Maps are exported twice from the CLI: a raw PGM (P5, 8-bit) for tooling and
a rendered heatmap figure. Similarity PGMs use the fixed [-1, 1] range so
images stay comparable across checkpoints; attention maps scale to their own
min/max since their magnitude varies with sequence length.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import backbone as bb
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class AnalysisMap:
    grid: np.ndarray           # [G, G] float
    kind: str                  # "attention" | "similarity"
    query_index: int
    layer: Optional[int] = None
    head: Optional[int] = None


def attention_map(images: Tensor, params: bb.BackboneParams, cfg: bb.BackboneConfig,
                  layer: int, head: int, query_index: int) -> AnalysisMap:
    """Post-softmax attention row for one query patch, on the patch grid.

    In causal mode entries for keys beyond the query are exactly zero.
    """
    if not 0 <= layer < cfg.depth:
        raise ConfigError(f"layer {layer} outside [0, {cfg.depth})")
    if not 0 <= head < cfg.heads:
        raise ConfigError(f"head {head} outside [0, {cfg.heads})")
    t = cfg.seq_len
    if not 0 <= query_index < t:
        raise ConfigError(f"query_index {query_index} outside [0, {t})")
    seq = bb.forward(images, params, cfg, want_hidden=True)
    row = seq.attn[layer][0, head, query_index]
    return AnalysisMap(grid=row.reshape(cfg.grid, cfg.grid).copy(), kind="attention",
                       query_index=query_index, layer=layer, head=head)


def cosine_row(pred: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Cosine of one predicted embedding against every target embedding.

    Invariant to rescaling either side by any positive constant.
    """
    pn = pred / max(np.linalg.norm(pred), 1e-12)
    tn = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-12)
    return tn @ pn


def similarity_map(images: Tensor, params: bb.BackboneParams, cfg: bb.BackboneConfig,
                   query_index: int) -> AnalysisMap:
    """Cosine between the embedding predicted at the query and every target.

    The prediction for position query+1 is the predictor output at the query
    itself (the shifting convention), so the map shows where the model thinks
    the sequence is heading.
    """
    t = cfg.seq_len
    if not 0 <= query_index < t:
        raise ConfigError(f"query_index {query_index} outside [0, {t})")
    seq = bb.forward(images, params, cfg)
    sims = cosine_row(seq.h_out.data[0, query_index].astype(np.float64),
                      seq.z.data[0].astype(np.float64))
    return AnalysisMap(grid=sims.reshape(cfg.grid, cfg.grid),
                       kind="similarity", query_index=query_index)


def export_pgm(amap: AnalysisMap, path) -> None:
    """8-bit P5 image of the map; byte-deterministic for identical maps."""
    grid = np.asarray(amap.grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"export_pgm: map must be 2-d, got {grid.shape}")
    if amap.kind == "similarity":
        lo, hi = -1.0, 1.0
    else:
        lo, hi = float(grid.min()), float(grid.max())
    if hi - lo < 1e-12:
        scaled = np.full_like(grid, 128.0)
    else:
        scaled = (grid - lo) / (hi - lo) * 255.0
    pixels = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Parse a P5 written by export_pgm back into [0,1] floats (for tests)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ShapeError(f"{path}: not a P5 PGM")
    parts = data.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    raw = parts[3][: w * h]
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def export_csv(rows: Sequence[tuple], path, header: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def pgm_name(amap: AnalysisMap) -> str:
    if amap.kind == "attention":
        return f"attn_L{amap.layer}_H{amap.head}_Q{amap.query_index}.pgm"
    return f"sim_Q{amap.query_index}.pgm"
