"""Posterior-weighted reconstruction of LM input embeddings.

Per frame, the acoustic scores pass through a fixed chain -- subtract
log(blk_downscale) from the blank slot, divide by the temperature, softmax,
then a weighted sum over the embedding table -- producing one pseudo-speech
embedding per frame in the LM input space.  Variants restrict the sum to
the K highest-scoring slots (`topS`) or concatenate their embedding rows
through a trained projection (`topP`); `adapter` swaps in a separately
trained table when the acoustic vocabulary differs from the LM's.

Everything is differentiable with respect to the tables/projection (and
the scores, when they are tape-recorded); temperature is applied at
inference time only unless the config says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .lexicon import LogitGram

MODES = ("full", "topS", "topP", "adapter")


@dataclass(frozen=True)
class ConnectorConfig:
    mode: str = "full"
    tau: float = 1.0
    blk_downscale: float = 1.0
    k: Optional[int] = None
    apply_tau_at: str = "inference_only"  # or "always"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown connector mode {self.mode!r}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.blk_downscale < 1.0:
            raise ValueError("blk_downscale must be >= 1")
        if self.apply_tau_at not in ("inference_only", "always"):
            raise ValueError("apply_tau_at must be 'inference_only' or 'always'")
        if self.mode in ("topS", "topP") and self.k is None:
            raise ValueError(f"mode {self.mode!r} requires k")

    def effective_tau(self, at_inference: bool) -> float:
        if at_inference or self.apply_tau_at == "always":
            return self.tau
        return 1.0


def blank_downscale(z: LogitGram, factor: float) -> LogitGram:
    """Subtract log(factor) from the blank (last) column only."""
    if factor < 1.0:
        raise ValueError("blank downscale factor must be >= 1")
    if factor == 1.0:
        return z
    width = z.width
    delta = np.zeros(width, dtype=np.float64)
    delta[width - 1] = -math.log(factor)
    return LogitGram(tt.add(z.logits, tt.Tensor(delta)))


def _check_k(k, width: int) -> int:
    if k is None or not 1 <= k <= width:
        raise ValueError(f"k must lie in [1, {width}]")
    return int(k)


def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest entries, descending, ties to lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def reconstruct_full(z: LogitGram, table: tt.Tensor, cfg: ConnectorConfig,
                     at_inference: bool = True) -> tt.Tensor:
    """Weighted sum of all table rows under the per-frame distribution."""
    if z.width != table.shape[0]:
        raise ValueError(
            f"score width {z.width} does not match table rows {table.shape[0]}"
        )
    zd = blank_downscale(z, cfg.blk_downscale)
    probs = tt.softmax(zd.logits, tau=cfg.effective_tau(at_inference))
    return tt.matmul(probs, table)


def reconstruct_topS(z: LogitGram, table: tt.Tensor, k: int, cfg: ConnectorConfig,
                     at_inference: bool = True) -> tt.Tensor:
    """Softmax-weighted sum restricted to the K highest-scoring slots per frame."""
    if z.width != table.shape[0]:
        raise ValueError(
            f"score width {z.width} does not match table rows {table.shape[0]}"
        )
    k = _check_k(k, z.width)
    zd = blank_downscale(z, cfg.blk_downscale)
    frames, width = zd.logits.shape
    idx = _topk_indices(zd.logits.data, k)  # selection is not differentiated

    flat = (np.arange(frames)[:, None] * width + idx).reshape(-1)
    picked = tt.reshape(tt.gather_flat(zd.logits, flat), (frames, k))
    weights = tt.softmax(picked, tau=cfg.effective_tau(at_inference))

    rows = tt.gather_rows(table, idx.reshape(-1))          # [frames*k, d]
    weighted = tt.scale_rows(rows, tt.reshape(weights, (frames * k,)))
    return tt.sum_groups(weighted, k)


def reconstruct_topP(z: LogitGram, table: tt.Tensor, k: int, proj: tt.Tensor,
                     cfg: ConnectorConfig, at_inference: bool = True) -> tt.Tensor:
    """Concatenate the K selected rows (descending score) and project back to d."""
    if z.width != table.shape[0]:
        raise ValueError(
            f"score width {z.width} does not match table rows {table.shape[0]}"
        )
    k = _check_k(k, z.width)
    d = table.shape[1]
    if proj.shape != (k * d, d):
        raise ValueError(f"projection must be [{k * d}, {d}], got {proj.shape}")
    zd = blank_downscale(z, cfg.blk_downscale)
    frames = zd.frames
    idx = _topk_indices(zd.logits.data, k)

    rows = tt.gather_rows(table, idx.reshape(-1))          # [frames*k, d]
    concat = tt.reshape(rows, (frames, k * d))
    return tt.matmul(concat, proj)


def reconstruct_adapter(z_asr: LogitGram, adapter: tt.Tensor, cfg: ConnectorConfig,
                        at_inference: bool = True) -> tt.Tensor:
    """Full reconstruction against a separately trained table (vocab mismatch)."""
    if z_asr.width != adapter.shape[0]:
        raise ValueError(
            f"score width {z_asr.width} does not match adapter rows {adapter.shape[0]}"
        )
    return reconstruct_full(z_asr, adapter, cfg, at_inference=at_inference)


def reconstruct(z: LogitGram, cfg: ConnectorConfig, table: tt.Tensor,
                proj: Optional[tt.Tensor] = None,
                adapter: Optional[tt.Tensor] = None,
                at_inference: bool = True) -> tt.Tensor:
    """Dispatch on cfg.mode; `table` is the LM embedding table (V+1 rows)."""
    if cfg.mode == "full":
        return reconstruct_full(z, table, cfg, at_inference)
    if cfg.mode == "topS":
        return reconstruct_topS(z, table, cfg.k, cfg, at_inference)
    if cfg.mode == "topP":
        if proj is None:
            raise ValueError("topS/topP projection is missing for mode 'topP'")
        return reconstruct_topP(z, table, cfg.k, proj, cfg, at_inference)
    if cfg.mode == "adapter":
        if adapter is None:
            raise ValueError("adapter table is missing for mode 'adapter'")
        return reconstruct_adapter(z, adapter, cfg, at_inference)
    raise ValueError(f"unknown connector mode {cfg.mode!r}")
