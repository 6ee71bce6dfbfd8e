"""Dual-resolution KV store with anchor-guided sliding-window retention.

Both resolutions always retain the same global frame set. Under the ``agsw``
policy that set is exactly {frame 0} plus the last M-1 frames of the newest
chunk, so the cache byte count is one constant integer for the whole run and
any chunk attends to at most 2M frames (M cached + M of its own). Under
``full_history`` everything is kept. Eviction is physical: updates build new
arrays, so byte counts measure what is actually retained.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, StateError
from .model import LayerKV

POLICIES = ("agsw", "full_history")


def select_frames(kv: LayerKV, wanted: tuple[int, ...]) -> LayerKV:
    """Copy of one layer's cache restricted to the given global frames."""
    index = {f: i for i, f in enumerate(kv.frame_indices)}
    missing = [f for f in wanted if f not in index]
    if missing:
        raise ContractError(f"frames {missing} not present in cache layer")
    rows = [index[f] for f in wanted]
    return LayerKV(kv.k[rows].copy(), kv.v[rows].copy(), tuple(wanted))


def concat_kv(a: LayerKV, b: LayerKV) -> LayerKV:
    return LayerKV(
        np.concatenate([a.k, b.k], axis=0),
        np.concatenate([a.v, b.v], axis=0),
        a.frame_indices + b.frame_indices,
    )


class DualKVCache:
    """Per-layer key/value context at two resolutions, one per generation stream."""

    def __init__(self, n_layers: int, policy: str = "agsw"):
        if policy not in POLICIES:
            raise ContractError(f"unknown retention policy {policy!r}")
        self.n_layers = n_layers
        self.policy = policy
        self.low: list[LayerKV] | None = None
        self.high: list[LayerKV] | None = None
        self.retained: tuple[int, ...] = ()
        self.seen_frames: set[int] = set()
        self.chunks_stored = 0
        self.anchor_index = 0
        self._mask: frozenset[int] | None = None

    # -- lifecycle -----------------------------------------------------------

    def _check_chunk(self, kv_low, kv_high):
        if len(kv_low) != self.n_layers or len(kv_high) != self.n_layers:
            raise ContractError("per-layer KV lists must match the model depth")
        if kv_low[0].frame_indices != kv_high[0].frame_indices:
            raise ContractError("low/high KV must cover the same frames")

    def append_first_chunk(self, kv_low: list[LayerKV], kv_high: list[LayerKV]) -> None:
        if self.chunks_stored != 0:
            raise StateError("append_first_chunk on a non-empty cache")
        self._check_chunk(kv_low, kv_high)
        self.low = [LayerKV(l.k.copy(), l.v.copy(), l.frame_indices) for l in kv_low]
        self.high = [LayerKV(l.k.copy(), l.v.copy(), l.frame_indices) for l in kv_high]
        self.retained = kv_high[0].frame_indices
        self.seen_frames.update(self.retained)
        self.chunks_stored = 1

    def agsw_update(self, kv_low: list[LayerKV], kv_high: list[LayerKV], chunk_index: int) -> None:
        """Keep the anchor frame plus the last M-1 frames of chunk ``chunk_index``."""
        if chunk_index < 2:
            raise StateError("agsw_update applies from the second chunk onward")
        if self.chunks_stored == 0:
            raise StateError("cache not initialized by append_first_chunk")
        self._check_chunk(kv_low, kv_high)
        frames = kv_high[0].frame_indices
        self.seen_frames.update(frames)
        keep_new = frames[1:]  # drop the chunk's first frame, keep the last M-1
        new_low, new_high = [], []
        for layer in range(self.n_layers):
            anchor_low = select_frames(self.low[layer], (self.anchor_index,))
            anchor_high = select_frames(self.high[layer], (self.anchor_index,))
            new_low.append(concat_kv(anchor_low, select_frames(kv_low[layer], keep_new)))
            new_high.append(concat_kv(anchor_high, select_frames(kv_high[layer], keep_new)))
        self.low, self.high = new_low, new_high
        self.retained = (self.anchor_index,) + keep_new
        self.chunks_stored = chunk_index

    def full_update(self, kv_low: list[LayerKV], kv_high: list[LayerKV], chunk_index: int) -> None:
        if self.chunks_stored == 0:
            raise StateError("cache not initialized by append_first_chunk")
        self._check_chunk(kv_low, kv_high)
        frames = kv_high[0].frame_indices
        self.seen_frames.update(frames)
        for layer in range(self.n_layers):
            self.low[layer] = concat_kv(self.low[layer], kv_low[layer])
            self.high[layer] = concat_kv(self.high[layer], kv_high[layer])
        self.retained = self.retained + frames
        self.chunks_stored = chunk_index

    def update_after_chunk(self, kv_low, kv_high, chunk_index: int) -> None:
        if chunk_index == 1:
            self.append_first_chunk(kv_low, kv_high)
        elif self.policy == "agsw":
            self.agsw_update(kv_low, kv_high, chunk_index)
        else:
            self.full_update(kv_low, kv_high, chunk_index)

    # -- reads ---------------------------------------------------------------

    def apply_retention_mask(self, keep) -> None:
        """Restrict subsequent contexts to the given global frames."""
        keep = frozenset(int(f) for f in keep)
        unknown = keep - self.seen_frames
        if unknown:
            raise ContractError(f"mask names never-generated frames: {sorted(unknown)}")
        self._mask = keep

    def clear_retention_mask(self) -> None:
        self._mask = None

    def context_for(self, resolution: str) -> list[LayerKV]:
        """Retained context at one resolution, ascending global frame order."""
        layers = {"low": self.low, "high": self.high}.get(resolution)
        if resolution not in ("low", "high"):
            raise ContractError(f"unknown resolution tag {resolution!r}")
        if layers is None:
            return []
        if self._mask is None:
            return layers
        visible = tuple(f for f in self.retained if f in self._mask)
        if visible == self.retained:
            return layers
        if not visible:
            return []
        return [select_frames(layer, visible) for layer in layers]

    # -- accounting ----------------------------------------------------------

    def byte_size(self) -> int:
        total = 0
        for layers in (self.low, self.high):
            if layers:
                total += sum(layer.nbytes for layer in layers)
        return total

    def describe(self) -> str:
        low_bytes = sum(l.nbytes for l in self.low) if self.low else 0
        high_bytes = sum(l.nbytes for l in self.high) if self.high else 0
        lines = [
            f"policy: {self.policy}",
            f"retained_frames: {list(self.retained)}",
            f"low_bytes: {low_bytes}",
            f"high_bytes: {high_bytes}",
            f"total_bytes: {self.byte_size()}",
        ]
        if self._mask is not None:
            lines.append(f"retention_mask: {sorted(self._mask)}")
        return "\n".join(lines)
