"""Benchmark records: per-chunk latency, forward counts, FLOPs, cache bytes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

CSV_FIELDS = ("mode", "chunk", "latency_ms", "forwards_low", "forwards_high", "flops", "cache_bytes")


@dataclass
class ChunkStats:
    chunk: int  # 1-based
    latency_s: float  # denoise loop only (cache writes and I/O excluded)
    forwards_low: int
    forwards_high: int
    flops: int  # all model passes in the chunk, cache-embedding included
    cache_bytes: int  # after the chunk's cache update


@dataclass
class RunReport:
    mode: str
    config_hash: str
    chunk_frames: int
    chunks: list[ChunkStats] = field(default_factory=list)

    @property
    def total_forwards(self) -> int:
        return sum(c.forwards_low + c.forwards_high for c in self.chunks)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.chunks)

    @property
    def total_latency_s(self) -> float:
        return sum(c.latency_s for c in self.chunks)

    def per_frame_latency_s(self) -> float:
        frames = self.chunk_frames * len(self.chunks)
        return self.total_latency_s / frames if frames else 0.0

    def to_text(self) -> str:
        lines = [
            f"mode: {self.mode}",
            f"config_hash: {self.config_hash}",
            f"chunks: {len(self.chunks)}",
            f"total_forwards: {self.total_forwards}",
            f"total_flops: {self.total_flops}",
            f"total_latency_s: {self.total_latency_s:.6f}",
            f"per_frame_latency_s: {self.per_frame_latency_s():.6f}",
        ]
        for c in self.chunks:
            lines.append(
                f"chunk {c.chunk}: latency_s={c.latency_s:.6f} forwards_low={c.forwards_low} "
                f"forwards_high={c.forwards_high} flops={c.flops} cache_bytes={c.cache_bytes}"
            )
        return "\n".join(lines)

    def csv_rows(self) -> list[dict]:
        return [
            {
                "mode": self.mode,
                "chunk": c.chunk,
                "latency_ms": f"{1000.0 * c.latency_s:.3f}",
                "forwards_low": c.forwards_low,
                "forwards_high": c.forwards_high,
                "flops": c.flops,
                "cache_bytes": c.cache_bytes,
            }
            for c in self.chunks
        ]


def write_csv(path, rows: list[dict], fields=CSV_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def csv_text(rows: list[dict], fields=CSV_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
