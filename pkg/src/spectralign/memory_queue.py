"""Fixed-capacity FIFO of L2-normalized teacher embeddings with top-k
retrieval and bit-exact checkpointing."""

from __future__ import annotations

import torch
from torch import Tensor

from . import serialization
from .errors import CheckpointError, ConfigurationError, DegenerateEmbeddingError, QueueEmptyError

_NORM_FLOOR = 1e-12


def _normalize_rows(z: Tensor) -> Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if (norms < _NORM_FLOOR).any():
        raise DegenerateEmbeddingError("near-zero-norm embedding row")
    return z / norms


class EmbeddingQueue:
    """Single-writer FIFO queue over a (capacity, dim) float32 buffer.

    Rows are normalized on insertion and stored detached, so retrieval never
    reaches back into a training graph.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ConfigurationError(
                f"capacity and dim must be positive, got ({capacity}, {dim})"
            )
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=torch.float32)
        self.cursor = 0
        self.fill = 0

    def push(self, z: Tensor) -> None:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[1] != self.dim:
            raise ConfigurationError(
                f"embedding dim {z.shape[1]} != queue dim {self.dim}"
            )
        b = z.shape[0]
        if b > self.capacity:
            raise ConfigurationError(
                f"batch of {b} exceeds queue capacity {self.capacity}"
            )
        rows = _normalize_rows(z.detach().to(torch.float32)).clone()
        end = self.cursor + b
        if end <= self.capacity:
            self.buffer[self.cursor:end] = rows
        else:
            head = self.capacity - self.cursor
            self.buffer[self.cursor:] = rows[:head]
            self.buffer[:end - self.capacity] = rows[head:]
        self.cursor = end % self.capacity
        self.fill = min(self.fill + b, self.capacity)

    def entries(self) -> Tensor:
        """Stored rows in physical order (constants, no grad)."""
        return self.buffer[:self.fill]

    def oldest_first(self) -> Tensor:
        """Stored rows in logical FIFO order."""
        if self.fill < self.capacity:
            return self.buffer[:self.fill]
        return torch.cat([self.buffer[self.cursor:], self.buffer[:self.cursor]])

    def top_k(self, z_ref: Tensor, k: int) -> tuple[Tensor, Tensor]:
        """For each reference row, the min(k, fill) most similar stored rows.

        Returns (indices, similarities), each (B, k_eff), similarities
        descending; ties broken by lower physical index.
        """
        if self.fill == 0:
            raise QueueEmptyError("top_k on an empty queue")
        if z_ref.dim() == 1:
            z_ref = z_ref.unsqueeze(0)
        z_ref = _normalize_rows(z_ref.detach().to(torch.float32))
        sims = z_ref @ self.entries().t()            # (B, fill)
        k_eff = min(k, self.fill)
        # stable sort keeps lower physical index first among equal sims
        order = torch.argsort(sims, dim=1, descending=True, stable=True)[:, :k_eff]
        return order, sims.gather(1, order)

    def checkpoint(self) -> bytes:
        return serialization.pack(
            meta={
                "kind": "queue",
                "capacity": self.capacity,
                "dim": self.dim,
                "cursor": self.cursor,
                "fill": self.fill,
            },
            tensors={"queue/buffer": self.buffer},
        )

    @classmethod
    def restore(cls, blob: bytes, expect_dim: int | None = None) -> "EmbeddingQueue":
        meta, tensors = serialization.unpack(blob)
        if meta.get("kind") != "queue":
            raise CheckpointError(f"expected a queue checkpoint, got {meta.get('kind')!r}")
        if expect_dim is not None and meta["dim"] != expect_dim:
            raise CheckpointError(
                f"queue dim {meta['dim']} != expected {expect_dim}"
            )
        q = cls(meta["capacity"], meta["dim"])
        buf = tensors["queue/buffer"]
        if tuple(buf.shape) != (q.capacity, q.dim):
            raise CheckpointError("queue buffer shape mismatch")
        q.buffer = buf
        q.cursor = meta["cursor"]
        q.fill = meta["fill"]
        return q

    def state_tensors(self) -> dict[str, torch.Tensor]:
        """For embedding into a larger checkpoint container."""
        return {"queue/buffer": self.buffer}

    def state_meta(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim,
                "cursor": self.cursor, "fill": self.fill}

    @classmethod
    def from_state(cls, meta: dict, tensors: dict[str, torch.Tensor]) -> "EmbeddingQueue":
        q = cls(meta["capacity"], meta["dim"])
        q.buffer = tensors["queue/buffer"]
        q.cursor = meta["cursor"]
        q.fill = meta["fill"]
        return q
