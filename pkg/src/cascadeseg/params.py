"""Flat parameter vector partitioned into named, freezable blocks.

The store underpins strict parameter isolation: each block records its owning
task and a frozen flag, snapshots capture the full vector at task convergence,
and the checkpoint format round-trips everything bit-exactly.
"""

import struct
import numpy as np
from dataclasses import dataclass


CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1


class StoreError(Exception):
    pass


@dataclass
class Block:
    offset: int
    length: int
    task: int
    frozen: bool


class ParameterStore:
    """Flat float64 vector tiled exactly by named blocks."""

    def __init__(self):
        self.vector = np.zeros(0, dtype=np.float64)
        self.blocks = {}
        self.order = []
        self.snapshots = {}

    def add_block(self, name, values, task):
        if name in self.blocks:
            raise StoreError(f"duplicate block {name!r}")
        values = np.asarray(values, dtype=np.float64).ravel()
        offset = self.vector.size
        self.vector = np.concatenate([self.vector, values])
        self.blocks[name] = Block(offset, values.size, task, False)
        self.order.append(name)
        return name

    def get(self, name):
        b = self.blocks[name]
        return self.vector[b.offset:b.offset + b.length]

    def set(self, name, values):
        b = self.blocks[name]
        if b.frozen:
            raise StoreError(f"block {name!r} is frozen")
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != b.length:
            raise StoreError(f"block {name!r} expects {b.length} values, got "
                             f"{values.size}")
        self.vector[b.offset:b.offset + b.length] = values

    def freeze(self, name):
        self.blocks[name].frozen = True

    def unfreeze(self, name):
        self.blocks[name].frozen = False

    def freeze_all(self):
        for b in self.blocks.values():
            b.frozen = True

    def frozen_mask(self):
        mask = np.ones(self.vector.size, dtype=bool)
        for b in self.blocks.values():
            if not b.frozen:
                mask[b.offset:b.offset + b.length] = False
        return mask

    def blocks_of_task(self, task):
        return [n for n in self.order if self.blocks[n].task == task]

    def snapshot(self, task):
        """Record the converged vector for a task; exactly once per task."""
        if task in self.snapshots:
            raise StoreError(f"snapshot for task {task} already recorded")
        self.snapshots[task] = self.vector.copy()

    def get_snapshot(self, task):
        if task not in self.snapshots:
            raise StoreError(f"no snapshot recorded for task {task}")
        return self.snapshots[task]

    def check_tiling(self):
        """Blocks must tile the vector contiguously with no gaps or overlap."""
        pos = 0
        for name in self.order:
            b = self.blocks[name]
            if b.offset != pos:
                return False
            pos += b.length
        return pos == self.vector.size

    # -- checkpoint io -----------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(self.order)))
            for name in self.order:
                b = self.blocks[name]
                raw = name.encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(struct.pack("<QQiB", b.offset, b.length, b.task,
                                    int(b.frozen)))
            f.write(struct.pack("<Q", self.vector.size))
            f.write(self.vector.astype("<f8").tobytes())
            f.write(struct.pack("<I", len(self.snapshots)))
            for task in sorted(self.snapshots):
                snap = self.snapshots[task]
                f.write(struct.pack("<iQ", task, snap.size))
                f.write(snap.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        store = cls()
        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise StoreError(f"{path}: not a checkpoint file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != CHECKPOINT_VERSION:
                raise StoreError(f"{path}: unsupported checkpoint version "
                                 f"{version}")
            (nblocks,) = struct.unpack("<I", f.read(4))
            for _ in range(nblocks):
                (nlen,) = struct.unpack("<H", f.read(2))
                name = f.read(nlen).decode("utf-8")
                offset, length, task, frozen = struct.unpack("<QQiB", f.read(21))
                store.blocks[name] = Block(offset, length, task, bool(frozen))
                store.order.append(name)
            (total,) = struct.unpack("<Q", f.read(8))
            store.vector = np.frombuffer(f.read(total * 8), dtype="<f8").astype(
                np.float64)
            (nsnaps,) = struct.unpack("<I", f.read(4))
            for _ in range(nsnaps):
                task, size = struct.unpack("<iQ", f.read(12))
                store.snapshots[task] = np.frombuffer(
                    f.read(size * 8), dtype="<f8").astype(np.float64)
        if not store.check_tiling():
            raise StoreError(f"{path}: block table does not tile the vector")
        return store


class Layout:
    """Packed coordinate layout over a chosen subset of store blocks.

    Used by the forgetting lab to express Hessians, deltas and gradients over
    one common trainable index space.
    """

    def __init__(self, store, names):
        self.store = store
        self.names = list(names)
        self.slices = {}
        pos = 0
        for name in self.names:
            length = store.blocks[name].length
            self.slices[name] = slice(pos, pos + length)
            pos += length
        self.size = pos

    def pack(self, full_vector):
        out = np.empty(self.size, dtype=np.float64)
        for name in self.names:
            b = self.store.blocks[name]
            out[self.slices[name]] = full_vector[b.offset:b.offset + b.length]
        return out

    def scatter(self, packed, full_vector):
        """Write packed coordinates back into a full store-sized vector."""
        for name in self.names:
            b = self.store.blocks[name]
            full_vector[b.offset:b.offset + b.length] = packed[self.slices[name]]

    def pack_grads(self, grads_by_name):
        out = np.zeros(self.size, dtype=np.float64)
        for name, g in grads_by_name.items():
            if name in self.slices:
                out[self.slices[name]] = np.asarray(g).ravel()
        return out

    def task_of_coordinates(self):
        """Owning task id per packed coordinate."""
        owner = np.empty(self.size, dtype=np.int64)
        for name in self.names:
            owner[self.slices[name]] = self.store.blocks[name].task
        return owner

    def indices_of_task(self, task):
        return np.nonzero(self.task_of_coordinates() == task)[0]
