"""Messenger snapshots: the only thing that crosses the client/server wire.

Binary layout (all little-endian):

    magic   6 bytes  b"MHMSG1"
    count   u32      number of parameter entries
    entry   u16 name length | name utf-8 | u8 rank | u32 x rank dims | f32 payload
    round   u32      round index
    samples u64      client training sample count

``client_id`` is in-memory bookkeeping only and is never serialized.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MHMSG1"


class SnapshotError(ValueError):
    pass


@dataclass
class MessengerSnapshot:
    entries: tuple[tuple[str, np.ndarray], ...]
    round_index: int
    sample_count: int
    client_id: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise SnapshotError("duplicate parameter names in snapshot")
        if self.round_index < 0 or self.sample_count < 0:
            raise SnapshotError("round_index and sample_count must be non-negative")
        frozen = []
        for name, arr in self.entries:
            if name.startswith("fusion.") or ".fusion." in name:
                raise SnapshotError(f"fusion parameter {name!r} must never leave the client")
            a = np.ascontiguousarray(arr, dtype=np.float32)
            a.setflags(write=False)
            frozen.append((name, a))
        self.entries = tuple(frozen)

    def manifest(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, arr.shape) for name, arr in self.entries)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", len(self.entries))
        for name, arr in self.entries:
            raw_name = name.encode("utf-8")
            out += struct.pack("<H", len(raw_name))
            out += raw_name
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.astype("<f4").tobytes(order="C")
        out += struct.pack("<I", self.round_index)
        out += struct.pack("<Q", self.sample_count)
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MessengerSnapshot":
        if buf[: len(MAGIC)] != MAGIC:
            raise SnapshotError(f"bad magic {buf[:len(MAGIC)]!r}")
        off = len(MAGIC)

        def take(fmt: str):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(buf):
                raise SnapshotError("truncated snapshot")
            vals = struct.unpack_from(fmt, buf, off)
            off += size
            return vals

        (count,) = take("<I")
        entries = []
        for _ in range(count):
            (name_len,) = take("<H")
            if off + name_len > len(buf):
                raise SnapshotError("truncated snapshot name")
            name = buf[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = take("<B")
            shape = take(f"<{rank}I") if rank else ()
            n_items = int(np.prod(shape)) if shape else 1
            nbytes = 4 * n_items
            if off + nbytes > len(buf):
                raise SnapshotError(f"truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=n_items, offset=off).reshape(shape)
            off += nbytes
            entries.append((name, np.array(arr, dtype=np.float32)))
        (round_index,) = take("<I")
        (sample_count,) = take("<Q")
        if off != len(buf):
            raise SnapshotError(f"{len(buf) - off} trailing bytes after snapshot")
        return cls(tuple(entries), round_index, int(sample_count))


def snapshot_from_model(model, round_index: int, sample_count: int, client_id: int | None = None) -> MessengerSnapshot:
    entries = tuple((name, arr.copy()) for name, arr in model.state_items())
    return MessengerSnapshot(entries, round_index, sample_count, client_id)


def load_snapshot_into(snapshot: MessengerSnapshot, model) -> None:
    model.load_state(snapshot.entries)


def _section(name: str) -> str:
    if "body." in name:
        return "body"
    if "head." in name:
        return "head"
    raise SnapshotError(f"parameter {name!r} belongs to neither body nor head")


def aggregate(
    snapshots: list[MessengerSnapshot],
    mode: str = "data_weighted",
    aggregate_body: bool = True,
    aggregate_head: bool = True,
) -> MessengerSnapshot:
    """Server-side averaging of client snapshots.

    ``uniform`` weights every client equally; ``data_weighted`` weights by
    training sample count.  A section with its switch off is copied verbatim
    from the first snapshot instead of averaged.
    """
    if not snapshots:
        raise SnapshotError("aggregate of zero snapshots")
    manifest = snapshots[0].manifest()
    for snap in snapshots[1:]:
        if snap.manifest() != manifest:
            raise SnapshotError("snapshot manifests disagree (name/shape mismatch across clients)")
    rounds = {s.round_index for s in snapshots}
    if len(rounds) != 1:
        raise SnapshotError(f"mixed round indices in aggregation: {sorted(rounds)}")
    if mode == "uniform":
        weights = np.full(len(snapshots), 1.0 / len(snapshots), dtype=np.float64)
    elif mode == "data_weighted":
        counts = np.array([s.sample_count for s in snapshots], dtype=np.float64)
        if counts.sum() <= 0:
            raise SnapshotError("data_weighted aggregation needs a positive total sample count")
        weights = counts / counts.sum()
    else:
        raise SnapshotError(f"unknown aggregation mode {mode!r}")
    merged = []
    for k, (name, _) in enumerate(manifest):
        section = _section(name)
        use_mean = (section == "body" and aggregate_body) or (section == "head" and aggregate_head)
        if use_mean:
            acc = np.zeros_like(snapshots[0].entries[k][1], dtype=np.float64)
            for w, snap in zip(weights, snapshots):
                acc += w * snap.entries[k][1].astype(np.float64)
            merged.append((name, acc.astype(np.float32)))
        else:
            merged.append((name, snapshots[0].entries[k][1].copy()))
    total = int(sum(s.sample_count for s in snapshots))
    return MessengerSnapshot(tuple(merged), snapshots[0].round_index, total)
