"""Tiled distributed arrays.

Each array is cut along one axis into one contiguous tile per locality.
A tile stores its *core* (the owned part) plus optional ghost cells copied
from neighbours, all in one dense buffer.  The :class:`ArrayMeta` carried
with every tile describes the whole array, so any locality can compute any
other locality's tile from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import GenerationMismatch, HaloError, MetaMismatch, TilingError, UnknownLocality
from .executor import FutureCell, when_all

MAX_RANK = 4


@dataclass(frozen=True)
class Shape:
    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if not 1 <= len(dims) <= MAX_RANK:
            raise ValueError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
        if any(d < 0 for d in dims):
            raise ValueError(f"negative dimension in {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)


@dataclass(frozen=True)
class TileSpan:
    """Core interval ``[begin, end)`` on the tiled axis plus ghost widths.

    ``lo``/``hi`` bound the stored region (core plus ghosts) and are already
    clamped to the global extent.  All other axes are whole.
    """

    axis: int
    begin: int
    end: int
    lo: int
    hi: int

    @property
    def core_len(self) -> int:
        return self.end - self.begin

    @property
    def stored_len(self) -> int:
        return self.hi - self.lo

    @property
    def left_ghost(self) -> int:
        return self.begin - self.lo

    @property
    def right_ghost(self) -> int:
        return self.hi - self.end


@dataclass(frozen=True)
class ArrayMeta:
    array_name: str
    generation: int
    num_localities: int
    tile_map: Mapping[int, TileSpan]
    tiled_axis: int
    global_shape: Shape
    overlap: int = 0

    def __post_init__(self) -> None:
        spans = [self.tile_map[r] for r in range(self.num_localities)]
        edge = 0
        for s in spans:
            if s.begin != edge or s.end < s.begin:
                raise TilingError(f"core spans of {self.array_name!r} do not partition the axis")
            edge = s.end
        if edge != self.global_shape.dims[self.tiled_axis]:
            raise TilingError(f"core spans of {self.array_name!r} do not cover the axis")

    def tile_shape(self, locality: int, with_ghosts: bool = True) -> tuple[int, ...]:
        span = local_span(self, locality)
        dims = list(self.global_shape.dims)
        dims[self.tiled_axis] = span.stored_len if with_ghosts else span.core_len
        return tuple(dims)


def compute_tiling(shape: Shape | Sequence[int], num_localities: int, axis: int = 0, overlap: int = 0) -> dict[int, TileSpan]:
    """Split ``axis`` into contiguous near-equal core spans.

    Spans differ in length by at most one, the longer ones going to the
    lower locality ids.  ``overlap`` widens every span by that many elements
    on each interior side.
    """
    if not isinstance(shape, Shape):
        shape = Shape(tuple(shape))
    if num_localities < 1:
        raise TilingError("need at least one locality")
    if not 0 <= axis < shape.rank:
        raise TilingError(f"axis {axis} out of range for rank {shape.rank}")
    if overlap < 0:
        raise TilingError("overlap must be non-negative")
    length = shape.dims[axis]
    if length < num_localities:
        raise TilingError(f"axis {axis} has {length} elements, fewer than {num_localities} localities")
    base, extra = divmod(length, num_localities)
    tiles = {}
    begin = 0
    for r in range(num_localities):
        end = begin + base + (1 if r < extra else 0)
        tiles[r] = TileSpan(axis, begin, end, max(0, begin - overlap), min(length, end + overlap))
        begin = end
    return tiles


def make_meta(name: str, shape: Sequence[int], num_localities: int, axis: int = 0, overlap: int = 0, generation: int = 0) -> ArrayMeta:
    shp = Shape(tuple(shape))
    return ArrayMeta(name, generation, num_localities, compute_tiling(shp, num_localities, axis, overlap), axis, shp, overlap)


def local_span(meta: ArrayMeta, locality: int) -> TileSpan:
    if not 0 <= locality < meta.num_localities:
        raise UnknownLocality(f"locality {locality} not in [0, {meta.num_localities})")
    return meta.tile_map[locality]


def _take(arr: np.ndarray, axis: int, lo: int, hi: int) -> np.ndarray:
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(lo, hi)
    return arr[tuple(idx)]


@dataclass(frozen=True)
class DistArray:
    """One locality's tile of a distributed array.

    ``halo_generation`` records the generation for which the ghost cells
    were last refreshed; ``-1`` means never.
    """

    meta: ArrayMeta
    local: np.ndarray
    owner: int
    halo_generation: int = -1

    @property
    def span(self) -> TileSpan:
        return self.meta.tile_map[self.owner]

    @property
    def halo_valid(self) -> bool:
        span = self.span
        if span.left_ghost == 0 and span.right_ghost == 0:
            return True
        return self.halo_generation == self.meta.generation

    def core(self) -> np.ndarray:
        s = self.span
        return _take(self.local, self.meta.tiled_axis, s.left_ghost, s.left_ghost + s.core_len)

    def with_core(self, core: np.ndarray) -> "DistArray":
        """New generation holding ``core``; ghosts are stale until the next exchange."""
        s = self.span
        buf = np.zeros(self.local.shape)
        view = _take(buf, self.meta.tiled_axis, s.left_ghost, s.left_ghost + s.core_len)
        view[...] = core
        meta = replace(self.meta, generation=self.meta.generation + 1)
        return DistArray(meta, buf, self.owner)


def distribute(global_array: np.ndarray, meta: ArrayMeta, locality: int) -> DistArray:
    """Slice this locality's tile (core and ghosts) out of a replicated dense array.

    Ghost cells are filled directly, so the result counts as exchanged.
    """
    global_array = np.asarray(global_array, dtype=np.float64)
    if global_array.shape != meta.global_shape.dims:
        raise MetaMismatch(f"array shape {global_array.shape} != meta shape {meta.global_shape.dims}")
    span = local_span(meta, locality)
    local = np.array(_take(global_array, meta.tiled_axis, span.lo, span.hi), copy=True)
    return DistArray(meta, local, locality, halo_generation=meta.generation)


def from_core(meta: ArrayMeta, locality: int, core: np.ndarray) -> DistArray:
    """Wrap an owned core; ghost cells start zeroed and stale."""
    span = local_span(meta, locality)
    shape = meta.tile_shape(locality)
    buf = np.zeros(shape)
    view = _take(buf, meta.tiled_axis, span.left_ghost, span.left_ghost + span.core_len)
    view[...] = core
    valid = meta.generation if span.left_ghost == 0 and span.right_ghost == 0 else -1
    return DistArray(meta, buf, locality, halo_generation=valid)


def _meta_header(meta: ArrayMeta) -> np.ndarray:
    return np.array([meta.generation, meta.tiled_axis, meta.overlap, meta.num_localities, *meta.global_shape.dims], dtype=np.int64)


def halo_exchange(arr: DistArray, comm, tag: int) -> FutureCell:
    """Refresh ghost cells from the neighbours' cores at the current generation.

    Collective: every locality calls it with the same meta and tag.  Ghost
    regions wider than a neighbour's core are assembled from several peers.
    """
    from .comm import wire

    meta = arr.meta
    if meta.overlap <= 0:
        raise HaloError(f"array {meta.array_name!r} has no overlap to exchange")
    me = arr.owner
    if meta.num_localities == 1:
        return FutureCell.ready(replace(arr, halo_generation=meta.generation))
    axis = meta.tiled_axis
    my = arr.span
    core = arr.core()
    gen = np.array([meta.generation], dtype=np.int64)

    # ship the part of my core that falls in each peer's ghost region
    for q in range(meta.num_localities):
        if q == me:
            continue
        peer = meta.tile_map[q]
        pieces = []
        for g_lo, g_hi in ((peer.lo, peer.begin), (peer.end, peer.hi)):
            lo, hi = max(g_lo, my.begin), min(g_hi, my.end)
            if lo < hi:
                pieces.append((lo, hi))
        if pieces:
            arrays = [gen] + [np.ascontiguousarray(_take(core, axis, lo - my.begin, hi - my.begin)) for lo, hi in pieces]
            comm.post(q, tag, wire.encode_arrays(arrays))

    senders = []
    for q in range(meta.num_localities):
        if q == me:
            continue
        peer = meta.tile_map[q]
        if any(max(g_lo, peer.begin) < min(g_hi, peer.end) for g_lo, g_hi in ((my.lo, my.begin), (my.end, my.hi))):
            senders.append(q)

    def assemble(payloads: list[bytes]) -> DistArray:
        buf = np.array(arr.local, copy=True)
        for q, payload in zip(senders, payloads):
            gen_q, *chunks = wire.decode_payload(payload)
            if int(gen_q[0]) != meta.generation:
                raise GenerationMismatch(f"locality {q} sent generation {int(gen_q[0])}, expected {meta.generation}")
            peer = meta.tile_map[q]
            ranges = [
                (max(g_lo, peer.begin), min(g_hi, peer.end))
                for g_lo, g_hi in ((my.lo, my.begin), (my.end, my.hi))
                if max(g_lo, peer.begin) < min(g_hi, peer.end)
            ]
            for (lo, hi), chunk in zip(ranges, chunks):
                _take(buf, axis, lo - my.lo, hi - my.lo)[...] = chunk
        return DistArray(meta, buf, me, halo_generation=meta.generation)

    return when_all([comm.recv(tag, q) for q in senders]).then(assemble)


def gather_global(arr: DistArray, comm, tag: int) -> FutureCell:
    """Dense global array (on every locality): cores concatenated in locality order."""
    meta = arr.meta
    if meta.num_localities != comm.size:
        raise MetaMismatch(f"meta spans {meta.num_localities} localities, communicator {comm.size}")
    header = _meta_header(meta)
    core = np.ascontiguousarray(arr.core())
    packed = np.concatenate([header.astype(np.float64), core.ravel()])

    def assemble(parts: list[np.ndarray]) -> np.ndarray:
        cores = []
        for q, part in enumerate(parts):
            head = part[: header.size].astype(np.int64)
            if not np.array_equal(head, header):
                raise MetaMismatch(f"locality {q} disagrees on the meta of {meta.array_name!r}")
            cores.append(part[header.size :].reshape(meta.tile_shape(q, with_ghosts=False)))
        return np.concatenate(cores, axis=meta.tiled_axis)

    return comm.all_gather(packed, tag=tag).then(assemble)


# -- debug dumps ------------------------------------------------------------------


def dump_array(arr: DistArray | np.ndarray, path: str | Path, name: str = "array") -> None:
    """Write ``name generation shape tiled_axis overlap`` then one value per line.

    For a DistArray the stored tile (core plus ghosts) is written and the
    shape is the tile's; shapes are written comma-separated.
    """
    if isinstance(arr, DistArray):
        data = arr.local
        head = (arr.meta.array_name, arr.meta.generation, data.shape, arr.meta.tiled_axis, arr.meta.overlap)
    else:
        data = np.asarray(arr, dtype=np.float64)
        head = (name, 0, data.shape, 0, 0)
    name_, gen, shape, axis, overlap = head
    lines = [f"{name_} {gen} {','.join(map(str, shape))} {axis} {overlap}"]
    lines.extend(repr(float(v)) for v in data.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def load_dump(path: str | Path) -> tuple[dict, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    name, gen, shape, axis, overlap = lines[0].split()
    dims = tuple(int(d) for d in shape.split(",")) if shape else ()
    values = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    header = {"name": name, "generation": int(gen), "shape": dims, "tiled_axis": int(axis), "overlap": int(overlap)}
    return header, values.reshape(dims)
