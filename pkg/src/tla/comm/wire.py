"""Wire frames and payload encoding.

Frame layout (little-endian)::

    magic "TLAW" | version u8 | frame_type u8 | src u16 | dst u16 | count u32
    then per envelope: tag u64 | seq u64 | payload_len u32 | payload

``frame_type`` is 0 for a single envelope, 1 for a fused frame and 2 for the
connection handshake, whose single envelope carries ``rank u16, world u16``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import FrameError, PayloadTooLarge

MAGIC = b"TLAW"
VERSION = 1
SINGLE, FUSED, HANDSHAKE = 0, 1, 2
MAX_PAYLOAD = 2**32 - 1

_HEADER = struct.Struct("<4sBBHHI")
_ENV_HEADER = struct.Struct("<QQI")
HEADER_SIZE = _HEADER.size
ENV_HEADER_SIZE = _ENV_HEADER.size


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    tag: int
    seq: int
    payload: bytes

    def __post_init__(self) -> None:
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(self.payload)} bytes")

    @property
    def size(self) -> int:
        return ENV_HEADER_SIZE + len(self.payload)


def encode_frame(envelopes: list[Envelope], frame_type: int | None = None) -> bytes:
    if not envelopes:
        raise ValueError("a frame needs at least one envelope")
    src, dst = envelopes[0].src, envelopes[0].dst
    if frame_type is None:
        frame_type = SINGLE if len(envelopes) == 1 else FUSED
    parts = [_HEADER.pack(MAGIC, VERSION, frame_type, src, dst, len(envelopes))]
    for env in envelopes:
        if (env.src, env.dst) != (src, dst):
            raise ValueError("all envelopes in a frame share src and dst")
        parts.append(_ENV_HEADER.pack(env.tag, env.seq, len(env.payload)))
        parts.append(env.payload)
    return b"".join(parts)


def decode_header(buf: bytes) -> tuple[int, int, int, int]:
    magic, version, frame_type, src, dst, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if frame_type not in (SINGLE, FUSED, HANDSHAKE):
        raise FrameError(f"unknown frame type {frame_type}")
    return frame_type, src, dst, count


def decode_frame(buf: bytes) -> tuple[int, list[Envelope]]:
    """Split one complete frame into ``(frame_type, envelopes)``."""
    frame_type, src, dst, count = decode_header(buf)
    off = HEADER_SIZE
    envs = []
    for _ in range(count):
        if off + ENV_HEADER_SIZE > len(buf):
            raise FrameError("truncated envelope header")
        tag, seq, n = _ENV_HEADER.unpack_from(buf, off)
        off += ENV_HEADER_SIZE
        if off + n > len(buf):
            raise FrameError("truncated payload")
        envs.append(Envelope(src, dst, tag, seq, bytes(buf[off : off + n])))
        off += n
    if off != len(buf):
        raise FrameError(f"{len(buf) - off} trailing bytes after frame")
    return frame_type, envs


def read_frame(read_exact: Callable[[int], bytes]) -> bytes:
    """Read one frame from a byte stream; ``read_exact(n)`` must return n bytes."""
    head = read_exact(HEADER_SIZE)
    _, _, _, count = decode_header(head)
    parts = [head]
    for _ in range(count):
        eh = read_exact(ENV_HEADER_SIZE)
        _, _, n = _ENV_HEADER.unpack(eh)
        parts.append(eh)
        parts.append(read_exact(n))
    return b"".join(parts)


def handshake_frame(rank: int, world: int, dst: int = 0) -> bytes:
    payload = struct.pack("<HH", rank, world)
    return encode_frame([Envelope(rank, dst, 0, 0, payload)], HANDSHAKE)


def parse_handshake(buf: bytes) -> tuple[int, int]:
    frame_type, envs = decode_frame(buf)
    if frame_type != HANDSHAKE or len(envs) != 1:
        raise FrameError("expected a handshake frame")
    return struct.unpack("<HH", envs[0].payload)


# -- payloads -------------------------------------------------------------------
# kind byte: 0 array, 1 list of arrays, 2 error, 3 raw bytes

K_ARRAY, K_LIST, K_ERROR, K_RAW = 0, 1, 2, 3
_DTYPES = {"d": np.float64, "B": np.uint8, "q": np.int64, "I": np.uint32}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _array_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        arr = arr.astype(np.float64)
        code = "d"
    le = arr.astype(np.dtype(_DTYPES[code]).newbyteorder("<"), copy=False)
    head = struct.pack("<cB", code.encode(), arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(le).tobytes()


def _read_array(buf: memoryview, off: int) -> tuple[np.ndarray, int]:
    code, ndim = struct.unpack_from("<cB", buf, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = np.dtype(_DTYPES[code.decode()]).newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    off += count * dt.itemsize
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), off


def encode_array(arr: np.ndarray) -> bytes:
    return bytes([K_ARRAY]) + _array_bytes(arr)


def encode_arrays(arrs: list[np.ndarray]) -> bytes:
    return bytes([K_LIST]) + struct.pack("<I", len(arrs)) + b"".join(_array_bytes(a) for a in arrs)


def encode_error(exc: BaseException) -> bytes:
    return bytes([K_ERROR]) + json.dumps({"type": type(exc).__name__, "message": str(exc)}).encode()


def encode_raw(data: bytes) -> bytes:
    return bytes([K_RAW]) + data


def decode_payload(payload: bytes):
    """Inverse of the ``encode_*`` helpers; error payloads are raised."""
    from ..errors import REMOTE_ERRORS, RemoteError

    kind = payload[0]
    buf = memoryview(payload)
    if kind == K_ARRAY:
        return _read_array(buf, 1)[0]
    if kind == K_LIST:
        (n,) = struct.unpack_from("<I", buf, 1)
        off = 5
        out = []
        for _ in range(n):
            arr, off = _read_array(buf, off)
            out.append(arr)
        return out
    if kind == K_ERROR:
        info = json.loads(bytes(buf[1:]).decode())
        raise REMOTE_ERRORS.get(info["type"], RemoteError)(info["message"])
    if kind == K_RAW:
        return bytes(buf[1:])
    raise FrameError(f"unknown payload kind {kind}")
