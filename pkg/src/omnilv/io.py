"""On-disk formats: OLVT binary tensors, P6 PPM previews, JSON helpers."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

OLVT_MAGIC = b"OLVT"


class FormatError(ValueError):
    pass


def encode_olvt(array: np.ndarray) -> bytes:
    """Header: magic, u32 rank, u32 dims (little-endian); payload: f64 row-major."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = OLVT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_olvt(blob: bytes) -> np.ndarray:
    if blob[:4] != OLVT_MAGIC:
        raise FormatError("not an OLVT tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise FormatError(f"OLVT payload has {len(blob) - offset} bytes, expected {8 * count}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64).reshape(dims)


def save_olvt(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_olvt(array))


def load_olvt(path) -> np.ndarray:
    return decode_olvt(Path(path).read_bytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    """c×H×W float image in [0,1] -> H×W×3 uint8."""
    img = np.clip(image, 0.0, 1.0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_ppm(path, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def load_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise FormatError("only binary P6 PPM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return load_ppm(path)
    return load_olvt(path)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def array_digest(array: np.ndarray) -> str:
    return sha256_hex(encode_olvt(array))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
