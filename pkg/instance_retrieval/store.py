"""
Binary and JSON-lines file formats.

All tensors are little-endian float32. Each binary file starts with an 8-byte
magic so a reader can refuse a file of the wrong kind.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Tuple, Union

import numpy as np

from instance_retrieval.error import InputError

PathLike = Union[str, Path]

IMAGE_STORE_MAGIC = b"P1MTOY1\0"
REGION_CACHE_MAGIC = b"P1MREG1\0"
CHECKPOINT_MAGIC = b"P1MCKPT\0"

_IMAGE_HEADER = struct.Struct("<III")
_REGION_HEADER = struct.Struct("<II")
_LENGTH = struct.Struct("<I")

FLOAT32_LE = np.dtype("<f4")

IMAGE_STORE_HEADER_SIZE = len(IMAGE_STORE_MAGIC) + _IMAGE_HEADER.size
REGION_CACHE_HEADER_SIZE = len(REGION_CACHE_MAGIC) + _REGION_HEADER.size


def _check_magic(handle, magic: bytes, path: PathLike) -> None:
    found = handle.read(len(magic))
    if found != magic:
        raise InputError(f"{path}: expected magic {magic!r}, found {found!r}")


# --------------------------------------------------------------------------
# IMAGE STORE
# --------------------------------------------------------------------------
def image_offset(index: int, height: int, width: int) -> int:
    """Byte offset of image `index` inside an image store."""
    return IMAGE_STORE_HEADER_SIZE + index * height * width * 3 * FLOAT32_LE.itemsize


def write_image_store(path: PathLike, images: np.ndarray) -> None:
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InputError(f"image store expects (count, H, W, 3) images, got {images.shape}")
    count, height, width, _ = images.shape
    with open(path, "wb") as handle:
        handle.write(IMAGE_STORE_MAGIC)
        handle.write(_IMAGE_HEADER.pack(count, height, width))
        handle.write(np.ascontiguousarray(images, dtype=FLOAT32_LE).tobytes())


def read_image_store(path: PathLike, mmap: bool = True) -> np.ndarray:
    with open(path, "rb") as handle:
        _check_magic(handle, IMAGE_STORE_MAGIC, path)
        count, height, width = _IMAGE_HEADER.unpack(handle.read(_IMAGE_HEADER.size))
        if not mmap:
            body = np.frombuffer(handle.read(), dtype=FLOAT32_LE)
            return body.reshape(count, height, width, 3)
    return np.memmap(path, dtype=FLOAT32_LE, mode="r", offset=IMAGE_STORE_HEADER_SIZE, shape=(count, height, width, 3))


# --------------------------------------------------------------------------
# JSON LINES
# --------------------------------------------------------------------------
def write_jsonl(path: PathLike, records: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, separators=(",", ":")))
            handle.write("\n")


def read_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as err:
                raise InputError(f"{path}:{line_number}: {err}") from err


# --------------------------------------------------------------------------
# REGION CACHE
# --------------------------------------------------------------------------
def write_region_cache(index_path: PathLike, data_path: PathLike, entries: List[Dict[str, Any]], rows: List[np.ndarray]) -> None:
    """
    Write a region cache: `entries[i]` is the JSON index record for the i-th
    block of `rows` (an (R_i, width) float matrix). Row offsets are filled in
    here.
    """
    if len(entries) != len(rows):
        raise InputError("region cache needs one row block per index entry")
    width = rows[0].shape[1] if rows else 0
    total = sum(block.shape[0] for block in rows)
    offset = 0
    with open(data_path, "wb") as handle:
        handle.write(REGION_CACHE_MAGIC)
        handle.write(_REGION_HEADER.pack(total, width))
        for entry, block in zip(entries, rows):
            if block.shape[1] != width:
                raise InputError("all region rows must share one width")
            handle.write(np.ascontiguousarray(block, dtype=FLOAT32_LE).tobytes())
            entry["row_offset"] = offset
            entry["rows"] = int(block.shape[0])
            offset += block.shape[0]
    write_jsonl(index_path, entries)


def read_region_cache(index_path: PathLike, data_path: PathLike) -> List[Tuple[Dict[str, Any], np.ndarray]]:
    with open(data_path, "rb") as handle:
        _check_magic(handle, REGION_CACHE_MAGIC, data_path)
        total, width = _REGION_HEADER.unpack(handle.read(_REGION_HEADER.size))
        matrix = np.frombuffer(handle.read(), dtype=FLOAT32_LE).reshape(total, width)
    return [
        (entry, matrix[entry["row_offset"]: entry["row_offset"] + entry["rows"]])
        for entry in read_jsonl(index_path)
    ]


# --------------------------------------------------------------------------
# NAMED TENSOR FILES (checkpoints)
# --------------------------------------------------------------------------
def write_tensor_file(path: PathLike, header: Dict[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    """
    Header JSON followed by the tensor bodies. The header gains a `tensors`
    manifest of (name, shape, offset); offsets are relative to the first
    byte after the header.
    """
    manifest = []
    offset = 0
    for name, array in tensors.items():
        manifest.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += int(np.prod(array.shape, dtype=np.int64)) * FLOAT32_LE.itemsize
    encoded = json.dumps({**header, "tensors": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(_LENGTH.pack(len(encoded)))
        handle.write(encoded)
        for array in tensors.values():
            handle.write(np.ascontiguousarray(array, dtype=FLOAT32_LE).tobytes())


def read_tensor_file(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    with open(path, "rb") as handle:
        _check_magic(handle, CHECKPOINT_MAGIC, path)
        (length,) = _LENGTH.unpack(handle.read(_LENGTH.size))
        header = json.loads(handle.read(length).decode("utf-8"))
        body = handle.read()
    tensors = {}
    for item in header["tensors"]:
        count = int(np.prod(item["shape"], dtype=np.int64))
        flat = np.frombuffer(body, dtype=FLOAT32_LE, count=count, offset=item["offset"])
        tensors[item["name"]] = flat.reshape(item["shape"]).copy()
    return header, tensors
