"""
RazorLab - Checkpoint file format

Little-endian throughout:

    magic       4 bytes  b'RZCK'
    version     u32
    config      u32 length + UTF-8 'key=value' lines
                (model config fields, seed, meta.step, meta.tag.*)
    tensors     u32 count, then per tensor:
                u16 name length + UTF-8 name, u8 rank, rank x u32 dims,
                float64 payload (row-major)
    crc32       u32 over every preceding byte
"""

import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from razorlab.errors import ContractError, InputError, IntegrityError
from razorlab.log import get_logger
from razorlab.model import FORMAT_VERSION, Checkpoint, CheckpointMeta, ModelConfig, parameter_shapes

logger = get_logger('checkpoint')

MAGIC = b'RZCK'
SUFFIX = '.rzck'

_U16 = struct.Struct('<H')
_U32 = struct.Struct('<I')


def _config_block(checkpoint: Checkpoint) -> bytes:
    lines = [f"{key}={value}" for key, value in checkpoint.config.items()]
    lines.append(f"seed={checkpoint.meta.seed}")
    lines.append(f"meta.step={checkpoint.meta.step}")
    for key in sorted(checkpoint.meta.tags):
        value = checkpoint.meta.tags[key]
        if '\n' in key or '\n' in value or '=' in key:
            raise ContractError(f"metadata tag {key!r} cannot be stored")
        lines.append(f"meta.tag.{key}={value}")
    return ('\n'.join(lines) + '\n').encode('utf-8')


def dumps(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(FORMAT_VERSION)]
    block = _config_block(checkpoint)
    parts += [_U32.pack(len(block)), block]

    shapes = parameter_shapes(checkpoint.config)
    parts.append(_U32.pack(len(shapes)))
    for key in shapes:
        array = checkpoint.tensors[key]
        name = key.encode('utf-8')
        parts.append(_U16.pack(len(name)))
        parts.append(name)
        parts.append(struct.pack('<B', array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype='<f8').tobytes())

    body = b''.join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> Tuple:
        return fmt.unpack(self.take(fmt.size))


def _parse_config(text: str) -> Tuple[ModelConfig, CheckpointMeta]:
    model: Dict[str, str] = {}
    tags: Dict[str, str] = {}
    seed, step = 0, 0
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise IntegrityError(f"bad config line in checkpoint: {line!r}")
        if key == 'seed':
            seed = int(value)
        elif key == 'meta.step':
            step = int(value)
        elif key.startswith('meta.tag.'):
            tags[key[len('meta.tag.'):]] = value
        else:
            model[key] = value
    return ModelConfig.from_items(model), CheckpointMeta(seed=seed, step=step, tags=tags)


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise IntegrityError("not a RazorLab checkpoint (bad magic)")
    (stored,) = _U32.unpack(data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise IntegrityError("checkpoint CRC32 mismatch")

    reader = _Reader(data[:-4])
    reader.take(4)
    (version,) = reader.unpack(_U32)
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format version {version}")
    (block_len,) = reader.unpack(_U32)
    try:
        config, meta = _parse_config(reader.take(block_len).decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as exc:
        raise IntegrityError(f"unreadable checkpoint config block: {exc}") from exc

    (count,) = reader.unpack(_U32)
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode('utf-8')
        (rank,) = struct.unpack('<B', reader.take(1))
        dims = struct.unpack(f'<{rank}I', reader.take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(reader.take(8 * size), dtype='<f8').reshape(dims)
        tensors[name] = payload.astype(np.float64)
    if reader.pos != len(reader.data):
        raise IntegrityError("trailing bytes after tensor table")

    expected = parameter_shapes(config)
    if set(tensors) != set(expected):
        raise IntegrityError("tensor names do not match the stored model config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise IntegrityError(f"tensor {name} has shape {tensors[name].shape}, config expects {shape}")
    return Checkpoint(config, tensors, meta)


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(dumps(checkpoint))
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s", path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return loads(data)
