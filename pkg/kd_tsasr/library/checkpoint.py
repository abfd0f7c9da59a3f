"""Named-array container files.

Layout (all integers little-endian uint32):

    magic b"XDCKPT01"
    metadata length, metadata (UTF-8 JSON)
    array count
    per array, in name order:
        name length, name (UTF-8)
        ndim, dims...
        data as little-endian float64

Metadata always carries ``config_hash`` and ``seed`` so that an artifact
produced under one configuration is never silently reused under another.
"""
import json
import logging
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

from kd_tsasr.library.diffcore import ParamStore
from kd_tsasr.library.errors import ConfigHashMismatch

LOG = logging.getLogger("checkpoint")

MAGIC = b'XDCKPT01'


def _write_u32(f, value: int):
    f.write(struct.pack('<I', value))


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError('Truncated container file')
    return struct.unpack('<I', raw)[0]


def save_container(path: str, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = path + '.tmp'
    with open(tmp_path, 'wb') as f:
        f.write(MAGIC)
        meta = json.dumps(metadata, sort_keys=True).encode('utf-8')
        _write_u32(f, len(meta))
        f.write(meta)
        _write_u32(f, len(arrays))
        for name in sorted(arrays):
            value = np.asarray(arrays[name], dtype='<f8')
            encoded = name.encode('utf-8')
            _write_u32(f, len(encoded))
            f.write(encoded)
            _write_u32(f, value.ndim)
            for dim in value.shape:
                _write_u32(f, dim)
            f.write(value.tobytes(order='C'))
    os.replace(tmp_path, path)
    LOG.info(f'Wrote {len(arrays)} arrays to {path}')


def load_container(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, 'rb') as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f'"{path}" is not a checkpoint container')
        metadata = json.loads(f.read(_read_u32(f)).decode('utf-8'))
        arrays = {}
        for _ in range(_read_u32(f)):
            name = f.read(_read_u32(f)).decode('utf-8')
            shape = tuple(_read_u32(f) for _ in range(_read_u32(f)))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype='<f8')
            if data.size != count:
                raise ValueError(f'Truncated array "{name}" in "{path}"')
            arrays[name] = data.astype(np.float64).reshape(shape)
    return arrays, metadata


def save_store(path: str, store: ParamStore, metadata: Dict[str, Any]):
    metadata = dict(metadata)
    metadata['frozen_groups'] = sorted(store.frozen_groups)
    save_container(path, store.params, metadata)


def load_store(path: str, expected_hash: Optional[str] = None) -> Tuple[ParamStore, Dict[str, Any]]:
    arrays, metadata = load_container(path)
    check_stamp(path, metadata, expected_hash)
    store = ParamStore()
    for name in sorted(arrays):
        store.add(name, arrays[name])
    store.freeze(metadata.get('frozen_groups', []))
    return store, metadata


def check_stamp(path: str, metadata: Dict[str, Any], expected_hash: Optional[str]):
    if expected_hash is None:
        return
    found = metadata.get('config_hash')
    if found != expected_hash:
        raise ConfigHashMismatch(path, expected_hash, found)
