"""Binary dataset and checkpoint formats.

Both formats are little-endian with u32 length prefixes and deterministic
layout (sorted tensor names, canonical JSON), so writing the same object
twice produces byte-identical files.

Dataset (magic EARD): u32 version, length-prefixed JSON task spec,
u64 record count, then per record a u16 label followed by T*d_token 32-bit
floats.

Checkpoint (magic EARC): u32 version, length-prefixed JSON holding the model
and train configs, u32 tensor count, then per tensor a length-prefixed UTF-8
name, u8 dtype code (0 = float32, 1 = float64), u8 rank, rank u64 dims, and
the raw payload. EMA tensors ride along under an "ema." name prefix.
"""

import dataclasses
import json
import struct

import numpy as np

from enar import diffcore as dc
from enar.errors import ConfigError, ShapeError
from enar.model import ModelConfig, ModelParams

DATASET_MAGIC = b"EARD"
CHECKPOINT_MAGIC = b"EARC"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _canon_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_block(f, payload):
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ConfigError(f"truncated file while reading {what}")
    return data


def _read_block(f, what):
    (n,) = struct.unpack("<I", _read_exact(f, 4, what + " length"))
    return _read_exact(f, n, what)


def save_dataset(path, dataset):
    """Write a Dataset (spec + labels + token sequences) to an EARD file."""
    tokens = np.ascontiguousarray(np.asarray(dataset.tokens, dtype="<f4"))
    labels = np.asarray(dataset.labels)
    if tokens.ndim != 3:
        raise ShapeError(f"tokens must be [n, T, d_token], got shape {tokens.shape}")
    if labels.shape != (tokens.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {tokens.shape[0]} records")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ConfigError("labels must fit in an unsigned 16-bit field")
    spec_json = _canon_json(dataclasses.asdict(dataset.spec))
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_block(f, spec_json)
        f.write(struct.pack("<Q", tokens.shape[0]))
        for i in range(tokens.shape[0]):
            f.write(struct.pack("<H", int(labels[i])))
            f.write(tokens[i].tobytes())


def load_dataset(path):
    """Read an EARD file; returns a Dataset."""
    from enar.tasks import Dataset, TaskSpec
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != DATASET_MAGIC:
            raise ConfigError(f"{path} is not a dataset file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported dataset version {version}")
        spec_dict = json.loads(_read_block(f, "task spec").decode("utf-8"))
        try:
            spec = TaskSpec(**spec_dict)
        except TypeError as e:
            raise ConfigError(f"bad task spec in {path}: {e}") from e
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "record count"))
        record = spec.T * spec.d_token
        tokens = np.empty((count, spec.T, spec.d_token), dtype="<f4")
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            (labels[i],) = struct.unpack("<H", _read_exact(f, 2, f"label {i}"))
            raw = _read_exact(f, 4 * record, f"record {i}")
            tokens[i] = np.frombuffer(raw, dtype="<f4").reshape(spec.T, spec.d_token)
        if f.read(1):
            raise ConfigError(f"trailing bytes in {path}")
    return Dataset(spec=spec, tokens=tokens, labels=labels)


def _config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def _config_from_dict(cls, d, what):
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {what} in checkpoint: {e}") from e


def _write_tensor(f, name, array):
    arr = np.ascontiguousarray(array)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_CODES:
        raise ConfigError(f"tensor {name} has unsupported dtype {arr.dtype}")
    _write_block(f, name.encode("utf-8"))
    f.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype(le, copy=False).tobytes())


def _read_tensor(f):
    name = _read_block(f, "tensor name").decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(f, 2, f"tensor {name} header"))
    if code not in _CODE_DTYPES:
        raise ConfigError(f"tensor {name} has unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"tensor {name} dims"))
    dtype = _CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = _read_exact(f, dtype.itemsize * n, f"tensor {name} payload")
    return name, np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def save_checkpoint(path, params, ema, model_config, train_config):
    """Write raw and EMA parameters plus both configs to an EARC file."""
    from enar.training import TrainConfig as _TC  # noqa: F401  (documented pairing)
    header = _canon_json({
        "model": _config_to_dict(model_config),
        "train": _config_to_dict(train_config),
    })
    names = params.names()
    if ema is not None and ema.names() != names:
        raise ShapeError("ema and raw parameter names disagree")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_block(f, header)
        count = len(names) * (2 if ema is not None else 1)
        f.write(struct.pack("<I", count))
        for n in names:
            _write_tensor(f, n, params.tensors[n].data)
        if ema is not None:
            for n in names:
                _write_tensor(f, "ema." + n, ema.tensors[n].data)


def load_checkpoint(path):
    """Read an EARC file; returns (params, ema_or_None, model_config, train_config)."""
    from enar.training import TrainConfig
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_block(f, "config header").decode("utf-8"))
        if set(header) != {"model", "train"}:
            raise ConfigError(f"checkpoint header must hold model+train configs, got {sorted(header)}")
        model_config = _config_from_dict(ModelConfig, header["model"], "model config")
        train_config = _config_from_dict(TrainConfig, header["train"], "train config")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        raw, ema_raw = {}, {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name.startswith("ema."):
                ema_raw[name[4:]] = arr
            else:
                raw[name] = arr
        if f.read(1):
            raise ConfigError(f"trailing bytes in {path}")

    def build(tensors):
        return ModelParams(tensors={
            n: dc.Tensor(a, requires_grad=True) for n, a in tensors.items()
        })

    params = build(raw)
    ema = build(ema_raw) if ema_raw else None
    if ema is not None and ema.names() != params.names():
        raise ConfigError("checkpoint ema tensors do not mirror the raw tensors")
    return params, ema, model_config, train_config
