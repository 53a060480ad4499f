"""Versioned binary model checkpoints.

Layout (all integers little-endian):

    magic            4 bytes, b"NSQT"
    format version   u32 (currently 1)
    model kind       u32 length + utf-8 bytes ("ar" | "nat" | "fs")
    seed             u64 (construction seed, for provenance)
    config           d_model u32, d_hidden u32, n_layer u32, n_head u32,
                     p_dropout f64, vocab_size u32, max_len u32
    tensor count     u32
    per tensor       name u32 length + utf-8, ndim u32, each dim u32,
                     then the f64 payload in C order

Round trip is bitwise: load(save(m)) reproduces every parameter exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .models import ModelConfig, build_model

MAGIC = b"NSQT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f):
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def save_model(model, path, seed=0):
    cfg = model.config
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_str(f, model.kind)
        f.write(struct.pack("<Q", seed))
        f.write(
            struct.pack(
                "<IIIIdII",
                cfg.d_model,
                cfg.d_hidden,
                cfg.n_layer,
                cfg.n_head,
                cfg.p_dropout,
                cfg.vocab_size,
                cfg.max_len,
            )
        )
        state = model.state()
        f.write(struct.pack("<I", len(state)))
        for name, data in state.items():
            _write_str(f, name)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        kind = _read_str(f)
        (seed,) = struct.unpack("<Q", f.read(8))
        fields = struct.unpack("<IIIIdII", f.read(4 * 6 + 8))
        cfg = ModelConfig(
            d_model=fields[0],
            d_hidden=fields[1],
            n_layer=fields[2],
            n_head=fields[3],
            p_dropout=fields[4],
            vocab_size=fields[5],
            max_len=fields[6],
        )
        (count,) = struct.unpack("<I", f.read(4))
        state = {}
        for _ in range(count):
            name = _read_str(f)
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            state[name] = data.astype(np.float64)
    model = build_model(kind, cfg, seed=seed)
    model.load_state(state)
    return model
