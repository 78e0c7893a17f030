"""Versioned, checksummed checkpoint container for a hard-EM run."""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Vocabulary
from .encoder import EncoderParams, OptState
from .reader import ReaderParams

CHECKPOINT_VERSION = 1
_MAGIC = b"WQCK"
_HEADER = struct.Struct("<4sI32sQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    vocab: Vocabulary
    encoder: EncoderParams
    encoder_opt: OptState
    reader: Optional[ReaderParams]
    reader_opt: Optional[OptState]
    config: dict
    rng_state: dict
    iteration: int = 0
    params_version: int = 0
    stats: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def _opt_meta(opt: OptState) -> dict:
    return {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def save_checkpoint(path, cp: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, a in cp.encoder.blocks().items():
        arrays[f"enc.{k}"] = a
    for k in cp.encoder_opt.m:
        arrays[f"encopt.m.{k}"] = cp.encoder_opt.m[k]
        arrays[f"encopt.v.{k}"] = cp.encoder_opt.v[k]
    if cp.reader is not None:
        for k, a in cp.reader.blocks().items():
            arrays[f"rd.{k}"] = a
        for k in cp.reader_opt.m:
            arrays[f"rdopt.m.{k}"] = cp.reader_opt.m[k]
            arrays[f"rdopt.v.{k}"] = cp.reader_opt.v[k]
    meta = {
        "vocab": cp.vocab.tokens,
        "config": cp.config,
        "rng_state": cp.rng_state,
        "iteration": cp.iteration,
        "params_version": cp.params_version,
        "stats": cp.stats,
        "encoder_opt": _opt_meta(cp.encoder_opt),
        "reader_opt": _opt_meta(cp.reader_opt) if cp.reader_opt is not None else None,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = _HEADER.pack(_MAGIC, cp.version, hashlib.sha256(payload).digest(), len(payload))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError("checkpoint truncated: header incomplete")
    magic, version, digest, size = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != size or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt)")
    with np.load(io.BytesIO(payload), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))

    def block(prefix: str) -> dict:
        n = len(prefix)
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}

    def opt(prefix: str, m: dict) -> OptState:
        return OptState(m=block(prefix + "m."), v=block(prefix + "v."), **m)

    encoder = EncoderParams(**block("enc."))
    reader = ReaderParams(**block("rd.")) if meta["reader_opt"] is not None else None
    return Checkpoint(
        vocab=Vocabulary(list(meta["vocab"])),
        encoder=encoder,
        encoder_opt=opt("encopt.", meta["encoder_opt"]),
        reader=reader,
        reader_opt=opt("rdopt.", meta["reader_opt"]) if reader is not None else None,
        config=meta["config"],
        rng_state=meta["rng_state"],
        iteration=meta["iteration"],
        params_version=meta["params_version"],
        stats=meta["stats"],
        version=version,
    )


def checkpoint_from_state(state, cfg) -> Checkpoint:
    return Checkpoint(
        vocab=state.vocab,
        encoder=state.encoder,
        encoder_opt=state.encoder_opt,
        reader=state.reader,
        reader_opt=state.reader_opt,
        config=cfg.to_json(),
        rng_state=state.rng.bit_generator.state,
        iteration=state.iteration,
        params_version=state.index.params_version,
        stats=[s.to_json() for s in state.stats],
    )


def state_from_checkpoint(cp: Checkpoint, store):
    """Rebuild a resumable ``TrainState``; the dense index is re-encoded from the saved params."""
    from .encoder import BagCache
    from .index import build_dense_index
    from .reader import ReaderCache
    from .trainer import IterationStats, TrainState

    rng = np.random.default_rng()
    rng.bit_generator.state = cp.rng_state
    bags = BagCache(cp.vocab, store)
    index = build_dense_index(cp.encoder, cp.vocab, store, cp.params_version, bags)
    return TrainState(cp.vocab, cp.encoder, cp.encoder_opt, cp.reader, cp.reader_opt, index, rng,
                      iteration=cp.iteration, stats=[IterationStats.from_json(s) for s in cp.stats],
                      bags=bags, rcache=ReaderCache(cp.vocab, store))
