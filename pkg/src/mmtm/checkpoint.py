"""Checkpoint files: a JSON header plus a raw little-endian float payload.

Layout: 4-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then every parameter tensor back to back in manifest order. The header embeds
the config, both vocabularies and their hashes, so a checkpoint is
self-contained for evaluation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Vocab
from .model import ModelConfig, ParamStore

MAGIC = b"MMTM"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointMismatch(CheckpointError):
    """Vocab hash in the manifest disagrees with the embedded vocabulary."""


def vocab_hash(tokens: list[str]) -> str:
    return hashlib.sha256("\x00".join(tokens).encode("utf-8")).hexdigest()


@dataclass
class TrainedModel:
    params: ParamStore
    vocab: Vocab

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def save(path: str | Path, params: ParamStore, vocab: Vocab) -> None:
    dtype = "<f8" if params.config.dtype == "float64" else "<f4"
    itemsize = np.dtype(dtype).itemsize
    manifest = []
    offset = 0
    for name in sorted(params.tensors):
        shape = list(params.tensors[name].shape)
        manifest.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape)) * itemsize
    header = {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "tasks": list(params.tasks),
        "src_vocab": vocab.src_itos,
        "tgt_vocab": vocab.tgt_itos,
        "src_vocab_hash": vocab_hash(vocab.src_itos),
        "tgt_vocab_hash": vocab_hash(vocab.tgt_itos),
        "payload_dtype": dtype,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for entry in manifest:
            fh.write(np.ascontiguousarray(
                params.tensors[entry["name"]], dtype=dtype).tobytes())


def load(path: str | Path) -> TrainedModel:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')}")
    for side in ("src", "tgt"):
        if vocab_hash(header[f"{side}_vocab"]) != header[f"{side}_vocab_hash"]:
            raise CheckpointMismatch(f"{side} vocab hash mismatch in {path}")
    config = ModelConfig(**header["config"])
    dtype = np.dtype(header["payload_dtype"])
    tensors = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        flat = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        tensors[entry["name"]] = flat.reshape(shape).astype(config.np_dtype)
    reserved = 4
    vocab = Vocab(header["src_vocab"][reserved:], header["tgt_vocab"][reserved:])
    params = ParamStore(config, tensors, tuple(header["tasks"]))
    return TrainedModel(params=params, vocab=vocab)
