"""Single-file checkpoint container.

Layout: magic "TSLM" | u32 format version | u64 metadata length | metadata
JSON | payload. The metadata carries the config echo and a tensor manifest
whose byte offsets index into the payload; tensors are little-endian float32
arrays, and NF4 bases are a float32 scale array plus a packed nibble stream.
Everything is deterministic, so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .lora import AdaptedLinear, LoraAdapter
from .model import Model, ModelConfig, PROJECTION_NAMES
from .quant import QuantizedTensor, build_nf4_codebook

MAGIC = b"TSLM"
FORMAT_VERSION = 1


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0
        self.manifest: list[dict] = []

    def add_f32(self, name: str, arr: np.ndarray):
        data = _f32_bytes(arr)
        self.manifest.append(
            {
                "name": name,
                "kind": "f32",
                "shape": list(arr.shape),
                "offset": self.offset,
                "nbytes": len(data),
            }
        )
        self.chunks.append(data)
        self.offset += len(data)

    def add_nf4(self, name: str, qt: QuantizedTensor):
        scales = _f32_bytes(qt.scales)
        codes = np.ascontiguousarray(qt.codes, dtype=np.uint8).tobytes()
        self.manifest.append(
            {
                "name": name,
                "kind": "nf4",
                "shape": list(qt.shape),
                "block_size": qt.block_size,
                "dtype_tag": qt.dtype_tag,
                "scales_offset": self.offset,
                "scales_nbytes": len(scales),
                "codes_offset": self.offset + len(scales),
                "codes_nbytes": len(codes),
            }
        )
        self.chunks.append(scales)
        self.chunks.append(codes)
        self.offset += len(scales) + len(codes)


def save_checkpoint(path, model: Model, config_echo: dict | None = None):
    writer = _Writer()
    writer.add_f32("tok_emb", model.tok_emb)
    writer.add_f32("pos_emb", model.pos_emb)
    for i, layer in enumerate(model.layers):
        writer.add_f32(f"block{i}.ln1_g", layer["ln1_g"])
        writer.add_f32(f"block{i}.ln2_g", layer["ln2_g"])
        for name in PROJECTION_NAMES:
            lin: AdaptedLinear = layer[name]
            tensor_name = f"block{i}.{name}.base"
            if lin.base_q is not None:
                writer.add_nf4(tensor_name, lin.base_q)
            else:
                writer.add_f32(tensor_name, lin.weight)
            if lin.adapter is not None:
                writer.add_f32(f"block{i}.{name}.adapter.a", lin.adapter.a)
                writer.add_f32(f"block{i}.{name}.adapter.b", lin.adapter.b)
    writer.add_f32("final_g", model.final_g)
    writer.add_f32("head", model.head)

    adapters_meta = {
        path_: {"rank": ad.rank, "alpha": ad.alpha, "dropout_p": ad.dropout_p}
        for path_, ad in model.adapters()
    }
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "adapters": adapters_meta,
        "config": config_echo or {},
        "tensors": writer.manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for chunk in writer.chunks:
            fh.write(chunk)


def _read_f32(payload: bytes, entry: dict) -> np.ndarray:
    raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
    return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()


def _read_nf4(payload: bytes, entry: dict) -> QuantizedTensor:
    scales = np.frombuffer(
        payload[entry["scales_offset"] : entry["scales_offset"] + entry["scales_nbytes"]],
        dtype="<f4",
    ).copy()
    codes = np.frombuffer(
        payload[entry["codes_offset"] : entry["codes_offset"] + entry["codes_nbytes"]],
        dtype=np.uint8,
    ).copy()
    return QuantizedTensor(
        codes=codes,
        scales=scales,
        block_size=entry["block_size"],
        shape=tuple(entry["shape"]),
        dtype_tag=entry.get("dtype_tag", "float32"),
    )


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta_len = struct.unpack("<Q", data[8:16])[0]
    meta = json.loads(data[16 : 16 + meta_len].decode("utf-8"))
    payload = data[16 + meta_len :]

    entries = {entry["name"]: entry for entry in meta["tensors"]}
    cfg = ModelConfig(**meta["model_config"])
    model = Model(cfg)
    codebook = build_nf4_codebook()

    model.tok_emb = _read_f32(payload, entries["tok_emb"])
    model.pos_emb = _read_f32(payload, entries["pos_emb"])
    model.final_g = _read_f32(payload, entries["final_g"])
    model.head = _read_f32(payload, entries["head"])
    for i, layer in enumerate(model.layers):
        layer["ln1_g"] = _read_f32(payload, entries[f"block{i}.ln1_g"])
        layer["ln2_g"] = _read_f32(payload, entries[f"block{i}.ln2_g"])
        for name in PROJECTION_NAMES:
            path_ = f"block{i}.{name}"
            entry = entries[f"{path_}.base"]
            adapter = None
            if path_ in meta["adapters"]:
                spec = meta["adapters"][path_]
                adapter = LoraAdapter(
                    a=_read_f32(payload, entries[f"{path_}.adapter.a"]),
                    b=_read_f32(payload, entries[f"{path_}.adapter.b"]),
                    rank=spec["rank"],
                    alpha=spec["alpha"],
                    dropout_p=spec["dropout_p"],
                )
                adapter.zero_grads()
            if entry["kind"] == "nf4":
                layer[name] = AdaptedLinear(_read_nf4(payload, entry), adapter, codebook=codebook)
            else:
                layer[name] = AdaptedLinear(_read_f32(payload, entry), adapter)
    return model, meta
