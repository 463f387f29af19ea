"""Checkpoint directories and component-level parameter transfer.

A checkpoint is a directory holding ``meta.json`` and ``params.bin``. The
meta file carries the format version, the full model configuration, vocab
content hashes, and a parameter index (name, shape, dtype, byte offset);
the blob is every parameter as float32 little-endian row-major, laid out
in index order. Offsets are bytes into the blob, so a reader can seek to
one parameter without parsing the rest.

Transfer copies whole components between checkpoints and live models for
pre-initialization; it validates every mapped parameter first and copies
nothing on any mismatch.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, MultiTaskModel

FORMAT_VERSION = 1
META_NAME = "meta.json"
BLOB_NAME = "params.bin"


def _meta_doc(model: MultiTaskModel, vocab_hashes: dict) -> dict:
    index = []
    offset = 0
    for name, p in model.named_parameters():
        index.append(
            {
                "name": name,
                "shape": list(p.shape),
                "dtype": "float32",
                "offset": offset,
            }
        )
        offset += 4 * p.size
    return {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_json(),
        "vocab_hashes": dict(vocab_hashes),
        "parameters": index,
        "total_bytes": offset,
    }


def save_checkpoint(model: MultiTaskModel, path, vocab_hashes: dict | None = None) -> Path:
    """Write meta.json + params.bin under ``path`` (created if needed)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if vocab_hashes is None:
        vocab_hashes = getattr(model, "vocab_hashes", {})
    meta = _meta_doc(model, vocab_hashes)
    with open(out / BLOB_NAME, "wb") as fh:
        for _, p in model.named_parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    (out / META_NAME).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return out


def read_meta(path) -> dict:
    meta_path = Path(path) / META_NAME
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no {META_NAME} in {path}")
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable {meta_path}: {exc}")
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    return meta


def _read_blob(path, meta) -> bytes:
    blob_path = Path(path) / BLOB_NAME
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"unreadable {blob_path}: {exc}")
    want = meta["total_bytes"]
    if len(blob) != want:
        raise CheckpointError(
            f"{blob_path} holds {len(blob)} bytes, index declares {want}"
        )
    return blob


def _entry_array(blob: bytes, entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    n = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    try:
        return np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape)
    except ValueError as exc:
        raise CheckpointError(f"parameter {entry['name']}: {exc}")


def load_checkpoint(path) -> MultiTaskModel:
    """Rebuild the model from ``path``; bit-identical to what was saved."""
    meta = read_meta(path)
    blob = _read_blob(path, meta)
    config = ModelConfig.from_json(meta["model_config"])
    model = MultiTaskModel(config, seed=0)
    live = dict(model.named_parameters())
    index = {entry["name"]: entry for entry in meta["parameters"]}
    missing = sorted(set(live) ^ set(index))
    if missing:
        raise CheckpointError(f"parameter set mismatch: {', '.join(missing)}")
    for name, p in live.items():
        stored = _entry_array(blob, index[name])
        if stored.shape != p.shape:
            raise CheckpointError(
                f"parameter {name}: stored shape {stored.shape}, model expects {p.shape}"
            )
        p.data[...] = stored
    model.vocab_hashes = dict(meta["vocab_hashes"])
    return model


def checkpoint_parameters(path) -> dict[str, np.ndarray]:
    """Name → array view of every parameter in the checkpoint at ``path``."""
    meta = read_meta(path)
    blob = _read_blob(path, meta)
    return {e["name"]: _entry_array(blob, e) for e in meta["parameters"]}


def _component_of(name: str) -> str:
    return name.split(".", 1)[0]


def transfer_parameters(target: MultiTaskModel, source_path, mapping: dict) -> dict:
    """Copy whole components from a checkpoint into a live model.

    mapping: {source component: target component}. All mapped parameters
    are validated before any copy; a single mismatch aborts the transfer
    untouched. Returns a report of copied names and counts.
    """
    stored = checkpoint_parameters(source_path)
    by_component: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in stored.items():
        by_component.setdefault(_component_of(name), {})[name] = arr
    live = target.components()

    plan = []
    for src, dst in mapping.items():
        if src not in by_component:
            raise CheckpointError(f"source checkpoint has no component {src!r}")
        if dst not in live:
            raise CheckpointError(f"target model has no component {dst!r}")
        src_params = by_component[src]
        dst_params = {n: p for n, p in live[dst]}
        src_suffixes = {n[len(src) :]: n for n in src_params}
        dst_suffixes = {n[len(dst) :]: n for n in dst_params}
        odd = sorted(set(src_suffixes) ^ set(dst_suffixes))
        if odd:
            raise CheckpointError(
                f"components {src!r} and {dst!r} disagree on parameters: {', '.join(odd)}"
            )
        for suffix, src_name in src_suffixes.items():
            arr = src_params[src_name]
            tensor = dst_params[dst_suffixes[suffix]]
            if arr.shape != tensor.shape:
                raise CheckpointError(
                    f"parameter {dst_suffixes[suffix]}: source shape {arr.shape}, "
                    f"target expects {tensor.shape}"
                )
            plan.append((dst_suffixes[suffix], arr, tensor))

    for _, arr, tensor in plan:
        tensor.data[...] = arr
    return {
        "copied": sorted(name for name, _, _ in plan),
        "parameters": len(plan),
        "values": int(sum(arr.size for _, arr, _ in plan)),
    }
