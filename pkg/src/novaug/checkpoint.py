"""Versioned checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 manifest length, a JSON
manifest, then raw little-endian float64 array data, one contiguous block per
entry in manifest order. The manifest carries the full config text (and its
hash), training position, optimizer step counts, and the rng states needed to
resume bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NVAUGCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _entry_arrays(state):
    """Deterministically ordered (name, array) pairs covering all state."""
    pairs = []
    for name, p in state.embedder.named_parameters("embedder."):
        pairs.append((name, p.data))
    for name, buf in state.embedder.named_buffers("embedder."):
        pairs.append((name, buf))
    pairs.append(("proxies.real", state.bank.real.data))
    if state.bank.novel is not None:
        pairs.append(("proxies.novel", state.bank.novel.data))
    if state.generator is not None:
        for name, p in state.generator.named_parameters("generator."):
            pairs.append((name, p.data))
        for name, buf in state.generator.named_buffers("generator."):
            pairs.append((name, buf))
    for label, opt in (("opt_f", state.opt_f), ("opt_g", state.opt_g)):
        if opt is None:
            continue
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            pairs.append((f"{label}.m.{i}", m))
            pairs.append((f"{label}.v.{i}", v))
    return pairs


def _rng_states(rngs):
    return {name: rng.bit_generator.state for name, rng in rngs.items()}


def save_checkpoint(state, path):
    pairs = _entry_arrays(state)
    entries = []
    offset = 0
    blobs = []
    for name, arr in pairs:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "version": VERSION,
        "config_text": state.config.canonical_text(),
        "config_hash": state.config.config_hash(),
        "num_real_classes": state.num_real_classes,
        "input_dim": state.embedder.input_dim,
        "stage": state.stage,
        "step_in_stage": state.step_in_stage,
        "global_step": state.global_step,
        "opt_f_t": None if state.opt_f is None else state.opt_f.t,
        "opt_g_t": None if state.opt_g is None else state.opt_g.t,
        "rng_states": _rng_states(state.rngs),
        "metric_rows": [
            [r.step, r.stage, r.j_met, r.j_div, r.total] for r in state.metric_rows
        ],
        "entries": entries,
    }
    manifest_blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest_blob)))
        fh.write(manifest_blob)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length))
        data_start = fh.tell()
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest, data_start


def load_checkpoint(path):
    """Rebuild a TrainState positioned exactly where it was saved."""
    from .config import ExperimentConfig, parse_config_text
    from .pipeline import MetricRow, build_state, enter_stage

    manifest, data_start = read_manifest(path)
    config = ExperimentConfig.from_values(
        parse_config_text(manifest["config_text"], source=str(path))
    )
    state = build_state(config, manifest["num_real_classes"], manifest["input_dim"])
    state.global_step = manifest["global_step"]
    stage = manifest["stage"]
    if stage != "pretrain_f" or manifest["opt_f_t"] is not None:
        enter_stage(state, stage)
    state.step_in_stage = manifest["step_in_stage"]
    state.metric_rows = [
        MetricRow(s, st, jm, jd, total)
        for s, st, jm, jd, total in manifest["metric_rows"]
    ]

    targets = {}
    for name, arr in _entry_arrays(state):
        targets[name] = arr
    expected = {e["name"] for e in manifest["entries"]}
    if expected != set(targets):
        missing = expected ^ set(targets)
        raise CheckpointError(f"checkpoint entries do not match the model: {sorted(missing)}")

    with open(path, "rb") as fh:
        fh.seek(data_start)
        payload = fh.read()
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        target = targets[entry["name"]]
        target[...] = flat.reshape(shape)

    if state.opt_f is not None:
        state.opt_f.t = manifest["opt_f_t"]
    if state.opt_g is not None:
        state.opt_g.t = manifest["opt_g_t"]
    for name, rng_state in manifest["rng_states"].items():
        state.rngs[name].bit_generator.state = rng_state
    return state
