"""Network checkpoints: JSON header + little-endian parameter blocks.

The header records the layer specs, dtype, step count, optimizer settings
and the Philox generator state, so training can resume mid-stream.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..io import load_blocks, save_blocks

FORMAT = "dynskin.checkpoint/1"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox-4x64 stream; reproducible from the seed alone."""
    return np.random.Generator(np.random.Philox(int(seed)))


def rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return _jsonable(st)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    st = dict(state)
    st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    bg.state = st
    return np.random.Generator(bg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.reshape(-1)]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def save_checkpoint(path, module, spec: dict, optimizer=None, rng: np.random.Generator | None = None,
                    extra_meta: dict | None = None, extra_arrays: dict | None = None) -> Path:
    dtype = "f4" if next(iter(module.state_dict().values())).dtype == np.float32 else "f8"
    arrays = {f"param.{k}": v for k, v in module.state_dict().items()}
    meta = {"format": FORMAT, "spec": spec, "dtype": dtype}
    if optimizer is not None:
        opt_meta, opt_arrays = optimizer.state()
        meta["optimizer"] = opt_meta
        meta["step"] = opt_meta["t"]
        arrays.update({f"opt.{k}": v for k, v in opt_arrays.items()})
    if rng is not None:
        meta["rng"] = rng_state(rng)
    if extra_meta:
        meta["extra"] = extra_meta
    if extra_arrays:
        arrays.update({f"extra.{k}": v for k, v in extra_arrays.items()})
    return save_blocks(path, meta, arrays, dtype=dtype)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (meta, params, optimizer arrays, extra arrays)."""
    meta, arrays = load_blocks(path)
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a network checkpoint")
    groups: dict[str, dict] = {"param": {}, "opt": {}, "extra": {}}
    for k, v in arrays.items():
        head, _, rest = k.partition(".")
        groups[head][rest] = v
    return meta, groups["param"], groups["opt"], groups["extra"]
