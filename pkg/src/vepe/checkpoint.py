"""Checkpoint file format VEPE-CKPT-1.

Layout, all integers ASCII decimal:

    VEPE-CKPT-1\n
    <entry-count>\n
    <name> <ndim> <dim0> ... <dimN-1>\n      (one line per entry)
    <raw payload>                            (entries concatenated in manifest
                                              order, little-endian float64)

Manifest entries are written in sorted-name order so saving the same
parameters always yields byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

HEADER = "VEPE-CKPT-1"


class CheckpointError(ValueError):
    pass


def _as_array(v) -> np.ndarray:
    if isinstance(v, Tensor):
        return v.data
    return np.asarray(v, dtype=np.float64)


def save_state(path: str, state: dict) -> None:
    """Write a name -> tensor/array mapping as a VEPE-CKPT-1 file."""
    names = sorted(state)
    lines = [HEADER, str(len(names))]
    arrays = []
    for name in names:
        if " " in name or "\n" in name:
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        arr = _as_array(state[name])
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        arrays.append(arr)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_state(path: str) -> dict[str, np.ndarray]:
    """Read a VEPE-CKPT-1 file back into a name -> float64 array mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    head, sep, _ = blob.partition(b"\n")
    if not sep or head.decode("ascii", errors="replace") != HEADER:
        raise CheckpointError(f"{path}: expected {HEADER} header, got {head[:32]!r}")
    pos = len(head) + 1

    def next_line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated manifest at byte {pos}")
        line = blob[pos:end].decode("ascii")
        pos = end + 1
        return line

    try:
        count = int(next_line())
    except ValueError as e:
        raise CheckpointError(f"{path}: bad entry count at byte {pos}: {e}") from None
    manifest = []
    for _ in range(count):
        parts = next_line().split(" ")
        if len(parts) < 2:
            raise CheckpointError(f"{path}: malformed manifest line near byte {pos}")
        name, ndim = parts[0], int(parts[1])
        if len(parts) != 2 + ndim:
            raise CheckpointError(f"{path}: manifest entry {name} lists {len(parts) - 2} "
                                  f"dims, declared {ndim}")
        manifest.append((name, tuple(int(d) for d in parts[2:])))

    state = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: payload for {name} truncated at byte {pos}")
        state[name] = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after payloads")
    return state


def save_module(path: str, module) -> None:
    save_state(path, module.named_parameters())


def load_module(path: str, module) -> None:
    """Load parameters in place; names and shapes must match exactly."""
    state = load_state(path)
    params = module.named_parameters()
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names disagree with model "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        if state[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {state[name].shape}, "
                                  f"model expects {p.data.shape}")
        p.data = np.ascontiguousarray(state[name])
