"""Checkpoints: a text manifest plus one little-endian float64 blob.

Layout of a checkpoint directory::

    manifest.txt   text, one record per line (format below)
    tensors.bin    concatenated little-endian f64 arrays, C order

Manifest::

    format bertswin-ckpt 1
    step <int>
    meta <key> <value>             (zero or more; values are repr() text)
    config_lines <n>
    <n lines of the run config, verbatim>
    tensors <count>
    tensor <name> f64 <d0,d1,...|scalar> <byte offset> <nbytes>

Floats are written with ``repr`` so they parse back bit-exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError

MAGIC = "format bertswin-ckpt 1"


@dataclass
class Checkpoint:
    step: int
    tensors: dict                      # name -> float64 array
    config_text: str = ""
    meta: dict = field(default_factory=dict)


def _shape_text(shape: tuple) -> str:
    return ",".join(str(s) for s in shape) if shape else "scalar"


def checkpoint_save(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC, f"step {int(ckpt.step)}"]
    for key in sorted(ckpt.meta):
        value = str(ckpt.meta[key])
        if " " in key or "\n" in value:
            raise ConfigError(f"meta entry {key!r} must be a single token key and a one-line value")
        lines.append(f"meta {key} {value}")
    cfg_lines = ckpt.config_text.splitlines()
    lines.append(f"config_lines {len(cfg_lines)}")
    lines.extend(cfg_lines)
    lines.append(f"tensors {len(ckpt.tensors)}")
    offset = 0
    blobs = []
    for name in sorted(ckpt.tensors):
        if any(ch.isspace() for ch in name):
            raise ConfigError(f"tensor name {name!r} contains whitespace")
        arr = np.array(ckpt.tensors[name], dtype="<f8", order="C")   # keeps 0-d shapes
        blobs.append(arr.tobytes())
        lines.append(f"tensor {name} f64 {_shape_text(arr.shape)} {offset} {arr.nbytes}")
        offset += arr.nbytes
    with open(path / "tensors.bin", "wb") as fh:
        for b in blobs:
            fh.write(b)
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class _Lines:
    def __init__(self, text: str, source: Path):
        self.lines = text.splitlines()
        self.pos = 0
        self.source = source

    def next(self, field_name: str) -> str:
        if self.pos >= len(self.lines):
            raise ConfigError(f"{self.source}: manifest ends before field '{field_name}'")
        self.pos += 1
        return self.lines[self.pos - 1]

    def fail(self, field_name: str, detail: str) -> ConfigError:
        return ConfigError(f"{self.source}: manifest line {self.pos}: bad field '{field_name}': {detail}")


def _int(tok: str, lines: _Lines, field_name: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise lines.fail(field_name, f"expected an integer, got {tok!r}") from None


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"{path}: no manifest.txt")
    lines = _Lines(manifest.read_text(encoding="utf-8"), manifest)
    if lines.next("format").strip() != MAGIC:
        raise lines.fail("format", f"expected '{MAGIC}'")
    tok = lines.next("step").split()
    if len(tok) != 2 or tok[0] != "step":
        raise lines.fail("step", "expected 'step <int>'")
    step = _int(tok[1], lines, "step")
    meta = {}
    line = lines.next("config_lines")
    while line.startswith("meta "):
        parts = line.split(" ", 2)
        if len(parts) != 3:
            raise lines.fail("meta", "expected 'meta <key> <value>'")
        meta[parts[1]] = parts[2]
        line = lines.next("config_lines")
    tok = line.split()
    if len(tok) != 2 or tok[0] != "config_lines":
        raise lines.fail("config_lines", "expected 'config_lines <n>'")
    cfg = [lines.next("config") for _ in range(_int(tok[1], lines, "config_lines"))]
    tok = lines.next("tensors").split()
    if len(tok) != 2 or tok[0] != "tensors":
        raise lines.fail("tensors", "expected 'tensors <count>'")
    count = _int(tok[1], lines, "tensors")
    blob = (path / "tensors.bin").read_bytes() if (path / "tensors.bin").exists() else b""
    tensors = {}
    for _ in range(count):
        tok = lines.next("tensor").split()
        if len(tok) != 6 or tok[0] != "tensor":
            raise lines.fail("tensor", "expected 'tensor <name> f64 <shape> <offset> <nbytes>'")
        name, dtype, shape_txt = tok[1], tok[2], tok[3]
        if dtype != "f64":
            raise lines.fail("tensor.dtype", f"unsupported dtype {dtype!r}")
        shape = () if shape_txt == "scalar" else tuple(_int(s, lines, "tensor.shape") for s in shape_txt.split(","))
        offset, nbytes = _int(tok[4], lines, "tensor.offset"), _int(tok[5], lines, "tensor.nbytes")
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise lines.fail("tensor.nbytes", f"{nbytes} bytes do not match shape {shape}")
        if offset < 0 or offset + nbytes > len(blob):
            raise lines.fail("tensor.offset", f"range {offset}+{nbytes} exceeds blob of {len(blob)} bytes")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
    return Checkpoint(step, tensors, "\n".join(cfg) + ("\n" if cfg else ""), meta)


def checkpoint_hash(path: Union[str, Path]) -> str:
    """sha256 over the manifest followed by the tensor blob."""
    path = Path(path)
    h = hashlib.sha256()
    for name in ("manifest.txt", "tensors.bin"):
        h.update((path / name).read_bytes())
    return h.hexdigest()
