"""Portable checkpoint container, task-vector extraction, and model assembly.

On disk a checkpoint is a directory holding ``manifest.json`` plus a single
``weights.bin`` blob of raw little-endian float64 values. The manifest lists
every 2D module (name, shape, block/group labels, byte offset) and every aux
vector (biases and other non-2D parameters). Round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MetaMismatch, MissingConfigCell, MissingModule, ShapeError
from .linalg import as_matrix

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
MAGIC = "mergeforge-ckpt"
_DTYPE = np.dtype("<f8")


@dataclass(frozen=True)
class ModuleMeta:
    """Shape and tying labels for one 2D module."""

    name: str
    rows: int
    cols: int
    block: int
    group: str


@dataclass
class Checkpoint:
    """Named 2D weight matrices plus non-2D aux vectors.

    ``modules`` and ``meta`` share the same keys in the same order; shapes in
    ``meta`` match the arrays in ``modules``.
    """

    modules: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, ModuleMeta] = field(default_factory=dict)
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def add_module(self, meta: ModuleMeta, weight) -> None:
        self.modules[meta.name] = as_matrix(weight, meta.rows, meta.cols)
        self.meta[meta.name] = meta

    def add_aux(self, name: str, values) -> None:
        v = np.ascontiguousarray(values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"aux {name!r} must be a 1D vector, got ndim={v.ndim}")
        self.aux[name] = v

    def validate(self) -> None:
        if list(self.modules) != list(self.meta):
            raise MetaMismatch("module names in modules and meta do not coincide")
        for name, m in self.meta.items():
            w = self.modules[name]
            if w.shape != (m.rows, m.cols):
                raise ShapeError(f"module {name!r}: meta {m.rows}x{m.cols} vs tensor {w.shape}")

    def same_meta(self, other: "Checkpoint") -> bool:
        return list(self.meta.values()) == list(other.meta.values()) and [
            (k, v.shape) for k, v in self.aux.items()
        ] == [(k, v.shape) for k, v in other.aux.items()]

    def tying_cells(self) -> list[tuple[int, str]]:
        """Sorted distinct (block, group) pairs across all 2D modules."""
        return sorted({(m.block, m.group) for m in self.meta.values()})

    def blocks(self) -> list[int]:
        return sorted({m.block for m in self.meta.values()})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``manifest.json`` + ``weights.bin`` under ``path`` (a directory)."""
    ckpt.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    modules = []
    for name, m in ckpt.meta.items():
        w = ckpt.modules[name]
        modules.append(
            {
                "name": name,
                "rows": m.rows,
                "cols": m.cols,
                "block": m.block,
                "group": m.group,
                "offset": len(blob),
                "dtype": "f64le",
            }
        )
        blob += np.ascontiguousarray(w, dtype=_DTYPE).tobytes()
    aux = []
    for name, v in ckpt.aux.items():
        aux.append({"name": name, "len": int(v.shape[0]), "offset": len(blob)})
        blob += np.ascontiguousarray(v, dtype=_DTYPE).tobytes()
    manifest = {
        "magic": MAGIC,
        "format_version": ckpt.format_version,
        "modules": modules,
        "aux": aux,
    }
    (path / WEIGHTS_NAME).write_bytes(bytes(blob))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST_NAME} under {path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}")
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise FormatError("bad magic")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        blob = (path / WEIGHTS_NAME).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"no {WEIGHTS_NAME} under {path}")

    ckpt = Checkpoint(format_version=FORMAT_VERSION)
    for entry in manifest.get("modules", []):
        if entry.get("dtype") != "f64le":
            raise FormatError(f"unsupported dtype {entry.get('dtype')!r}")
        rows, cols, offset = entry["rows"], entry["cols"], entry["offset"]
        nbytes = rows * cols * _DTYPE.itemsize
        if offset < 0 or offset + nbytes > len(blob):
            raise ShapeError(
                f"module {entry['name']!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but blob has {len(blob)}"
            )
        w = np.frombuffer(blob, dtype=_DTYPE, count=rows * cols, offset=offset)
        meta = ModuleMeta(entry["name"], rows, cols, entry["block"], entry["group"])
        ckpt.add_module(meta, w.reshape(rows, cols))
    for entry in manifest.get("aux", []):
        n, offset = entry["len"], entry["offset"]
        nbytes = n * _DTYPE.itemsize
        if offset < 0 or offset + nbytes > len(blob):
            raise ShapeError(
                f"aux {entry['name']!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but blob has {len(blob)}"
            )
        ckpt.add_aux(entry["name"], np.frombuffer(blob, dtype=_DTYPE, count=n, offset=offset))
    return ckpt


@dataclass
class TaskVectorSet:
    """Per-module expert offsets U^(t) = W^(t) - W_pre plus the anchor offset U^(0)."""

    vectors: dict[str, list[np.ndarray]]
    anchor: dict[str, np.ndarray]
    meta: dict[str, ModuleMeta]

    @property
    def num_tasks(self) -> int:
        return len(next(iter(self.vectors.values()))) if self.vectors else 0


def _check_compatible(pretrained: Checkpoint, others: list[Checkpoint]) -> None:
    for i, other in enumerate(others):
        if not pretrained.same_meta(other):
            raise MetaMismatch(f"checkpoint #{i} metadata differs from the pretrained base")


def task_vectors(
    pretrained: Checkpoint, finetuned: list[Checkpoint], anchor: Checkpoint
) -> TaskVectorSet:
    """Offsets of each fine-tuned checkpoint and of the anchor from the base."""
    _check_compatible(pretrained, list(finetuned) + [anchor])
    vectors = {
        name: [ft.modules[name] - w for ft in finetuned]
        for name, w in pretrained.modules.items()
    }
    anchor_vecs = {name: anchor.modules[name] - w for name, w in pretrained.modules.items()}
    return TaskVectorSet(vectors=vectors, anchor=anchor_vecs, meta=dict(pretrained.meta))


def ta_anchor(pretrained: Checkpoint, finetuned: list[Checkpoint], alpha: float) -> Checkpoint:
    """Task-arithmetic merge W_pre + alpha * sum_t (W^(t) - W_pre); aux from the base."""
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    _check_compatible(pretrained, list(finetuned))
    out = Checkpoint(format_version=pretrained.format_version)
    for name, m in pretrained.meta.items():
        total = np.zeros_like(pretrained.modules[name])
        for ft in finetuned:
            total += ft.modules[name] - pretrained.modules[name]
        out.add_module(m, pretrained.modules[name] + alpha * total)
    for name, v in pretrained.aux.items():
        out.add_aux(name, v.copy())
    return out


def assemble(
    pretrained: Checkpoint,
    merged_vectors: dict[str, np.ndarray],
    config,
    anchor: Checkpoint,
) -> Checkpoint:
    """Rebuild a full checkpoint as W_pre + s_block * U per module.

    ``config`` is either a merge config carrying a ``scales`` attribute or a
    bare block -> s mapping. Non-2D parameters are copied from the anchor
    checkpoint.
    """
    scales = getattr(config, "scales", config)
    out = Checkpoint(format_version=pretrained.format_version)
    for name, m in pretrained.meta.items():
        if name not in merged_vectors:
            raise MissingModule(f"no merged vector for module {name!r}")
        try:
            s = scales[m.block]
        except KeyError:
            raise MissingConfigCell(f"no scale for block {m.block}")
        out.add_module(m, pretrained.modules[name] + s * merged_vectors[name])
    for name, v in anchor.aux.items():
        out.add_aux(name, v.copy())
    return out
