"""Per-module second-moment pairs (G, C) feeding the closed-form merge.

Three sources: calibration activations pushed through each expert (assisted),
a surrogate built purely from task vectors (data-free), or a convex mixture of
the two. G and C are raw sums, not means; the regularizer absorbs the scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, ModuleMeta, TaskVectorSet
from .errors import OutOfRange, ShapeError, ZeroMatrix
from .linalg import frobenius_cos
from .toynet import TaskDataset, ToyNet, forward_capture

ASSISTED = "assisted"
DATA_FREE = "datafree"
MIXED = "mixed"


@dataclass
class ModuleStats:
    """Input Gram ``gram`` (d_in x d_in) and cross-moment ``cross`` (d_out x d_in)."""

    gram: np.ndarray
    cross: np.ndarray
    sample_count: int
    source: str
    eps: float | None = None

    def __add__(self, other: "ModuleStats") -> "ModuleStats":
        return ModuleStats(
            self.gram + other.gram,
            self.cross + other.cross,
            self.sample_count + other.sample_count,
            self.source,
            self.eps,
        )


def _symmetrize(g: np.ndarray) -> np.ndarray:
    return (g + g.T) / 2.0


def collect_assisted(
    net: ToyNet, calib: TaskDataset, task_vectors: dict[str, np.ndarray]
) -> dict[str, ModuleStats]:
    """One task's contribution: G = sum_n x xᵀ, C = sum_n (U x) xᵀ per module.

    ``task_vectors`` maps module name to that task's offset U. The activations
    x are the module inputs seen while the calibration samples flow through
    the task's own fine-tuned network. Contributions of several tasks are
    summed by the caller.
    """
    x, _ = calib.take()
    _, captured = forward_capture(net, x)
    out = {}
    for name, acts in captured.items():
        u = task_vectors[name]
        if u.shape[1] != acts.shape[0]:
            raise ShapeError(
                f"module {name!r}: task vector expects {u.shape[1]} inputs, "
                f"activations have {acts.shape[0]}"
            )
        residual = u @ acts
        out[name] = ModuleStats(
            gram=_symmetrize(acts @ acts.T),
            cross=residual @ acts.T,
            sample_count=acts.shape[1],
            source=ASSISTED,
        )
    return out


def assisted_stats(
    nets: list[ToyNet], calibs: list[TaskDataset], tvs: TaskVectorSet
) -> dict[str, ModuleStats]:
    """Sum of per-task contributions over all experts."""
    total: dict[str, ModuleStats] = {}
    for t, (net, calib) in enumerate(zip(nets, calibs)):
        per_task = {name: vecs[t] for name, vecs in tvs.vectors.items()}
        contribution = collect_assisted(net, calib, per_task)
        for name, s in contribution.items():
            total[name] = total[name] + s if name in total else s
    return total


def data_free_stats(tvs: TaskVectorSet) -> dict[str, ModuleStats]:
    """Task-vector surrogate: G = sum_t UᵀU, C = sum_t U UᵀU."""
    out = {}
    for name, vecs in tvs.vectors.items():
        d_in = vecs[0].shape[1]
        d_out = vecs[0].shape[0]
        gram = np.zeros((d_in, d_in))
        cross = np.zeros((d_out, d_in))
        for u in vecs:
            utu = _symmetrize(u.T @ u)
            gram += utu
            cross += u @ utu
        out[name] = ModuleStats(gram=gram, cross=cross, sample_count=0, source=DATA_FREE)
    return out


def mix_stats(assisted: ModuleStats, datafree: ModuleStats, eps: float) -> ModuleStats:
    """Convex combination eps * assisted + (1 - eps) * datafree of G and C."""
    if not 0.0 <= eps <= 1.0:
        raise OutOfRange(f"eps must lie in [0, 1], got {eps}")
    if assisted.gram.shape != datafree.gram.shape or assisted.cross.shape != datafree.cross.shape:
        raise ShapeError("assisted and data-free stats have mismatched shapes")
    return ModuleStats(
        gram=eps * assisted.gram + (1.0 - eps) * datafree.gram,
        cross=eps * assisted.cross + (1.0 - eps) * datafree.cross,
        sample_count=assisted.sample_count,
        source=MIXED,
        eps=eps,
    )


def mix_stats_map(
    assisted: dict[str, ModuleStats], datafree: dict[str, ModuleStats], eps: float
) -> dict[str, ModuleStats]:
    return {name: mix_stats(assisted[name], datafree[name], eps) for name in assisted}


@dataclass
class AlignmentRow:
    task: int
    module: str
    cos: float | None  # None when the task vector (or Gram) is zero


@dataclass
class AlignmentReport:
    rows: list[AlignmentRow]

    def task_means(self) -> dict[int, float | None]:
        means: dict[int, float | None] = {}
        for task in sorted({r.task for r in self.rows}):
            vals = [r.cos for r in self.rows if r.task == task and r.cos is not None]
            means[task] = float(np.mean(vals)) if vals else None
        return means

    def defined(self) -> list[AlignmentRow]:
        return [r for r in self.rows if r.cos is not None]


def alignment_report(
    nets: list[ToyNet], calibs: list[TaskDataset], tvs: TaskVectorSet
) -> AlignmentReport:
    """Frobenius cosine between the mean activation Gram and UᵀU, per task/module.

    Zero task vectors yield an undefined row rather than failing the run.
    """
    rows = []
    for t, (net, calib) in enumerate(zip(nets, calibs)):
        x, _ = calib.take()
        _, captured = forward_capture(net, x)
        for name, acts in captured.items():
            u = tvs.vectors[name][t]
            n = acts.shape[1]
            mean_gram = acts @ acts.T / n
            try:
                cos = frobenius_cos(mean_gram, u.T @ u)
            except ZeroMatrix:
                cos = None
            rows.append(AlignmentRow(task=t, module=name, cos=cos))
    return AlignmentReport(rows=rows)


# ---------------------------------------------------------------------------
# container serialization (cache between CLI invocations)

_SOURCE_CODES = {ASSISTED: 0.0, DATA_FREE: 1.0, MIXED: 2.0}
_CODE_SOURCES = {v: k for k, v in _SOURCE_CODES.items()}


def stats_to_checkpoint(stats: dict[str, ModuleStats], meta: dict[str, ModuleMeta]) -> Checkpoint:
    """Pack a stats map into the checkpoint container (named G/C tensors)."""
    ckpt = Checkpoint()
    for name, s in stats.items():
        m = meta[name]
        d_in, d_out = s.gram.shape[0], s.cross.shape[0]
        ckpt.add_module(ModuleMeta(f"{name}.gram", d_in, d_in, m.block, m.group), s.gram)
        ckpt.add_module(ModuleMeta(f"{name}.cross", d_out, d_in, m.block, m.group), s.cross)
        eps = -1.0 if s.eps is None else s.eps
        ckpt.add_aux(f"{name}.info", [float(s.sample_count), _SOURCE_CODES[s.source], eps])
    return ckpt


def stats_from_checkpoint(ckpt: Checkpoint) -> dict[str, ModuleStats]:
    out = {}
    for full in ckpt.meta:
        if not full.endswith(".gram"):
            continue
        name = full[: -len(".gram")]
        info = ckpt.aux[f"{name}.info"]
        eps = None if info[2] < 0 else float(info[2])
        out[name] = ModuleStats(
            gram=ckpt.modules[f"{name}.gram"].copy(),
            cross=ckpt.modules[f"{name}.cross"].copy(),
            sample_count=int(info[0]),
            source=_CODE_SOURCES[info[1]],
            eps=eps,
        )
    return out
