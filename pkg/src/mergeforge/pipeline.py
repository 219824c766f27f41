"""Run orchestration shared by the CLI commands and the experiment scripts.

A run directory holds generated datasets, checkpoints, cached moment stats,
trial logs, and reports:

    out/
      harness.json              generation/training settings + seed
      data/task<t>/<split>/     dataset containers
      ckpts/pretrained/  ckpts/expert<t>/  ckpts/anchor-ta/  ckpts/merged-*/
      stats/<mode>/             cached (G, C) containers
      history-<tag>.jsonl       resumable trial logs
      reports/                  JSON / Markdown / CSV outputs
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import bayesopt, merge, stats, toynet
from .checkpoint import (
    Checkpoint,
    ModuleMeta,
    TaskVectorSet,
    assemble,
    load_checkpoint,
    save_checkpoint,
    ta_anchor,
    task_vectors,
)
from .errors import EmptyInput, OutOfRange

TA_ALPHA_GRID = np.linspace(0.1, 1.0, 10)
DEFAULT_BETA_GRID = (1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e6, 1e12)
SHARED_LAMBDA_GRID_SIZE = 15


@dataclass(frozen=True)
class SearchPreset:
    """Search ranges and budget for one family of runs."""

    name: str
    lam_lo: float
    lam_hi: float
    s_lo: float = 1.0
    s_hi: float = 1.3
    trials: int = 60


PRESETS = {
    "toy": SearchPreset("toy", 1e-3, 100.0, trials=60),
    "vit-like": SearchPreset("vit-like", 1e-4, 1.0, trials=200),
    "llama-like": SearchPreset("llama-like", 1e-3, 100.0, trials=100),
}
DEFAULT_PRESET = "toy"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MERGEFORGE_THREADS", "1")))
    except ValueError:
        return 1


def default_n_init(space_dim: int) -> int:
    return max(10, 2 * space_dim)


# ---------------------------------------------------------------------------
# run directory


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def harness_path(self) -> Path:
        return self.root / "harness.json"

    def data_dir(self, task: int, split: str) -> Path:
        return self.root / "data" / f"task{task}" / split

    def ckpt_dir(self, name: str) -> Path:
        return self.root / "ckpts" / name

    def stats_dir(self, tag: str) -> Path:
        return self.root / "stats" / tag

    def history_path(self, tag: str) -> Path:
        return self.root / f"history-{tag}.jsonl"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / name

    def write_report(self, name: str, obj) -> Path:
        path = self.report_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def save_dataset(ds: toynet.TaskDataset, path) -> None:
    ckpt = Checkpoint()
    n, d = ds.inputs.shape
    ckpt.add_module(ModuleMeta("inputs", n, d, 0, "data"), ds.inputs)
    ckpt.add_aux("labels", ds.labels.astype(np.float64))
    save_checkpoint(ckpt, path)


def load_dataset(path, split: str) -> toynet.TaskDataset:
    ckpt = load_checkpoint(path)
    return toynet.TaskDataset(
        inputs=ckpt.modules["inputs"].copy(),
        labels=ckpt.aux["labels"].astype(np.int64),
        split=split,
    )


def save_tasks(run: RunDir, tasks: list[toynet.TaskData]) -> None:
    for task in tasks:
        for split in toynet.SPLITS:
            save_dataset(task.split(split), run.data_dir(task.task_id, split))


def load_tasks(run: RunDir, num_tasks: int) -> list[toynet.TaskData]:
    tasks = []
    for t in range(num_tasks):
        parts = {
            split: load_dataset(run.data_dir(t, split), split) for split in toynet.SPLITS
        }
        tasks.append(toynet.TaskData(task_id=t, **parts))
    return tasks


def save_harness(run: RunDir, cfg: toynet.HarnessConfig, seed: int) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    payload = {"seed": seed, "config": asdict(cfg)}
    run.harness_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_harness(run: RunDir) -> tuple[toynet.HarnessConfig, int]:
    payload = json.loads(run.harness_path.read_text())
    return toynet.HarnessConfig(**payload["config"]), int(payload["seed"])


# ---------------------------------------------------------------------------
# training and loading the expert pool


def train_all_experts(
    cfg: toynet.HarnessConfig, pretrained: toynet.ToyNet, tasks: list[toynet.TaskData], seed: int
) -> list[toynet.ToyNet]:
    workers = worker_count()
    if workers == 1:
        return [toynet.train_expert(cfg, pretrained, task, seed) for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda task: toynet.train_expert(cfg, pretrained, task, seed), tasks))


@dataclass
class Bundle:
    """Everything a merge experiment needs, loaded from a run directory."""

    cfg: toynet.HarnessConfig
    seed: int
    tasks: list[toynet.TaskData]
    pretrained: Checkpoint
    experts: list[Checkpoint]

    @property
    def expert_nets(self) -> list[toynet.ToyNet]:
        return [toynet.net_from_checkpoint(c) for c in self.experts]

    def val_sets(self) -> list[toynet.TaskDataset]:
        return [t.val for t in self.tasks]

    def test_sets(self) -> list[toynet.TaskDataset]:
        return [t.test for t in self.tasks]

    def calib_sets(self, shots: int | None = None) -> list[toynet.TaskDataset]:
        if shots is None:
            return [t.calib for t in self.tasks]
        if shots < 1:
            raise OutOfRange("shots must be >= 1")
        return [t.calib.head(shots) for t in self.tasks]


def build_bundle(root) -> Bundle:
    run = RunDir(root)
    cfg, seed = load_harness(run)
    tasks = load_tasks(run, cfg.tasks)
    pretrained = load_checkpoint(run.ckpt_dir("pretrained"))
    experts = [load_checkpoint(run.ckpt_dir(f"expert{t}")) for t in range(cfg.tasks)]
    return Bundle(cfg=cfg, seed=seed, tasks=tasks, pretrained=pretrained, experts=experts)


def evaluate_checkpoint(ckpt: Checkpoint, tasks: list[toynet.TaskData], split: str) -> dict:
    net = toynet.net_from_checkpoint(ckpt)
    accs = [toynet.accuracy(net, task.split(split)) for task in tasks]
    return {"per_task": accs, "mean": float(np.mean(accs))}


# ---------------------------------------------------------------------------
# anchors


def tune_ta_alpha(
    pretrained: Checkpoint, experts: list[Checkpoint], val_sets: list[toynet.TaskDataset]
) -> tuple[Checkpoint, float, float]:
    """Pick the task-arithmetic scaling with the best validation score."""
    best = None
    for alpha in TA_ALPHA_GRID:
        candidate = ta_anchor(pretrained, experts, float(alpha))
        value = toynet.score(candidate, val_sets)
        if best is None or value > best[2]:
            best = (candidate, float(alpha), value)
    return best


def anchor_checkpoint(kind: str, bundle: Bundle) -> tuple[Checkpoint, dict]:
    """Resolve an anchor spec: 'pretrained', 'ta', or a checkpoint path."""
    if kind == "pretrained":
        return bundle.pretrained, {"anchor": "pretrained"}
    if kind == "ta":
        ckpt, alpha, val = tune_ta_alpha(bundle.pretrained, bundle.experts, bundle.val_sets())
        return ckpt, {"anchor": "ta", "alpha": alpha, "val_score": val}
    return load_checkpoint(kind), {"anchor": str(kind)}


# ---------------------------------------------------------------------------
# stats


def compute_stats(
    bundle: Bundle, tvs: TaskVectorSet, mode: str, shots: int | None = None
) -> dict[str, dict[str, stats.ModuleStats]]:
    """The stats maps needed to evaluate configs in ``mode``.

    Returns a dict with keys among {"assisted", "datafree"}; mixed mode needs
    both so the evaluator can blend them per trial.
    """
    out = {}
    if mode in (stats.ASSISTED, stats.MIXED):
        out[stats.ASSISTED] = stats.assisted_stats(
            bundle.expert_nets, bundle.calib_sets(shots), tvs
        )
    if mode in (stats.DATA_FREE, stats.MIXED):
        out[stats.DATA_FREE] = stats.data_free_stats(tvs)
    return out


def stats_for_config(
    stats_maps: dict[str, dict[str, stats.ModuleStats]], config: merge.MergeConfig
) -> dict[str, stats.ModuleStats]:
    if config.mode == stats.MIXED:
        if config.eps is None:
            raise OutOfRange("mixed mode requires an eps value")
        return stats.mix_stats_map(
            stats_maps[stats.ASSISTED], stats_maps[stats.DATA_FREE], config.eps
        )
    return stats_maps[config.mode]


# ---------------------------------------------------------------------------
# search wiring


def subset_val_sets(val_sets: list[toynet.TaskDataset], val_frac: float) -> list[toynet.TaskDataset]:
    if not 0.0 < val_frac <= 1.0:
        raise OutOfRange(f"val fraction must lie in (0, 1], got {val_frac}")
    if val_frac == 1.0:
        return val_sets
    return [ds.head(max(1, math.ceil(val_frac * len(ds)))) for ds in val_sets]


def make_evaluator(
    bundle: Bundle,
    tvs: TaskVectorSet,
    anchor: Checkpoint,
    stats_maps: dict,
    val_sets: list[toynet.TaskDataset],
):
    """Config -> mean validation accuracy of the merged model.

    The closure sees only the validation splits handed to it; test splits stay
    with the caller, whose audit counters verify they were never read.
    """

    def evaluate(config: merge.MergeConfig) -> float:
        stats_map = stats_for_config(stats_maps, config)
        merged = merge.merge_all(stats_map, tvs, config)
        ckpt = assemble(bundle.pretrained, merged, config, anchor)
        return toynet.score(ckpt, val_sets)

    return evaluate


def make_space(bundle: Bundle, preset: SearchPreset, mode: str) -> bayesopt.SearchSpace:
    return bayesopt.SearchSpace.from_cells(
        bundle.pretrained.tying_cells(),
        (preset.lam_lo, preset.lam_hi),
        (preset.s_lo, preset.s_hi),
        mode,
    )


@dataclass
class SearchOutcome:
    best_config: merge.MergeConfig
    history: bayesopt.TrialHistory
    best_val: float
    val_score: float
    test_score: float
    merged: Checkpoint
    test_reads_during_search: int
    anchor_info: dict


def run_search(
    bundle: Bundle,
    mode: str,
    anchor_kind: str,
    preset: SearchPreset,
    seed: int,
    trials: int | None = None,
    n_init: int | None = None,
    val_frac: float = 1.0,
    shots: int | None = None,
    history_path=None,
    resume: bool = False,
) -> SearchOutcome:
    """End-to-end search in one mode against one anchor, with test-split audit."""
    anchor, anchor_info = anchor_checkpoint(anchor_kind, bundle)
    tvs = task_vectors(bundle.pretrained, bundle.experts, anchor)
    stats_maps = compute_stats(bundle, tvs, mode, shots)
    space = make_space(bundle, preset, mode)
    trials = preset.trials if trials is None else trials
    n_init = default_n_init(space.dim) if n_init is None else n_init
    n_init = min(n_init, trials)

    val_sets = subset_val_sets(bundle.val_sets(), val_frac)
    test_sets = bundle.test_sets()
    reads_before = [ds.reads for ds in test_sets]
    evaluator = make_evaluator(bundle, tvs, anchor, stats_maps, val_sets)

    history = None
    on_trial = None
    if history_path is not None:
        history_path = Path(history_path)
        if resume and history_path.exists():
            history = bayesopt.TrialHistory.from_jsonl(history_path, space)
        elif history_path.exists():
            history_path.unlink()
        history_path.parent.mkdir(parents=True, exist_ok=True)

        def on_trial(record):
            bayesopt.append_record_jsonl(history_path, record)

    best_config, history = bayesopt.bo_search(
        space, evaluator, trials, n_init, seed, history=history, on_trial=on_trial
    )
    test_reads = sum(ds.reads - before for ds, before in zip(test_sets, reads_before))

    stats_map = stats_for_config(stats_maps, best_config)
    merged_vectors = merge.merge_all(stats_map, tvs, best_config)
    merged = assemble(bundle.pretrained, merged_vectors, best_config, anchor)
    val_score = toynet.score(merged, bundle.val_sets())
    test_score = toynet.score(merged, test_sets)
    return SearchOutcome(
        best_config=best_config,
        history=history,
        best_val=history.best().score,
        val_score=val_score,
        test_score=test_score,
        merged=merged,
        test_reads_during_search=test_reads,
        anchor_info=anchor_info,
    )


def shared_lambda_arm(
    bundle: Bundle,
    mode: str,
    anchor_kind: str,
    preset: SearchPreset,
    shots: int | None = None,
) -> dict:
    """Grid over one shared lambda (all cells identical, scales fixed to 1)."""
    anchor, anchor_info = anchor_checkpoint(anchor_kind, bundle)
    tvs = task_vectors(bundle.pretrained, bundle.experts, anchor)
    stats_maps = compute_stats(bundle, tvs, mode, shots)
    cells = bundle.pretrained.tying_cells()
    blocks = bundle.pretrained.blocks()
    val_sets = bundle.val_sets()
    grid = np.geomspace(preset.lam_lo, preset.lam_hi, SHARED_LAMBDA_GRID_SIZE)

    best = None
    for lam in grid:
        config = merge.MergeConfig(
            lambdas={cell: float(lam) for cell in cells},
            scales={b: 1.0 for b in blocks},
            mode=mode,
            eps=1.0 if mode == stats.MIXED else None,
        )
        stats_map = stats_for_config(stats_maps, config)
        merged_vectors = merge.merge_all(stats_map, tvs, config)
        ckpt = assemble(bundle.pretrained, merged_vectors, config, anchor)
        val = toynet.score(ckpt, val_sets)
        if best is None or val > best["val_score"]:
            best = {
                "lambda": float(lam),
                "val_score": val,
                "test_score": toynet.score(ckpt, bundle.test_sets()),
            }
    best["grid_size"] = int(grid.shape[0])
    best.update(anchor_info)
    return best
