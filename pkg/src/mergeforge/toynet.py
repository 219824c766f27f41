"""Small tanh MLP harness: synthetic multi-task data, an SGD + L2 trainer,
scoring, ensembling, and expected calibration error.

The network's linear layers are the 2D modules the merger operates on; each
layer exports to the checkpoint container with a (block, group) tying label
(block = layer_index // 2, alternating "mlp-in"/"mlp-out" groups).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, ModuleMeta
from .errors import Divergence, EmptyInput, EmptySplit, ShapeError
from .linalg import derive_seed

GROUP_IN = "mlp-in"
GROUP_OUT = "mlp-out"
SPLITS = ("train", "val", "test", "calib")


def module_name(layer: int) -> str:
    return f"fc{layer}"


def layer_meta(layer: int, rows: int, cols: int) -> ModuleMeta:
    group = GROUP_IN if layer % 2 == 0 else GROUP_OUT
    return ModuleMeta(module_name(layer), rows, cols, block=layer // 2, group=group)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TaskDataset:
    """One split of one task. ``take()`` is the audited access path."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str
    reads: int = 0

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self) -> tuple[np.ndarray, np.ndarray]:
        self.reads += 1
        return self.inputs, self.labels

    def head(self, n: int) -> "TaskDataset":
        """First ``n`` samples as a fresh dataset (its own audit counter)."""
        return TaskDataset(self.inputs[:n].copy(), self.labels[:n].copy(), self.split)


@dataclass
class TaskData:
    task_id: int
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset
    calib: TaskDataset

    def split(self, name: str) -> TaskDataset:
        return getattr(self, name)


def gen_tasks(
    num_tasks: int,
    classes: int,
    input_dim: int,
    n_per_split: dict[str, int],
    seed: int,
    radius: float = 1.0,
    noise: float = 0.45,
    subspace: int = 8,
    world_dim: int | None = None,
    ambient: float = 0.05,
    mirrored: bool = False,
) -> list[TaskData]:
    """Sample ``num_tasks`` Gaussian-mixture classification tasks.

    A shared template of class means (orthonormal directions scaled by
    ``radius``) is rotated by a task-specific random orthogonal matrix, so
    each task concentrates in its own ``subspace``-dimensional slice of a
    shared ``world_dim``-dimensional subspace of the input space. Small
    ``world_dim`` makes tasks collide; the leftover input dimensions carry
    only the ``ambient`` noise floor. Within-class noise has std ``noise``
    inside the task slice. With ``mirrored`` each class is a symmetric pair
    of clusters at +/- its mean, which linear features cannot separate.
    Every split of every task draws from its own RNG stream; labels are
    stratified (class counts differ by at most one).
    """
    if num_tasks < 2 or classes < 2:
        raise ValueError("need at least 2 tasks and 2 classes")
    world_dim = input_dim if world_dim is None else world_dim
    if not classes <= subspace <= world_dim <= input_dim:
        raise ValueError(
            f"need classes <= subspace <= world_dim <= input_dim, "
            f"got {classes}, {subspace}, {world_dim}, {input_dim}"
        )
    root = np.random.SeedSequence(seed)
    template_ss, *task_ss = root.spawn(num_tasks + 1)
    t_rng = np.random.default_rng(template_ss)
    q, _ = np.linalg.qr(t_rng.standard_normal((subspace, classes)))
    template = radius * q.T  # classes x subspace
    world, _ = np.linalg.qr(t_rng.standard_normal((input_dim, world_dim)))

    tasks = []
    for t in range(num_tasks):
        rot_ss, *split_ss = task_ss[t].spawn(1 + len(SPLITS))
        r, _ = np.linalg.qr(np.random.default_rng(rot_ss).standard_normal((world_dim, world_dim)))
        basis = world @ r[:, :subspace]  # input_dim x subspace
        means = template @ basis.T
        made = {}
        for name, ss in zip(SPLITS, split_ss):
            n = n_per_split[name]
            rng = np.random.default_rng(ss)
            labels = rng.permutation(np.arange(n) % classes)
            centers = means[labels]
            if mirrored:
                centers = centers * rng.choice([-1.0, 1.0], size=(n, 1))
            inputs = (
                centers
                + (noise * rng.standard_normal((n, subspace))) @ basis.T
                + ambient * rng.standard_normal((n, input_dim))
            )
            made[name] = TaskDataset(inputs, labels, split=name)
        tasks.append(TaskData(task_id=t, **made))
    return tasks


# ---------------------------------------------------------------------------
# network


@dataclass
class ToyNet:
    """tanh MLP; ``weights[i]`` is (fan_out, fan_in), applied as x @ W.T + b."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss_trajectory: list[float] = field(default_factory=list, compare=False)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ToyNet":
        return ToyNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        a = np.asarray(inputs, dtype=np.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if i < self.num_layers - 1:
                a = np.tanh(a)
        return a


def init_net(layer_dims: list[tuple[int, int]], seed: int) -> ToyNet:
    """Gaussian init with std 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_out, fan_in in layer_dims:
        weights.append(rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return ToyNet(weights, biases)


def net_to_checkpoint(net: ToyNet) -> Checkpoint:
    ckpt = Checkpoint()
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        ckpt.add_module(layer_meta(i, w.shape[0], w.shape[1]), w)
        ckpt.add_aux(f"{module_name(i)}.bias", b)
    return ckpt


def net_from_checkpoint(ckpt: Checkpoint) -> ToyNet:
    weights, biases = [], []
    for i, name in enumerate(ckpt.meta):
        if name != module_name(i):
            raise ShapeError(f"unexpected module order: {list(ckpt.meta)}")
        w = ckpt.modules[name]
        b = ckpt.aux.get(f"{name}.bias")
        if b is None or b.shape[0] != w.shape[0]:
            raise ShapeError(f"bias for {name!r} missing or mis-sized")
        if weights and w.shape[1] != weights[-1].shape[0]:
            raise ShapeError(
                f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits "
                f"{weights[-1].shape[0]}"
            )
        weights.append(w.copy())
        biases.append(b.copy())
    return ToyNet(weights, biases)


def forward_capture(net: ToyNet, inputs: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Logits plus, per 2D module, the matrix of its input activations.

    Captured matrices are d_in x n (one column per sample), i.e. the vectors
    each weight matrix multiplies.
    """
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.weights[0].shape[1]:
        raise ShapeError(f"inputs {a.shape} do not match first layer {net.weights[0].shape}")
    captured = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        captured[module_name(i)] = a.T.copy()
        a = a @ w.T + b
        if i < net.num_layers - 1:
            a = np.tanh(a)
    return a, captured


# ---------------------------------------------------------------------------
# training


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy_grads(net: ToyNet, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradients per layer."""
    acts = [np.asarray(x, dtype=np.float64)]
    a = acts[0]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w.T + b
        if i < net.num_layers - 1:
            a = np.tanh(a)
        acts.append(a)
    logits = acts[-1]
    n = x.shape[0]
    probs = softmax(logits)
    loss = -np.log(probs[np.arange(n), y] + 1e-300).mean()

    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads_w, grads_b = [None] * net.num_layers, [None] * net.num_layers
    for i in range(net.num_layers - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (1.0 - acts[i] ** 2)
    return loss, grads_w, grads_b


def sgd_finetune(
    net: ToyNet,
    data: TaskDataset,
    eta: float,
    rho: float,
    epochs: int,
    batch: int,
    seed: int,
    plateau_tol: float = 1e-5,
    plateau_window: int = 10,
) -> ToyNet:
    """Mini-batch SGD with L2 decay on weights (biases decay-free).

    Per batch: W <- W - eta * (dW + rho * W), b <- b - eta * db. Stops early
    once the epoch-mean loss changes by less than ``plateau_tol`` (relative)
    over ``plateau_window`` epochs. The returned network carries its
    epoch-loss trajectory.
    """
    out = net.copy()
    rng = np.random.default_rng(seed)
    x, y = data.take()
    n = x.shape[0]
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, gw, gb = _cross_entropy_grads(out, x[idx], y[idx])
            if not np.isfinite(loss):
                raise Divergence(f"loss became {loss} after {len(losses)} epochs")
            epoch_loss += loss * idx.shape[0]
            for i in range(out.num_layers):
                out.weights[i] -= eta * (gw[i] + rho * out.weights[i])
                out.biases[i] -= eta * gb[i]
        losses.append(epoch_loss / n)
        if len(losses) > plateau_window:
            prev = losses[-1 - plateau_window]
            if abs(losses[-1] - prev) / max(abs(prev), 1e-12) < plateau_tol:
                break
    out.loss_trajectory = losses
    return out


# ---------------------------------------------------------------------------
# evaluation


def accuracy(net: ToyNet, dataset: TaskDataset) -> float:
    if len(dataset) == 0:
        raise EmptySplit(f"empty {dataset.split} split")
    x, y = dataset.take()
    pred = np.argmax(net.forward(x), axis=1)
    return float(np.mean(pred == y))


def score(merged: Checkpoint, val_sets: list[TaskDataset]) -> float:
    """Mean argmax accuracy of the merged checkpoint across task splits."""
    net = net_from_checkpoint(merged)
    return float(np.mean([accuracy(net, ds) for ds in val_sets]))


def ensemble_predict(nets: list[ToyNet], inputs: np.ndarray) -> np.ndarray:
    """Average of the member softmax outputs; rows sum to one."""
    if not nets:
        raise EmptyInput("need at least one network")
    probs = softmax(nets[0].forward(inputs))
    for net in nets[1:]:
        if net.weights[-1].shape[0] != probs.shape[1]:
            raise ShapeError("ensemble members disagree on the output dimension")
        probs += softmax(net.forward(inputs))
    return probs / len(nets)


def ece(probs: np.ndarray, labels: np.ndarray, kappa: int = 20) -> float:
    """Expected calibration error with ``kappa`` equal-width confidence bins.

    A confidence exactly on a bin boundary lands in the higher bin; 1.0 stays
    in the top bin.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptyInput("probs must be a nonempty n x C matrix")
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    bins = np.minimum(np.floor(conf * kappa).astype(int), kappa - 1)
    n = probs.shape[0]
    total = 0.0
    counts = np.bincount(bins, minlength=kappa)
    acc_sum = np.bincount(bins, weights=correct, minlength=kappa)
    conf_sum = np.bincount(bins, weights=conf, minlength=kappa)
    for b in range(kappa):
        if counts[b]:
            total += counts[b] / n * abs(acc_sum[b] / counts[b] - conf_sum[b] / counts[b])
    return float(total)


def _ensemble_metrics(nets: list[ToyNet], datasets: list[TaskDataset], kappa: int):
    accs, eces = [], []
    for ds in datasets:
        x, y = ds.take()
        probs = ensemble_predict(nets, x)
        accs.append(float(np.mean(np.argmax(probs, axis=1) == y)))
        eces.append(ece(probs, y, kappa))
    return float(np.mean(accs)), float(np.mean(eces))


@dataclass
class CalibrationReport:
    best_beta: float
    map_val: tuple[float, float]  # (accuracy, ece)
    map_test: tuple[float, float]
    ensemble_val: tuple[float, float]
    ensemble_test: tuple[float, float]
    sweep: list[dict]


def calibrate(
    build_net,
    posteriors: dict,
    beta_grid: list[float],
    num_samples: int,
    val_sets: list[TaskDataset],
    test_sets: list[TaskDataset],
    seed: int,
    kappa: int = 20,
    acc_slack: float = 0.005,
) -> CalibrationReport:
    """Pick the noise precision whose posterior-sampling ensemble calibrates best.

    Only the final 2D module is sampled (``num_samples`` draws per beta); the
    others stay at their MAP estimates. ``build_net`` turns a name -> merged
    vector map into a ToyNet. The winning beta minimizes validation ECE among
    betas whose validation accuracy stays within ``acc_slack`` of the MAP's.
    """
    from .linalg import sample_matrix_gaussian

    if not beta_grid:
        raise EmptyInput("beta_grid must be nonempty")
    map_vectors = {name: p.map_estimate for name, p in posteriors.items()}
    map_net = build_net(map_vectors)
    map_val = _ensemble_metrics([map_net], val_sets, kappa)
    map_test = _ensemble_metrics([map_net], test_sets, kappa)

    last = list(posteriors)[-1]
    post = posteriors[last]
    sweep = []
    for bi, beta in enumerate(beta_grid):
        cov = post.row_cov * (post.beta / beta)
        nets = []
        for r in range(num_samples):
            draw = sample_matrix_gaussian(post.map_estimate, cov, derive_seed(seed, bi, r))
            nets.append(build_net({**map_vectors, last: draw}))
        val_acc, val_ece = _ensemble_metrics(nets, val_sets, kappa)
        test_acc, test_ece = _ensemble_metrics(nets, test_sets, kappa)
        sweep.append(
            {
                "beta": float(beta),
                "val_acc": val_acc,
                "val_ece": val_ece,
                "test_acc": test_acc,
                "test_ece": test_ece,
            }
        )

    ok = [row for row in sweep if row["val_acc"] >= map_val[0] - acc_slack]
    chosen = min(ok, key=lambda r: r["val_ece"]) if ok else max(sweep, key=lambda r: r["val_acc"])
    return CalibrationReport(
        best_beta=chosen["beta"],
        map_val=map_val,
        map_test=map_test,
        ensemble_val=(chosen["val_acc"], chosen["val_ece"]),
        ensemble_test=(chosen["test_acc"], chosen["test_ece"]),
        sweep=sweep,
    )


# ---------------------------------------------------------------------------
# default harness


@dataclass(frozen=True)
class HarnessConfig:
    """Defaults for the built-in multi-task experiment."""

    tasks: int = 8
    classes: int = 4
    input_dim: int = 32
    hidden: int = 64
    layers: int = 4
    radius: float = 1.0
    noise: float = 0.45
    subspace: int = 8
    world_dim: int = 16
    ambient: float = 0.05
    mirrored: bool = False
    n_train: int = 2048
    n_val: int = 256
    n_test: int = 512
    n_calib: int = 128
    eta: float = 0.05
    rho: float = 1e-4
    batch: int = 64
    epochs: int = 300
    pretrain_epochs: int = 50

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test, "calib": self.n_calib}

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden] * (self.layers - 1) + [self.classes]
        return [(dims[i + 1], dims[i]) for i in range(self.layers)]

    def with_overrides(self, **kw) -> "HarnessConfig":
        return replace(self, **kw)


def make_tasks(cfg: HarnessConfig, seed: int) -> list[TaskData]:
    return gen_tasks(
        cfg.tasks,
        cfg.classes,
        cfg.input_dim,
        cfg.split_sizes(),
        derive_seed(seed, 1),
        radius=cfg.radius,
        noise=cfg.noise,
        subspace=cfg.subspace,
        world_dim=cfg.world_dim,
        ambient=cfg.ambient,
        mirrored=cfg.mirrored,
    )


def train_pretrained(cfg: HarnessConfig, tasks: list[TaskData], seed: int) -> ToyNet:
    """Train the shared base on the pooled union of all train splits."""
    xs, ys = [], []
    for task in tasks:
        x, y = task.train.take()
        xs.append(x)
        ys.append(y)
    pooled = TaskDataset(np.concatenate(xs), np.concatenate(ys), split="train")
    net = init_net(cfg.layer_dims(), derive_seed(seed, 2))
    return sgd_finetune(
        net, pooled, cfg.eta, cfg.rho, cfg.pretrain_epochs, cfg.batch, derive_seed(seed, 3)
    )


def train_expert(cfg: HarnessConfig, pretrained: ToyNet, task: TaskData, seed: int) -> ToyNet:
    return sgd_finetune(
        pretrained,
        task.train,
        cfg.eta,
        cfg.rho,
        cfg.epochs,
        cfg.batch,
        derive_seed(seed, 4, task.task_id),
    )
