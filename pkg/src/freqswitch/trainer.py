"""Synthetic multi-task training at desk scale: procedural dense-prediction
tasks derived from one input, the weighted-sum objective, Adam, ablation
variants, the signed relative-improvement metric, and per-epoch gradient
conflict instrumentation.
"""

from __future__ import annotations

import dataclasses
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ContractViolation,
    ConvKernel,
    RandomStream,
    as_tensor,
    conv2d_batched,
    gaussian_kernel,
)
from .analysis import UndefinedCorrelationError, epoch_grad_sim, grad_cosine, vec_correlation
from .model import ModelConfig, MTLModel

_STREAM_DATA = 21
_STREAM_MIX = 22
_STREAM_SHUFFLE = 23

TASK_OPERATORS = ("channel-negation", "gaussian-blur", "edge-magnitude", "channel-mix")

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


class DivergenceError(RuntimeError):
    """Training loss went non-finite or exceeded the divergence guard."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ToyTask:
    """One synthetic dense-prediction task.

    ``lower_is_better`` is 1 for error-style metrics (our validation metric is
    MSE, so always 1 here); ``weight`` is the task's coefficient in the
    weighted-sum training objective.
    """

    name: str
    target_operator: str
    operator_params: dict
    out_channels: int
    lower_is_better: int = 1
    weight: float = 1.0


@dataclass
class ToyDataset:
    """Procedural smooth random fields plus per-task targets.

    Targets are a deterministic function of the inputs and the config seed;
    train and validation index sets are disjoint.
    """

    inputs: np.ndarray                      # [N_total, C, H, W]
    targets: dict[str, np.ndarray]          # task name -> [N_total, c_t, H, W]
    train_idx: np.ndarray
    val_idx: np.ndarray


_TRAIN_CONFIG_DOC = "see configs/default.json for the versioned schema example"


@dataclass(frozen=True)
class TrainConfig:
    """Fully serialized description of one training run."""

    seed: int = 0
    tasks: tuple[str, ...] = ("channel-negation", "gaussian-blur", "edge-magnitude")
    variant: str = "sine"
    epochs: int = 30
    batch_size: int = 8
    n_train: int = 64
    n_val: int = 16
    image_size: int = 32
    input_channels: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    task_weights: tuple[float, ...] | None = None
    stage_widths: tuple[int, ...] = (8, 8, 8, 8)
    stage_downsample: tuple[int, ...] = (1, 2, 2, 2)
    layers_per_stage: int = 2
    backbone_kernel: int = 3
    ta_rank: int = 2
    ts_rank: int = 2
    ts_kernel: int = 3
    token_dim: int = 8
    proj_channels: int = 4
    decoder_channels: int = 8
    tail_kernel: int = 1
    filter_k: int = 7
    filter_sigma: float = 1.0
    use_filter: bool = True
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1
    blur_sigma: float = 1.5
    blur_k: int = 5

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "stage_downsample",
                           tuple(int(v) for v in self.stage_downsample))
        if self.task_weights is not None:
            object.__setattr__(self, "task_weights", tuple(float(w) for w in self.task_weights))
            if len(self.task_weights) != len(self.tasks):
                raise ContractViolation("task_weights length does not match tasks")
            if any(w <= 0 for w in self.task_weights):
                raise ContractViolation("task weights must be positive")
        for t in self.tasks:
            if t not in TASK_OPERATORS:
                raise ContractViolation(f"unknown task operator {t!r}; known: {TASK_OPERATORS}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ContractViolation("duplicate task operators in config")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(
                f"unrecognized config keys: {sorted(unknown)} ({_TRAIN_CONFIG_DOC})")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def weights(self) -> list[float]:
        return list(self.task_weights) if self.task_weights is not None \
            else [1.0] * len(self.tasks)

    def model_config(self, task_channels: tuple[int, ...]) -> ModelConfig:
        return ModelConfig(
            task_channels=task_channels,
            input_channels=self.input_channels,
            image_size=self.image_size,
            stage_widths=self.stage_widths,
            stage_downsample=self.stage_downsample,
            layers_per_stage=self.layers_per_stage,
            backbone_kernel=self.backbone_kernel,
            ta_rank=self.ta_rank,
            ts_rank=self.ts_rank,
            ts_kernel=self.ts_kernel,
            token_dim=self.token_dim,
            proj_channels=self.proj_channels,
            decoder_channels=self.decoder_channels,
            tail_kernel=self.tail_kernel,
            filter_k=self.filter_k,
            filter_sigma=self.filter_sigma,
            use_filter=self.use_filter,
            variant=self.variant,
            norm_eps=self.norm_eps,
            norm_momentum=self.norm_momentum,
            init_seed=self.seed,
        )


# ---------------------------------------------------------------------------
# Toy data
# ---------------------------------------------------------------------------


def _depthwise_blur_kernel(channels: int, k: int, sigma: float) -> ConvKernel:
    g = gaussian_kernel(k, sigma)
    w = np.zeros((channels, channels, k, k))
    for c in range(channels):
        w[c, c] = g
    return ConvKernel(w)


def _smooth_fields(stream: RandomStream, n: int, c: int, size: int) -> np.ndarray:
    raw = stream.normal((n, c, size, size))
    smooth = conv2d_batched(raw, _depthwise_blur_kernel(c, 9, 2.0))
    mean = smooth.mean(axis=(1, 2, 3), keepdims=True)
    std = smooth.std(axis=(1, 2, 3), keepdims=True)
    return (smooth - mean) / std


def _edge_magnitude(x: np.ndarray) -> np.ndarray:
    gray = x.mean(axis=1, keepdims=True)
    gx = conv2d_batched(gray, ConvKernel(_SOBEL_X[None, None]))
    gy = conv2d_batched(gray, ConvKernel(_SOBEL_Y[None, None]))
    return np.sqrt(gx * gx + gy * gy + 1e-12)


def apply_target_operator(task: ToyTask, x: np.ndarray) -> np.ndarray:
    """Compute a task's target for a [N,C,H,W] batch of inputs."""
    if task.target_operator == "channel-negation":
        return -x
    if task.target_operator == "gaussian-blur":
        p = task.operator_params
        return conv2d_batched(x, _depthwise_blur_kernel(x.shape[1], p["k"], p["sigma"]))
    if task.target_operator == "edge-magnitude":
        return _edge_magnitude(x)
    if task.target_operator == "channel-mix":
        mix = np.asarray(task.operator_params["matrix"])
        return np.einsum("dc,bchw->bdhw", mix, x)
    raise ContractViolation(f"unknown target operator {task.target_operator!r}")


def make_toy_suite(config: TrainConfig) -> tuple[ToyDataset, list[ToyTask]]:
    """Build the dataset and task list for a config; deterministic in the seed."""
    if len(config.tasks) > len(TASK_OPERATORS):
        raise ContractViolation("more tasks requested than defined operators")
    c = config.input_channels
    tasks = []
    weights = config.weights()
    for name, w in zip(config.tasks, weights):
        if name == "channel-mix":
            mix_stream = RandomStream(config.seed, _STREAM_MIX)
            params = {"matrix": mix_stream.normal((c, c), sigma=1.0 / np.sqrt(c))}
            out_c = c
        elif name == "gaussian-blur":
            params = {"k": config.blur_k, "sigma": config.blur_sigma}
            out_c = c
        elif name == "edge-magnitude":
            params = {}
            out_c = 1
        else:
            params = {}
            out_c = c
        tasks.append(ToyTask(name, name, params, out_c, lower_is_better=1, weight=w))

    stream = RandomStream(config.seed, _STREAM_DATA)
    n_total = config.n_train + config.n_val
    inputs = _smooth_fields(stream, n_total, c, config.image_size)
    targets = {t.name: apply_target_operator(t, inputs) for t in tasks}
    dataset = ToyDataset(inputs, targets,
                         train_idx=np.arange(config.n_train),
                         val_idx=np.arange(config.n_train, n_total))
    return dataset, tasks


# ---------------------------------------------------------------------------
# Objective and metric
# ---------------------------------------------------------------------------


def mtl_loss(predictions: list[np.ndarray], targets: list[np.ndarray],
             weights: list[float]) -> tuple[float, list[float]]:
    """Weighted sum of per-task mean squared errors; also returns the parts."""
    if not len(predictions) == len(targets) == len(weights):
        raise ContractViolation("predictions, targets, and weights must align")
    parts = [float(np.mean((as_tensor(p) - as_tensor(t)) ** 2))
             for p, t in zip(predictions, targets)]
    total = float(sum(w * p for w, p in zip(weights, parts)))
    return total, parts


def delta_m(r_mtl, r_st, lower_is_better) -> float:
    """Average signed relative improvement over single-task baselines, in
    percent; the sign flips for lower-is-better metrics."""
    r_mtl, r_st = np.asarray(r_mtl, dtype=np.float64), np.asarray(r_st, dtype=np.float64)
    flags = np.asarray(lower_is_better, dtype=np.int64)
    if not r_mtl.shape == r_st.shape == flags.shape or r_mtl.ndim != 1:
        raise ContractViolation("delta_m inputs must be equal-length vectors")
    if np.any(r_st == 0.0):
        raise ContractViolation("single-task baseline entries must be nonzero")
    signs = np.where(flags % 2 == 1, -1.0, 1.0)
    return float(100.0 * np.mean(signs * (r_mtl - r_st) / r_st))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: AdamState, hyper: AdamHyper) -> None:
    """One adaptive-moment update, in place, with bias correction."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_FORMAT_VERSION = 1


@dataclass
class RunReport:
    """Everything a run produced. Serialization is deterministic given the
    config; wall-clock time is kept on the object but excluded from the
    primary JSON document so reruns are byte-identical."""

    config: dict
    task_names: list[str]
    task_weights: list[float]
    lower_is_better: list[int]
    parameter_counts: dict
    epochs: list[dict]
    grad_sim: list[dict]
    final_metrics: list[float]
    baseline_metrics: list[float] | None
    delta_m_pct: float | None
    kernel_correlations: dict[str, list[list[float]]]
    notes: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "config": self.config,
            "task_names": self.task_names,
            "task_weights": self.task_weights,
            "lower_is_better": self.lower_is_better,
            "parameter_counts": self.parameter_counts,
            "epochs": self.epochs,
            "grad_sim": self.grad_sim,
            "final_metrics": self.final_metrics,
            "baseline_metrics": self.baseline_metrics,
            "delta_m_pct": self.delta_m_pct,
            "kernel_correlations": self.kernel_correlations,
            "notes": self.notes,
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n").encode()

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,task,train_loss,val_metric\n")
        for rec in self.epochs:
            for t, name in enumerate(self.task_names):
                buf.write(f"{rec['epoch']},{name},{rec['train_loss'][t]!r},"
                          f"{rec['val_metric'][t]!r}\n")
        return buf.getvalue()

    def gradsim_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,task_i,task_j,mean_sim,var_sim\n")
        for rec in self.grad_sim:
            n = len(self.task_names)
            for i in range(n):
                for j in range(n):
                    buf.write(f"{rec['epoch']},{i},{j},{rec['mean'][i][j]!r},"
                              f"{rec['var'][i][j]!r}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _validate_metrics(model: MTLModel, dataset: ToyDataset, tasks: list[ToyTask]) -> list[float]:
    xb = dataset.inputs[dataset.val_idx]
    out = []
    for t, task in enumerate(tasks):
        pred, _ = model.forward_batch(xb, t, mode="eval")
        out.append(float(np.mean((pred - dataset.targets[task.name][dataset.val_idx]) ** 2)))
    return out


def _kernel_correlations(model: MTLModel) -> dict[str, list[list[float]]]:
    n_tasks = model.config.num_tasks
    if n_tasks < 2:
        return {}
    per_task = [model.task_kernels(t) for t in range(n_tasks)]
    out = {}
    for module in per_task[0]:
        mat = np.eye(n_tasks)
        for i in range(n_tasks):
            for j in range(i + 1, n_tasks):
                try:
                    mat[i, j] = mat[j, i] = vec_correlation(per_task[i][module],
                                                            per_task[j][module])
                except UndefinedCorrelationError:
                    mat[i, j] = mat[j, i] = float("nan")
        out[module] = mat.tolist()
    return out


def train(config: TrainConfig, baselines: list[float] | None = None) -> RunReport:
    """Jointly optimize all tasks: per batch, forward every task, aggregate the
    weighted loss, take one optimizer step; record shared-parameter gradient
    cosines per iteration and average them per epoch.

    ``baselines`` are stored single-task metrics for the relative-improvement
    metric; when omitted they are computed here by retraining each task alone
    (same architecture and budget).
    """
    t_start = time.perf_counter()
    dataset, tasks = make_toy_suite(config)
    model = MTLModel(config.model_config(tuple(t.out_channels for t in tasks)))
    weights = config.weights()
    n_tasks = len(tasks)

    if baselines is None and n_tasks > 1:
        baselines = [train_single_task(config, t) for t in range(n_tasks)]

    shuffle = RandomStream(config.seed, _STREAM_SHUFFLE)
    state = AdamState()
    hyper = AdamHyper(config.lr, config.beta1, config.beta2, config.adam_eps)
    shared_names = model.shared_encoder_names()

    epoch_records: list[dict] = []
    grad_sim_records: list[dict] = []
    for epoch in range(config.epochs):
        perm = shuffle.permutation(config.n_train)
        sums = np.zeros(n_tasks)
        n_batches = 0
        sims: list[np.ndarray] = []
        for lo in range(0, config.n_train, config.batch_size):
            batch = dataset.train_idx[perm[lo:lo + config.batch_size]]
            xb = dataset.inputs[batch]
            total = model.zero_bundle()
            flats = []
            losses = []
            for t, task in enumerate(tasks):
                pred, cache = model.forward_batch(xb, t, mode="train")
                diff = pred - dataset.targets[task.name][batch]
                losses.append(float(np.mean(diff * diff)))
                upstream = (2.0 * weights[t] / diff.size) * diff
                bundle = model.backward(cache, upstream)
                model.update_running_stats(cache)
                total.accumulate(bundle)
                flats.append(bundle.flat(shared_names))
            batch_loss = float(sum(w * l for w, l in zip(weights, losses)))
            if not np.isfinite(batch_loss) or batch_loss > 1e6:
                raise DivergenceError(
                    f"loss diverged at epoch {epoch}: {batch_loss}",
                    {"epoch": epoch, "iteration": n_batches, "task_losses": losses,
                     "config": config.to_dict()})
            sim = np.empty((n_tasks, n_tasks))
            for i in range(n_tasks):
                for j in range(n_tasks):
                    sim[i, j] = grad_cosine(flats[i], flats[j]) if j >= i else sim[j, i]
            sims.append(sim)
            optimizer_step(model.params, total.grads, state, hyper)
            model.bump_version()
            sums += np.asarray(losses)
            n_batches += 1
        gs = epoch_grad_sim(sims, epoch)
        grad_sim_records.append({"epoch": epoch, "mean": gs.mean.tolist(),
                                 "var": gs.var.tolist(), "n": gs.n})
        epoch_records.append({"epoch": epoch,
                              "train_loss": (sums / n_batches).tolist(),
                              "val_metric": _validate_metrics(model, dataset, tasks)})

    final_metrics = epoch_records[-1]["val_metric"] if epoch_records \
        else _validate_metrics(model, dataset, tasks)
    dm = None
    notes = []
    if baselines is not None and n_tasks > 1:
        dm = delta_m(final_metrics, baselines, [t.lower_is_better for t in tasks])
        notes.append("single-task baselines retrain the same adapter architecture per "
                     "task against the frozen backbone, standing in for per-task full "
                     "fine-tuning at desk scale")

    report = RunReport(
        config=config.to_dict(),
        task_names=[t.name for t in tasks],
        task_weights=weights,
        lower_is_better=[t.lower_is_better for t in tasks],
        parameter_counts=model.parameter_counts(),
        epochs=epoch_records,
        grad_sim=grad_sim_records,
        final_metrics=final_metrics,
        baseline_metrics=baselines,
        delta_m_pct=dm,
        kernel_correlations=_kernel_correlations(model),
        notes=notes,
        wall_clock_s=time.perf_counter() - t_start,
    )
    return report


def train_single_task(config: TrainConfig, task_id: int) -> float:
    """Final validation metric of one task trained alone with its own adapter
    set (the desk-scale stand-in for a per-task fully fine-tuned model)."""
    if not 0 <= task_id < len(config.tasks):
        raise ContractViolation(f"unknown task index {task_id}")
    weights = config.weights()
    single = dataclasses.replace(
        config,
        tasks=(config.tasks[task_id],),
        task_weights=(weights[task_id],),
        variant="sine",
    )
    report = train(single)
    return report.final_metrics[0]
