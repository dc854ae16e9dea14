"""Balanced sampling, augmentation, the optimization loop, and map evaluation.

Training draws class-balanced minibatches of labeled points, extracts their
viewport stacks with a random rotation and flip, and runs forward/backward
passes in fixed-size chunks whose gradients are accumulated in order, so
results are independent of memory-driven chunking. All randomness derives
from per-step seeds (seed, stream, step), which makes runs bit-reproducible
and lets a resumed run continue exactly where the checkpoint stopped.

Viewport extraction for upcoming steps runs in a single background producer
thread feeding a bounded queue: the producer blocks when the queue is full
and, being alone and seeded per step, delivers batches in deterministic
order no matter how the two threads interleave.
"""

from __future__ import annotations

import math
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import savgol_filter

from . import neuralnet as nn
from .neuralnet import ops
from .raster import Raster
from .synth import Region
from .viewport import ViewportGeometry, extract_viewports

# sub-stream ids for per-step seed derivation
_STREAM_INIT = 0
_STREAM_BATCH = 1
_STREAM_DROPOUT = 2
_STREAM_EVAL = 3
_STREAM_BASELINE = 4

_CLASS_NAMES = {0: "green", 1: "yellow", 2: "red"}


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True, slots=True)
class LabeledPoint:
    """A labeled world position inside one region's rasters."""

    x: float
    y: float
    label: int
    region_id: str


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 30
    max_steps: int = 3000
    eval_interval: int = 100
    eval_points: int = 300
    seed: int = 0
    optimizer: nn.OptimizerConfig = field(default_factory=nn.OptimizerConfig)
    augment: bool = True
    validation_regions: tuple[str, ...] = ()
    dtype: str = "float32"
    chunk_size: int = 10  # samples per forward/backward chunk
    queue_depth: int = 4
    stop_top1: float | None = None  # early stop once validation reaches both
    stop_top2: float | None = None

    def __post_init__(self):
        if self.batch_size < 3 or self.batch_size % 3 != 0:
            raise ValueError("batch_size must be a positive multiple of 3")
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ValueError("max_steps must be >= 0 and eval_interval >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.chunk_size < 1 or self.queue_depth < 1:
            raise ValueError("chunk_size and queue_depth must be positive")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def step_rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Independent generator for one (stream, step) pair of a run."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, step]))


def balanced_minibatch(points_by_class, batch_size: int, rng: np.random.Generator):
    """Sample batch_size/3 points per class, uniformly with replacement.

    ``points_by_class`` maps class index to a non-empty sequence. Classes
    are drawn in fixed order (green, yellow, red) so a seeded generator
    yields a reproducible batch.
    """
    if batch_size % 3 != 0:
        raise ValueError("batch_size must be divisible by 3")
    per_class = batch_size // 3
    batch = []
    for cls in (0, 1, 2):
        points = points_by_class.get(cls)
        if points is None or len(points) == 0:
            raise ValueError(f"no labeled points for class {_CLASS_NAMES[cls]}")
        idx = rng.integers(0, len(points), size=per_class)
        batch.extend(points[i] for i in idx)
    return batch


def augment_params(rng: np.random.Generator, enabled: bool = True):
    """Random rotation offset in [0, 2pi) and a fair flip coin."""
    if not enabled:
        return 0.0, False
    return float(rng.uniform(0.0, 2.0 * math.pi)), bool(rng.random() < 0.5)


def top_k_accuracy(probs, labels, k: int) -> float:
    """Fraction of samples whose true class is among the k most probable.

    Probability ties rank the lower class index first (stable sort on the
    negated probabilities).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2 or 3, got {k}")
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(
            f"mismatched shapes: probs {probs.shape}, labels {labels.shape}"
        )
    order = np.argsort(-probs, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def savitzky_golay(series, window: int, order: int) -> np.ndarray:
    """Least-squares polynomial smoothing with mirrored edges."""
    series = np.asarray(series, dtype=np.float64)
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be an odd integer >= 3")
    if not 0 <= order < window:
        raise ValueError("order must satisfy 0 <= order < window")
    if series.size < window:
        raise ValueError("series shorter than the smoothing window")
    return savgol_filter(series, window_length=window, polyorder=order, mode="mirror")


# ---------------------------------------------------------------------------
# metrics log


@dataclass(frozen=True, slots=True)
class MetricsRow:
    step: int
    split: str
    lr: float
    loss: float
    top1: float
    top2: float


class MetricsLog:
    """Per-step training/validation records, persisted as CSV."""

    HEADER = "step,split,lr,loss,top1,top2"

    def __init__(self):
        self.rows: list[MetricsRow] = []

    def append(self, step, split, lr, loss, top1, top2) -> MetricsRow:
        if self.rows and step < self.rows[-1].step:
            raise ValueError("metrics steps must be non-decreasing")
        if top2 < top1:
            raise ValueError("top2 accuracy cannot be below top1")
        row = MetricsRow(int(step), split, float(lr), float(loss), float(top1), float(top2))
        self.rows.append(row)
        return row

    def save(self, path) -> None:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(
                f"{r.step},{r.split},{r.lr!r},{r.loss!r},{r.top1!r},{r.top2!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsLog":
        log = cls()
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != cls.HEADER:
            raise ValueError(f"{path}: not a metrics CSV")
        for line in lines[1:]:
            step, split, lr, loss, top1, top2 = line.split(",")
            log.append(int(step), split, float(lr), float(loss), float(top1), float(top2))
        return log

    def split_rows(self, split: str) -> list[MetricsRow]:
        return [r for r in self.rows if r.split == split]


# ---------------------------------------------------------------------------
# dataset plumbing


def build_point_index(regions: list[Region]) -> dict[int, list[LabeledPoint]]:
    """All labeled cell centers of the given regions, grouped by class."""
    by_class: dict[int, list[LabeledPoint]] = {0: [], 1: [], 2: []}
    for region in regions:
        hazard = region.hazard
        valid = ~hazard.nodata_mask
        rows, cols = np.nonzero(valid)
        labels = hazard.values[rows, cols].astype(np.int64)
        xs, ys = hazard.cell_center(cols, rows)
        for x, y, lab in zip(xs, ys, labels):
            by_class[int(lab)].append(
                LabeledPoint(x=float(x), y=float(y), label=int(lab), region_id=region.region_id)
            )
    return by_class


def split_regions(regions: list[Region], validation_regions=()) -> tuple[list[Region], list[Region]]:
    """Partition regions into train/validation.

    An explicit ``validation_regions`` id tuple wins; otherwise the regions'
    own ``split`` tags are used.
    """
    if validation_regions:
        unknown = set(validation_regions) - {r.region_id for r in regions}
        if unknown:
            raise ValueError(f"unknown validation region ids: {sorted(unknown)}")
        val = [r for r in regions if r.region_id in validation_regions]
        train = [r for r in regions if r.region_id not in validation_regions]
    else:
        val = [r for r in regions if r.split == "validation"]
        train = [r for r in regions if r.split != "validation"]
    if not train or not val:
        raise ValueError("need at least one training and one validation region")
    return train, val


def _extract_point(point: LabeledPoint, regions_by_id, geometry, rotation, flipped):
    region = regions_by_id[point.region_id]
    return extract_viewports(
        region.terrain, region.snow, (point.x, point.y), geometry, rotation, flipped
    )


def extract_batch(points, points_by_class, regions_by_id, geometry: ViewportGeometry,
                  rng: np.random.Generator, augment: bool, dtype):
    """Viewport stacks for a batch, skipping nodata-flagged points.

    A point whose extraction touches nodata is replaced by a fresh draw from
    the same class (bounded retries), as flagged stacks carry fabricated
    values that must not enter training.
    """
    n = len(points)
    g = geometry
    terrain = np.empty((n, g.n_viewports, g.radial_pixels, g.tangential_pixels), dtype=dtype)
    snow = np.empty(
        (n, g.n_viewports, g.snow_radial_pixels, g.snow_tangential_pixels), dtype=dtype
    )
    labels = np.empty(n, dtype=np.int64)
    for i, point in enumerate(points):
        for attempt in range(100):
            rotation, flipped = augment_params(rng, enabled=augment)
            stack = _extract_point(point, regions_by_id, geometry, rotation, flipped)
            if not stack.sampled_nodata:
                break
            candidates = points_by_class[point.label]
            point = candidates[int(rng.integers(0, len(candidates)))]
        else:
            raise ValueError(
                f"could not find a nodata-free point for class "
                f"{_CLASS_NAMES[point.label]} after 100 attempts"
            )
        terrain[i] = stack.terrain
        snow[i] = stack.snow
        labels[i] = point.label
    return terrain, snow, labels


# ---------------------------------------------------------------------------
# forward/backward plumbing


def _one_hot(labels: np.ndarray, n_classes: int = 3) -> np.ndarray:
    eye = np.eye(n_classes)
    return eye[labels]


def _forward_chunked(terrain, snow, labels, params, model_cfg, mode, dropout_rng,
                     chunk_size, want_grads: bool):
    """Mean loss, probabilities and (optionally) gradients over a batch.

    The batch is processed in fixed-size chunks; chunk losses are summed and
    scaled afterwards, and gradients accumulate in chunk order, so the
    result does not depend on the chunk size except for float rounding of a
    fixed, deterministic order.
    """
    n = terrain.shape[0]
    probs_out = np.empty((n, 3), dtype=np.float64)
    loss_sum = 0.0
    grads: nn.GradientSet | None = None
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        probs = nn.forward_probs(
            terrain[lo:hi], snow[lo:hi], params, model_cfg, mode=mode, rng=dropout_rng
        )
        ce = ops.cross_entropy(probs, _one_hot(labels[lo:hi]))
        chunk_loss = ops.total(ce)
        probs_out[lo:hi] = probs.data
        loss_sum += float(chunk_loss.data)
        if want_grads:
            chunk_grads = nn.backward(chunk_loss, params)
            grads = chunk_grads if grads is None else grads.add(chunk_grads)
    if want_grads:
        grads.scale(1.0 / n)
    return loss_sum / n, probs_out, grads


def _eval_balanced(points_by_class, regions_by_id, params, model_cfg, n_points,
                   rng, chunk_size, dtype):
    """Loss/top-1/top-2 on a balanced subsample, eval mode, no augmentation."""
    n = max(3, (n_points // 3) * 3)
    points = balanced_minibatch(points_by_class, n, rng)
    terrain, snow, labels = extract_batch(
        points, points_by_class, regions_by_id, model_cfg.geometry, rng,
        augment=False, dtype=dtype,
    )
    loss, probs, _ = _forward_chunked(
        terrain, snow, labels, params, model_cfg, "eval", None, chunk_size, want_grads=False
    )
    return loss, top_k_accuracy(probs, labels, 1), top_k_accuracy(probs, labels, 2)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    params: nn.ParameterSet
    metrics: MetricsLog
    steps_run: int
    checkpoint_path: Path
    best_checkpoint_path: Path
    best_val_top1: float


def train(regions: list[Region], model_cfg: nn.ModelConfig, cfg: TrainConfig,
          out_dir, resume: nn.Checkpoint | None = None) -> TrainResult:
    """Run the optimization loop and persist metrics and checkpoints.

    ``regions`` must contain at least one training and one validation
    region (see `split_regions`). With ``resume``, parameters, optimizer
    moments and the step counter continue from the checkpoint and the run
    is bit-identical to the uninterrupted one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.npz"
    best_path = out_dir / "checkpoint_best.npz"

    train_regions, val_regions = split_regions(regions, cfg.validation_regions)
    regions_by_id = {r.region_id: r for r in regions}
    train_points = build_point_index(train_regions)
    val_points = build_point_index(val_regions)

    dtype = cfg.np_dtype
    if resume is not None:
        params = resume.params
        adam_state = resume.adam_state or nn.AdamState.init(params)
        start_step = resume.step
    else:
        params = nn.init_params(model_cfg, step_rng(cfg.seed, _STREAM_INIT), dtype=dtype)
        adam_state = nn.AdamState.init(params)
        start_step = 0

    metrics = MetricsLog()
    best_val_top1 = -1.0

    def run_eval(step: int, lr: float) -> tuple[float, float]:
        rng = step_rng(cfg.seed, _STREAM_EVAL, step)
        loss, top1, top2 = _eval_balanced(
            val_points, regions_by_id, params, model_cfg, cfg.eval_points, rng,
            cfg.chunk_size, dtype,
        )
        metrics.append(step, "val", lr, loss, top1, top2)
        return top1, top2

    def save_latest(step: int) -> None:
        nn.save_checkpoint(
            checkpoint_path, model_cfg, params, step,
            optimizer_cfg=cfg.optimizer, adam_state=adam_state,
        )

    # single producer: extraction for upcoming steps, deterministic per-step
    batch_queue: queue.Queue = queue.Queue(maxsize=cfg.queue_depth)
    stop_flag = threading.Event()

    def producer():
        try:
            for step in range(start_step + 1, cfg.max_steps + 1):
                if stop_flag.is_set():
                    break
                rng = step_rng(cfg.seed, _STREAM_BATCH, step)
                points = balanced_minibatch(train_points, cfg.batch_size, rng)
                batch = extract_batch(
                    points, train_points, regions_by_id, model_cfg.geometry, rng,
                    augment=cfg.augment, dtype=dtype,
                )
                batch_queue.put((step, batch))
            batch_queue.put(None)
        except BaseException as exc:  # surfaced in the consumer
            batch_queue.put(exc)

    thread = threading.Thread(target=producer, name="viewport-producer", daemon=True)
    thread.start()

    steps_run = start_step
    stopped_early = False
    try:
        if start_step == 0:
            # guessing baseline before any update
            lr0 = nn.lr_schedule(0, cfg.optimizer)
            rng0 = step_rng(cfg.seed, _STREAM_BASELINE, 0)
            loss, top1, top2 = _eval_balanced(
                train_points, regions_by_id, params, model_cfg, cfg.eval_points,
                rng0, cfg.chunk_size, dtype,
            )
            metrics.append(0, "train", lr0, loss, top1, top2)
            run_eval(0, lr0)

        while True:
            item = batch_queue.get()
            if item is None:
                break
            if isinstance(item, BaseException):
                raise item
            step, (terrain, snow, labels) = item
            lr = nn.lr_schedule(step - 1, cfg.optimizer)
            dropout_rng = step_rng(cfg.seed, _STREAM_DROPOUT, step)
            loss, probs, grads = _forward_chunked(
                terrain, snow, labels, params, model_cfg, "train", dropout_rng,
                cfg.chunk_size, want_grads=True,
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at step {step}; aborting "
                    f"(lr={lr:.3g}, batch classes={np.bincount(labels, minlength=3)})"
                )
            if cfg.optimizer.method == "adam":
                nn.adam_step(params, grads, adam_state, step, lr, cfg.optimizer)
            else:
                nn.sgd_step(params, grads, lr)
            metrics.append(
                step, "train", lr, loss,
                top_k_accuracy(probs, labels, 1), top_k_accuracy(probs, labels, 2),
            )
            steps_run = step

            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                top1, top2 = run_eval(step, lr)
                save_latest(step)
                if top1 > best_val_top1:
                    best_val_top1 = top1
                    nn.save_checkpoint(
                        best_path, model_cfg, params, step,
                        optimizer_cfg=cfg.optimizer, adam_state=adam_state,
                    )
                if (
                    cfg.stop_top1 is not None
                    and cfg.stop_top2 is not None
                    and top1 >= cfg.stop_top1
                    and top2 >= cfg.stop_top2
                ):
                    stopped_early = True
                    break
    finally:
        stop_flag.set()
        if stopped_early:
            # unblock the producer and drain its tail so the thread exits
            while True:
                leftover = batch_queue.get()
                if leftover is None or isinstance(leftover, BaseException):
                    break
        thread.join(timeout=60)

    save_latest(steps_run)
    if not best_path.exists():
        nn.save_checkpoint(
            best_path, model_cfg, params, steps_run,
            optimizer_cfg=cfg.optimizer, adam_state=adam_state,
        )
    metrics.save(out_dir / "metrics.csv")
    return TrainResult(
        params=params,
        metrics=metrics,
        steps_run=steps_run,
        checkpoint_path=checkpoint_path,
        best_checkpoint_path=best_path,
        best_val_top1=best_val_top1,
    )


# ---------------------------------------------------------------------------
# map prediction and evaluation

#: Points per prediction chunk; fixed so results never depend on the worker count.
PREDICT_CHUNK = 64


def predict_points(params: nn.ParameterSet, model_cfg: nn.ModelConfig,
                   terrain: Raster, snow: Raster, xs, ys,
                   workers: int = 1) -> np.ndarray:
    """Class probabilities at world points (eval mode, no augmentation).

    Points are processed in fixed chunks of `PREDICT_CHUNK`; with
    ``workers > 1`` the chunks run in a thread pool but are reassembled in
    order, so the output is identical for any worker count.
    """
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    g = model_cfg.geometry
    dtype = params.tensors()[0].data.dtype

    def run_chunk(lo: int) -> np.ndarray:
        hi = min(lo + PREDICT_CHUNK, xs.size)
        n = hi - lo
        t = np.empty((n, g.n_viewports, g.radial_pixels, g.tangential_pixels), dtype=dtype)
        s = np.empty(
            (n, g.n_viewports, g.snow_radial_pixels, g.snow_tangential_pixels), dtype=dtype
        )
        for i in range(n):
            stack = extract_viewports(terrain, snow, (xs[lo + i], ys[lo + i]), g)
            t[i] = stack.terrain
            s[i] = stack.snow
        return nn.forward_probs(t, s, params, model_cfg, mode="eval").data.astype(np.float64)

    starts = list(range(0, xs.size, PREDICT_CHUNK))
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_chunk, starts))
    else:
        chunks = [run_chunk(lo) for lo in starts]
    if not chunks:
        return np.empty((0, 3), dtype=np.float64)
    return np.concatenate(chunks, axis=0)


def predict_map(params: nn.ParameterSet, model_cfg: nn.ModelConfig,
                terrain: Raster, snow: Raster, stride: int = 4,
                workers: int = 1) -> tuple[list[Raster], Raster]:
    """Hazard probabilities on a stride-subsampled grid.

    Returns three probability rasters (green, yellow, red) and the argmax
    label raster, all on the coarse grid (cell size scaled by ``stride``,
    centers aligned with the sampled original cells).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = np.arange(0, terrain.nrows, stride)
    cols = np.arange(0, terrain.ncols, stride)
    cc, rr = np.meshgrid(cols, rows)
    xs, ys = terrain.cell_center(cc.ravel(), rr.ravel())
    probs = predict_points(params, model_cfg, terrain, snow, xs, ys, workers=workers)
    ny, nx = rows.size, cols.size
    grid = probs.reshape(ny, nx, 3)

    # align output cell centers with the sampled original cell centers
    cs = terrain.cell_size

    def make(values):
        return Raster(
            ncols=nx,
            nrows=ny,
            x_origin=terrain.x_origin - cs * (stride - 1) / 2.0,
            y_origin=terrain.y_origin + (terrain.nrows - ny * stride) * cs + cs * (stride - 1) / 2.0,
            cell_size=cs * stride,
            values=values,
        )

    prob_rasters = [make(grid[:, :, c]) for c in range(3)]
    labels = make(np.argmax(grid, axis=2).astype(np.float64))
    return prob_rasters, labels


@dataclass
class EvalReport:
    """Confusion matrix and accuracies of a map-level evaluation."""

    confusion: np.ndarray  # (3, 3), rows = truth, cols = prediction
    top1: float
    top2: float
    balanced_top1: float
    balanced_top2: float
    class_counts: np.ndarray  # reference cells per class
    n_points: int

    @property
    def class_shares(self) -> np.ndarray:
        return self.class_counts / max(self.n_points, 1)

    def format(self) -> str:
        names = ["green", "yellow", "red"]
        lines = ["confusion matrix (rows = reference, cols = prediction):"]
        lines.append(" " * 8 + "".join(f"{n:>8s}" for n in names))
        for i, n in enumerate(names):
            cells = "".join(f"{int(c):>8d}" for c in self.confusion[i])
            lines.append(f"{n:>8s}{cells}")
        shares = ", ".join(
            f"{n} {100 * s:.1f}%" for n, s in zip(names, self.class_shares)
        )
        lines.append(f"class shares: {shares}")
        lines.append(
            f"unbalanced top-1 {self.top1:.4f}  top-2 {self.top2:.4f}"
        )
        lines.append(
            f"balanced   top-1 {self.balanced_top1:.4f}  top-2 {self.balanced_top2:.4f}"
        )
        return "\n".join(lines)


def evaluate_map(params: nn.ParameterSet, model_cfg: nn.ModelConfig,
                 terrain: Raster, snow: Raster, reference: Raster,
                 stride: int = 4, workers: int = 1) -> EvalReport:
    """Compare predictions against a reference hazard raster.

    Every stride-th labeled cell is predicted (eval mode, no rotation).
    ``balanced`` accuracies average the per-class rates over the classes
    present in the reference, which removes the dominance of green cells.
    """
    if not reference.same_geometry(terrain):
        raise ValueError("reference raster must align with the terrain raster")
    valid = ~reference.nodata_mask
    rows, cols = np.nonzero(valid)
    keep = (rows % stride == 0) & (cols % stride == 0)
    rows, cols = rows[keep], cols[keep]
    if rows.size == 0:
        raise ValueError("no labeled cells to evaluate")
    labels = reference.values[rows, cols].astype(np.int64)
    xs, ys = reference.cell_center(cols, rows)
    probs = predict_points(params, model_cfg, terrain, snow, xs, ys, workers=workers)

    order = np.argsort(-probs, axis=1, kind="stable")
    pred = order[:, 0]
    confusion = np.zeros((3, 3), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)

    top1 = top_k_accuracy(probs, labels, 1)
    top2 = top_k_accuracy(probs, labels, 2)
    per_class_top1 = []
    per_class_top2 = []
    counts = np.bincount(labels, minlength=3)[:3]
    for cls in range(3):
        mask = labels == cls
        if mask.any():
            per_class_top1.append(top_k_accuracy(probs[mask], labels[mask], 1))
            per_class_top2.append(top_k_accuracy(probs[mask], labels[mask], 2))
    return EvalReport(
        confusion=confusion,
        top1=top1,
        top2=top2,
        balanced_top1=float(np.mean(per_class_top1)),
        balanced_top2=float(np.mean(per_class_top2)),
        class_counts=counts,
        n_points=int(rows.size),
    )
