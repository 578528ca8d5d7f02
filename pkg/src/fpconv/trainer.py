"""Training, evaluation, normalization ablation and curvature analysis.

Every batch draws its own seed from the run's generator up front, and all
augmentation and neighbor sampling of that batch uses only that seed. Batches
can therefore be prepared on worker threads without changing the result.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from fpconv.config import from_kv, read_kv, to_kv
from fpconv.data.augment import augment
from fpconv.data.dataset import Dataset, shape_features
from fpconv.data.sampling import DEFAULT_BLOCK_POINTS, sample_block, tile_blocks
from fpconv.errors import ConfigError, DivergedLoss, FPConvError, ShapeMismatch
from fpconv.geometry import PointCloud, estimate_curvature
from fpconv.network import FinalFeatureFusion, MetricsReport, NetConfig, PackedBatch, build_network, compute_metrics
from fpconv.nn import functional as F
from fpconv.nn.checkpoint import atomic_write, load_checkpoint, save_checkpoint
from fpconv.nn.optim import SGD, cosine_lr

FUSIONS = ("none", "parallel", "final")
DEFAULT_RADII = {"segmentation": (0.1, 0.2, 0.4, 0.8), "classification": (0.2, 0.4, 0.8, 1.6)}
DEFAULT_POINTS = {"segmentation": DEFAULT_BLOCK_POINTS, "classification": 1024}
IN_CHANNELS = {"segmentation": 9, "classification": 6}

# mIoU, mAcc, oA (percent) of the four published normalization/plane variants
ABLATION_REFERENCE = {
    "sparse+6x6": (62.8, 69.0, 88.3),
    "dense+6x6": (61.6, 68.5, 87.6),
    "none+6x6": (59.8, 67.1, 86.2),
    "sparse+5x5": (61.8, 68.1, 88.4),
}
ABLATION_VARIANTS = (("sparse+6x6", "sparse", 6), ("dense+6x6", "dense", 6), ("none+6x6", "none", 6), ("sparse+5x5", "sparse", 5))


class CoverageError(FPConvError, RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "segmentation"
    epochs: int = 100
    batch_size: int = 8
    lr0: float = 0.01
    momentum: float = 0.98
    schedule: str = "cosine"
    seed: int = 0
    precision: str = "fp32"
    normalization: str = "sparse"
    plane: int = 6
    conv: str = "fpconv"
    fusion: str = "none"
    num_classes: int = 6
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    radii: Optional[Tuple[float, ...]] = None
    n_max: int = 16
    bottleneck: int = 2
    stem_width: int = 16
    head_width: int = 128
    dist_widths: Tuple[int, ...] = (16, 32)
    predictor_hidden: int = 32
    n_points: Optional[int] = None
    block_extent: float = 2.0
    blocks_per_scene: int = 1
    resample_rate: float = 0.5
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    rotate: bool = True
    augment: bool = True
    eval_stride: Optional[float] = None
    target_train_acc: Optional[float] = None
    deterministic: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.precision not in ("fp32", "fp64"):
            raise ConfigError(f"precision must be fp32 or fp64, got {self.precision!r}")
        if self.conv not in ("fpconv", "pointmlp"):
            raise ConfigError(f"conv must be fpconv or pointmlp, got {self.conv!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion == "final" and self.task != "segmentation":
            raise ConfigError("final-feature fusion is a segmentation model")
        if not 0.0 <= self.resample_rate <= 1.0:
            raise ConfigError("resample_rate must lie in [0, 1]")
        if self.blocks_per_scene < 1:
            raise ConfigError("blocks_per_scene must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "fp32" else np.float64

    @property
    def points(self) -> int:
        return self.n_points or DEFAULT_POINTS[self.task]

    def net_config(self, conv: Optional[str] = None) -> NetConfig:
        conv = conv or ("parallel" if self.fusion == "parallel" else self.conv)
        return NetConfig(
            task=self.task,
            num_classes=self.num_classes,
            in_channels=IN_CHANNELS[self.task],
            widths=self.widths,
            radii=self.radii or DEFAULT_RADII[self.task],
            conv=conv,
            plane=self.plane,
            normalization=self.normalization,
            n_max=self.n_max,
            bottleneck=self.bottleneck,
            stem_width=self.stem_width,
            head_width=self.head_width,
            dist_widths=self.dist_widths,
            predictor_hidden=self.predictor_hidden,
        )


def build_model(config: TrainConfig, rng: np.random.Generator):
    if config.fusion == "final":
        model = FinalFeatureFusion(config.net_config("fpconv"), config.net_config("pointmlp"), rng)
    else:
        model = build_network(config.net_config(), rng)
    return model.astype(config.dtype)


def worker_count(config: TrainConfig) -> int:
    if config.deterministic:
        return 1
    if config.threads:
        return max(1, int(config.threads))
    env = os.environ.get("FPCONV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FPCONV_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# batch preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedBatch:
    batch: PackedBatch
    labels: np.ndarray
    plan: object


def _shape_item(cloud: PointCloud, config: TrainConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    c = augment(cloud, rng, config.jitter_sigma, config.jitter_clip, config.rotate) if rng is not None and config.augment else cloud
    return c.positions, shape_features(c)


def _block_item(block, config: TrainConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    cloud = block.as_cloud()
    if rng is not None and config.augment:
        cloud = augment(cloud, rng, config.jitter_sigma, config.jitter_clip, config.rotate)
    return cloud.positions, cloud.features


class _Sampler:
    """Produces the per-epoch list of training items and turns a batch of them into arrays."""

    def __init__(self, config: TrainConfig, dataset: Dataset):
        self.config = config
        self.dataset = dataset
        self.blocks: List[list] = []

    def epoch_items(self, epoch: int, rng) -> list:
        cfg, ds = self.config, self.dataset
        if cfg.task == "classification":
            return [int(i) for i in rng.permutation(len(ds.train))]
        if not self.blocks:
            self.blocks = [[None] * cfg.blocks_per_scene for _ in ds.train]
        for s, scene in enumerate(ds.train):
            for k in range(cfg.blocks_per_scene):
                fresh = rng.random() < cfg.resample_rate
                if self.blocks[s][k] is None or fresh:
                    self.blocks[s][k] = sample_block(scene, cfg.block_extent, cfg.points, rng)
        flat = [b for per_scene in self.blocks for b in per_scene]
        return [flat[i] for i in rng.permutation(len(flat))]

    def arrays(self, items, rng):
        clouds, labels = [], []
        for item in items:
            if self.config.task == "classification":
                clouds.append(_shape_item(self.dataset.train[item], self.config, rng))
                labels.append(self.dataset.train_labels[item])
            else:
                clouds.append(_block_item(item, self.config, rng))
                labels.append(item.labels)
        labels = np.asarray(labels) if self.config.task == "classification" else np.concatenate(labels)
        return clouds, labels


def _prepare(model, sampler: _Sampler, items, seed: int) -> PreparedBatch:
    rng = np.random.default_rng(seed)
    clouds, labels = sampler.arrays(items, rng)
    batch = PackedBatch.from_clouds(clouds)
    return PreparedBatch(batch, labels, model.plan(batch, rng))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    history: List[Dict[str, float]]
    lr_trace: List[float]
    checkpoint: Optional[Path]
    log_path: Optional[Path]
    config_path: Optional[Path]
    steps: int = 0
    stopped_early: bool = False


LOG_HEADER = "epoch,lr,loss,train_oA"


def format_log(history: Sequence[Dict[str, float]]) -> str:
    lines = [LOG_HEADER]
    for h in history:
        lines.append(f"{h['epoch']},{h['lr']:.9g},{h['loss']:.9g},{h['train_oA']:.6f}")
    return "\n".join(lines) + "\n"


def _masked_loss(logits, labels):
    keep = labels >= 0
    if not keep.all():
        idx = np.flatnonzero(keep)
        logits, labels = F.gather(logits, idx), labels[idx]
    return F.cross_entropy(logits, labels), logits, labels


def _check_finite(model, loss_value: float, epoch: int, step: int) -> None:
    if not np.isfinite(loss_value):
        raise DivergedLoss(f"loss became {loss_value} at epoch {epoch}, step {step}")
    for name, p in model.named_parameters().items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise DivergedLoss(f"non-finite gradient in {name} at epoch {epoch}, step {step}")


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    progress: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Momentum SGD on point-wise (or cloud-wise) cross entropy with a cosine schedule."""
    if dataset.task != config.task:
        raise ConfigError(f"dataset task {dataset.task!r} does not match config task {config.task!r}")
    if not dataset.train:
        raise ConfigError("training split is empty")
    if dataset.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, config {config.num_classes}")
    workers = worker_count(config)
    limits = threadpool_limits(limits=1) if config.deterministic else nullcontext()
    with limits:
        return _train(config, dataset, out_dir, progress, workers)


def _train(config, dataset, out_dir, progress, workers) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    model = build_model(config, np.random.default_rng(rng.integers(2**63)))
    model.train()
    opt = SGD(model.parameters(), config.lr0, config.momentum)
    sampler = _Sampler(config, dataset)
    n_items = len(dataset.train) * (config.blocks_per_scene if config.task == "segmentation" else 1)
    steps_per_epoch = math.ceil(n_items / config.batch_size)
    total = config.epochs * steps_per_epoch
    history: List[Dict[str, float]] = []
    lr_trace: List[float] = []
    out = Path(out_dir) if out_dir is not None else None
    step = 0
    stopped = False
    pool = ThreadPoolExecutor(max_workers=workers - 1) if workers > 1 else None
    try:
        for epoch in range(config.epochs):
            items = sampler.epoch_items(epoch, rng)
            chunks = [items[i : i + config.batch_size] for i in range(0, len(items), config.batch_size)]
            seeds = rng.integers(2**63, size=len(chunks))
            if pool is not None:
                prepared = pool.map(lambda a: _prepare(model, sampler, *a), zip(chunks, seeds))
            else:
                prepared = (_prepare(model, sampler, c, s) for c, s in zip(chunks, seeds))
            losses, correct, seen, epoch_lr = [], 0, 0, None
            for pb in prepared:
                lr = cosine_lr(step, total, config.lr0)
                epoch_lr = lr if epoch_lr is None else epoch_lr
                opt.zero_grad()
                logits = model(pb.batch, plan=pb.plan)
                loss, used_logits, used_labels = _masked_loss(logits, pb.labels)
                loss.backward()
                _check_finite(model, float(loss.data), epoch, step)
                opt.step(lr)
                lr_trace.append(lr)
                step += 1
                losses.append(float(loss.data))
                correct += int((used_logits.data.argmax(axis=1) == used_labels).sum())
                seen += len(used_labels)
            record = {"epoch": epoch, "lr": epoch_lr, "loss": float(np.mean(losses)), "train_oA": correct / max(seen, 1)}
            history.append(record)
            if out is not None:
                atomic_write(out / "log.csv", format_log(history).encode())
            if progress is not None:
                progress(record)
            if config.target_train_acc is not None and record["train_oA"] >= config.target_train_acc:
                stopped = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    ckpt = cfg_path = log_path = None
    if out is not None:
        ckpt, cfg_path = save_model(model, config, out / "model.fpck")
        log_path = out / "log.csv"
        atomic_write(log_path, format_log(history).encode())
    model.eval()
    return TrainResult(model, history, lr_trace, ckpt, log_path, cfg_path, step, stopped)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_path_for(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".cfg")


def save_model(model, config: TrainConfig, path) -> Tuple[Path, Path]:
    path = Path(path)
    save_checkpoint(path, model.state_dict())
    cfg = config_path_for(path)
    atomic_write(cfg, to_kv(config).encode("utf-8"))
    return path, cfg


def load_model(checkpoint, overrides: Optional[Dict[str, str]] = None):
    """Rebuild the model described by the checkpoint's sidecar config and load its weights."""
    checkpoint = Path(checkpoint)
    values = read_kv(config_path_for(checkpoint))
    values.update(overrides or {})
    config = from_kv(TrainConfig, values)
    model = build_model(config, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(checkpoint))
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def predict_scene(model, config: TrainConfig, cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    """Averaged per-point logits over overlapping tiles; returns (logits, cover counts)."""
    model.eval()
    blocks = tile_blocks(cloud, config.block_extent, config.points, seed=0, stride=config.eval_stride)
    sums = np.zeros((len(cloud), config.num_classes))
    counts = np.zeros(len(cloud), dtype=np.int64)
    for group in _batched(blocks, config.batch_size):
        batch = PackedBatch.from_clouds([(b.positions, b.features) for b in group])
        logits = model(batch).data.astype(np.float64)
        idx = np.concatenate([b.indices for b in group])
        np.add.at(sums, idx, logits)
        np.add.at(counts, idx, 1)
    if counts.min() < 1:
        raise CoverageError(f"{int((counts == 0).sum())} points received no prediction")
    return sums / counts[:, None], counts


def predict_shapes(model, config: TrainConfig, clouds: Sequence[PointCloud]) -> np.ndarray:
    model.eval()
    out = []
    for group in _batched(list(clouds), config.batch_size):
        batch = PackedBatch.from_clouds([(c.positions, shape_features(c)) for c in group])
        out.append(model(batch).data.astype(np.float64))
    return np.concatenate(out)


@dataclass
class Predictions:
    """Per-point predicted and true labels for a split (clouds concatenated)."""

    pred: np.ndarray
    true: np.ndarray
    clouds: List[PointCloud]
    per_cloud: List[Tuple[np.ndarray, np.ndarray]]
    min_coverage: Optional[int] = None


def predict(model, config: TrainConfig, dataset: Dataset, split: str = "test") -> Predictions:
    clouds = getattr(dataset, split)
    per_cloud, coverage = [], []
    if config.task == "segmentation":
        for cloud in clouds:
            logits, counts = predict_scene(model, config, cloud)
            per_cloud.append((logits.argmax(axis=1), cloud.labels))
            coverage.append(int(counts.min()))
    else:
        labels = getattr(dataset, f"{split}_labels")
        pred = predict_shapes(model, config, clouds).argmax(axis=1) if clouds else np.zeros(0, int)
        for c, p, t in zip(clouds, pred, labels):
            per_cloud.append((np.full(len(c), p), np.full(len(c), t)))
    if per_cloud:
        pred = np.concatenate([p for p, _ in per_cloud])
        true = np.concatenate([t for _, t in per_cloud])
    else:
        pred = true = np.zeros(0, dtype=np.int64)
    return Predictions(pred, true, list(clouds), per_cloud, min(coverage) if coverage else None)


def evaluate(checkpoint, dataset: Dataset, split: str = "test", config: Optional[TrainConfig] = None) -> MetricsReport:
    """Metrics of a model (or checkpoint path) on a split.

    Segmentation scenes are tiled into overlapping blocks and every point's
    logits are averaged over the blocks that contain it. Classification
    metrics count clouds, not points.
    """
    if isinstance(checkpoint, (str, os.PathLike)):
        model, config = load_model(checkpoint)
    else:
        model = checkpoint
        if config is None:
            raise ConfigError("evaluating an in-memory model needs its TrainConfig")
    if dataset.num_classes != config.num_classes:
        raise ShapeMismatch(f"model predicts {config.num_classes} classes, dataset has {dataset.num_classes}")
    preds = predict(model, config, dataset, split)
    if config.task == "classification":
        labels = getattr(dataset, f"{split}_labels")
        pred = np.array([p[0] for p, _ in preds.per_cloud], dtype=np.int64)
        report = compute_metrics(pred, labels, config.num_classes)
    else:
        keep = preds.true >= 0
        report = compute_metrics(preds.pred[keep], preds.true[keep], config.num_classes)
    report.min_coverage = preds.min_coverage
    return report


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    miou: float
    macc: float
    oa: float


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = ["variant,mIoU,mAcc,oA"]
    for r in rows:
        lines.append(f"{r.variant},{r.miou:.6f},{r.macc:.6f},{r.oa:.6f}")
    return "\n".join(lines) + "\n"


def format_ablation_reference() -> str:
    lines = ["variant,mIoU,mAcc,oA"]
    for name, (miou, macc, oa) in ABLATION_REFERENCE.items():
        lines.append(f"{name},{miou / 100:.3f},{macc / 100:.3f},{oa / 100:.3f}")
    return "\n".join(lines) + "\n"


def run_norm_ablation(base_config: TrainConfig, dataset: Dataset, out_dir=None) -> List[AblationRow]:
    """Train and evaluate the four normalization/plane variants with identical seeds.

    Writes ``ablation.csv`` (measured) and ``ablation_reference.csv`` (published
    full-scale values, for comparison only) when ``out_dir`` is given.
    """
    rows = []
    for name, norm, plane in ABLATION_VARIANTS:
        cfg = dataclasses.replace(base_config, normalization=norm, plane=plane)
        sub = Path(out_dir) / name if out_dir is not None else None
        result = train(cfg, dataset, sub)
        report = evaluate(result.model, dataset, "test", cfg)
        rows.append(AblationRow(name, report.miou, report.macc, report.oa))
    if out_dir is not None:
        atomic_write(Path(out_dir) / "ablation.csv", format_ablation(rows).encode())
        atomic_write(Path(out_dir) / "ablation_reference.csv", format_ablation_reference().encode())
    return rows


# ---------------------------------------------------------------------------
# curvature analysis
# ---------------------------------------------------------------------------

SIGMA_MAX = 1.0 / 3.0


@dataclass
class CurvatureAnalysis:
    thresholds: np.ndarray
    cumulative_accuracy: np.ndarray
    cumulative_count: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray

    def curve_csv(self) -> str:
        lines = ["threshold,cumulative_accuracy,n_points"]
        for t, a, n in zip(self.thresholds, self.cumulative_accuracy, self.cumulative_count):
            lines.append(f"{t:.9g},{a:.6f},{int(n)}")
        return "\n".join(lines) + "\n"

    def histogram_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
            lines.append(f"{lo:.9g},{hi:.9g},{int(c)}")
        return "\n".join(lines) + "\n"


def curvature_curve(sigma: np.ndarray, correct: np.ndarray, n_bins: int) -> CurvatureAnalysis:
    """Accuracy over points with curvature at or below each of ``n_bins`` quantile thresholds."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    sigma = np.asarray(sigma, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if sigma.shape != correct.shape or sigma.size == 0:
        raise ShapeMismatch("sigma and correctness flags must be equal-length and non-empty")
    thresholds = np.quantile(sigma, (np.arange(n_bins) + 1) / n_bins)
    order = np.argsort(sigma, kind="stable")
    cum = np.cumsum(correct[order])
    counts = np.searchsorted(sigma[order], thresholds, side="right")
    acc = np.where(counts > 0, cum[np.maximum(counts - 1, 0)] / np.maximum(counts, 1), np.nan)
    edges = np.linspace(0.0, SIGMA_MAX, n_bins + 1)
    hist, _ = np.histogram(np.clip(sigma, 0.0, SIGMA_MAX), bins=edges)
    return CurvatureAnalysis(thresholds, acc, counts, edges, hist)


def analyze_curvature(checkpoint, dataset: Dataset, radius: float, n_bins: int, split="test", config=None, out_dir=None):
    """Curvature-versus-cumulative-accuracy curve and curvature histogram of a model's predictions."""
    if radius <= 0:
        raise ValueError("curvature radius must be positive")
    if isinstance(checkpoint, (str, os.PathLike)):
        model, config = load_model(checkpoint)
    else:
        model = checkpoint
    preds = predict(model, config, dataset, split)
    sigma = np.concatenate([estimate_curvature(c, radius).sigma for c in preds.clouds])
    keep = preds.true >= 0
    result = curvature_curve(sigma[keep], preds.pred[keep] == preds.true[keep], n_bins)
    if out_dir is not None:
        write_curvature(result, out_dir)
    return result


def write_curvature(result: CurvatureAnalysis, out_dir) -> Tuple[Path, Path]:
    out = Path(out_dir)
    curve, hist = out / "curvature_curve.csv", out / "curvature_hist.csv"
    atomic_write(curve, result.curve_csv().encode())
    atomic_write(hist, result.histogram_csv().encode())
    return curve, hist
