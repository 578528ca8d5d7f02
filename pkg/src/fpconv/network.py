"""Segmentation encoder-decoder, classification head, final-feature fusion, metrics.

Every cloud is canonicalized before the forward pass: rows of
``[position || feature]`` are sorted lexicographically and exact duplicates
merged. Sampling, grouping and pooling then see the same input no matter how
the caller ordered (or repeated) the points, and per-point outputs are
scattered back to the caller's order at the end.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from fpconv.blocks import BlockSpec, Grouping, Interpolation, ResidualBlock, plan_interpolation, sample_and_group
from fpconv.errors import ConfigError, LabelOutOfRange, ShapeMismatch
from fpconv.flatten import NORMALIZATIONS
from fpconv.nn import functional as F
from fpconv.nn.layers import Linear, Module, SharedMLP
from fpconv.nn.tensor import Tensor

TASKS = ("segmentation", "classification")


@dataclass
class NetConfig:
    task: str = "segmentation"
    num_classes: int = 6
    in_channels: int = 9
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    radii: Tuple[float, ...] = (0.1, 0.2, 0.4, 0.8)
    conv: Union[str, Tuple[str, ...]] = "fpconv"
    plane: int = 6
    normalization: str = "sparse"
    ratio: float = 0.25
    n_max: int = 16
    bottleneck: int = 2
    stem_width: int = 16
    head_width: int = 128
    upsample_k: int = 3
    dist_widths: Tuple[int, ...] = (32, 64)
    predictor_hidden: int = 64
    eval_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.radii = tuple(float(r) for r in self.radii)
        self.dist_widths = tuple(int(w) for w in self.dist_widths)
        if isinstance(self.conv, str):
            self.conv = (self.conv,) * 4
        self.conv = tuple(self.conv)
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.widths) != 4 or len(self.radii) != 4 or len(self.conv) != 4:
            raise ConfigError("widths, radii and conv need exactly 4 encoder levels")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])) or min(self.widths) < 1:
            raise ConfigError("widths must be positive and non-decreasing")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if min(self.radii) <= 0:
            raise ConfigError("radii must be positive")

    def level_spec(self, level: int, in_channels: int) -> BlockSpec:
        out = self.widths[level]
        return BlockSpec(
            in_channels=in_channels,
            mid_channels=max(1, out // self.bottleneck),
            out_channels=out,
            radius=self.radii[level],
            n_max=self.n_max,
            downsample=True,
            ratio=self.ratio,
            conv=self.conv[level],
            plane=self.plane,
            normalization=self.normalization,
            dist_widths=self.dist_widths,
            predictor_hidden=self.predictor_hidden,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def canonicalize(positions: np.ndarray, features: np.ndarray):
    """Sorted unique ``[position || feature]`` rows; returns (positions, features, inverse)."""
    rows = np.concatenate([positions, features], axis=1)
    uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    return uniq[:, :3].copy(), uniq[:, 3:].copy(), inverse.reshape(-1)


@dataclass
class PackedBatch:
    """Canonicalized clouds stacked row-wise.

    ``offsets`` delimit canonical rows per cloud; ``inverse`` maps every input
    point (in caller order, clouds concatenated) to its canonical row;
    ``input_offsets`` delimit the caller's points per cloud.
    """

    positions: np.ndarray
    features: np.ndarray
    offsets: np.ndarray
    inverse: np.ndarray
    input_offsets: np.ndarray

    @property
    def n_clouds(self) -> int:
        return len(self.offsets) - 1

    @classmethod
    def from_clouds(cls, clouds: Sequence) -> "PackedBatch":
        pos, feat, inv, offsets, in_offsets = [], [], [], [0], [0]
        for c in clouds:
            p, f = _cloud_arrays(c)
            cp, cf, ci = canonicalize(p, f)
            inv.append(ci + offsets[-1])
            pos.append(cp)
            feat.append(cf)
            offsets.append(offsets[-1] + len(cp))
            in_offsets.append(in_offsets[-1] + len(p))
        return cls(
            np.concatenate(pos),
            np.concatenate(feat),
            np.asarray(offsets),
            np.concatenate(inv),
            np.asarray(in_offsets),
        )


def _cloud_arrays(cloud):
    if isinstance(cloud, tuple):
        p, f = cloud
    else:
        p, f = cloud.positions, cloud.features
        if f is None:
            raise ShapeMismatch("cloud carries no input features")
    p = np.asarray(p, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or f.ndim != 2 or len(f) != len(p):
        raise ShapeMismatch(f"positions {p.shape} and features {f.shape} do not describe one cloud")
    if len(p) == 0:
        raise ShapeMismatch("empty cloud")
    return p, f


@dataclass
class Plan:
    """Geometry of one forward pass: positions, offsets and groupings per level."""

    positions: List[np.ndarray] = field(default_factory=list)
    offsets: List[np.ndarray] = field(default_factory=list)
    groupings: List[Grouping] = field(default_factory=list)
    interpolations: List[Interpolation] = field(default_factory=list)


def build_plan(batch: PackedBatch, config: NetConfig, rng=None, decoder: bool = True) -> Plan:
    plan = Plan([batch.positions], [batch.offsets])
    for level in range(4):
        pos, off = plan.positions[-1], plan.offsets[-1]
        g = sample_and_group(pos, off, config.radii[level], config.n_max, config.ratio, rng)
        plan.groupings.append(g)
        plan.positions.append(pos[g.centers])
        plan.offsets.append(g.offsets)
    if decoder:
        for level in range(4, 0, -1):
            plan.interpolations.append(
                plan_interpolation(
                    plan.positions[level],
                    plan.offsets[level],
                    plan.positions[level - 1],
                    plan.offsets[level - 1],
                    config.upsample_k,
                )
            )
    return plan


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class _Encoder(Module):
    def __init__(self, config: NetConfig, rng):
        self.config = config
        self.stem = SharedMLP(config.in_channels, config.stem_width, rng)
        widths = (config.stem_width,) + config.widths
        self.levels = [ResidualBlock(config.level_spec(i, widths[i]), rng) for i in range(4)]

    def grouping_rng(self, rng):
        if self.training:
            return rng
        seed = self.config.eval_seed
        return lambda b: np.random.default_rng(seed)

    def encode(self, batch: PackedBatch, plan: Plan) -> List[Tensor]:
        if batch.features.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"network expects {self.config.in_channels} input channels, got {batch.features.shape[1]}")
        feats = [self.stem(Tensor(batch.features.astype(self.dtype)))]
        for block, grouping in zip(self.levels, plan.groupings):
            feats.append(block.forward_grouped(feats[-1], grouping))
        return feats

    def plan(self, batch: PackedBatch, rng=None, decoder: bool = True) -> Plan:
        return build_plan(batch, self.config, self.grouping_rng(rng), decoder)


class SegmentationNet(_Encoder):
    """Four residual down levels, four interpolating up levels with skip concatenation."""

    def __init__(self, config: NetConfig, rng):
        super().__init__(config, rng)
        skip = (config.stem_width,) + config.widths
        dec_out = (config.widths[0],) + config.widths[:3]  # output width of up level ending at level i
        self.decoder = []
        below = config.widths[3]
        for level in range(3, -1, -1):
            self.decoder.append(SharedMLP(below + skip[level], dec_out[level], rng))
            below = dec_out[level]
        self.feature_width = dec_out[0]
        self.classifier = Linear(self.feature_width, config.num_classes, rng)

    def penultimate(self, batch: PackedBatch, rng=None, plan: Optional[Plan] = None) -> Tensor:
        """Output of the last decoder MLP, one row per input point (caller order)."""
        plan = plan or self.plan(batch, rng)
        enc = self.encode(batch, plan)
        x = enc[4]
        for step, (mlp, interp) in enumerate(zip(self.decoder, plan.interpolations)):
            level = 3 - step
            up = F.weighted_gather(x, interp.indices, interp.weights)
            x = mlp(F.concat([up, enc[level]], axis=-1))
        return F.gather(x, batch.inverse)

    def forward(self, batch: PackedBatch, rng=None, plan: Optional[Plan] = None) -> Tensor:
        return self.classifier(self.penultimate(batch, rng, plan))


class ClassificationNet(_Encoder):
    """Encoder, per-cloud global max pool, one hidden fully connected layer, linear classifier."""

    def __init__(self, config: NetConfig, rng):
        super().__init__(config, rng)
        self.fc = SharedMLP(config.widths[3], config.head_width, rng)
        self.classifier = Linear(config.head_width, config.num_classes, rng)

    def plan(self, batch: PackedBatch, rng=None, decoder: bool = False) -> Plan:
        return super().plan(batch, rng, decoder)

    def forward(self, batch: PackedBatch, rng=None, plan: Optional[Plan] = None) -> Tensor:
        plan = plan or self.plan(batch, rng)
        enc = self.encode(batch, plan)
        pooled = F.segment_max(enc[4], plan.offsets[4])[0]
        return self.classifier(self.fc(pooled))


def build_network(config: NetConfig, rng):
    cls = SegmentationNet if config.task == "segmentation" else ClassificationNet
    return cls(config, rng)


class FinalFeatureFusion(Module):
    """Two segmentation nets whose penultimate features feed a 2-layer shared MLP head."""

    def __init__(self, config_a: NetConfig, config_b: NetConfig, rng, hidden: Optional[int] = None):
        if config_a.num_classes != config_b.num_classes:
            raise ConfigError("fused networks must predict the same classes")
        geometry = ("radii", "ratio", "n_max", "upsample_k", "eval_seed")
        if any(getattr(config_a, k) != getattr(config_b, k) for k in geometry):
            raise ConfigError("fused networks must share sampling geometry")
        self.net_a = SegmentationNet(config_a, rng)
        self.net_b = SegmentationNet(config_b, rng)
        self.concat_width = self.net_a.feature_width + self.net_b.feature_width
        hidden = hidden or self.concat_width
        self.head = [SharedMLP(self.concat_width, hidden, rng), Linear(hidden, config_a.num_classes, rng)]
        self.config = config_a

    def plan(self, batch: PackedBatch, rng=None) -> Plan:
        """Both branches share one geometry plan (their radii and caps agree)."""
        return self.net_a.plan(batch, rng)

    def fused_features(self, batch: PackedBatch, rng=None, plan: Optional[Plan] = None) -> Tensor:
        plan = plan or self.plan(batch, rng)
        return F.concat([self.net_a.penultimate(batch, plan=plan), self.net_b.penultimate(batch, plan=plan)], axis=-1)

    def forward(self, batch: PackedBatch, rng=None, plan: Optional[Plan] = None) -> Tensor:
        h = self.fused_features(batch, rng, plan)
        return self.head[1](self.head[0](h))


def _as_batch(cloud) -> PackedBatch:
    if isinstance(cloud, PackedBatch):
        return cloud
    if isinstance(cloud, list):
        return PackedBatch.from_clouds(cloud)
    return PackedBatch.from_clouds([cloud])


def forward_segmentation(cloud, net: SegmentationNet, rng=None) -> Tensor:
    return net(_as_batch(cloud), rng)


def forward_classification(cloud, net: ClassificationNet, rng=None) -> Tensor:
    out = net(_as_batch(cloud), rng)
    return F.reshape(out, (out.shape[1],)) if out.shape[0] == 1 else out


def final_feature_fusion(net_a, net_b, fusion_head, cloud, rng=None) -> Tensor:
    """Fuse two nets' penultimate features with ``fusion_head`` (a sequence of layers)."""
    batch = _as_batch(cloud)
    plan = net_a.plan(batch, rng)
    h = F.concat([net_a.penultimate(batch, plan=plan), net_b.penultimate(batch, plan=plan)], axis=-1)
    for layer in fusion_head:
        h = layer(h)
    return h


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    confusion: np.ndarray
    iou: np.ndarray
    acc: np.ndarray
    miou: float
    oa: float
    macc: float
    min_coverage: Optional[int] = None

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("class,iou,acc\n")
        for c in range(len(self.iou)):
            out.write(f"{c},{_fmt(self.iou[c])},{_fmt(self.acc[c])}\n")
        out.write(f"mean,{_fmt(self.miou)},{_fmt(self.macc)}\n")
        out.write(f"overall,,{_fmt(self.oa)}\n")
        return out.getvalue()


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else f"{v:.6f}"


def compute_metrics(pred_labels, true_labels, num_classes: int) -> MetricsReport:
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ShapeMismatch(f"{pred.size} predictions for {true.size} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"label outside [0, {num_classes})")
    conf = np.bincount(true * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    union = support + predicted - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
        acc = np.where(support > 0, tp / np.where(support > 0, support, 1), np.nan)
    total = conf.sum()
    return MetricsReport(
        confusion=conf,
        iou=iou,
        acc=acc,
        miou=float(np.nanmean(iou)) if np.any(union > 0) else float("nan"),
        oa=float(tp.sum() / total) if total else float("nan"),
        macc=float(np.nanmean(acc)) if np.any(support > 0) else float("nan"),
    )
