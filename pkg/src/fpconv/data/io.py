"""ASCII point clouds and dataset manifests.

Cloud files hold one point per line, ``x y z r g b label``; ``label`` is an
integer with ``-1`` meaning unlabeled, and lines starting with ``#`` are
comments. Values are written with 9 significant digits.

A manifest lists cloud files, one per line, as ``train <path>`` or
``test <path>``; relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from fpconv.errors import ParseError
from fpconv.geometry import PointCloud
from fpconv.nn.checkpoint import atomic_write

N_COLUMNS = 7


def _parse_line(path: str, line_no: int, text: str):
    tokens = text.split()
    if len(tokens) != N_COLUMNS:
        raise ParseError(path, line_no, f"expected {N_COLUMNS} values, found {len(tokens)}")
    try:
        values = [float(t) for t in tokens[:6]]
    except ValueError as exc:
        raise ParseError(path, line_no, f"not a number: {exc}") from None
    try:
        label = int(tokens[6])
    except ValueError:
        raise ParseError(path, line_no, f"label {tokens[6]!r} is not an integer") from None
    if not np.all(np.isfinite(values)):
        raise ParseError(path, line_no, "non-finite value")
    if label < -1:
        raise ParseError(path, line_no, f"label {label} below -1")
    return values, label


def load_cloud(path) -> PointCloud:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    rows, labels = [], []
    for i, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        values, label = _parse_line(path, i, text)
        rows.append(values)
        labels.append(label)
    data = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return PointCloud(data[:, :3], colors=data[:, 3:], labels=np.asarray(labels, dtype=np.int64))


def format_cloud(cloud: PointCloud) -> str:
    n = len(cloud)
    colors = cloud.colors if cloud.colors is not None else np.zeros((n, 3))
    labels = cloud.labels if cloud.labels is not None else np.full(n, -1)
    lines = ["# x y z r g b label"]
    for p, c, lab in zip(cloud.positions, colors, labels):
        lines.append(" ".join(f"{v:.9g}" for v in (*p, *c)) + f" {int(lab)}")
    return "\n".join(lines) + "\n"


def save_cloud(cloud: PointCloud, path) -> None:
    atomic_write(path, format_cloud(cloud).encode("utf-8"))


@dataclass
class Manifest:
    train: List[Path] = field(default_factory=list)
    test: List[Path] = field(default_factory=list)


def load_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    manifest = Manifest()
    with open(path, "r", encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            split, _, rest = text.partition(" ")
            rest = rest.strip()
            if split not in ("train", "test") or not rest:
                raise ParseError(str(path), i, "expected 'train <path>' or 'test <path>'")
            target = Path(rest)
            getattr(manifest, split).append(target if target.is_absolute() else base / target)
    return manifest


def save_manifest(path, train, test) -> None:
    base = Path(path).parent
    lines = ["# split path"]
    for split, items in (("train", train), ("test", test)):
        for p in items:
            p = Path(p)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            lines.append(f"{split} {p}")
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
