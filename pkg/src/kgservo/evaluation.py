"""Constraint-quality evaluation: LCC, SROCC and the baseline harness.

Per-frame constraint errors are collapsed to scalar scores (mean over the
stacked components), each feature-acquisition method yields one score
series per video, and series are compared with Pearson (LCC) and Spearman
(SROCC) correlation, averaged over the dataset.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ekg, pgm, perception
from .geometry import stack_errors


class EvalError(Exception):
    pass


class ZeroVariance(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


class DatasetFormat(EvalError):
    pass


@dataclass
class ScoreSeries:
    """Per-video scalar scores for one method (or the failed sentinel)."""

    values: np.ndarray | None
    method: str = ""
    video: str = ""
    failed: bool = False

    def __post_init__(self):
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=float)


def lcc(s, s_hat) -> float:
    """Pearson linear correlation coefficient."""
    a = np.asarray(s, dtype=float)
    b = np.asarray(s_hat, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"series shapes differ: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise LengthMismatch("correlation needs at least two scores")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ZeroVariance("a score series is constant")
    return float(da @ db / np.sqrt(va * vb))


def _ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=float)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srocc(s, s_hat) -> float:
    """Spearman rank-order correlation: 1 - 6*sum(d^2)/(m(m^2-1)).

    Uses average ranks for ties and the squared rank differences of the
    standard definition.
    """
    a = np.asarray(s, dtype=float)
    b = np.asarray(s_hat, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"series shapes differ: {a.shape} vs {b.shape}")
    m = a.size
    if m < 2:
        raise LengthMismatch("correlation needs at least two scores")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ZeroVariance("a score series is constant")
    d = _ranks(a) - _ranks(b)
    return float(1.0 - 6.0 * float(d @ d) / (m * (m * m - 1)))


def srocc_literal(s, s_hat) -> float:
    """Rank correlation with unsquared rank differences (for comparison)."""
    a = np.asarray(s, dtype=float)
    b = np.asarray(s_hat, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise LengthMismatch("series must match with length >= 2")
    m = a.size
    d = _ranks(a) - _ranks(b)
    return float(1.0 - 6.0 * float(np.sum(d)) / (m * (m * m - 1)))


@dataclass
class VideoRow:
    video: str
    lcc: float
    srocc: float
    failed: bool


@dataclass
class DatasetReport:
    m_lcc: float
    m_srocc: float
    rows: list[VideoRow] = field(default_factory=list)


def evaluate_dataset(
    gt: Sequence[ScoreSeries],
    pred: Sequence[ScoreSeries],
    srocc_fn: Callable = srocc,
) -> DatasetReport:
    """Mean LCC/SROCC over parallel per-video series.

    A failed method-video contributes the (-1, -1) dis-correlation row;
    constant (zero-variance) videos are excluded with a warning since no
    correlation is defined for them.
    """
    if len(gt) != len(pred):
        raise LengthMismatch(f"{len(gt)} ground-truth vs {len(pred)} predicted videos")
    rows: list[VideoRow] = []
    for g, p in zip(gt, pred):
        video = p.video or g.video
        if g.failed or p.failed:
            rows.append(VideoRow(video, -1.0, -1.0, failed=True))
            continue
        try:
            rows.append(VideoRow(video, lcc(g.values, p.values),
                                 srocc_fn(g.values, p.values), failed=False))
        except ZeroVariance as exc:
            warnings.warn(f"video {video}: {exc}; excluded from the means")
    if not rows:
        raise EvalError("no evaluable videos")
    return DatasetReport(
        m_lcc=float(np.mean([r.lcc for r in rows])),
        m_srocc=float(np.mean([r.srocc for r in rows])),
        rows=rows,
    )


# -- baseline harness over a generated dataset ---------------------------------

#: method name -> mask file stem(s) relative to a frame index
_MASK_RE = re.compile(r"f(\d+)_(part_(.+)|pca|noisyl|noisyh)\.pgm$")


@dataclass
class BaselineRow:
    name: str
    m_lcc: float
    m_srocc: float
    report: DatasetReport


@dataclass
class BaselineReport:
    rows: list[BaselineRow]

    def table(self) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        lines = [f"{'Name':<{width}}{'mLCC':>8}{'mSROCC':>9}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}{r.m_lcc:>8.3f}{r.m_srocc:>9.3f}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["method,mLCC,mSROCC"]
        for r in self.rows:
            lines.append(f"{r.name},{r.m_lcc!r},{r.m_srocc!r}")
        return "\n".join(lines) + "\n"


def _video_dirs(dataset_dir: Path) -> list[Path]:
    dirs = sorted(p for p in dataset_dir.iterdir() if p.is_dir() and (p / "masks").is_dir())
    if not dirs:
        raise DatasetFormat(f"{dataset_dir}: no video directories with masks/")
    return dirs


def _frame_masks(video_dir: Path) -> dict[int, dict[str, Path]]:
    frames: dict[int, dict[str, Path]] = {}
    for path in sorted((video_dir / "masks").iterdir()):
        m = _MASK_RE.match(path.name)
        if m is None:
            raise DatasetFormat(f"{path}: unrecognized mask filename")
        frames.setdefault(int(m.group(1)), {})[m.group(2)] = path
    if not frames:
        raise DatasetFormat(f"{video_dir}: no mask files")
    return frames


def _score(tree, prompt: str, features: perception.FeatureSet) -> float:
    pairs = perception.compose_constraints(tree, {prompt: features})
    return float(np.mean(stack_errors(pairs).values))


def _method_series(
    tree, prompt: str, video: Path, frames: dict[int, dict[str, Path]],
    method: str, stride: int,
) -> ScoreSeries:
    scores = []
    for idx in sorted(frames)[::stride]:
        masks = frames[idx]
        try:
            if method == "part":
                parts = {
                    name[len("part_"):]: perception.BinaryMask(pgm.read_pgm(p))
                    for name, p in masks.items()
                    if name.startswith("part_")
                }
                if len(parts) < 2:
                    raise DatasetFormat(f"{video}: frame {idx} lacks part masks")
                features = perception.features_from_parts(parts)
            else:
                path = masks.get(method)
                if path is None:
                    raise DatasetFormat(f"{video}: frame {idx} lacks {method} mask")
                features = perception.mask_to_features(
                    perception.BinaryMask(pgm.read_pgm(path))
                )
            scores.append(_score(tree, prompt, features))
        except perception.PerceptionError:
            return ScoreSeries(None, method=method, video=video.name, failed=True)
    return ScoreSeries(np.array(scores), method=method, video=video.name)


def run_baselines(
    dataset_dir, stride: int = 1, srocc_fn: Callable = srocc
) -> BaselineReport:
    """Table-1-style comparison over a generated dataset.

    Pairs compared: PCA features from the merged ground-truth mask vs
    part-of-object features, and the two noise-degraded mask variants vs
    the part-of-object reference.
    """
    dataset_dir = Path(dataset_dir)
    series: dict[str, list[ScoreSeries]] = {"part": [], "pca": [], "noisyl": [], "noisyh": []}
    for video in _video_dirs(dataset_dir):
        graph_path = video / "graph.ekg"
        if not graph_path.is_file():
            raise DatasetFormat(f"{video}: missing graph.ekg")
        try:
            graph = ekg.parse(graph_path.read_text())
            tree, prompt = ekg.query_task([graph])
        except ekg.EkgError as exc:
            raise DatasetFormat(f"{graph_path}: {exc}") from exc
        frames = _frame_masks(video)
        for method in series:
            series[method].append(
                _method_series(tree, prompt, video, frames, method, stride)
            )
    pairs = [
        ("GT-part vs GT-PCA", series["part"], series["pca"]),
        ("noisy-light vs GT-part", series["part"], series["noisyl"]),
        ("noisy-heavy vs GT-part", series["part"], series["noisyh"]),
    ]
    rows = []
    for name, gt, pred in pairs:
        report = evaluate_dataset(gt, pred, srocc_fn=srocc_fn)
        rows.append(BaselineRow(name, report.m_lcc, report.m_srocc, report))
    return BaselineReport(rows)
