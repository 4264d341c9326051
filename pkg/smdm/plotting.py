"""
SVG 그림

지표-스텝 선 그래프와 키프레임 오버레이를 matplotlib(Agg)로 그립니다.
같은 입력이면 같은 바이트가 나오도록 해시 솔트와 날짜 메타데이터를 고정합니다.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

import numpy as np  # noqa: E402

from smdm.keyframes import KeyframeMask  # noqa: E402
from smdm.motion import MotionSequence, SkeletonLayout  # noqa: E402

logger = logging.getLogger(__name__)

AXIS_MARGIN = 0.05
SVG_RC = {
    "svg.hashsalt": "smdm",
    "svg.fonttype": "none",
    "path.simplify": False,
}


@dataclass
class Series:
    name: str
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)


def axis_limits(values: Sequence[float]) -> tuple:
    """최소/최대를 5% 여백으로 감싼 구간. 값이 하나뿐이면 ±0.5."""
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo
    if span == 0.0:
        return lo - 0.5, hi + 0.5
    return lo - AXIS_MARGIN * span, hi + AXIS_MARGIN * span


def save_svg(fig: Figure, path: Path) -> Path:
    path = Path(path)
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    logger.debug("Wrote %s", path)
    return path


# =============================================================================
# 선 그래프
# =============================================================================


def split_run_id(run_id: str) -> tuple:
    """"sparse@50" → ("sparse", 50.0). @ 뒤가 숫자가 아니면 (run_id, None)."""
    series, sep, suffix = run_id.rpartition("@")
    if sep:
        try:
            return series, float(suffix)
        except ValueError:
            pass
    return run_id, None


def metric_series(rows: Sequence) -> dict:
    """MetricRow 목록 → {지표: [Series]}. x는 run_id의 @ 뒤 값, 없으면 행 순서."""
    by_metric: dict = defaultdict(dict)
    counters: dict = defaultdict(int)
    for row in rows:
        name, x = split_run_id(row.run_id)
        if x is None:
            x = float(counters[(row.metric, name)])
            counters[(row.metric, name)] += 1
        series = by_metric[row.metric].setdefault(name, Series(name))
        series.x.append(x)
        series.y.append(float(row.value))

    result = {}
    for metric, series_map in by_metric.items():
        ordered = []
        for series in series_map.values():
            order = np.argsort(series.x, kind="stable")
            ordered.append(
                Series(series.name, [series.x[i] for i in order], [series.y[i] for i in order])
            )
        result[metric] = ordered
    return result


def build_line_chart(title: str, series: Sequence[Series], xlabel: str, ylabel: str) -> Figure:
    if not series or not any(s.x for s in series):
        raise ValueError(f"chart {title!r} has no data points")
    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    for s in series:
        ax.plot(s.x, s.y, marker="o", label=s.name)
    ax.set_xlim(*axis_limits([x for s in series for x in s.x]))
    ax.set_ylim(*axis_limits([y for s in series for y in s.y]))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    return fig


def plot_metrics(rows: Sequence, out_dir: Path, xlabel: str = "diffusion steps") -> list:
    """지표마다 SVG 하나. 만든 파일 경로 목록을 반환합니다."""
    if not rows:
        raise ValueError("no metric rows to plot")
    paths = []
    for metric, series in sorted(metric_series(rows).items()):
        fig = build_line_chart(metric, series, xlabel, metric)
        paths.append(save_svg(fig, Path(out_dir) / f"{metric}.svg"))
    return paths


def plot_loss_history(history: Sequence[dict], path: Path, title: str = "training loss") -> Path:
    if not history:
        raise ValueError("loss history is empty")
    steps = [float(r["step"]) for r in history]
    series = [Series(column, steps, [float(r[column]) for r in history]) for column in ("loss", "recon")]
    return save_svg(build_line_chart(title, series, "step", "loss"), path)


# =============================================================================
# 키프레임 오버레이
# =============================================================================


def build_keyframe_overlay(seq: MotionSequence, layout: SkeletonLayout, mask: KeyframeMask, joints=None) -> Figure:
    """관절 궤적(첫 두 좌표)에 키프레임 위치를 표시합니다."""
    if mask.n_frames != seq.n_frames:
        raise ValueError(f"mask covers {mask.n_frames} frames but motion has {seq.n_frames}")
    joints = list(layout.end_effectors) if joints is None else list(joints)

    fig = Figure(figsize=(6.0, 5.0))
    ax = fig.add_subplot(1, 1, 1)
    xs, ys = [], []
    for j in joints:
        coords = seq.frames[:, layout.joint_slice(j)]
        ax.plot(coords[:, 0], coords[:, 1], linewidth=1.0, label=f"joint {j}")
        keys = coords[mask.indices]
        ax.scatter(keys[:, 0], keys[:, 1], s=18, marker="D", zorder=3)
        xs.extend(coords[:, 0])
        ys.extend(coords[:, 1])
    ax.set_xlim(*axis_limits(xs))
    ax.set_ylim(*axis_limits(ys))
    ax.set_title(f"{seq.name or 'motion'}: {mask.count}/{mask.n_frames} keyframes")
    ax.set_xlabel("x (cm)")
    ax.set_ylabel("y (cm)")
    ax.legend()
    fig.tight_layout()
    return fig
