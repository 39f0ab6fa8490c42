"""Objective motion measures: position error, derivative statistics, histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .motion_io import MotionSequence

DERIVATIVE_NAMES = {1: "speed", 2: "accel", 3: "jerk"}


class MetricError(ValueError):
    pass


def _paired(truth: MotionSequence, pred: MotionSequence):
    if truth.joint_names != pred.joint_names:
        raise MetricError("joint layouts differ between truth and prediction")
    if truth.fps != pred.fps:
        raise MetricError(f"frame rates differ: {truth.fps} vs {pred.fps}")
    n = min(truth.n_frames, pred.n_frames)
    return truth.joints3()[:n], pred.joints3()[:n]


def ape(truth: MotionSequence, pred: MotionSequence) -> float:
    """Mean over frames and joints of the Euclidean position error."""
    g, h = _paired(truth, pred)
    if g.shape[0] == 0:
        raise MetricError("no frames to compare")
    return float(np.linalg.norm(g - h, axis=2).mean())


def derivative_series(m: MotionSequence, order: int, per_second: bool = True) -> np.ndarray:
    """Per-joint magnitude of the ``order``-th backward difference, (frames - order, J).

    With ``per_second`` the differences are divided by dt**order (cm/s, cm/s^2,
    cm/s^3); otherwise they stay per frame.
    """
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2 or 3, got {order}")
    d = np.diff(m.joints3(), n=order, axis=0)
    if per_second:
        d = d * float(m.fps) ** order
    return np.linalg.norm(d, axis=2)


def mean_derivative(m: MotionSequence, order: int, per_second: bool = True) -> float:
    s = derivative_series(m, order, per_second)
    return float(s.mean()) if s.size else 0.0


@dataclass
class Histogram:
    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if len(self.mass) != len(self.bin_edges) - 1:
            raise ValueError("need one more edge than bins")

    def to_dict(self):
        return {"bin_edges": self.bin_edges.tolist(), "mass": self.mass.tolist()}


def histogram(values, n_bins: int = 30, value_range=None) -> Histogram:
    """Normalised equal-width histogram; values outside the range land in the edge bins."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise MetricError("no samples")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = (float(v.min()), float(v.max())) if value_range is None else map(float, value_range)
    if not hi > lo:
        hi = lo + 1.0
    counts = kernels.histogram_counts(np.ascontiguousarray(v), lo, hi, int(n_bins))
    return Histogram(np.linspace(lo, hi, n_bins + 1), counts / counts.sum())


def default_range(reference_values, percentile: float = 99.0):
    v = np.asarray(reference_values, dtype=np.float64).ravel()
    hi = float(np.percentile(v, percentile)) if v.size else 1.0
    return (0.0, hi if hi > 0 else 1.0)


def hellinger(h1: Histogram, h2: Histogram) -> float:
    if h1.bin_edges.shape != h2.bin_edges.shape or not np.array_equal(h1.bin_edges, h2.bin_edges):
        raise MetricError("histograms have different bin edges")
    # same value as sqrt(1 - sum(sqrt(p q))) for unit-mass inputs, without the
    # cancellation that leaves ~1e-8 for identical histograms
    d = np.sqrt(h1.mass) - np.sqrt(h2.mass)
    return float(min(np.sqrt(0.5 * np.sum(d * d)), 1.0))


def group_indices(joint_names, groups: dict) -> dict[str, list[int]]:
    out = {}
    for name, members in groups.items():
        idx = []
        for j in members:
            if isinstance(j, (int, np.integer)):
                idx.append(int(j))
            else:
                try:
                    idx.append(list(joint_names).index(j))
                except ValueError:
                    raise MetricError(f"group {name!r}: unknown joint {j!r}") from None
        out[name] = idx
    return out


def joint_group_metrics(
    truth: MotionSequence,
    pred: MotionSequence,
    groups: dict,
    order: int = 1,
    n_bins: int = 30,
    value_range=None,
) -> dict:
    """Speed (or other derivative) histograms per joint group and their Hellinger distance.

    ``groups`` maps a name to joint indices or joint names. The histogram range
    defaults to [0, 99th percentile] of the truth's values within the group.
    """
    g, h = _paired(truth, pred)
    n = g.shape[0]
    st = derivative_series(truth.with_positions(truth.positions[:n]), order)
    sp = derivative_series(pred.with_positions(pred.positions[:n]), order)
    out = {}
    for name, idx in group_indices(truth.joint_names, groups).items():
        if not idx:
            raise MetricError(f"joint group {name!r} is empty")
        vt, vp = st[:, idx], sp[:, idx]
        rng = value_range if value_range is not None else default_range(vt)
        ht, hp = histogram(vt, n_bins, rng), histogram(vp, n_bins, rng)
        out[name] = {"truth": ht, "pred": hp, "hellinger": hellinger(ht, hp), "range": list(rng)}
    return out


class StaticMeanPose:
    """Emits the per-coordinate training mean pose for any length."""

    def __init__(self, training_motion):
        seqs = training_motion if isinstance(training_motion, (list, tuple)) else [training_motion]
        if not seqs:
            raise MetricError("no training motion")
        self.fps = seqs[0].fps
        self.joint_names = list(seqs[0].joint_names)
        self.mean = np.concatenate([s.positions for s in seqs]).mean(axis=0)

    def generate(self, length: int) -> MotionSequence:
        if length < 0:
            raise ValueError("length must be non-negative")
        return MotionSequence(self.fps, list(self.joint_names), np.tile(self.mean, (length, 1)))

    __call__ = generate


def static_mean_pose_baseline(training_motion) -> StaticMeanPose:
    return StaticMeanPose(training_motion)


# ---------------------------------------------------------------- reports

def evaluate_sequence(truth, pred, groups=None, n_bins=30, value_range=None) -> dict:
    g, _ = _paired(truth, pred)
    n = g.shape[0]
    pred_n = pred.with_positions(pred.positions[:n])
    row = {"frames": n, "ape": ape(truth, pred)}
    for order, name in DERIVATIVE_NAMES.items():
        row[name] = mean_derivative(pred_n, order)
    groups = groups or {"all": list(range(truth.n_joints))}
    gm = joint_group_metrics(truth, pred, groups, 1, n_bins, value_range)
    row["hellinger"] = {k: v["hellinger"] for k, v in gm.items()}
    return row


def _flatten(row, prefix=""):
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        elif isinstance(v, (int, float, np.floating)) and k != "frames":
            out[f"{prefix}{k}"] = float(v)
    return out


def aggregate_runs(reports) -> dict:
    """Per-field sample mean and std (n-1); a single report gets std 0."""
    flats = [_flatten(r) for r in reports]
    if not flats:
        raise MetricError("nothing to aggregate")
    keys = sorted(set().union(*flats))
    out = {}
    for k in keys:
        vals = np.array([f[k] for f in flats if k in f])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[k] = {"mean": float(vals.mean()), "std": std, "n": int(len(vals))}
    return out
