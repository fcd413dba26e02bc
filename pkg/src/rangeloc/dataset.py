"""Ranging-log to training-sequence pipeline.

Stages: 50-ms binning of the measurement log into fixed-layout frame vectors
(missing slots are exactly zero), label attachment by trajectory
interpolation, stride-1 sliding windows of length S (M = K - S + 1 windows
per trial of K frames), and an invertible normalizer fitted on training
trials only.

On disk a prepared dataset is a single .npz (zip of .npy arrays): a JSON
header entry (layout, S, normalizer constants, per-trial frame counts) plus
per-trial stamp/frame/label matrices. Consecutive stride-1 windows and the
frame matrix encode the same information, so storing frames is lossless and
round-trips byte-exactly; a plain CSV export (stamp, ranges..., labels...)
is written alongside for external inspection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import FLOAT_FMT, LabelTrack, MeasurementRecord

__all__ = [
    "Layout",
    "FrameVector",
    "LabelVector",
    "Normalizer",
    "TrialWindows",
    "WindowedDataset",
    "PreparedTrial",
    "bin_measurements",
    "attach_labels",
    "make_windows",
    "fit_normalizer",
    "split_trials",
    "save_prepared",
    "load_prepared",
    "export_frames_csv",
]

BIN_WIDTH_S = 0.050


@dataclass(frozen=True)
class Layout:
    """Slot ordering of a frame vector: all anchors of the first tag, then the
    next tag, and so on."""

    tag_ids: tuple[int, ...]
    anchor_ids: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.tag_ids)) != len(self.tag_ids):
            raise ValueError("duplicate tag ids in layout")
        if len(set(self.anchor_ids)) != len(self.anchor_ids):
            raise ValueError("duplicate anchor ids in layout")

    @property
    def input_dim(self) -> int:
        return len(self.tag_ids) * len(self.anchor_ids)

    @property
    def label_dim(self) -> int:
        return 3 * len(self.tag_ids)

    def slot(self, tag_id: int, anchor_id: int) -> int:
        try:
            ti = self.tag_ids.index(tag_id)
            ai = self.anchor_ids.index(anchor_id)
        except ValueError:
            raise KeyError(f"({tag_id}, {anchor_id}) not in layout") from None
        return ti * len(self.anchor_ids) + ai


@dataclass
class FrameVector:
    """One 50-ms bin: stamp at the bin center, one range slot per
    (tag, anchor) pair, zero where nothing was measured."""

    stamp: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values < 0):
            raise ValueError("frame values must be >= 0 (0 encodes missing)")


@dataclass
class LabelVector:
    stamp: float
    values: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("label values must be finite")


def bin_measurements(
    records: list[MeasurementRecord],
    layout: Layout,
    bin_width: float = BIN_WIDTH_S,
) -> list[FrameVector]:
    """Partition the time axis into consecutive `bin_width` bins anchored at
    the first measurement stamp and keep, per slot, the latest measurement in
    each bin. Bins with no measurement at Slot (tag, anchor) hold 0 there;
    bins with nothing at all still emit an all-zero frame.
    """
    if not records:
        raise ValueError("empty measurement log")
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    recs = sorted(records, key=lambda r: r.stamp)
    t0 = recs[0].stamp
    n_bins = int(np.floor((recs[-1].stamp - t0) / bin_width)) + 1
    values = np.zeros((n_bins, layout.input_dim))
    for r in recs:
        try:
            j = layout.slot(r.tag_id, r.anchor_id)
        except KeyError:
            raise ValueError(
                f"record with unknown ids (stamp={r.stamp}, tag={r.tag_id}, "
                f"anchor={r.anchor_id}) not in layout"
            ) from None
        b = min(int((r.stamp - t0) / bin_width), n_bins - 1)
        values[b, j] = r.range_m
    stamps = t0 + (np.arange(n_bins) + 0.5) * bin_width
    return [FrameVector(float(t), v) for t, v in zip(stamps, values)]


def attach_labels(
    frames: list[FrameVector], source: LabelTrack
) -> list[tuple[FrameVector, LabelVector]]:
    """Sample the label track at each frame's bin-center stamp by linear
    interpolation; frames outside the track span get the clamped edge value
    and a `clamped` flag."""
    if len(source.stamps) == 0:
        raise ValueError("empty label source")
    stamps = np.array([f.stamp for f in frames])
    cols = [np.interp(stamps, source.stamps, source.values[:, k])
            for k in range(source.values.shape[1])]
    labels = np.stack(cols, axis=1)
    clamped = (stamps < source.stamps[0]) | (stamps > source.stamps[-1])
    return [
        (f, LabelVector(f.stamp, row, bool(c)))
        for f, row, c in zip(frames, labels, clamped)
    ]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    """Invertible scaling fitted on training trials only.

    Ranges are divided by `range_scale` (pure multiplication, so the zero
    missing-code is preserved exactly); positions are centered on the
    training centroid and divided by `position_scale`.
    """

    range_scale: float
    position_center: np.ndarray
    position_scale: float

    def __post_init__(self):
        self.position_center = np.asarray(self.position_center, dtype=float).reshape(3)
        if not (self.range_scale > 0 and self.position_scale > 0):
            raise ValueError("normalizer scales must be > 0")

    def apply_ranges(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) / self.range_scale

    def invert_ranges(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.range_scale

    def apply_positions(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=float)
        flat = labels.reshape(*labels.shape[:-1], labels.shape[-1] // 3, 3)
        return ((flat - self.position_center) / self.position_scale).reshape(labels.shape)

    def invert_positions(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=float)
        flat = labels.reshape(*labels.shape[:-1], labels.shape[-1] // 3, 3)
        return (flat * self.position_scale + self.position_center).reshape(labels.shape)

    def to_dict(self) -> dict:
        return {
            "range_scale": self.range_scale,
            "position_center": self.position_center.tolist(),
            "position_scale": self.position_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["range_scale"], np.array(d["position_center"]), d["position_scale"])


def fit_normalizer(
    frames_arrays: list[np.ndarray], label_arrays: list[np.ndarray]
) -> Normalizer:
    """Fit scales on training data: range_scale = max training range,
    position center/scale from the pooled label positions."""
    if not frames_arrays:
        raise ValueError("empty training set")
    range_scale = max(float(a.max(initial=0.0)) for a in frames_arrays)
    if range_scale <= 0:
        raise ValueError("degenerate range scale: all training ranges are zero")
    pts = np.concatenate([a.reshape(-1, 3) for a in label_arrays], axis=0)
    center = pts.mean(axis=0)
    scale = float(np.max(np.abs(pts - center)))
    if scale <= 1e-12:
        scale = 1.0
    return Normalizer(range_scale, center, scale)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


@dataclass
class TrialWindows:
    """One trial's frame/label matrices; windows are stride-1 views."""

    trial_id: str
    stamps: np.ndarray
    frames: np.ndarray
    labels: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.stamps)


class WindowedDataset:
    """Stride-1 length-S windows over one or more trials.

    Sequence i of a trial with K frames covers frames [i, i+S) (0-based);
    there are exactly M = K - S + 1 of them per trial. Windows never straddle
    trials. `window(g)` returns array views, so the dataset costs one copy of
    the frames regardless of S.
    """

    def __init__(self, S: int, trials: list[TrialWindows], scaler: Normalizer | None = None):
        if S < 1:
            raise ValueError("S must be >= 1")
        for t in trials:
            if t.n_frames < S:
                raise ValueError(
                    f"trial {t.trial_id!r} has K={t.n_frames} frames < S={S}"
                )
        self.S = S
        self.trials = trials
        self.scaler = scaler
        self._counts = [t.n_frames - S + 1 for t in trials]
        self._offsets = np.concatenate([[0], np.cumsum(self._counts)])

    @property
    def n_windows(self) -> int:
        return int(self._offsets[-1])

    def __len__(self) -> int:
        return self.n_windows

    def counts_per_trial(self) -> list[int]:
        return list(self._counts)

    def window(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= g < self.n_windows:
            raise IndexError(g)
        ti = int(np.searchsorted(self._offsets, g, side="right") - 1)
        i = g - int(self._offsets[ti])
        t = self.trials[ti]
        return t.frames[i : i + self.S], t.labels[i : i + self.S]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = zip(*(self.window(int(g)) for g in indices))
        return np.stack(xs), np.stack(ys)


def make_windows(
    pairs: list[tuple[FrameVector, LabelVector]],
    S: int,
    trial_id: str = "trial",
    scaler: Normalizer | None = None,
) -> WindowedDataset:
    """Build the windowed dataset of one trial from (frame, label) pairs."""
    K = len(pairs)
    if K < S:
        raise ValueError(f"K={K} frames < window length S={S}")
    stamps = np.array([f.stamp for f, _ in pairs])
    frames = np.stack([f.values for f, _ in pairs])
    labels = np.stack([l.values for _, l in pairs])
    return WindowedDataset(S, [TrialWindows(trial_id, stamps, frames, labels)], scaler)


def split_trials(trial_ids: list[str], train_ids: list[str], test_ids: list[str]):
    """Partition trial ids; overlapping or unknown ids are rejected."""
    train_set, test_set = set(train_ids), set(test_ids)
    overlap = train_set & test_set
    if overlap:
        raise ValueError(f"train/test overlap: {sorted(overlap)}")
    known = set(trial_ids)
    missing = (train_set | test_set) - known
    if missing:
        raise ValueError(f"unknown trial ids: {sorted(missing)}")
    return [t for t in trial_ids if t in train_set], [t for t in trial_ids if t in test_set]


# ---------------------------------------------------------------------------
# prepared-dataset file
# ---------------------------------------------------------------------------


@dataclass
class PreparedTrial:
    """Binned and labeled trial, both label variants kept (training picks
    one; evaluation always uses the ground-truth one)."""

    trial_id: str
    stamps: np.ndarray
    frames: np.ndarray
    labels_osl: np.ndarray
    labels_gt: np.ndarray
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def save_prepared(
    path: str | Path,
    trials: list[PreparedTrial],
    layout: Layout,
    S: int,
    scaler: Normalizer,
    meta: dict,
) -> None:
    header = {
        "layout": {"tag_ids": list(layout.tag_ids), "anchor_ids": list(layout.anchor_ids)},
        "S": S,
        "normalizer": scaler.to_dict(),
        "meta": meta,
        "trials": [
            {"trial_id": t.trial_id, "K": int(len(t.stamps)), "M": int(len(t.stamps) - S + 1)}
            for t in trials
        ],
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for t in trials:
        arrays[f"{t.trial_id}:stamps"] = t.stamps
        arrays[f"{t.trial_id}:frames"] = t.frames
        arrays[f"{t.trial_id}:labels_osl"] = t.labels_osl
        arrays[f"{t.trial_id}:labels_gt"] = t.labels_gt
        arrays[f"{t.trial_id}:clamped"] = t.clamped
    np.savez(path, **arrays)


def load_prepared(path: str | Path):
    with np.load(path) as blob:
        header = json.loads(bytes(blob["__header__"]).decode())
        trials = [
            PreparedTrial(
                trial_id=t["trial_id"],
                stamps=blob[f"{t['trial_id']}:stamps"],
                frames=blob[f"{t['trial_id']}:frames"],
                labels_osl=blob[f"{t['trial_id']}:labels_osl"],
                labels_gt=blob[f"{t['trial_id']}:labels_gt"],
                clamped=blob[f"{t['trial_id']}:clamped"],
            )
            for t in header["trials"]
        ]
    layout = Layout(
        tuple(header["layout"]["tag_ids"]), tuple(header["layout"]["anchor_ids"])
    )
    scaler = Normalizer.from_dict(header["normalizer"])
    return trials, layout, header["S"], scaler, header["meta"]


def export_frames_csv(path: str | Path, trial: PreparedTrial, meta_line: str = "") -> None:
    """Plain per-frame CSV: stamp, the range slots in layout order, then the
    training (map-consistent) label columns."""
    with open(path, "w", newline="") as f:
        if meta_line:
            f.write("# " + meta_line + "\n")
        n_r = trial.frames.shape[1]
        n_l = trial.labels_osl.shape[1]
        f.write(
            ",".join(
                ["stamp"]
                + [f"r{j}" for j in range(n_r)]
                + [f"y{j}" for j in range(n_l)]
            )
            + "\n"
        )
        for t, fr, lb in zip(trial.stamps, trial.frames, trial.labels_osl):
            row = [FLOAT_FMT % t] + [FLOAT_FMT % v for v in fr] + [FLOAT_FMT % v for v in lb]
            f.write(",".join(row) + "\n")
