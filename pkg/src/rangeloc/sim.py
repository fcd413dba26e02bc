"""Synthetic trial generation: environments, vehicle trajectories, ranging
logs with NLOS/outlier/dropout effects, and map-consistent labels.

All randomness flows from a single trial seed through named streams (one per
purpose and tag/anchor pair), so re-running any generator with the same seed
and config is bit-identical, and trials can be produced in parallel.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AnchorParams, Pose, Rotation, TagMount, Vec3

__all__ = [
    "Box",
    "Environment",
    "NoiseModel",
    "Trajectory",
    "OslBiasField",
    "MeasurementRecord",
    "LabelTrack",
    "TrialData",
    "stream",
    "generate_trajectory",
    "line_of_sight",
    "sample_measurements",
    "osl_labels",
    "gt_labels",
    "anchors_visible",
    "write_trial",
    "read_trial",
]


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    """Named RNG stream: deterministic per (seed, purpose, ids)."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode())] + [int(i) for i in ids]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by two opposite corners (meters)."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box lo {self.lo} exceeds hi {self.hi}")

    @property
    def lo_arr(self) -> np.ndarray:
        return np.array(self.lo, dtype=float)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.array(self.hi, dtype=float)

    def volume(self) -> float:
        return float(np.prod(self.hi_arr - self.lo_arr))

    def contains(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo_arr) and np.all(p <= self.hi_arr))


@dataclass(frozen=True)
class Environment:
    bounds: Box
    anchors: tuple[AnchorParams, ...]
    occluders: tuple[Box, ...] = ()

    def __post_init__(self):
        if len(self.anchors) < 1:
            raise ValueError("environment needs at least one anchor")
        ids = [a.anchor_id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate anchor ids: {ids}")
        for a in self.anchors:
            if not self.bounds.contains(a.position.to_array()):
                raise ValueError(f"anchor {a.anchor_id} outside bounds")


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic ranging defects: LOS noise, NLOS bias, outliers, dropouts."""

    sigma_range: float = 0.1
    p_outlier: float = 0.0
    outlier_spread: float = 0.0
    nlos_bias: float = 0.0
    p_detect_los: float = 1.0
    p_detect_nlos: float = 1.0

    def __post_init__(self):
        if self.sigma_range < 0:
            raise ValueError("sigma_range must be >= 0")
        for name in ("p_outlier", "p_detect_los", "p_detect_nlos"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.p_detect_nlos > self.p_detect_los:
            raise ValueError("p_detect_nlos must not exceed p_detect_los")


@dataclass(frozen=True)
class MeasurementRecord:
    stamp: float
    tag_id: int
    anchor_id: int
    range_m: float

    def __post_init__(self):
        if not (self.range_m > 0):
            raise ValueError(f"range must be > 0, got {self.range_m}")


class Trajectory:
    """Fixed-tick pose sequence with continuous-time queries (linear position
    interpolation, spherical orientation interpolation; clamped at the ends).
    """

    def __init__(self, stamps: np.ndarray, positions: np.ndarray, quats: np.ndarray):
        self.stamps = np.asarray(stamps, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        self.quats = np.asarray(quats, dtype=float)
        if self.stamps.ndim != 1 or len(self.stamps) < 2:
            raise ValueError("trajectory needs at least two stamped poses")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("trajectory stamps must be strictly increasing")
        if self.positions.shape != (len(self.stamps), 3):
            raise ValueError("positions must be (K, 3)")
        if self.quats.shape != (len(self.stamps), 4):
            raise ValueError("quats must be (K, 4)")

    @property
    def t0(self) -> float:
        return float(self.stamps[0])

    @property
    def t1(self) -> float:
        return float(self.stamps[-1])

    def _locate(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ts = np.clip(ts, self.t0, self.t1)
        idx = np.clip(np.searchsorted(self.stamps, ts, side="right") - 1, 0, len(self.stamps) - 2)
        span = self.stamps[idx + 1] - self.stamps[idx]
        frac = (ts - self.stamps[idx]) / span
        return idx, frac

    def sample_positions(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        idx, frac = self._locate(ts)
        p0 = self.positions[idx]
        p1 = self.positions[idx + 1]
        return p0 + frac[:, None] * (p1 - p0)

    def sample_quats(self, ts) -> np.ndarray:
        """Vectorized shortest-arc slerp at query times."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        idx, frac = self._locate(ts)
        q0 = self.quats[idx]
        q1 = self.quats[idx + 1].copy()
        dot = np.sum(q0 * q1, axis=1)
        flip = dot < 0
        q1[flip] = -q1[flip]
        dot = np.abs(dot)
        out = np.empty_like(q0)
        near = dot > 1.0 - 1e-10
        if np.any(near):
            q = q0[near] + frac[near, None] * (q1[near] - q0[near])
            out[near] = q / np.linalg.norm(q, axis=1, keepdims=True)
        far = ~near
        if np.any(far):
            theta = np.arccos(np.clip(dot[far], -1.0, 1.0))
            s = np.sin(theta)
            a = np.sin((1.0 - frac[far]) * theta) / s
            b = np.sin(frac[far] * theta) / s
            out[far] = a[:, None] * q0[far] + b[:, None] * q1[far]
        return out

    def sample(self, t: float) -> Pose:
        tc = float(np.clip(t, self.t0, self.t1))
        pos = self.sample_positions([tc])[0]
        quat = self.sample_quats([tc])[0]
        return Pose(Vec3.from_array(pos), Rotation.from_quat_array(quat), tc)

    def tag_positions(self, ts, mount: TagMount) -> np.ndarray:
        """World positions of a mounted tag at query times, (T, 3)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        pos = self.sample_positions(ts)
        q = self.sample_quats(ts)
        return pos + _rotate_vec(q, mount.body_offset.to_array())


def _rotate_vec(quats: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a single vector by a batch of unit quaternions (w,x,y,z)."""
    w = quats[:, :1]
    u = quats[:, 1:]
    t = 2.0 * np.cross(u, v[None, :])
    return v[None, :] + w * t + np.cross(u, t)


def generate_trajectory(
    bounds: Box,
    waypoint_count: int,
    speed: float,
    dt: float,
    seed: int,
    max_duration_s: float | None = None,
) -> Trajectory:
    """Constant-speed piecewise-linear path through seeded random waypoints,
    heading aligned with the velocity; poses emitted every `dt` seconds.
    """
    if speed <= 0:
        raise ValueError("speed must be > 0")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if waypoint_count < 2:
        raise ValueError("need at least two waypoints")
    if bounds.volume() <= 0:
        raise ValueError(f"degenerate bounds (zero volume): {bounds}")
    rng = stream(seed, "trajectory")
    lo, hi = bounds.lo_arr, bounds.hi_arr
    pts = rng.uniform(lo, hi, size=(waypoint_count, 3))
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 1e-9
    seg, seg_len = seg[keep], seg_len[keep]
    if len(seg_len) == 0:
        raise ValueError("degenerate waypoint path")
    starts = np.concatenate([[0.0], np.cumsum(seg_len)])[:-1]
    total = float(seg_len.sum())
    duration = total / speed
    if max_duration_s is not None:
        duration = min(duration, float(max_duration_s))
    stamps = np.arange(0.0, duration + 1e-12, dt)
    if len(stamps) < 2:
        raise ValueError("path too short for the requested dt")
    arc = np.minimum(stamps * speed, total - 1e-12)
    idx = np.clip(np.searchsorted(starts, arc, side="right") - 1, 0, len(seg_len) - 1)
    frac = (arc - starts[idx]) / seg_len[idx]
    origin = pts[:-1][keep]
    positions = origin[idx] + frac[:, None] * seg[idx]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    quats = np.stack(
        [np.cos(yaw / 2), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(yaw / 2)], axis=1
    )
    return Trajectory(stamps, positions, quats)


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------


def _segments_hit_box(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test for a batch of segments p0[i] -> p1[i] against one box.

    Boundary contact (segment touching a face, edge or corner) counts as a
    hit; the test is exact and deterministic.
    """
    d = p1 - p0
    tmin = np.zeros(len(p0))
    tmax = np.ones(len(p0))
    alive = np.ones(len(p0), dtype=bool)
    for k in range(3):
        parallel = np.abs(d[:, k]) < 1e-15
        outside = parallel & ((p0[:, k] < lo[k]) | (p0[:, k] > hi[k]))
        alive &= ~outside
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[k] - p0[:, k]) / d[:, k]
            t2 = (hi[k] - p0[:, k]) / d[:, k]
        swap = t1 > t2
        t1s = np.where(swap, t2, t1)
        t2s = np.where(swap, t1, t2)
        use = alive & ~parallel
        tmin = np.where(use, np.maximum(tmin, t1s), tmin)
        tmax = np.where(use, np.minimum(tmax, t2s), tmax)
        alive &= tmin <= tmax
    return alive


def line_of_sight(env: Environment, p0: Vec3 | np.ndarray, p1: Vec3 | np.ndarray) -> bool:
    """True iff the segment p0 -> p1 intersects no occluder box."""
    a = p0.to_array() if isinstance(p0, Vec3) else np.asarray(p0, dtype=float)
    b = p1.to_array() if isinstance(p1, Vec3) else np.asarray(p1, dtype=float)
    for box in env.occluders:
        if _segments_hit_box(a[None, :], b[None, :], box.lo_arr, box.hi_arr)[0]:
            return False
    return True


def _los_batch(env: Environment, p0s: np.ndarray, p1: np.ndarray) -> np.ndarray:
    los = np.ones(len(p0s), dtype=bool)
    p1b = np.broadcast_to(p1, p0s.shape)
    for box in env.occluders:
        los &= ~_segments_hit_box(p0s, p1b, box.lo_arr, box.hi_arr)
    return los


# ---------------------------------------------------------------------------
# measurement sampling
# ---------------------------------------------------------------------------


def sample_measurements(
    env: Environment,
    traj: Trajectory,
    noise: NoiseModel,
    rate_hz: float,
    mounts: list[TagMount],
    seed: int,
) -> list[MeasurementRecord]:
    """Simulate the ranging log over the trajectory span.

    Per tag-anchor pair, pings follow a jittered-periodic schedule (period
    1/rate, +-10% uniform jitter). Each ping runs a line-of-sight test, a
    detection draw, then range = model + N(0, sigma) (+ Exp(nlos_bias) if
    NLOS), optionally bumped by U(0, outlier_spread) with p_outlier, and
    finally clamped to at least 0.01 m.
    """
    if rate_hz <= 0:
        raise ValueError("rate_hz must be > 0")
    period = 1.0 / rate_hz
    out: list[tuple[float, int, int, float]] = []
    for mount in mounts:
        for anchor in env.anchors:
            sched_rng = stream(seed, "schedule", mount.tag_id, anchor.anchor_id)
            n_pings = int(math.floor((traj.t1 - traj.t0) / period))
            if n_pings <= 0:
                continue
            base = traj.t0 + (np.arange(n_pings) + 0.5) * period
            times = base + sched_rng.uniform(-0.1 * period, 0.1 * period, size=n_pings)
            times = times[(times >= traj.t0) & (times <= traj.t1)]
            if len(times) == 0:
                continue
            tag_pos = traj.tag_positions(times, mount)
            a_pos = anchor.position.to_array()
            los = _los_batch(env, tag_pos, a_pos)

            det_rng = stream(seed, "detection", mount.tag_id, anchor.anchor_id)
            p_det = np.where(los, noise.p_detect_los, noise.p_detect_nlos)
            detected = det_rng.uniform(size=len(times)) < p_det

            noise_rng = stream(seed, "noise", mount.tag_id, anchor.anchor_id)
            vals = anchor.scale * np.linalg.norm(tag_pos - a_pos, axis=1) + anchor.bias
            vals = vals + noise_rng.normal(0.0, noise.sigma_range, size=len(times))
            if noise.nlos_bias > 0:
                nlos_rng = stream(seed, "nlos", mount.tag_id, anchor.anchor_id)
                vals = vals + np.where(
                    los, 0.0, nlos_rng.exponential(noise.nlos_bias, size=len(times))
                )
            if noise.p_outlier > 0:
                out_rng = stream(seed, "outliers", mount.tag_id, anchor.anchor_id)
                hit = out_rng.uniform(size=len(times)) < noise.p_outlier
                vals = vals + hit * out_rng.uniform(0.0, noise.outlier_spread, size=len(times))
            vals = np.maximum(vals, 0.01)
            for t, v, d in zip(times, vals, detected):
                if d:
                    out.append((float(t), mount.tag_id, anchor.anchor_id, float(v)))
    out.sort()
    return [MeasurementRecord(*rec) for rec in out]


# ---------------------------------------------------------------------------
# label tracks
# ---------------------------------------------------------------------------


class OslBiasField:
    """Deterministic location-dependent label bias: a seeded sum of Gaussian
    bumps whose z amplitude dominates while the total xy magnitude stays
    below `xy_cap` everywhere (0.45 m by default, under the 0.5 m budget).
    """

    def __init__(self, centers: np.ndarray, amplitudes: np.ndarray, length_scales: np.ndarray):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        self.amplitudes = np.asarray(amplitudes, dtype=float).reshape(-1, 3)
        self.length_scales = np.asarray(length_scales, dtype=float).reshape(-1)
        if len(self.centers) != len(self.amplitudes) or len(self.centers) != len(self.length_scales):
            raise ValueError("mismatched bump arrays")

    @classmethod
    def zero(cls) -> "OslBiasField":
        return cls(np.zeros((1, 3)), np.zeros((1, 3)), np.ones(1))

    @classmethod
    def from_seed(
        cls,
        bounds: Box,
        n_bumps: int,
        seed: int,
        xy_cap: float = 0.45,
        z_amp: tuple[float, float] = (0.4, 1.2),
    ) -> "OslBiasField":
        rng = stream(seed, "osl-field")
        lo, hi = bounds.lo_arr, bounds.hi_arr
        centers = rng.uniform(lo, hi, size=(n_bumps, 3))
        diag = float(np.linalg.norm((hi - lo)[:2])) or 1.0
        scales = rng.uniform(0.08 * diag, 0.30 * diag, size=n_bumps)
        amp_xy = rng.normal(0.0, 0.2, size=(n_bumps, 2))
        total_xy = float(np.sum(np.linalg.norm(amp_xy, axis=1)))
        if total_xy > xy_cap:
            amp_xy *= xy_cap / total_xy
        amp_z = rng.uniform(z_amp[0], z_amp[1], size=n_bumps) * rng.choice([-1.0, 1.0], size=n_bumps)
        amplitudes = np.column_stack([amp_xy, amp_z])
        return cls(centers, amplitudes, scales)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d2 = np.sum((pts[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        w = np.exp(-0.5 * d2 / self.length_scales[None, :] ** 2)
        return w @ self.amplitudes


@dataclass
class LabelTrack:
    """Per-tag positions over time: values[t] = concat over tags of (x,y,z)."""

    stamps: np.ndarray
    values: np.ndarray  # (T, 3 * n_tags)
    tag_ids: tuple[int, ...]

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.stamps), 3 * len(self.tag_ids)):
            raise ValueError(
                f"label track shape {self.values.shape} does not match "
                f"{len(self.stamps)} stamps x {len(self.tag_ids)} tags"
            )

    def sample(self, stamps) -> np.ndarray:
        """Per-column linear interpolation at query stamps, clamped at the ends."""
        stamps = np.asarray(stamps, dtype=float)
        cols = [np.interp(stamps, self.stamps, self.values[:, k])
                for k in range(self.values.shape[1])]
        return np.stack(cols, axis=1)


def gt_labels(traj: Trajectory, mounts: list[TagMount], stamps=None) -> LabelTrack:
    """True tag positions sampled along the trajectory."""
    ts = traj.stamps if stamps is None else np.asarray(stamps, dtype=float)
    cols = [traj.tag_positions(ts, m) for m in mounts]
    return LabelTrack(ts, np.concatenate(cols, axis=1), tuple(m.tag_id for m in mounts))


def osl_labels(
    traj: Trajectory, bias_field: OslBiasField, mounts: list[TagMount], stamps=None
) -> LabelTrack:
    """Map-consistent labels: true tag positions plus the location-dependent
    bias evaluated at the vehicle position (shared by all tags at a time)."""
    ts = traj.stamps if stamps is None else np.asarray(stamps, dtype=float)
    bias = bias_field(traj.sample_positions(ts))
    cols = [traj.tag_positions(ts, m) + bias for m in mounts]
    return LabelTrack(ts, np.concatenate(cols, axis=1), tuple(m.tag_id for m in mounts))


def anchors_visible(
    records: list[MeasurementRecord], window_s: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Distinct anchors measured per sliding 1 s window (window centers on a
    window_s/2 grid). Mirrors the visibility-over-time view of a ranging log.
    """
    if not records:
        return np.array([]), np.array([], dtype=int)
    stamps = np.array([r.stamp for r in records])
    anchors = np.array([r.anchor_id for r in records])
    t0, t1 = stamps.min(), stamps.max()
    centers = np.arange(t0 + window_s / 2, t1 - window_s / 2 + 1e-9, window_s / 2)
    if len(centers) == 0:
        centers = np.array([(t0 + t1) / 2])
    counts = np.empty(len(centers), dtype=int)
    for i, c in enumerate(centers):
        m = (stamps >= c - window_s / 2) & (stamps < c + window_s / 2)
        counts[i] = len(np.unique(anchors[m]))
    return centers, counts


# ---------------------------------------------------------------------------
# trial directory format
# ---------------------------------------------------------------------------

FLOAT_FMT = "%.9g"


@dataclass
class TrialData:
    trial_id: str
    env: Environment
    mounts: list[TagMount]
    records: list[MeasurementRecord]
    gt: LabelTrack
    osl: LabelTrack
    meta: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def write_trial(trial_dir: str | Path, trial: TrialData) -> None:
    """One directory per trial: meas.csv (stamp,tag_id,anchor_id,range),
    gt.csv / osl.csv (stamp, then x,y,z per tag), env.json. Floats carry 9
    significant digits; the first line of each CSV is a comment with the
    config hash and seed from `trial.meta`.
    """
    d = Path(trial_dir)
    d.mkdir(parents=True, exist_ok=True)
    tagline = "# config=%s seed=%s" % (
        trial.meta.get("config_hash", "none"),
        trial.meta.get("seed", "none"),
    )

    with open(d / "meas.csv", "w", newline="") as f:
        f.write(tagline + "\n")
        w = csv.writer(f)
        w.writerow(["stamp", "tag_id", "anchor_id", "range"])
        for r in trial.records:
            w.writerow([_fmt(r.stamp), r.tag_id, r.anchor_id, _fmt(r.range_m)])

    for name, track in (("gt.csv", trial.gt), ("osl.csv", trial.osl)):
        with open(d / name, "w", newline="") as f:
            f.write(tagline + "\n")
            w = csv.writer(f)
            header = ["stamp"]
            for tid in track.tag_ids:
                header += [f"tag{tid}_x", f"tag{tid}_y", f"tag{tid}_z"]
            w.writerow(header)
            for t, row in zip(track.stamps, track.values):
                w.writerow([_fmt(t)] + [_fmt(v) for v in row])

    env_doc = {
        "trial_id": trial.trial_id,
        "meta": trial.meta,
        "bounds": {"lo": list(trial.env.bounds.lo), "hi": list(trial.env.bounds.hi)},
        "anchors": [
            {
                "anchor_id": a.anchor_id,
                "position": [a.position.x, a.position.y, a.position.z],
                "scale": a.scale,
                "bias": a.bias,
            }
            for a in trial.env.anchors
        ],
        "occluders": [{"lo": list(b.lo), "hi": list(b.hi)} for b in trial.env.occluders],
        "mounts": [
            {
                "tag_id": m.tag_id,
                "body_offset": [m.body_offset.x, m.body_offset.y, m.body_offset.z],
            }
            for m in trial.mounts
        ],
    }
    with open(d / "env.json", "w") as f:
        json.dump(env_doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f) if row and not row[0].startswith("#")]
    return rows[1:]  # drop header


def read_trial(trial_dir: str | Path) -> TrialData:
    d = Path(trial_dir)
    with open(d / "env.json") as f:
        doc = json.load(f)
    env = Environment(
        bounds=Box(tuple(doc["bounds"]["lo"]), tuple(doc["bounds"]["hi"])),
        anchors=tuple(
            AnchorParams(a["anchor_id"], Vec3(*a["position"]), a["scale"], a["bias"])
            for a in doc["anchors"]
        ),
        occluders=tuple(Box(tuple(b["lo"]), tuple(b["hi"])) for b in doc["occluders"]),
    )
    mounts = [TagMount(m["tag_id"], Vec3(*m["body_offset"])) for m in doc["mounts"]]
    records = [
        MeasurementRecord(float(r[0]), int(r[1]), int(r[2]), float(r[3]))
        for r in _read_csv_rows(d / "meas.csv")
    ]

    def read_track(name: str) -> LabelTrack:
        rows = _read_csv_rows(d / name)
        arr = np.array([[float(v) for v in row] for row in rows])
        return LabelTrack(arr[:, 0], arr[:, 1:], tuple(m.tag_id for m in mounts))

    return TrialData(
        trial_id=doc["trial_id"],
        env=env,
        mounts=mounts,
        records=records,
        gt=read_track("gt.csv"),
        osl=read_track("osl.csv"),
        meta=doc.get("meta", {}),
    )
