"""Classical sliding-window localization baseline: robust nonlinear least
squares over the ranging model with known anchors.

Each window stacks, over its frames,
  * range residuals  r = measured - (scale * ||p - a|| + bias), Huber-robust,
  * constant-velocity residuals  (p_{k+1} - 2 p_k + p_{k-1}) / motion_sigma,
  * a rigid-distance residual linking the two tag positions when both have
    measurements in a frame,
and minimizes with Levenberg-Marquardt, the Huber kernel entering through
iteratively reweighted least squares. Accepted steps never increase the
robust cost. Only tag positions are estimated (no orientation); the solution
reports tag 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FrameVector, Layout, bin_measurements
from .geometry import AnchorParams
from .sim import TrialData

__all__ = [
    "GoConfig",
    "GoSolution",
    "GoTrajectory",
    "SingularGeometryError",
    "residual",
    "residual_jacobian",
    "huber_weight",
    "huber_rho",
    "solve_window",
    "run_go_pipeline",
]

_DIST_GUARD = 1e-6


class SingularGeometryError(ValueError):
    """Position coincides with an anchor; the range direction is undefined."""


@dataclass(frozen=True)
class GoConfig:
    window_frames: int = 20
    huber_delta: float = 0.5
    max_iters: int = 50
    rel_tol: float = 1e-10
    lm_lambda0: float = 1e-3
    motion_sigma: float = 0.05
    init_mode: str = "centroid"  # or "previous-solution"
    rigid_distance: float | None = None  # known tag0-tag1 separation, meters
    rigid_sigma: float = 0.01

    def __post_init__(self):
        if self.window_frames < 2:
            raise ValueError("window_frames must be >= 2")
        for name in ("huber_delta", "rel_tol", "lm_lambda0", "motion_sigma", "rigid_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.init_mode not in ("centroid", "previous-solution"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


@dataclass
class GoSolution:
    positions: np.ndarray  # (F, 3) tag-0 positions
    cost: float
    iterations: int
    converged: bool
    low_observability: bool
    cost_trace: list[float] = field(default_factory=list)
    tag_positions: dict[int, np.ndarray] = field(default_factory=dict)
    singular_guard_hits: int = 0


@dataclass
class GoTrajectory:
    stamps: np.ndarray
    positions: np.ndarray  # (K, 3) tag-0
    converged: np.ndarray  # (K,) bool
    costs: np.ndarray  # (K,) cost of the window that produced each frame
    rmse: float


def residual(position: np.ndarray, measured_range: float, anchor: AnchorParams) -> float:
    """measured - (scale * ||position - anchor|| + bias)."""
    d = float(np.linalg.norm(np.asarray(position, dtype=float) - anchor.position.to_array()))
    return measured_range - (anchor.scale * d + anchor.bias)


def residual_jacobian(position: np.ndarray, anchor: AnchorParams) -> np.ndarray:
    """d(residual)/d(position) = -scale * (position - anchor)^T / ||.||."""
    diff = np.asarray(position, dtype=float) - anchor.position.to_array()
    d = float(np.linalg.norm(diff))
    if d <= _DIST_GUARD:
        raise SingularGeometryError(
            f"position within {_DIST_GUARD} m of anchor {anchor.anchor_id}"
        )
    return -anchor.scale * diff / d


def huber_weight(r: float, delta: float) -> float:
    """IRLS weight of the Huber kernel: 1 inside delta, delta/|r| outside."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    a = abs(r)
    return 1.0 if a <= delta else delta / a


def huber_rho(r, delta: float):
    """Huber loss: r^2/2 inside delta, delta*(|r| - delta/2) outside."""
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


class _WindowProblem:
    """Dense residual/Jacobian assembly for one window."""

    def __init__(self, frames: list[FrameVector], layout: Layout,
                 anchors: list[AnchorParams], config: GoConfig):
        self.config = config
        self.F = len(frames)
        self.T = len(layout.tag_ids)
        self.n = self.F * self.T * 3
        a_by_id = {a.anchor_id: a for a in anchors}
        # (frame, tag_index, anchor, measured) for every nonzero slot
        self.meas: list[tuple[int, int, AnchorParams, float]] = []
        tags_with_data: list[set[int]] = [set() for _ in range(self.F)]
        anchors_seen: set[int] = set()
        for k, fv in enumerate(frames):
            for ti, tag in enumerate(layout.tag_ids):
                for ai, aid in enumerate(layout.anchor_ids):
                    v = fv.values[ti * len(layout.anchor_ids) + ai]
                    if v > 0:
                        self.meas.append((k, ti, a_by_id[aid], float(v)))
                        tags_with_data[k].add(ti)
                        anchors_seen.add(aid)
        if not self.meas:
            raise ValueError("no measurements in window")
        self.low_observability = len(anchors_seen) < 4
        self.rigid_frames = (
            [k for k in range(self.F) if {0, 1} <= tags_with_data[k]]
            if (self.T >= 2 and config.rigid_distance is not None)
            else []
        )
        self.n_rows = (
            len(self.meas)
            + 3 * self.T * max(0, self.F - 2)
            + len(self.rigid_frames)
        )
        self.anchor_centroid = np.mean([a.position.to_array() for a in anchors], axis=0)
        seen_pos = [a_by_id[aid].position.to_array() for aid in anchors_seen]
        if min(np.linalg.norm(self.anchor_centroid - p) for p in seen_pos) < 1e-3:
            # centroid on top of an observed anchor is a singular start
            self.anchor_centroid = self.anchor_centroid + np.array([0.0, 0.0, 0.5])
        self.guard_hits = 0

    def col(self, k: int, ti: int) -> int:
        return (k * self.T + ti) * 3

    def linearize(self, x: np.ndarray):
        """Residual vector, dense Jacobian, and IRLS weights at `x`."""
        cfg = self.config
        p = x.reshape(self.F, self.T, 3)
        r = np.zeros(self.n_rows)
        J = np.zeros((self.n_rows, self.n))
        w = np.ones(self.n_rows)
        row = 0
        for k, ti, anchor, meas in self.meas:
            diff = p[k, ti] - anchor.position.to_array()
            d = float(np.linalg.norm(diff))
            if d <= _DIST_GUARD:
                self.guard_hits += 1
                d = _DIST_GUARD
            r[row] = meas - (anchor.scale * d + anchor.bias)
            J[row, self.col(k, ti) : self.col(k, ti) + 3] = -anchor.scale * diff / d
            w[row] = huber_weight(r[row], cfg.huber_delta)
            row += 1
        inv_m = 1.0 / cfg.motion_sigma
        for ti in range(self.T):
            for k in range(1, self.F - 1):
                for ax in range(3):
                    r[row] = (p[k + 1, ti, ax] - 2 * p[k, ti, ax] + p[k - 1, ti, ax]) * inv_m
                    J[row, self.col(k + 1, ti) + ax] = inv_m
                    J[row, self.col(k, ti) + ax] = -2 * inv_m
                    J[row, self.col(k - 1, ti) + ax] = inv_m
                    row += 1
        inv_r = 1.0 / self.config.rigid_sigma
        for k in self.rigid_frames:
            diff = p[k, 0] - p[k, 1]
            d = float(np.linalg.norm(diff))
            if d <= _DIST_GUARD:
                self.guard_hits += 1
                d = _DIST_GUARD
            u = diff / d
            r[row] = (d - self.config.rigid_distance) * inv_r
            J[row, self.col(k, 0) : self.col(k, 0) + 3] = u * inv_r
            J[row, self.col(k, 1) : self.col(k, 1) + 3] = -u * inv_r
            row += 1
        return r, J, w

    def robust_cost(self, x: np.ndarray) -> float:
        r, _, _ = self.linearize(x)
        n_range = len(self.meas)
        cost = float(np.sum(huber_rho(r[:n_range], self.config.huber_delta)))
        cost += 0.5 * float(np.sum(r[n_range:] ** 2))
        return cost

    def quadratic_cost(self, x: np.ndarray) -> float:
        r, _, _ = self.linearize(x)
        return 0.5 * float(np.sum(r**2))


def _lm_loop(prob: _WindowProblem, x: np.ndarray, robust: bool,
             max_iters: int, rel_tol: float, lam0: float):
    """One LM descent on either the plain quadratic cost (robust=False) or
    the Huber-IRLS cost. Returns (x, cost, iterations, converged, trace)."""
    cost_fn = prob.robust_cost if robust else prob.quadratic_cost
    lam = lam0
    cost = cost_fn(x)
    trace = [cost]
    converged = False
    iterations = 0
    eye = np.eye(prob.n)
    while iterations < max_iters and not converged:
        r, J, w = prob.linearize(x)
        if not robust:
            w = np.ones_like(w)
        g = J.T @ (w * r)
        if np.max(np.abs(g)) < 1e-10:  # stationary point (e.g. exact data)
            converged = True
            break
        H = J.T @ (w[:, None] * J)
        accepted = False
        while lam <= 1e12:
            try:
                dx = np.linalg.solve(H + lam * eye, g)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            x_new = x - dx
            new_cost = cost_fn(x_new)
            if new_cost < cost:
                rel_change = (cost - new_cost) / max(cost, 1e-300)
                x, cost = x_new, new_cost
                trace.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                iterations += 1
                if rel_change < rel_tol:
                    converged = True
                break
            lam *= 4.0
        if not accepted:
            break  # damping overflow: keep the last iterate, converged stays False
    return x, cost, iterations, converged, trace


def solve_window(
    frames: list[FrameVector],
    layout: Layout,
    anchors: list[AnchorParams],
    config: GoConfig,
    init: np.ndarray | None = None,
) -> GoSolution:
    """Levenberg-Marquardt with IRLS Huber weights over one window.

    `init` is an (F, n_tags, 3) array. Without one, every position starts at
    the centroid of the anchors observed in the window and a plain
    least-squares bootstrap runs first (far from the solution all residuals
    sit in the Huber tail, which flattens the robust cost and can strand the
    iteration); the robust descent then refines from there. Terminates when
    the relative cost change drops below `rel_tol` or after `max_iters`
    accepted steps; damping overflow returns the last iterate with
    converged=False. The reported cost trace is the robust phase's and never
    increases.
    """
    prob = _WindowProblem(frames, layout, anchors, config)
    if init is None:
        x = np.tile(prob.anchor_centroid, (prob.F, prob.T, 1)).reshape(-1)
        x, _, _, _, _ = _lm_loop(
            prob, x, robust=False, max_iters=config.max_iters,
            rel_tol=config.rel_tol, lam0=config.lm_lambda0,
        )
    else:
        init = np.asarray(init, dtype=float)
        if init.shape != (prob.F, prob.T, 3):
            raise ValueError(f"init shape {init.shape} != {(prob.F, prob.T, 3)}")
        x = init.reshape(-1).copy()

    x, cost, iterations, converged, trace = _lm_loop(
        prob, x, robust=True, max_iters=config.max_iters,
        rel_tol=config.rel_tol, lam0=config.lm_lambda0,
    )
    p = x.reshape(prob.F, prob.T, 3)
    return GoSolution(
        positions=p[:, 0, :].copy(),
        cost=cost,
        iterations=iterations,
        converged=converged,
        low_observability=prob.low_observability,
        cost_trace=trace,
        tag_positions={layout.tag_ids[ti]: p[:, ti, :].copy() for ti in range(prob.T)},
        singular_guard_hits=prob.guard_hits,
    )


def run_go_pipeline(
    trial: TrialData,
    anchors: list[AnchorParams],
    config: GoConfig,
    bin_width: float = 0.050,
) -> GoTrajectory:
    """Bin the trial's log, slide the window at half-window stride with warm
    starts, and score the assembled tag-0 trajectory against ground truth.
    Frames covered by two windows take the later window's estimate.
    """
    if not trial.records:
        raise ValueError(f"trial {trial.trial_id!r} has no measurements")
    layout = Layout(
        tuple(m.tag_id for m in trial.mounts),
        tuple(a.anchor_id for a in anchors),
    )
    cfg = config
    if cfg.rigid_distance is None and len(trial.mounts) >= 2:
        d01 = (trial.mounts[0].body_offset - trial.mounts[1].body_offset).norm()
        cfg = GoConfig(**{**cfg.__dict__, "rigid_distance": d01})
    frames = bin_measurements(trial.records, layout, bin_width)
    K = len(frames)
    W = min(cfg.window_frames, K)
    stride = max(1, W // 2)
    starts = list(range(0, K - W + 1, stride))
    if starts[-1] != K - W:
        starts.append(K - W)

    stamps = np.array([f.stamp for f in frames])
    positions = np.zeros((K, 3))
    converged = np.zeros(K, dtype=bool)
    costs = np.zeros(K)
    prev: GoSolution | None = None
    prev_start = 0
    T = len(layout.tag_ids)
    for s in starts:
        init = None
        if prev is not None and cfg.init_mode in ("centroid", "previous-solution"):
            # warm start: reuse overlapping estimates, extend with the last one
            init = np.empty((W, T, 3))
            for k in range(W):
                src = min(max(s + k - prev_start, 0), W - 1)
                for ti, tag in enumerate(layout.tag_ids):
                    init[k, ti] = prev.tag_positions[tag][src]
        try:
            sol = solve_window(frames[s : s + W], layout, anchors, cfg, init=init)
        except ValueError:
            # window without measurements: hold the previous estimate
            if prev is not None:
                positions[s : s + W] = positions[max(s - 1, 0)]
            continue
        positions[s : s + W] = sol.positions
        converged[s : s + W] = sol.converged
        costs[s : s + W] = sol.cost
        prev, prev_start = sol, s

    gt = trial.gt.sample(stamps)
    tag0_col = 3 * trial.gt.tag_ids.index(layout.tag_ids[0])
    err = positions - gt[:, tag0_col : tag0_col + 3]
    rmse = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    return GoTrajectory(stamps, positions, converged, costs, rmse)
