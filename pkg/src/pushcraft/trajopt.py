"""Decoupled uncertainty-averse trajectory optimisation.

Rather than trading goal progress against uncertainty inside the controller
cost, this module first builds a Monte-Carlo heat map of the model's
action-marginalised predictive uncertainty over the workspace, then bends a
straight start-to-goal waypoint path away from high-uncertainty regions with
a derivative-free path-integral update: sampled waypoint perturbations are
averaged with exponentiated-cost weights, per waypoint, while the endpoints
stay fixed and every waypoint is clamped to the state bounds. The optimised
path is handed to the push controller to track waypoint by waypoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .models import ForwardModel, sigma_many
from .mppi import EpisodeLog, MppiConfig, PushLogEntry, compute_weights, final_cost, run_mppi
from .sim import DEFAULT_SIM_PARAMS, BoxState, PushSystem, SimParams, random_push, wrap_angle


class PathBoundsError(ValueError):
    """A waypoint left the heat-map grid (violated the state constraints)."""


@dataclass
class HeatMap:
    """Grid of action-marginalised scalar uncertainty over workspace (x, y).

    values[ix, iy] is the mean sigma at the centre of cell (ix, iy); ix runs
    along x and iy along y. Queries between cell centres are bilinearly
    interpolated (clamped to the edge cells near the border)."""

    values: np.ndarray
    bounds: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    resolution: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.resolution, self.resolution):
            raise ValueError("heat map values must be resolution x resolution")
        if np.any(self.values < 0):
            raise ValueError("heat map values must be nonnegative")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x0, x1, y0, y1 = self.bounds
        dx = (x1 - x0) / self.resolution
        dy = (y1 - y0) / self.resolution
        xs = x0 + dx * (np.arange(self.resolution) + 0.5)
        ys = y0 + dy * (np.arange(self.resolution) + 0.5)
        return xs, ys

    def interpolate(self, x, y):
        """Bilinear lookup for scalars or equal-shape arrays of coordinates.
        Raises PathBoundsError for points outside the grid bounds."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x0, x1, y0, y1 = self.bounds
        if np.any(x < x0) or np.any(x > x1) or np.any(y < y0) or np.any(y > y1):
            raise PathBoundsError("query point outside the heat-map bounds")
        dx = (x1 - x0) / self.resolution
        dy = (y1 - y0) / self.resolution
        # fractional index into the cell-centre lattice, clamped at the edges
        u = np.clip((x - x0) / dx - 0.5, 0.0, self.resolution - 1.0)
        v = np.clip((y - y0) / dy - 0.5, 0.0, self.resolution - 1.0)
        i0 = np.clip(np.floor(u).astype(int), 0, self.resolution - 2)
        j0 = np.clip(np.floor(v).astype(int), 0, self.resolution - 2)
        fu = u - i0
        fv = v - j0
        vals = (
            self.values[i0, j0] * (1 - fu) * (1 - fv)
            + self.values[i0 + 1, j0] * fu * (1 - fv)
            + self.values[i0, j0 + 1] * (1 - fu) * fv
            + self.values[i0 + 1, j0 + 1] * fu * fv
        )
        return float(vals) if vals.ndim == 0 else vals


def build_heatmap(
    model: ForwardModel,
    bounds: tuple[float, float, float, float],
    resolution: int,
    n_mc: int,
    rng: np.random.Generator,
    sim_params: SimParams | None = None,
) -> HeatMap:
    """Monte-Carlo uncertainty map: one shared set of n_mc random pushes is
    evaluated at every cell-centre state and averaged. Object-frame models are
    probed at theta = 0; world-frame models marginalise over 8 evenly spaced
    orientations as well. sim_params supplies the box geometry for the action
    sampler (the collection defaults when omitted)."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if sim_params is None:
        sim_params = DEFAULT_SIM_PARAMS
    actions = np.stack([random_push(sim_params, rng).as_array() for _ in range(n_mc)])
    thetas = (
        np.array([0.0])
        if model.frame_mode == "object"
        else -math.pi + 2 * math.pi * np.arange(8) / 8
    )
    x0, x1, y0, y1 = bounds
    xs = x0 + (x1 - x0) / resolution * (np.arange(resolution) + 0.5)
    ys = y0 + (y1 - y0) / resolution * (np.arange(resolution) + 0.5)
    gx, gy, gth, ga = np.meshgrid(xs, ys, thetas, np.arange(n_mc), indexing="ij")
    states = np.column_stack([gx.ravel(), gy.ravel(), gth.ravel()])
    acts = actions[ga.ravel().astype(int)]
    sigmas = np.empty(len(states))
    chunk = 100_000
    for start in range(0, len(states), chunk):
        sl = slice(start, start + chunk)
        sigmas[sl] = sigma_many(model, states[sl], acts[sl])
    values = sigmas.reshape(resolution, resolution, len(thetas), n_mc).mean(axis=(2, 3))
    return HeatMap(values, tuple(bounds), resolution)


def mean_sigma_along(heatmap: HeatMap, states) -> float:
    """Mean heat-map uncertainty over a sequence of BoxStates (or an (n, >=2)
    array of positions)."""
    arr = np.asarray(
        [[s.x, s.y] if isinstance(s, BoxState) else [s[0], s[1]] for s in states], dtype=float
    )
    return float(np.mean(heatmap.interpolate(arr[:, 0], arr[:, 1])))


@dataclass
class StatePath:
    """Waypoint sequence whose first and last entries are immutable start and
    goal anchors."""

    waypoints: list[BoxState]
    cost_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("a path needs at least start and goal")

    def __len__(self) -> int:
        return len(self.waypoints)

    def positions(self) -> np.ndarray:
        return np.array([[w.x, w.y, w.theta] for w in self.waypoints])


@dataclass
class TrajOptConfig:
    """Waypoint optimiser settings. bounds is ((x_min, x_max), (y_min, y_max),
    (theta_min, theta_max)); perturbation_std is in metres."""

    n_samples: int = 32
    n_waypoints: int = 10
    alpha: float = 1.0
    lambda_: float = 1.0
    perturbation_std: float = 0.05
    eps_threshold: float = 1e-4
    max_iters: int = 100
    bounds: tuple = ((-1.0, 1.0), (-1.0, 1.0), (-math.pi, math.pi))
    normalize_cost_by_length: bool = True

    def __post_init__(self):
        if min(self.n_samples, self.n_waypoints - 1, self.max_iters) < 1:
            raise ValueError("n_samples, n_waypoints and max_iters must be positive")
        if min(self.alpha, self.lambda_, self.perturbation_std, self.eps_threshold) <= 0:
            raise ValueError("alpha, lambda_, perturbation_std and eps_threshold must be positive")
        for lo, hi in self.bounds:
            if lo >= hi:
                raise ValueError(f"bounds not well ordered: {self.bounds}")


def initial_path(start: BoxState, goal: BoxState, n_waypoints: int) -> StatePath:
    """Straight-line interpolation from start to goal; the heading follows
    the shorter angular arc."""
    if n_waypoints < 2:
        raise ValueError("need at least 2 waypoints")
    fracs = np.linspace(0.0, 1.0, n_waypoints)
    dth = wrap_angle(goal.theta - start.theta)
    waypoints = [
        BoxState(
            start.x + f * (goal.x - start.x),
            start.y + f * (goal.y - start.y),
            wrap_angle(start.theta + f * dth),
        )
        for f in fracs
    ]
    return StatePath(waypoints)


def enforce_state_constraints(x: BoxState, bounds) -> BoxState:
    """Componentwise clamp into the state box; theta is wrapped after
    clamping. Applying it twice equals applying it once."""
    (x0, x1), (y0, y1), (t0, t1) = bounds
    return BoxState(
        min(max(x.x, x0), x1),
        min(max(x.y, y0), y1),
        wrap_angle(min(max(x.theta, t0), t1)),
    )


def path_uncertainty_cost(path: StatePath, heatmap: HeatMap, alpha: float) -> float:
    """alpha times the summed heat-map uncertainty over every waypoint
    (endpoints included), with bilinear interpolation between cells."""
    pos = path.positions()
    return float(alpha * heatmap.interpolate(pos[:, 0], pos[:, 1]).sum())


def optimize_path(
    init: StatePath,
    heatmap: HeatMap,
    cfg: TrajOptConfig,
    rng: np.random.Generator,
) -> StatePath:
    """Iteratively bend the interior waypoints toward low uncertainty.

    Each iteration perturbs the interior waypoint positions with Gaussian
    noise, clamps the samples to the bounds, weights each sample per waypoint
    by its local cost contribution and applies the weighted average of the
    (post-clamp) perturbations. Iterations that would increase the total path
    cost are rejected, so the recorded cost curve is non-increasing; the loop
    stops once an iteration improves the cost by less than eps_threshold."""
    for anchor in (init.waypoints[0], init.waypoints[-1]):
        clamped = enforce_state_constraints(anchor, cfg.bounds)
        if (clamped.x, clamped.y) != (anchor.x, anchor.y):
            raise PathBoundsError("path endpoints must lie inside the state bounds")
    pts = init.positions()
    T = len(pts)
    scale = cfg.alpha / T if cfg.normalize_cost_by_length else cfg.alpha

    def total_cost(p):
        return float(cfg.alpha * heatmap.interpolate(p[:, 0], p[:, 1]).sum())

    cur_cost = total_cost(pts)
    history = [cur_cost]
    for _ in range(cfg.max_iters):
        delta = rng.normal(0.0, cfg.perturbation_std, size=(cfg.n_samples, T, 2))
        delta[:, 0, :] = 0.0
        delta[:, -1, :] = 0.0
        cand = np.repeat(pts[None, :, :], cfg.n_samples, axis=0)
        cand[:, :, 0] = np.clip(cand[:, :, 0] + delta[:, :, 0], cfg.bounds[0][0], cfg.bounds[0][1])
        cand[:, :, 1] = np.clip(cand[:, :, 1] + delta[:, :, 1], cfg.bounds[1][0], cfg.bounds[1][1])
        eff = cand[:, :, :2] - pts[None, :, :2]
        local = scale * heatmap.interpolate(cand[:, :, 0], cand[:, :, 1])  # (N, T)
        new_pts = pts.copy()
        for i in range(1, T - 1):
            w = compute_weights(local[:, i], cfg.lambda_)
            new_pts[i, 0] = np.clip(pts[i, 0] + w @ eff[:, i, 0], cfg.bounds[0][0], cfg.bounds[0][1])
            new_pts[i, 1] = np.clip(pts[i, 1] + w @ eff[:, i, 1], cfg.bounds[1][0], cfg.bounds[1][1])
        new_cost = total_cost(new_pts)
        if new_cost <= cur_cost:
            improvement = cur_cost - new_cost
            pts = new_pts
            cur_cost = new_cost
        else:
            improvement = 0.0  # rejected iteration
        history.append(cur_cost)
        if improvement < cfg.eps_threshold:
            break
    waypoints = [init.waypoints[0]]
    waypoints += [BoxState(pts[i, 0], pts[i, 1], pts[i, 2]) for i in range(1, T - 1)]
    waypoints.append(init.waypoints[-1])
    return StatePath(waypoints, cost_history=history)


def track_path(
    path: StatePath,
    model: ForwardModel,
    system: PushSystem,
    mppi_cfg: MppiConfig,
    rng: np.random.Generator,
) -> EpisodeLog:
    """Follow the waypoints in order with the push controller (uncertainty
    penalty off), advancing once within goal_tolerance of the current target.
    max_pushes bounds the total budget across all waypoints. The returned log
    scores every push against the final waypoint."""
    final_goal = path.waypoints[-1]
    final_cfg = replace(mppi_cfg, goal=final_goal, gamma=0.0)
    start = system.state
    records: list[PushLogEntry] = []
    budget = mppi_cfg.max_pushes
    for waypoint in path.waypoints[1:]:
        remaining = budget - len(records)
        if remaining <= 0:
            break
        sub_cfg = replace(mppi_cfg, goal=waypoint, gamma=0.0, max_pushes=remaining)
        leg = run_mppi(model, system, sub_cfg, rng)
        records += [
            PushLogEntry(r.state, r.action, final_cost(r.state, final_cfg)) for r in leg.records
        ]
    end_cost = final_cost(system.state, final_cfg)
    return EpisodeLog(
        start_state=start,
        records=records,
        initial_cost=final_cost(start, final_cfg),
        final_cost=end_cost,
        pushes=len(records),
        converged=end_cost <= mppi_cfg.goal_tolerance,
        model_descriptor=model.descriptor,
    )


def save_heatmap_csv(heatmap: HeatMap, path) -> None:
    """CSV dump: a commented header with bounds and resolution, then one row
    per x index with the resolution y values."""
    x0, x1, y0, y1 = (float(b) for b in heatmap.bounds)
    with open(path, "w") as fh:
        fh.write(f"# bounds={x0!r},{x1!r},{y0!r},{y1!r} resolution={heatmap.resolution}\n")
        for ix in range(heatmap.resolution):
            fh.write(",".join(repr(float(v)) for v in heatmap.values[ix]) + "\n")


def load_heatmap_csv(path) -> HeatMap:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# bounds="):
            raise ValueError(f"{path} is not a heat-map CSV")
        spec, res_part = header[len("# bounds=") :].split(" resolution=")
        bounds = tuple(float(tok) for tok in spec.split(","))
        resolution = int(res_part)
        rows = [[float(tok) for tok in line.strip().split(",")] for line in fh if line.strip()]
    return HeatMap(np.array(rows), bounds, resolution)


def save_path_json(path: StatePath, file_path) -> None:
    doc = {
        "format": "pushcraft-path",
        "waypoints": [[w.x, w.y, w.theta] for w in path.waypoints],
        "cost_history": path.cost_history,
    }
    with open(file_path, "w") as fh:
        json.dump(doc, fh)


def load_path_json(file_path) -> StatePath:
    with open(file_path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "pushcraft-path":
        raise ValueError(f"{file_path} is not a waypoint path file")
    return StatePath(
        [BoxState(w[0], w[1], w[2]) for w in doc["waypoints"]],
        cost_history=list(doc.get("cost_history", [])),
    )
