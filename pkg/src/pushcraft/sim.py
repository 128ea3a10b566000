"""Quasi-static planar push simulator and data collection.

The pushed object is an axis-aligned rectangular box described by its planar
pose (x, y, theta). A push is a fixed-length straight translation of the box
along a direction given in the object frame, applied at a contact point on the
box boundary. The box additionally rotates in proportion to the signed lever
arm of the push line about the box centre, so a push aimed through the centre
of rotation translates the box without turning it. Optional Gaussian noise on
the resulting displacement provides aleatoric uncertainty for the learners.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]. Angles already in range are returned
    unchanged so that wrapping is bit-stable under repeated application."""
    if -math.pi < theta <= math.pi:
        return theta
    w = theta % TWO_PI
    return w - TWO_PI if w > math.pi else w


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised wrap into (-pi, pi]."""
    w = np.mod(theta, TWO_PI)
    return np.where(w > math.pi, w - TWO_PI, w)


def rotate2d(vx: float, vy: float, angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return c * vx - s * vy, s * vx + c * vy


@dataclass(frozen=True)
class BoxState:
    """Planar pose of the pushed box in the world frame.

    theta is kept in (-pi, pi]; construction wraps it and rejects
    non-finite values.
    """

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite box state ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "BoxState":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class PushAction:
    """A push: unit direction (px, py) in the object frame plus the contact
    location a in [0, 1], measured as the perimeter fraction counterclockwise
    from the midpoint of the -y edge."""

    px: float
    py: float
    a: float

    def __post_init__(self):
        norm = math.hypot(self.px, self.py)
        if norm < 1e-12:
            raise ValueError("push direction must be nonzero")
        # Only renormalise when actually off unit length; keeps stored unit
        # vectors bit-stable through serialisation round trips.
        if abs(norm - 1.0) > 1e-12:
            object.__setattr__(self, "px", self.px / norm)
            object.__setattr__(self, "py", self.py / norm)
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"contact location a={self.a} outside [0, 1]")

    @classmethod
    def from_raw(cls, vec) -> "PushAction":
        """Project a raw 3-vector [px, py, a] onto a valid action: the
        direction is renormalised (a degenerate zero direction falls back to
        +y) and a is clamped into [0, 1]."""
        px, py, a = float(vec[0]), float(vec[1]), float(vec[2])
        norm = math.hypot(px, py)
        if norm < 1e-12:
            px, py = 0.0, 1.0
        return cls(px, py, min(1.0, max(0.0, a)))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.a], dtype=float)


def clamp_actions(raw: np.ndarray) -> np.ndarray:
    """Vectorised PushAction.from_raw for an (n, 3) array of raw actions."""
    raw = np.asarray(raw, dtype=float)
    out = raw.copy()
    norms = np.hypot(out[..., 0], out[..., 1])
    degenerate = norms < 1e-12
    out[..., 0] = np.where(degenerate, 0.0, out[..., 0])
    out[..., 1] = np.where(degenerate, 1.0, out[..., 1])
    norms = np.where(degenerate, 1.0, norms)
    fix = np.abs(norms - 1.0) > 1e-12
    scale = np.where(fix, 1.0 / norms, 1.0)
    out[..., 0] *= scale
    out[..., 1] *= scale
    out[..., 2] = np.clip(out[..., 2], 0.0, 1.0)
    return out


@dataclass(frozen=True)
class SimParams:
    """Geometry, push magnitude and noise level of the simulator."""

    box_half_width: float = 0.1
    box_half_height: float = 0.07
    push_distance: float = 0.05
    rotation_gain: float = 2.0
    contact_noise_std: float = 0.002
    workspace_bounds: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)

    def __post_init__(self):
        if min(self.box_half_width, self.box_half_height, self.push_distance) <= 0:
            raise ValueError("box dimensions and push distance must be positive")
        if self.contact_noise_std < 0:
            raise ValueError("noise std must be nonnegative")
        x0, x1, y0, y1 = self.workspace_bounds
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"workspace bounds not well ordered: {self.workspace_bounds}")

    @property
    def perimeter(self) -> float:
        return 4.0 * (self.box_half_width + self.box_half_height)

    def workspace_center(self) -> BoxState:
        x0, x1, y0, y1 = self.workspace_bounds
        return BoxState(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.0)

    def in_bounds(self, state: BoxState) -> bool:
        x0, x1, y0, y1 = self.workspace_bounds
        return x0 <= state.x <= x1 and y0 <= state.y <= y1


def contact_frame(a: float, params: SimParams) -> tuple[tuple[float, float], tuple[float, float]]:
    """Contact point and inward edge normal (object frame) at perimeter
    fraction a, counted counterclockwise from the midpoint of the -y edge."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"perimeter fraction {a} outside [0, 1]")
    hw, hh = params.box_half_width, params.box_half_height
    s = a * params.perimeter
    if s < hw:  # right half of the bottom edge
        return (s, -hh), (0.0, 1.0)
    s -= hw
    if s < 2 * hh:  # right edge, upward
        return (hw, -hh + s), (-1.0, 0.0)
    s -= 2 * hh
    if s < 2 * hw:  # top edge, right to left
        return (hw - s, hh), (0.0, -1.0)
    s -= 2 * hw
    if s < 2 * hh:  # left edge, downward
        return (-hw, hh - s), (1.0, 0.0)
    s -= 2 * hh
    return (-hw + s, -hh), (0.0, 1.0)  # left half of the bottom edge


def contact_point(a: float, params: SimParams) -> tuple[float, float]:
    return contact_frame(a, params)[0]


def push_rotation(action: PushAction, params: SimParams) -> float:
    """Signed rotation of one push: rotation_gain times the lever arm of the
    push line about the box centre. The lever is the 2D cross product of the
    push direction with the contact point, which makes a push left of centre
    in the +y direction turn the box counterclockwise."""
    cx, cy = contact_point(action.a, params)
    lever = action.px * cy - action.py * cx
    return params.rotation_gain * lever


def step(
    state: BoxState,
    action: PushAction,
    params: SimParams,
    rng: np.random.Generator | None = None,
) -> BoxState:
    """Apply one push. Deterministic when rng is None or the noise std is 0."""
    dx_obj = params.push_distance * action.px
    dy_obj = params.push_distance * action.py
    wx, wy = rotate2d(dx_obj, dy_obj, state.theta)
    dtheta = push_rotation(action, params)
    delta = np.array([wx, wy, dtheta])
    if rng is not None and params.contact_noise_std > 0:
        delta = delta + rng.normal(0.0, params.contact_noise_std, size=3)
    return BoxState(state.x + delta[0], state.y + delta[1], wrap_angle(state.theta + delta[2]))


def random_push(params: SimParams, rng: np.random.Generator) -> PushAction:
    """Sample a random push: contact location uniform on the perimeter and a
    direction uniform over the inward-pointing half circle at that edge."""
    a = float(rng.random())
    _, normal = contact_frame(a, params)
    phi = rng.uniform(-0.5 * math.pi, 0.5 * math.pi)
    px, py = rotate2d(normal[0], normal[1], phi)
    return PushAction(px, py, a)


@dataclass(frozen=True)
class PushRecord:
    state: BoxState
    action: PushAction
    next_state: BoxState


@dataclass
class PushDataset:
    """Ordered (state, action, next state) triples plus the frame convention
    used when forming model inputs from them."""

    records: list[PushRecord]
    frame_mode: str = "object"
    params: SimParams | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frame_mode not in ("object", "world"):
            raise ValueError(f"unknown frame_mode {self.frame_mode!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def collect_dataset(
    n_pushes: int,
    params: SimParams,
    reset_period: int,
    rng: np.random.Generator,
    frame_mode: str = "object",
) -> PushDataset:
    """Collect n_pushes random pushes. The box restarts at the workspace
    centre every reset_period pushes; a push that would leave the workspace
    is discarded and triggers a reset, so recorded outcomes always lie inside
    the bounds."""
    if n_pushes < 1:
        raise ValueError("n_pushes must be >= 1")
    if reset_period < 1:
        raise ValueError("reset_period must be >= 1")
    center = params.workspace_center()
    state = center
    since_reset = 0
    records: list[PushRecord] = []
    attempts = 0
    while len(records) < n_pushes:
        attempts += 1
        if attempts > 100 * n_pushes:
            raise RuntimeError("data collection stalled; workspace too small for push length")
        if since_reset >= reset_period:
            state = center
            since_reset = 0
        action = random_push(params, rng)
        nxt = step(state, action, params, rng)
        if not params.in_bounds(nxt):
            state = center
            since_reset = 0
            continue
        records.append(PushRecord(state, action, nxt))
        state = nxt
        since_reset += 1
    return PushDataset(records, frame_mode=frame_mode, params=params)


def lesion(dataset: PushDataset, region: tuple[float, float, float, float]) -> PushDataset:
    """Remove every record whose input state (x, y) lies inside the
    axis-aligned rectangle region = (x_min, x_max, y_min, y_max). Survivor
    order is preserved. An empty result is allowed; it is flagged in the
    returned dataset's meta and raises a warning."""
    x0, x1, y0, y1 = region
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"lesion region not well ordered: {region}")
    if dataset.params is not None:
        bx0, bx1, by0, by1 = dataset.params.workspace_bounds
        if x0 < bx0 or x1 > bx1 or y0 < by0 or y1 > by1:
            raise ValueError("lesion region extends outside the workspace bounds")

    def inside(r: PushRecord) -> bool:
        return x0 <= r.state.x <= x1 and y0 <= r.state.y <= y1

    survivors = [r for r in dataset.records if not inside(r)]
    meta = dict(dataset.meta)
    meta["lesion_region"] = list(region)
    meta["lesion_removed"] = len(dataset.records) - len(survivors)
    if not survivors:
        meta["lesion_warning"] = "lesion removed every record"
        warnings.warn("lesion removed every record from the dataset", stacklevel=2)
    return PushDataset(survivors, frame_mode=dataset.frame_mode, params=dataset.params, meta=meta)


class PushSystem:
    """Stateful wrapper around the simulator used as the ground-truth plant
    during closed-loop planning: executes pushes with noise and feeds back the
    true resulting state."""

    def __init__(self, params: SimParams, init_state: BoxState, rng: np.random.Generator):
        self.params = params
        self.state = init_state
        self._rng = rng

    def push(self, action: PushAction) -> BoxState:
        self.state = step(self.state, action, self.params, self._rng)
        return self.state

    def reset(self, state: BoxState) -> None:
        self.state = state


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed; carries the line number."""


def _params_to_dict(params: SimParams) -> dict:
    return {
        "box_half_width": params.box_half_width,
        "box_half_height": params.box_half_height,
        "push_distance": params.push_distance,
        "rotation_gain": params.rotation_gain,
        "contact_noise_std": params.contact_noise_std,
        "workspace_bounds": list(params.workspace_bounds),
    }


def _params_from_dict(d: dict) -> SimParams:
    return SimParams(
        box_half_width=d["box_half_width"],
        box_half_height=d["box_half_height"],
        push_distance=d["push_distance"],
        rotation_gain=d["rotation_gain"],
        contact_noise_std=d["contact_noise_std"],
        workspace_bounds=tuple(d["workspace_bounds"]),
    )


def save_dataset(dataset: PushDataset, path) -> None:
    """Write the dataset as JSON lines: a header with the simulator params and
    frame mode, then one record per line. Round trips are bit-exact."""
    header = {
        "format": "pushcraft-dataset",
        "version": 1,
        "frame_mode": dataset.frame_mode,
        "params": None if dataset.params is None else _params_to_dict(dataset.params),
        "meta": dataset.meta,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in dataset.records:
            fh.write(
                json.dumps(
                    {
                        "state": [r.state.x, r.state.y, r.state.theta],
                        "action": [r.action.px, r.action.py, r.action.a],
                        "next": [r.next_state.x, r.next_state.y, r.next_state.theta],
                    }
                )
                + "\n"
            )


def load_dataset(path) -> PushDataset:
    records: list[PushRecord] = []
    frame_mode = None
    params = None
    meta: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if lineno == 1:
                if obj.get("format") != "pushcraft-dataset":
                    raise DatasetFormatError(f"{path}: line 1: missing dataset header")
                frame_mode = obj["frame_mode"]
                params = None if obj["params"] is None else _params_from_dict(obj["params"])
                meta = obj.get("meta", {})
                continue
            try:
                s = obj["state"]
                a = obj["action"]
                n = obj["next"]
                records.append(
                    PushRecord(
                        BoxState(s[0], s[1], s[2]),
                        PushAction(a[0], a[1], a[2]),
                        BoxState(n[0], n[1], n[2]),
                    )
                )
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: bad record ({exc})") from exc
    if frame_mode is None:
        raise DatasetFormatError(f"{path}: empty file, no dataset header")
    return PushDataset(records, frame_mode=frame_mode, params=params, meta=meta)


DEFAULT_SIM_PARAMS = SimParams()
