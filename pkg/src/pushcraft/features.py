"""Model input/target construction and standardisation shared by the learners.

Forward models predict the object-frame displacement (dx, dy, dtheta) of one
push. Inputs are either the action alone ("object" frame mode, position
independent) or the world pose concatenated with the action ("world" mode,
used when predictive uncertainty must vary over the workspace).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import BoxState, PushAction, PushDataset, wrap_angles

OUTPUT_DIM = 3

FRAME_INPUT_DIMS = {"object": 3, "world": 6}


def model_input(state: BoxState, action: PushAction, frame_mode: str) -> np.ndarray:
    if frame_mode == "object":
        return np.array([action.px, action.py, action.a])
    if frame_mode == "world":
        return np.array([state.x, state.y, state.theta, action.px, action.py, action.a])
    raise ValueError(f"unknown frame_mode {frame_mode!r}")


def model_input_batch(states: np.ndarray, actions: np.ndarray, frame_mode: str) -> np.ndarray:
    """states (n, 3) and actions (n, 3) -> model inputs (n, 3 or 6)."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if frame_mode == "object":
        return actions.copy()
    if frame_mode == "world":
        return np.concatenate([states, actions], axis=1)
    raise ValueError(f"unknown frame_mode {frame_mode!r}")


def object_frame_delta(state: BoxState, next_state: BoxState) -> np.ndarray:
    """Displacement of one push expressed in the frame of the starting pose."""
    dx = next_state.x - state.x
    dy = next_state.y - state.y
    c, s = math.cos(state.theta), math.sin(state.theta)
    return np.array(
        [
            c * dx + s * dy,
            -s * dx + c * dy,
            float(wrap_angles(next_state.theta - state.theta)),
        ]
    )


def dataset_arrays(dataset: PushDataset) -> tuple[np.ndarray, np.ndarray]:
    """Stack a dataset into model inputs H (n, d) and object-frame
    displacement targets Y (n, 3) according to its frame mode."""
    if not dataset.records:
        raise ValueError("dataset is empty")
    H = np.stack([model_input(r.state, r.action, dataset.frame_mode) for r in dataset.records])
    Y = np.stack([object_frame_delta(r.state, r.next_state) for r in dataset.records])
    return H, Y


@dataclass(frozen=True)
class Normalization:
    """Per-dimension standardisation constants for inputs and targets."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, input_dim: int, output_dim: int = OUTPUT_DIM) -> "Normalization":
        return cls(
            np.zeros(input_dim),
            np.ones(input_dim),
            np.zeros(output_dim),
            np.ones(output_dim),
        )

    @classmethod
    def from_data(cls, H: np.ndarray, Y: np.ndarray) -> "Normalization":
        return cls(
            H.mean(axis=0),
            np.maximum(H.std(axis=0), 1e-8),
            Y.mean(axis=0),
            np.maximum(Y.std(axis=0), 1e-8),
        )

    def normalize_in(self, H: np.ndarray) -> np.ndarray:
        return (H - self.in_mean) / self.in_std

    def normalize_out(self, Y: np.ndarray) -> np.ndarray:
        return (Y - self.out_mean) / self.out_std

    def denormalize_mean(self, mean: np.ndarray) -> np.ndarray:
        return mean * self.out_std + self.out_mean

    def denormalize_variance(self, var: np.ndarray) -> np.ndarray:
        return var * self.out_std**2

    def to_dict(self) -> dict:
        return {
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "out_mean": self.out_mean.tolist(),
            "out_std": self.out_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(
            np.array(d["in_mean"], dtype=float),
            np.array(d["in_std"], dtype=float),
            np.array(d["out_mean"], dtype=float),
            np.array(d["out_std"], dtype=float),
        )


@dataclass(frozen=True)
class Prediction:
    """One forward-model prediction: object-frame mean displacement and
    per-dimension variance in physical units, plus the scalar uncertainty
    sigma_scalar = sqrt(sum of the standardised per-dimension variances), so
    position and angle contribute on comparable scales."""

    mean: np.ndarray
    variance: np.ndarray
    sigma_scalar: float

    def __post_init__(self):
        if np.any(np.asarray(self.variance) < 0):
            raise ValueError("negative predictive variance")
        if self.sigma_scalar < 0:
            raise ValueError("negative sigma_scalar")
