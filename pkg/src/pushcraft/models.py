"""Uniform prediction interface over the learned models and the simulator.

Every backend maps (state, action) to a Prediction of the object-frame push
displacement with per-dimension variance and a scalar uncertainty. The
simulator-backed oracle exposes the ground-truth mean with its known constant
noise level, which separates planner behaviour from model quality during
testing. predict_next_state turns a prediction into the next world pose.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod

import numpy as np

from .features import Prediction, model_input_batch
from .gp import GpModel, gp_predict, gp_predict_batch
from .mdn import Ensemble, ensemble_predict, ensemble_predict_batch
from .sim import BoxState, PushAction, SimParams, contact_point, wrap_angles


class ForwardModel(ABC):
    """Prediction contract shared by the E-MDN, the GP and the oracle."""

    descriptor: str = "forward-model"
    frame_mode: str = "object"

    @abstractmethod
    def predict(self, state: BoxState, action: PushAction) -> Prediction:
        """Deterministic prediction for one (state, action) pair."""

    def predict_many(self, states: np.ndarray, actions: np.ndarray):
        """Vectorised prediction: states (n, 3) and valid actions (n, 3) to
        (means (n, 3), variances (n, 3), sigma scalars (n,))."""
        preds = [
            self.predict(BoxState.from_array(s), PushAction(*a))
            for s, a in zip(states, actions)
        ]
        return (
            np.stack([p.mean for p in preds]),
            np.stack([p.variance for p in preds]),
            np.array([p.sigma_scalar for p in preds]),
        )


class EnsembleModel(ForwardModel):
    descriptor = "emdn"

    def __init__(self, ensemble: Ensemble):
        self.ensemble = ensemble
        self.frame_mode = ensemble.frame_mode

    def predict(self, state, action):
        return ensemble_predict(self.ensemble, state, action)

    def predict_many(self, states, actions):
        H = model_input_batch(states, actions, self.frame_mode)
        return ensemble_predict_batch(self.ensemble, H)


class GpForwardModel(ForwardModel):
    descriptor = "gp"

    def __init__(self, model: GpModel):
        self.model = model
        self.frame_mode = model.frame_mode

    def predict(self, state, action):
        return gp_predict(self.model, state, action)

    def predict_many(self, states, actions):
        H = model_input_batch(states, actions, self.frame_mode)
        return gp_predict_batch(self.model, H)


class OracleModel(ForwardModel):
    """Ground-truth mean dynamics with the simulator's known noise level as a
    constant scalar uncertainty."""

    descriptor = "oracle"

    def __init__(self, params: SimParams):
        self.params = params
        self.frame_mode = "object"
        self._sigma = math.sqrt(3.0) * params.contact_noise_std
        self._var = np.full(3, params.contact_noise_std**2)

    def predict(self, state, action):
        d = self.params.push_distance
        cx, cy = contact_point(action.a, self.params)
        lever = action.px * cy - action.py * cx
        mean = np.array([d * action.px, d * action.py, self.params.rotation_gain * lever])
        return Prediction(mean, self._var.copy(), self._sigma)

    def predict_many(self, states, actions):
        actions = np.asarray(actions, dtype=float)
        n = actions.shape[0]
        points = np.array([contact_point(a, self.params) for a in actions[:, 2]])
        lever = actions[:, 0] * points[:, 1] - actions[:, 1] * points[:, 0]
        means = np.column_stack(
            [
                self.params.push_distance * actions[:, 0],
                self.params.push_distance * actions[:, 1],
                self.params.rotation_gain * lever,
            ]
        )
        return means, np.tile(self._var, (n, 1)), np.full(n, self._sigma)


def predict_next_state(model: ForwardModel, state: BoxState, action: PushAction):
    """Advance one step through the model: rotate the predicted object-frame
    displacement into the world frame, add it to the pose, wrap the angle.
    Returns (next_state, sigma_scalar)."""
    pred = model.predict(state, action)
    c, s = math.cos(state.theta), math.sin(state.theta)
    dx, dy, dth = pred.mean
    nxt = BoxState(state.x + c * dx - s * dy, state.y + s * dx + c * dy, state.theta + dth)
    return nxt, pred.sigma_scalar


def sigma_at(model: ForwardModel, state: BoxState, action: PushAction) -> float:
    """Scalar predictive uncertainty of the model at (state, action)."""
    return model.predict(state, action).sigma_scalar


def predict_next_states(model: ForwardModel, states: np.ndarray, actions: np.ndarray):
    """Batched predict_next_state on (n, 3) state and valid action arrays.
    Returns (next_states (n, 3), sigmas (n,))."""
    means, _, sigmas = model.predict_many(states, actions)
    c = np.cos(states[:, 2])
    s = np.sin(states[:, 2])
    nxt = np.column_stack(
        [
            states[:, 0] + c * means[:, 0] - s * means[:, 1],
            states[:, 1] + s * means[:, 0] + c * means[:, 1],
            wrap_angles(states[:, 2] + means[:, 2]),
        ]
    )
    return nxt, sigmas


def sigma_many(model: ForwardModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return model.predict_many(states, actions)[2]
