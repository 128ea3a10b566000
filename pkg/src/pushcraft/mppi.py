"""Sampling-based model predictive push controller.

Each control step draws N random perturbations of a nominal action sequence,
rolls them out through the forward model, scores them with a running cost
that combines the goal-tracking quadratic, an action quadratic and a penalty
on the model's predictive uncertainty, and moves the nominal sequence toward
the exponentially weighted average of the perturbations. The perturbation
magnitude decays geometrically over the optimisation passes of one step.
Only the first action is executed; the observed state feeds back into the
next step (receding horizon).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .models import ForwardModel, predict_next_state, predict_next_states, sigma_at
from .sim import BoxState, PushAction, PushSystem, clamp_actions, wrap_angle


class PlanningError(RuntimeError):
    pass


def _as_diag3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == (3,):
        arr = np.diag(arr)
    if arr.shape != (3, 3):
        raise ValueError(f"{name} must be a length-3 diagonal or a 3x3 diagonal matrix")
    if np.any(arr != np.diag(np.diag(arr))):
        raise ValueError(f"{name} must be diagonal")
    if np.any(np.diag(arr) < 0):
        raise ValueError(f"{name} must be positive semidefinite")
    return arr


@dataclass
class MppiConfig:
    """Controller settings. Q and R accept a length-3 diagonal or a 3x3
    diagonal matrix; gamma weighs the predictive-uncertainty penalty in the
    running cost and can be switched off after gamma_off_after pushes."""

    n_samples: int = 150
    horizon: int = 2
    decay_steps: int = 20
    eta_init: float = 1.0
    rho: float = 1.0
    delta_t: float = 0.05
    lambda_: float = 1.0
    Q: np.ndarray = field(default_factory=lambda: np.diag([1.5, 1.5, 0.01]))
    R: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    gamma: float = 0.0
    u_init: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.5]))
    goal: BoxState = field(default_factory=lambda: BoxState(0.0, 0.0, 0.0))
    goal_tolerance: float = 0.12
    max_pushes: int = 40
    decay_rate: float = 0.99
    gamma_off_after: int | None = None

    def __post_init__(self):
        self.Q = _as_diag3(self.Q, "Q")
        self.R = _as_diag3(self.R, "R")
        self.u_init = np.asarray(self.u_init, dtype=float)
        if self.n_samples < 1 or self.horizon < 2:
            raise ValueError("need n_samples >= 1 and horizon >= 2")
        if self.lambda_ <= 0 or self.rho <= 0 or self.delta_t <= 0:
            raise ValueError("lambda_, rho and delta_t must be positive")
        if self.gamma < 0 or self.eta_init < 0:
            raise ValueError("gamma and eta_init must be nonnegative")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.decay_steps < 0 or self.max_pushes < 0:
            raise ValueError("decay_steps and max_pushes must be nonnegative")


def _goal_residual(x: BoxState, goal: BoxState) -> np.ndarray:
    return np.array([x.x - goal.x, x.y - goal.y, wrap_angle(x.theta - goal.theta)])


def running_cost(x: BoxState, u, sigma: float, cfg: MppiConfig) -> float:
    """gamma * sigma + (x - goal)' Q (x - goal) + u' R u, with the angular
    residual wrapped before the quadratic."""
    e = _goal_residual(x, cfg.goal)
    u = np.asarray(u, dtype=float)
    return float(cfg.gamma * sigma + e @ cfg.Q @ e + u @ cfg.R @ u)


def final_cost(x: BoxState, cfg: MppiConfig) -> float:
    """Terminal goal quadratic (no action or uncertainty terms)."""
    e = _goal_residual(x, cfg.goal)
    return float(e @ cfg.Q @ e)


def sample_perturbation(eta: float, cfg: MppiConfig, rng: np.random.Generator) -> np.ndarray:
    """One action perturbation: eta / sqrt(rho) * eps / sqrt(delta_t) with
    standard normal eps."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return eta / math.sqrt(cfg.rho) * rng.standard_normal(3) / math.sqrt(cfg.delta_t)


def _perturbation_batch(eta: float, cfg: MppiConfig, rng: np.random.Generator) -> np.ndarray:
    scale = eta / math.sqrt(cfg.rho * cfg.delta_t)
    return scale * rng.standard_normal((cfg.n_samples, cfg.horizon, 3))


@dataclass
class Trajectory:
    """One rolled-out sample: per-step (state, raw action, sigma) plus the
    resulting final state and accumulated cost-to-go."""

    steps: list[tuple[BoxState, np.ndarray, float]]
    final_state: BoxState
    cost_to_go: float


def _zero_action_probe() -> PushAction:
    return PushAction.from_raw(np.zeros(3))


def rollout(
    model: ForwardModel,
    x0: BoxState,
    nominal: np.ndarray,
    perturbations: np.ndarray,
    cfg: MppiConfig,
) -> Trajectory:
    """Propagate one perturbed action sequence through the model. Raw actions
    are projected to valid pushes before prediction; the cost-to-go sums the
    running cost over steps 1..T-1 plus the terminal cost, and the sigma
    recorded at step i is the model uncertainty of the transition into i
    (sigma_0 probes the zero action and is logged only)."""
    nominal = np.asarray(nominal, dtype=float)
    perturbations = np.asarray(perturbations, dtype=float)
    if nominal.shape != (cfg.horizon, 3) or perturbations.shape != (cfg.horizon, 3):
        raise ValueError("nominal and perturbations must both have shape (horizon, 3)")
    raw = nominal + perturbations
    states = [x0]
    sigmas = [sigma_at(model, x0, _zero_action_probe())]
    for i in range(cfg.horizon):
        nxt, sig = predict_next_state(model, states[i], PushAction.from_raw(raw[i]))
        states.append(nxt)
        sigmas.append(sig)
    cost = sum(running_cost(states[i], raw[i], sigmas[i], cfg) for i in range(1, cfg.horizon))
    cost += final_cost(states[cfg.horizon], cfg)
    steps = [(states[i], raw[i].copy(), sigmas[i]) for i in range(cfg.horizon)]
    return Trajectory(steps=steps, final_state=states[cfg.horizon], cost_to_go=float(cost))


def _rollout_batch(
    model: ForwardModel,
    x0: BoxState,
    nominal: np.ndarray,
    perturbations: np.ndarray,
    cfg: MppiConfig,
) -> np.ndarray:
    """Costs of all N perturbed sequences at once (identical maths to
    rollout, vectorised over samples)."""
    N, T = perturbations.shape[0], cfg.horizon
    raw = nominal[None, :, :] + perturbations  # (N, T, 3)
    states = np.tile(x0.as_array(), (N, 1))
    goal = cfg.goal.as_array()
    q = np.diag(cfg.Q)
    r = np.diag(cfg.R)
    costs = np.zeros(N)
    sigmas = np.zeros(N)
    for i in range(T):
        if i >= 1:
            err = states - goal
            err[:, 2] = np.mod(err[:, 2] + math.pi, 2 * math.pi) - math.pi
            costs += (err**2 @ q) + (raw[:, i, :] ** 2 @ r) + cfg.gamma * sigmas
        valid = clamp_actions(raw[:, i, :])
        states, sigmas = predict_next_states(model, states, valid)
    err = states - goal
    err[:, 2] = np.mod(err[:, 2] + math.pi, 2 * math.pi) - math.pi
    costs += err**2 @ q
    return costs


def compute_weights(costs, lambda_: float) -> np.ndarray:
    """Exponentiated-cost weights, normalised; the minimum cost is subtracted
    first, which leaves the weights unchanged but keeps the exponentials in
    range."""
    costs = np.asarray(costs, dtype=float)
    w = np.exp(-(costs - costs.min()) / lambda_)
    return w / w.sum()


def control_update(weights, perturbations) -> np.ndarray:
    """Per-timestep weighted average of the sampled perturbations, returned
    as increments to the nominal sequence."""
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    perturbations = np.asarray(perturbations, dtype=float)
    return np.einsum("n,nij->ij", weights, perturbations)


def mppi_plan_once(
    model: ForwardModel,
    x_init: BoxState,
    nominal: np.ndarray,
    cfg: MppiConfig,
    rng: np.random.Generator,
) -> tuple[PushAction, np.ndarray]:
    """One control step: decay_steps + 1 optimisation passes over the nominal
    sequence, with the exploration scale eta shrinking geometrically from
    eta_init each pass. Returns the first action (projected to a valid push)
    and the receding-horizon shift of the optimised sequence."""
    nominal = np.array(nominal, dtype=float)
    if nominal.shape != (cfg.horizon, 3):
        raise ValueError("nominal must have shape (horizon, 3)")
    for level in range(cfg.decay_steps + 1):
        eta = cfg.eta_init * cfg.decay_rate**level
        perts = _perturbation_batch(eta, cfg, rng)
        costs = _rollout_batch(model, x_init, nominal, perts, cfg)
        costs = np.where(np.isnan(costs), np.inf, costs)
        if not np.isfinite(costs).any():
            raise PlanningError("every rollout produced an infinite cost")
        nominal += control_update(compute_weights(costs, cfg.lambda_), perts)
    first = PushAction.from_raw(nominal[0])
    shifted = np.empty_like(nominal)
    shifted[:-1] = nominal[1:]
    shifted[-1] = cfg.u_init
    return first, shifted


@dataclass
class PushLogEntry:
    state: BoxState  # pose after the push
    action: PushAction
    goal_cost: float  # goal quadratic at that pose


@dataclass
class EpisodeLog:
    """Closed-loop run record: every executed push plus summary fields."""

    start_state: BoxState
    records: list[PushLogEntry]
    initial_cost: float
    final_cost: float
    pushes: int
    converged: bool
    model_descriptor: str

    def states(self) -> list[BoxState]:
        return [self.start_state] + [r.state for r in self.records]

    def summary_row(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "steps": self.pushes,
        }


def run_mppi(
    model: ForwardModel,
    system: PushSystem,
    cfg: MppiConfig,
    rng: np.random.Generator,
) -> EpisodeLog:
    """Receding-horizon loop: plan, execute the first action on the true
    system, feed the observed state back, until the goal quadratic drops to
    goal_tolerance or the push budget runs out. Non-convergence is a logged
    outcome, not an error."""
    start = system.state
    nominal = np.tile(cfg.u_init, (cfg.horizon, 1))
    records: list[PushLogEntry] = []
    initial_cost = final_cost(start, cfg)
    state = start
    converged = final_cost(state, cfg) <= cfg.goal_tolerance
    while not converged and len(records) < cfg.max_pushes:
        step_cfg = cfg
        if cfg.gamma_off_after is not None and len(records) >= cfg.gamma_off_after and cfg.gamma != 0.0:
            step_cfg = replace(cfg, gamma=0.0)
        action, nominal = mppi_plan_once(model, state, nominal, step_cfg, rng)
        state = system.push(action)
        records.append(PushLogEntry(state, action, final_cost(state, cfg)))
        converged = final_cost(state, cfg) <= cfg.goal_tolerance
    return EpisodeLog(
        start_state=start,
        records=records,
        initial_cost=initial_cost,
        final_cost=final_cost(state, cfg),
        pushes=len(records),
        converged=converged,
        model_descriptor=model.descriptor,
    )


def save_episode_jsonl(log: EpisodeLog, path) -> None:
    """Episode as JSON lines: a header followed by one line per push."""
    header = {
        "format": "pushcraft-episode",
        "model": log.model_descriptor,
        "start": [log.start_state.x, log.start_state.y, log.start_state.theta],
        "initial_cost": log.initial_cost,
        "final_cost": log.final_cost,
        "pushes": log.pushes,
        "converged": log.converged,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in log.records:
            fh.write(
                json.dumps(
                    {
                        "state": [r.state.x, r.state.y, r.state.theta],
                        "action": [r.action.px, r.action.py, r.action.a],
                        "goal_cost": r.goal_cost,
                    }
                )
                + "\n"
            )


def append_summary_csv(path, row: dict, extra: dict | None = None) -> None:
    """Append one summary row (initial cost, final cost, steps) to a CSV,
    writing the header if the file is new."""
    fields = list(extra.keys()) if extra else []
    fields += ["initial_cost", "final_cost", "steps"]
    data = dict(extra or {})
    data.update(row)
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new_file:
            writer.writeheader()
        writer.writerow(data)
