"""Mixture density networks and their deep ensemble.

Each member is a small tanh MLP whose output layer parameterises a Gaussian
mixture over the 3 push-displacement dimensions: mixture logits (softmax),
component means (linear) and component scales (exponential of a log-scale
head). Members are trained by minibatch Adam on the mixture negative log
likelihood, augmented with fast-gradient-sign adversarial examples, and the
ensemble's predictive mean and variance combine member moments so that both
output noise and member disagreement show up in the variance.

All forward/backward passes are plain numpy; gradients are exact reverse-mode
derivatives of the loss (checked against finite differences in the tests).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import OUTPUT_DIM, Normalization, Prediction, dataset_arrays, model_input
from .sim import BoxState, PushAction, PushDataset

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Member training settings."""

    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    adversarial_eps: float = 0.005
    hidden_layers: tuple[int, ...] = (20, 20, 20)
    n_components: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if self.epochs < 1 or self.batch_size < 1 or self.n_components < 1:
            raise ValueError("epochs, batch_size and n_components must be positive")
        if self.learning_rate <= 0 or self.adversarial_eps < 0:
            raise ValueError("learning_rate must be positive, adversarial_eps nonnegative")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")


@dataclass
class MdnParams:
    """Weights and biases of one mixture density network. The final layer
    holds, in order, n_components logits, n_components * out_dim means and
    n_components * out_dim log scales."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_components: int
    out_dim: int = OUTPUT_DIM
    loss_history: list[float] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_layers(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def copy(self) -> "MdnParams":
        return MdnParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.n_components,
            self.out_dim,
            list(self.loss_history),
        )


def init_params(
    input_dim: int,
    hidden_layers: tuple[int, ...],
    n_components: int,
    rng: np.random.Generator,
    out_dim: int = OUTPUT_DIM,
) -> MdnParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    sizes = [input_dim, *hidden_layers, n_components * (1 + 2 * out_dim)]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MdnParams(weights, biases, n_components, out_dim)


def _split_heads(params: MdnParams, out: np.ndarray):
    K, D = params.n_components, params.out_dim
    logits = out[:, :K]
    mu = out[:, K : K + K * D].reshape(-1, K, D)
    log_sigma = out[:, K + K * D :].reshape(-1, K, D)
    return logits, mu, log_sigma


def _forward_cache(params: MdnParams, H: np.ndarray):
    """Batched forward pass. Returns the head pre-activations plus the list of
    layer activations needed for backprop (activations[0] is the input)."""
    acts = [H]
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        acts.append(np.tanh(acts[-1] @ W + b))
    out = acts[-1] @ params.weights[-1] + params.biases[-1]
    logits, mu, log_sigma = _split_heads(params, out)
    return logits, mu, log_sigma, acts


def mdn_forward(params: MdnParams, h) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixture parameters (pi, mu, sigma) for a single input vector h."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 1 or h.shape[0] != params.input_dim:
        raise ValueError(
            f"input has shape {h.shape}, network expects ({params.input_dim},)"
        )
    logits, mu, log_sigma, _ = _forward_cache(params, h[None, :])
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    pi = expl / expl.sum(axis=1, keepdims=True)
    return pi[0], mu[0], np.exp(log_sigma[0])


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]


def mdn_nll(mixture, target) -> float:
    """Negative log likelihood of a target under mixture = (pi, mu, sigma),
    evaluated with log-sum-exp stabilisation."""
    pi, mu, sigma = mixture
    target = np.asarray(target, dtype=float)
    z = (target[None, :] - mu) / sigma
    comp = np.log(pi) + (-0.5 * LOG_2PI - np.log(sigma) - 0.5 * z**2).sum(axis=1)
    m = comp.max()
    return float(-(m + np.log(np.exp(comp - m).sum())))


@dataclass
class MdnGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, factor: float) -> "MdnGradients":
        return MdnGradients([w * factor for w in self.weights], [b * factor for b in self.biases])


def _nll_and_grads(params: MdnParams, H: np.ndarray, T: np.ndarray):
    """Sum of per-example NLLs over the batch, parameter gradients of that sum
    and the per-example gradients with respect to the inputs. Overflow is left
    to produce non-finite values; callers check the loss."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _nll_and_grads_impl(params, H, T)


def _nll_and_grads_impl(params: MdnParams, H: np.ndarray, T: np.ndarray):
    logits, mu, log_sigma, acts = _forward_cache(params, H)
    sigma = np.exp(log_sigma)
    z = (T[:, None, :] - mu) / sigma
    log_pi = _log_softmax(logits)
    comp = log_pi + (-0.5 * LOG_2PI - log_sigma - 0.5 * z**2).sum(axis=2)
    ll = _logsumexp(comp)
    loss_sum = float(-(ll.sum()))

    # Backward pass for the summed loss.
    resp = np.exp(comp - ll[:, None])
    pi = np.exp(log_pi)
    d_logits = pi - resp
    d_mu = -resp[:, :, None] * z / sigma
    d_log_sigma = resp[:, :, None] * (1.0 - z**2)
    B, K, D = d_mu.shape
    d_out = np.concatenate(
        [d_logits, d_mu.reshape(B, K * D), d_log_sigma.reshape(B, K * D)], axis=1
    )

    dW = [np.empty(0)] * len(params.weights)
    db = [np.empty(0)] * len(params.biases)
    g = d_out
    dW[-1] = acts[-1].T @ g
    db[-1] = g.sum(axis=0)
    g = g @ params.weights[-1].T
    for layer in range(len(params.weights) - 2, -1, -1):
        g = g * (1.0 - acts[layer + 1] ** 2)
        dW[layer] = acts[layer].T @ g
        db[layer] = g.sum(axis=0)
        g = g @ params.weights[layer].T
    return loss_sum, MdnGradients(dW, db), g


def nll_gradient(params: MdnParams, h, target) -> MdnGradients:
    """Exact gradient of mdn_nll(mdn_forward(params, h), target) with respect
    to every weight and bias."""
    h = np.asarray(h, dtype=float)
    target = np.asarray(target, dtype=float)
    _, grads, _ = _nll_and_grads(params, h[None, :], target[None, :])
    return grads


def input_gradient(params: MdnParams, h, target) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    target = np.asarray(target, dtype=float)
    _, _, g_in = _nll_and_grads(params, h[None, :], target[None, :])
    return g_in[0]


def adversarial_example(params: MdnParams, h, target, eps: float) -> np.ndarray:
    """Fast-gradient-sign perturbation of the (standardised) input: the input
    moves eps along the sign of the loss gradient."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    h = np.asarray(h, dtype=float)
    return h + eps * np.sign(input_gradient(params, h, target))


class AdamOptimizer:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, arrays, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            a -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _train_standardized(
    Hn: np.ndarray, Yn: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> MdnParams:
    """Minibatch Adam on the average NLL over clean plus adversarial examples,
    all in standardised units."""
    n = Hn.shape[0]
    params = init_params(Hn.shape[1], cfg.hidden_layers, cfg.n_components, rng)
    flat = params.weights + params.biases
    adam = AdamOptimizer(flat, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            Hb, Yb = Hn[idx], Yn[idx]
            loss_sum, grads, g_in = _nll_and_grads(params, Hb, Yb)
            count = len(idx)
            if cfg.adversarial_eps > 0:
                H_adv = Hb + cfg.adversarial_eps * np.sign(g_in)
                adv_sum, adv_grads, _ = _nll_and_grads(params, H_adv, Yb)
                loss_sum += adv_sum
                grads = MdnGradients(
                    [a + b for a, b in zip(grads.weights, adv_grads.weights)],
                    [a + b for a, b in zip(grads.biases, adv_grads.biases)],
                )
                count *= 2
            step_loss = loss_sum / count
            if not math.isfinite(step_loss):
                raise TrainingDivergedError(
                    f"loss became {step_loss} during training; "
                    f"reduce learning_rate (currently {cfg.learning_rate})"
                )
            adam.step(flat, [g / count for g in grads.weights + grads.biases])
            epoch_loss += step_loss * len(idx)
            seen += len(idx)
        params.loss_history.append(epoch_loss / seen)
    return params


def train_member(
    dataset: PushDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    normalization: Normalization | None = None,
) -> MdnParams:
    """Train a single MDN on a push dataset. The per-epoch mean training loss
    is recorded on the returned parameters."""
    H, Y = dataset_arrays(dataset)
    if normalization is None:
        normalization = Normalization.from_data(H, Y)
    return _train_standardized(normalization.normalize_in(H), normalization.normalize_out(Y), cfg, rng)


@dataclass
class Ensemble:
    """A deep ensemble of MDNs sharing one input/target standardisation."""

    members: list[MdnParams]
    normalization: Normalization
    frame_mode: str = "object"

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        dims = {(m.input_dim, m.out_dim, m.n_components) for m in self.members}
        if len(dims) != 1:
            raise ValueError("ensemble members disagree on architecture")

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim


def worker_count() -> int:
    """Worker bound from PUSHCRAFT_THREADS: unset or 0 means one worker per
    CPU, any other value is used directly."""
    raw = os.environ.get("PUSHCRAFT_THREADS", "").strip()
    if raw == "":
        n = 0
    else:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"PUSHCRAFT_THREADS={raw!r} is not an integer") from exc
    if n < 0:
        raise ValueError("PUSHCRAFT_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _member_job(args) -> MdnParams:
    Hn, Yn, cfg, seed = args
    return _train_standardized(Hn, Yn, cfg, np.random.default_rng(seed))


def train_ensemble(dataset: PushDataset, cfg: TrainConfig, n_members: int, seed: int) -> Ensemble:
    """Train n_members MDNs with per-member seeds (seed + member index) for
    weight initialisation and minibatch shuffling. Members are independent, so
    they may train in parallel worker processes; results are identical either
    way."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    H, Y = dataset_arrays(dataset)
    norm = Normalization.from_data(H, Y)
    Hn, Yn = norm.normalize_in(H), norm.normalize_out(Y)
    jobs = [(Hn, Yn, cfg, seed + m) for m in range(n_members)]
    workers = min(worker_count(), n_members)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(_member_job, jobs))
    else:
        members = [_member_job(job) for job in jobs]
    return Ensemble(members, norm, frame_mode=dataset.frame_mode)


def _member_moments(params: MdnParams, Hn: np.ndarray):
    """Collapse each member's mixture to per-dimension moments:
    m = sum_k pi_k mu_k, v = sum_k pi_k (sigma_k^2 + mu_k^2) - m^2."""
    logits, mu, log_sigma, _ = _forward_cache(params, Hn)
    pi = np.exp(_log_softmax(logits))[:, :, None]
    sigma2 = np.exp(2.0 * log_sigma)
    m = (pi * mu).sum(axis=1)
    second = (pi * (sigma2 + mu**2)).sum(axis=1)
    return m, second - m**2


def ensemble_moments(ens: Ensemble, Hn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of the ensemble in standardised units:
    the mean of member means, and the mean of member second moments minus the
    squared ensemble mean (so member disagreement inflates the variance)."""
    means = np.empty((ens.n_members, Hn.shape[0], OUTPUT_DIM))
    variances = np.empty_like(means)
    for i, member in enumerate(ens.members):
        means[i], variances[i] = _member_moments(member, Hn)
    mu_hat = means.mean(axis=0)
    var_hat = (variances + means**2).mean(axis=0) - mu_hat**2
    if var_hat.min() < -1e-12:
        raise RuntimeError(f"ensemble variance {var_hat.min()} below numerical tolerance")
    return mu_hat, np.maximum(var_hat, 0.0)


def ensemble_predict_batch(ens: Ensemble, H: np.ndarray):
    """Batched prediction in physical units: (means, variances, sigma scalars)
    for raw model inputs H of shape (n, input_dim)."""
    Hn = ens.normalization.normalize_in(np.asarray(H, dtype=float))
    mu_n, var_n = ensemble_moments(ens, Hn)
    sigma = np.sqrt(var_n.sum(axis=1))
    return (
        ens.normalization.denormalize_mean(mu_n),
        ens.normalization.denormalize_variance(var_n),
        sigma,
    )


def ensemble_predict(ens: Ensemble, state: BoxState, action: PushAction) -> Prediction:
    """Predict the object-frame displacement of one push with the full
    ensemble: mean of member means, variance from the law of total variance,
    de-standardised to physical units."""
    H = model_input(state, action, ens.frame_mode)[None, :]
    mean, var, sigma = ensemble_predict_batch(ens, H)
    return Prediction(mean[0], var[0], float(sigma[0]))


def _params_to_dict(p: MdnParams) -> dict:
    return {
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
        "n_components": p.n_components,
        "out_dim": p.out_dim,
        "loss_history": p.loss_history,
    }


def _params_from_dict(d: dict) -> MdnParams:
    return MdnParams(
        [np.array(w, dtype=float) for w in d["weights"]],
        [np.array(b, dtype=float) for b in d["biases"]],
        int(d["n_components"]),
        int(d["out_dim"]),
        list(d.get("loss_history", [])),
    )


def save_ensemble(ens: Ensemble, path) -> None:
    doc = {
        "format": "pushcraft-emdn",
        "version": 1,
        "frame_mode": ens.frame_mode,
        "normalization": ens.normalization.to_dict(),
        "members": [_params_to_dict(m) for m in ens.members],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_ensemble(path) -> Ensemble:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "pushcraft-emdn":
        raise ValueError(f"{path} is not a serialized ensemble")
    return Ensemble(
        [_params_from_dict(m) for m in doc["members"]],
        Normalization.from_dict(doc["normalization"]),
        frame_mode=doc["frame_mode"],
    )
