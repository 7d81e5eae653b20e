"""Diagonal-covariance Gaussian hidden Markov model.

Log-space forward/backward, Baum-Welch with a seeded k-means++-style mean
initialization, Viterbi decoding, per-sequence descriptors (mean state
occupancy + mean per-step log-likelihood), and a nearest-prototype
classification head over those descriptors.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateState, EmptyClass, EmptyInput, NonFiniteEmission

VARIANCE_FLOOR = 1e-6
_RESP_FLOOR = 1e-10


@dataclass
class GaussianHmm:
    pi: np.ndarray          # [K] initial distribution
    transitions: np.ndarray  # [K, K] row-stochastic
    means: np.ndarray       # [K, D]
    variances: np.ndarray   # [K, D] diagonal covariances

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        k = self.pi.shape[0]
        if self.transitions.shape != (k, k):
            raise ValueError("transition matrix shape mismatch")
        if abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution must sum to 1")
        if np.any(np.abs(self.transitions.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.variances < VARIANCE_FLOOR * (1 - 1e-12)):
            raise ValueError("variance below the floor")

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "kind": "gaussian-hmm",
            "states": int(self.n_states),
            "emission_dim": int(self.means.shape[1]),
            "pi": self.pi.tolist(),
            "transitions": self.transitions.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GaussianHmm":
        doc = json.loads(text)
        return cls(pi=np.array(doc["pi"]),
                   transitions=np.array(doc["transitions"]),
                   means=np.array(doc["means"]),
                   variances=np.array(doc["variances"]))


@dataclass
class HmmFitSpec:
    n_states: int = 5
    max_iterations: int = 1000
    convergence_threshold: float = 0.001
    convergence_iterations: int = 5
    seed: int = 0


@dataclass
class FitResult:
    model: GaussianHmm
    log_likelihoods: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _check_sequence(seq: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise EmptyInput(f"sequence shape {seq.shape} must be [T>=1, D]")
    if not np.all(np.isfinite(seq)):
        raise NonFiniteEmission("sequence contains non-finite values")
    return seq


def log_emissions(model: GaussianHmm, seq: np.ndarray) -> np.ndarray:
    """Per-step diagonal-Gaussian log densities, [T, K]."""
    seq = _check_sequence(seq)
    diff = seq[:, None, :] - model.means[None, :, :]
    quad = (diff * diff / model.variances[None, :, :]).sum(axis=2)
    norm = (np.log(2 * np.pi * model.variances)).sum(axis=1)
    return -0.5 * (quad + norm[None, :])


def log_forward(model: GaussianHmm,
                seq: np.ndarray) -> tuple[float, np.ndarray]:
    """Log-space forward recursion: exact log P(seq | model) + the table."""
    logb = log_emissions(model, seq)
    with np.errstate(divide="ignore"):
        logpi = np.log(model.pi)
        loga = np.log(model.transitions)
    t_len = logb.shape[0]
    alpha = np.empty_like(logb)
    alpha[0] = logpi + logb[0]
    for t in range(1, t_len):
        alpha[t] = logb[t] + logsumexp(alpha[t - 1][:, None] + loga, axis=0)
    return float(logsumexp(alpha[-1])), alpha


def _log_backward(model: GaussianHmm, logb: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        loga = np.log(model.transitions)
    t_len = logb.shape[0]
    beta = np.zeros_like(logb)
    for t in range(t_len - 2, -1, -1):
        beta[t] = logsumexp(loga + (logb[t + 1] + beta[t + 1])[None, :],
                            axis=1)
    return beta


def posteriors(model: GaussianHmm, seq: np.ndarray) -> np.ndarray:
    """State-occupancy posteriors gamma [T, K]; rows sum to 1."""
    logb = log_emissions(model, seq)
    loglik, alpha = log_forward(model, seq)
    beta = _log_backward(model, logb)
    return np.exp(alpha + beta - loglik)


def viterbi(model: GaussianHmm, seq: np.ndarray) -> tuple[np.ndarray, float]:
    """Most likely state path and its log probability."""
    logb = log_emissions(model, seq)
    with np.errstate(divide="ignore"):
        logpi = np.log(model.pi)
        loga = np.log(model.transitions)
    t_len, k = logb.shape
    delta = logpi + logb[0]
    back = np.zeros((t_len, k), dtype=np.int64)
    for t in range(1, t_len):
        scores = delta[:, None] + loga
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(k)] + logb[t]
    path = np.empty(t_len, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(np.max(delta))


# --- fitting ----------------------------------------------------------------

def _kmeanspp_means(pooled: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++-style spread initialization of state means."""
    n = pooled.shape[0]
    centers = [pooled[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((pooled[:, None, :] - np.array(centers)[None, :, :]) ** 2)
            .sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(pooled[rng.integers(n)])
            continue
        centers.append(pooled[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def _initial_model(pooled: np.ndarray, spec: HmmFitSpec) -> GaussianHmm:
    rng = np.random.default_rng(spec.seed)
    k = spec.n_states
    d = pooled.shape[1]
    means = _kmeanspp_means(pooled, k, rng)
    var = np.maximum(pooled.var(axis=0), VARIANCE_FLOOR)
    return GaussianHmm(
        pi=np.full(k, 1.0 / k),
        transitions=np.full((k, k), 1.0 / k),
        means=means,
        variances=np.tile(var, (k, 1)))


def baum_welch(sequences: list[np.ndarray], spec: HmmFitSpec,
               initial_model: GaussianHmm | None = None) -> FitResult:
    """Expectation-maximization fit; log-likelihood is non-decreasing and
    fitting is deterministic for a fixed seed."""
    sequences = [_check_sequence(s) for s in sequences]
    if not sequences:
        raise EmptyInput("no sequences to fit")
    pooled = np.concatenate(sequences, axis=0)
    if pooled.shape[0] < spec.n_states:
        raise EmptyInput(
            f"{pooled.shape[0]} total steps cannot support "
            f"{spec.n_states} states")
    model = initial_model if initial_model is not None \
        else _initial_model(pooled, spec)
    if model.n_states != spec.n_states:
        raise ValueError("initial model has the wrong number of states")
    rng = np.random.default_rng(spec.seed + 1)   # reseed draws only
    k = spec.n_states
    history: list[float] = []
    calm_streak = 0
    converged = False
    iterations = 0

    for iteration in range(spec.max_iterations):
        iterations = iteration + 1
        # E step
        total_ll = 0.0
        pi_acc = np.zeros(k)
        trans_acc = np.zeros((k, k))
        occ_acc = np.zeros(k)
        mean_acc = np.zeros_like(model.means)
        sq_acc = np.zeros_like(model.variances)
        with np.errstate(divide="ignore"):
            loga = np.log(model.transitions)
        for seq in sequences:
            logb = log_emissions(model, seq)
            loglik, alpha = log_forward(model, seq)
            beta = _log_backward(model, logb)
            gamma = np.exp(alpha + beta - loglik)
            total_ll += loglik
            pi_acc += gamma[0]
            if seq.shape[0] > 1:
                xi = np.exp(alpha[:-1, :, None] + loga[None, :, :]
                            + (logb[1:] + beta[1:])[:, None, :] - loglik)
                trans_acc += xi.sum(axis=0)
            occ_acc += gamma.sum(axis=0)
            mean_acc += gamma.T @ seq
            sq_acc += gamma.T @ (seq * seq)
        history.append(total_ll)

        # convergence bookkeeping (threshold on successive total log-liks)
        if len(history) >= 2 and \
                abs(history[-1] - history[-2]) < spec.convergence_threshold:
            calm_streak += 1
        else:
            calm_streak = 0
        if calm_streak >= spec.convergence_iterations:
            converged = True
            break

        # M step
        starving = occ_acc < _RESP_FLOOR
        pi = pi_acc / pi_acc.sum()
        rows = trans_acc.sum(axis=1, keepdims=True)
        transitions = np.where(rows > 0, trans_acc / np.maximum(rows, 1e-300),
                               1.0 / k)
        occ_safe = np.maximum(occ_acc, 1e-300)[:, None]
        means = mean_acc / occ_safe
        variances = np.maximum(sq_acc / occ_safe - means ** 2, VARIANCE_FLOOR)
        if starving.any():
            for s in np.where(starving)[0]:
                warnings.warn(DegenerateState(
                    f"state {s} lost all responsibility; re-seeding"))
                means[s] = pooled[rng.integers(pooled.shape[0])]
                variances[s] = np.maximum(pooled.var(axis=0), VARIANCE_FLOOR)
                pi[s] = 1.0 / k
                transitions[s] = 1.0 / k
            pi = pi / pi.sum()
            transitions = transitions / transitions.sum(axis=1, keepdims=True)
        model = GaussianHmm(pi=pi, transitions=transitions, means=means,
                            variances=variances)
    return FitResult(model=model, log_likelihoods=history,
                     iterations=iterations, converged=converged)


# --- descriptors and the prototype head -------------------------------------

def hmm_embed(model: GaussianHmm, seq: np.ndarray) -> np.ndarray:
    """Sequence descriptor: mean posterior occupancy (K) plus the per-step
    mean log-likelihood (1)."""
    gamma = posteriors(model, seq)
    loglik, _ = log_forward(model, seq)
    occupancy = gamma.mean(axis=0)
    occupancy = occupancy / occupancy.sum()
    return np.concatenate([occupancy, [loglik / seq.shape[0]]])


def prototype_classify(descriptors_train: np.ndarray,
                       labels_train: np.ndarray,
                       descriptors_test: np.ndarray,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype labels and signed scores.

    Score = distance(prototype 0) - distance(prototype 1): positive means
    closer to class 1.  Exact ties resolve to class 0 deterministically.
    """
    labels_train = np.asarray(labels_train)
    protos = []
    for cls in (0, 1):
        members = descriptors_train[labels_train == cls]
        if members.shape[0] == 0:
            raise EmptyClass(f"no training descriptors for class {cls}")
        protos.append(members.mean(axis=0))
    d0 = np.linalg.norm(descriptors_test - protos[0], axis=1)
    d1 = np.linalg.norm(descriptors_test - protos[1], axis=1)
    scores = d0 - d1
    labels = (scores > 0).astype(np.int64)
    return labels, scores
