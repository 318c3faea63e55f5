"""Episodic training loop with importance-weighted, ESS-normalized losses.

Each iteration samples a mini-batch of episodes from the proposal, scores
one NLL per episode, weights it by the target/proposal density ratio at
the episode's difficulty, and minimizes ``sum(w * NLL) / ESS`` with Adam.
In online mode the difficulty model is advanced with every episode's
difficulty, in iteration order, after the batch's weights were computed
from the model snapshot; in offline mode a frozen proposal network scores
difficulties and the model never moves.

Artifacts: ``history.csv`` (per-iteration: iteration, loss, ess, mu,
sigma2, fallback, val_accuracy), ``episodes.csv`` (per-episode: iteration,
episode, omega, weight, nll), ``result.json``, and checkpoints in the
learner format.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels, learners, sampling, streams
from .data import BaseDataset, sample_episode
from .sampling import DifficultyModel, SamplingScheme

logger = logging.getLogger(__name__)


class TrainerError(Exception):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 16
    learning_rate: float = 1e-3
    validation_interval: int = 1000
    validation_episodes: int = 1000
    test_episodes: int = 1000
    way: int = 5
    shot: int = 1
    query: int = 15
    seed: int = 0

    def __post_init__(self):
        positive = {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "validation_interval": self.validation_interval,
            "validation_episodes": self.validation_episodes,
            "test_episodes": self.test_episodes,
            "way": self.way,
            "shot": self.shot,
            "query": self.query,
        }
        for name, value in positive.items():
            if value <= 0:
                raise TrainerError(f"{name} must be positive, got {value}")
        if self.iterations < 0:
            raise TrainerError("iterations must be non-negative")
        if self.iterations % self.validation_interval != 0:
            raise TrainerError(
                f"validation_interval {self.validation_interval} must divide "
                f"iterations {self.iterations}"
            )


@dataclass
class EpisodeStat:
    omega: float
    weight: float
    nll: float


@dataclass
class TrainRecord:
    iteration: int
    batch_omega_mean: float
    episodes: list[EpisodeStat]
    ess: float
    loss: float
    mu: float
    sigma2: float
    fallback: bool
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    params: learners.LearnerParams
    best_iteration: int
    best_val_accuracy: float | None
    history: list[TrainRecord]
    checkpoints: list[tuple[int, learners.LearnerParams, float]] = field(default_factory=list)
    aborted: bool = False
    diagnostic: str | None = None


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, tensors) -> "AdamState":
        return cls(
            m=[np.zeros(t.size) for t in tensors],
            v=[np.zeros(t.size) for t in tensors],
        )


def adam_step(
    tensors,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place on the leaf tensors."""
    if len(tensors) != len(state.m):
        raise TrainerError("adam state does not match parameter list")
    state.t += 1
    for i, (t, g) in enumerate(zip(tensors, grads)):
        g_flat = np.ascontiguousarray(g.data.reshape(-1) if isinstance(g, ad.Tensor) else np.reshape(g, -1))
        if g_flat.shape != (t.size,):
            raise TrainerError(f"gradient shape {g_flat.shape} does not match parameter {t.shape}")
        if not np.all(np.isfinite(g_flat)):
            raise TrainerError("non-finite gradient")
        p2, m2, v2 = kernels.adam_update(
            np.ascontiguousarray(t.data.reshape(-1)), g_flat, state.m[i], state.v[i],
            state.t, lr, beta1, beta2, eps,
        )
        t.data = p2.reshape(t.shape)
        state.m[i] = m2
        state.v[i] = v2


def weighted_batch_loss(nll_tensors, weights) -> tuple[ad.Tensor, float]:
    """(1/ESS) * sum_i w_i * NLL_i as a graph tensor, plus the ESS."""
    ess = sampling.effective_sample_size(weights)
    total = None
    for w, nll in zip(weights, nll_tensors):
        term = ad.smul(float(w), nll)
        total = term if total is None else ad.add(total, term)
    return ad.smul(1.0 / ess, total), ess


def _curriculum_progress(iteration: int, total: int) -> float:
    if total <= 1:
        return 1.0
    return (iteration - 1) / (total - 1)


def evaluate(
    params: learners.LearnerParams,
    dataset: BaseDataset,
    n: int,
    k: int,
    q: int,
    num_episodes: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Mean episode accuracy and 95% CI half-width (1.96 * std / sqrt(N))."""
    if num_episodes < 2:
        raise TrainerError("evaluate: need at least 2 episodes")
    accs = np.empty(num_episodes)
    with ad.no_grad():
        for i in range(num_episodes):
            ep = sample_episode(dataset, n, k, q, rng)
            accs[i] = learners.episode_accuracy(params, ep)
    ci = 1.96 * float(accs.std(ddof=1)) / np.sqrt(num_episodes)
    return float(accs.mean()), ci


def score_difficulties(
    params: learners.LearnerParams, episodes
) -> list[float]:
    """Difficulty of each episode under the given (frozen) parameters."""
    out = []
    with ad.no_grad():
        for ep in episodes:
            out.append(learners.episode_difficulty(learners.episode_log_likelihoods(params, ep)))
    return out


def train(
    config: TrainConfig,
    params: learners.LearnerParams,
    train_dataset: BaseDataset,
    val_dataset: BaseDataset,
    scheme: SamplingScheme,
    difficulty_model: DifficultyModel | None = None,
    proposal_params: learners.LearnerParams | None = None,
) -> TrainResult:
    """Run the episodic training loop and return the best-validation
    parameters with the full history."""
    if scheme.mode == "offline":
        if proposal_params is None:
            raise TrainerError("offline mode requires proposal parameters")
        if difficulty_model is None or not difficulty_model.ready:
            raise TrainerError("offline mode requires a ready difficulty model")
    if difficulty_model is None:
        difficulty_model = DifficultyModel()
    if params.way is not None and params.way != config.way:
        raise TrainerError(f"learner head width {params.way} != config way {config.way}")

    train_rng = streams.stream(config.seed, streams.TRAIN_EPISODES)
    val_rng = streams.stream(config.seed, streams.VAL_EPISODES)

    history: list[TrainRecord] = []
    checkpoints: list[tuple[int, learners.LearnerParams, float]] = []
    best_params = learners.clone_params(params)
    best_iteration = 0
    best_accuracy: float | None = None
    tensors = params.trainable_tensors()
    adam = AdamState.for_params(tensors)

    for iteration in range(1, config.iterations + 1):
        episodes = [
            sample_episode(train_dataset, config.way, config.shot, config.query, train_rng)
            for _ in range(config.batch_size)
        ]
        nll_tensors = [learners.episode_nll(params, ep) for ep in episodes]
        nll_values = [t.item() for t in nll_tensors]
        if scheme.mode == "offline":
            omegas = score_difficulties(proposal_params, episodes)
        else:
            omegas = nll_values

        step_scheme = scheme.at_progress(_curriculum_progress(iteration, config.iterations))
        weights = []
        for omega in omegas:
            w, underflow = sampling.importance_weight(omega, step_scheme, difficulty_model)
            weights.append(w)
            if underflow:
                logger.warning(
                    "iteration %d: proposal density underflow at difficulty %.6g", iteration, omega
                )
        fallback = False
        if all(w == 0.0 for w in weights):
            weights = [1.0] * len(weights)
            fallback = True
            logger.warning("iteration %d: all-zero weights, falling back to unit weights", iteration)

        loss_tensor, ess = weighted_batch_loss(nll_tensors, weights)
        loss_value = loss_tensor.item()
        if not np.isfinite(loss_value):
            diagnostic = f"non-finite loss at iteration {iteration}"
            logger.error(diagnostic)
            return TrainResult(
                params=best_params,
                best_iteration=best_iteration,
                best_val_accuracy=best_accuracy,
                history=history,
                checkpoints=checkpoints,
                aborted=True,
                diagnostic=diagnostic,
            )
        grads = ad.grad(loss_tensor, tensors)
        adam_step(tensors, grads, adam, config.learning_rate)

        if scheme.mode == "online":
            for omega in omegas:
                sampling.update_online(difficulty_model, omega)

        record = TrainRecord(
            iteration=iteration,
            batch_omega_mean=float(np.mean(omegas)),
            episodes=[
                EpisodeStat(omega=o, weight=w, nll=nv)
                for o, w, nv in zip(omegas, weights, nll_values)
            ],
            ess=ess,
            loss=loss_value,
            mu=difficulty_model.mu if difficulty_model.ready else float("nan"),
            sigma2=difficulty_model.var if difficulty_model.ready else float("nan"),
            fallback=fallback,
        )
        if iteration % config.validation_interval == 0:
            acc, _ = evaluate(
                params, val_dataset, config.way, config.shot, config.query,
                config.validation_episodes, val_rng,
            )
            record.val_accuracy = acc
            snapshot = learners.clone_params(params)
            checkpoints.append((iteration, snapshot, acc))
            if best_accuracy is None or acc > best_accuracy:
                best_accuracy = acc
                best_iteration = iteration
                best_params = snapshot
        history.append(record)

    return TrainResult(
        params=best_params,
        best_iteration=best_iteration,
        best_val_accuracy=best_accuracy,
        history=history,
        checkpoints=checkpoints,
    )


def _format(value: float) -> str:
    return repr(float(value))


def write_history_csv(history, path) -> None:
    lines = ["iteration,loss,ess,mu,sigma2,fallback,val_accuracy"]
    for rec in history:
        mu = "" if np.isnan(rec.mu) else _format(rec.mu)
        sigma2 = "" if np.isnan(rec.sigma2) else _format(rec.sigma2)
        val = "" if rec.val_accuracy is None else _format(rec.val_accuracy)
        lines.append(
            f"{rec.iteration},{_format(rec.loss)},{_format(rec.ess)},{mu},{sigma2},"
            f"{int(rec.fallback)},{val}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_episodes_csv(history, path) -> None:
    lines = ["iteration,episode,omega,weight,nll"]
    for rec in history:
        for idx, ep in enumerate(rec.episodes):
            lines.append(
                f"{rec.iteration},{idx},{_format(ep.omega)},{_format(ep.weight)},{_format(ep.nll)}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_episodes_csv(path) -> list[list[tuple[float, float]]]:
    """Per-iteration (weight, nll) batches from an episodes.csv file."""
    batches: dict[int, list[tuple[float, float]]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "iteration,episode,omega,weight,nll":
            raise TrainerError(f"unexpected episodes.csv header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            it, _, _, weight, nll = line.split(",")
            batches.setdefault(int(it), []).append((float(weight), float(nll)))
    return [batches[k] for k in sorted(batches)]


def write_result_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
