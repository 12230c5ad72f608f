"""Synchronous federated round loop.

Each round: subsample clients, run local epochs on each (sharpness-aware when
configured), collect the updates that survived, aggregate with the chosen
strategy, and in the late phase absorb the new global model into the running
checkpoint average on the configured cycle. Clients run sequentially here,
but every stochastic choice draws from a stream keyed by (seed, round,
client, attempt), so a parallel executor would produce identical results.

A round whose completion fraction falls below the configured minimum is
retried with a fresh client sample; too many failed attempts abort the run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregate import (ClientUpdate, SwaState, apply_strategy, make_strategy,
                        swa_due, swa_update)
from .mae import MaeModel
from .optim import LrSchedule, SamConfig, lr_for_round, make_optimizer, sam_step
from .seeding import rng_for


class RoundAbortedError(RuntimeError):
    """A round could not reach the minimum completion fraction."""


@dataclass(frozen=True)
class FedConfig:
    """Every protocol hyperparameter of one federated run."""

    rounds: int = 40
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    schedule: LrSchedule = field(default_factory=LrSchedule)
    sam: SamConfig | None = None
    strategy: str = "fedavg"
    strategy_params: dict = field(default_factory=dict)
    swa_enabled: bool = True
    min_completion_fraction: float = 0.5
    max_round_retries: int = 3
    inner_optimizer: str = "sgd"
    bytes_per_param: int = 8

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must be in (0, 1]")
        if not 0.0 <= self.min_completion_fraction <= 1.0:
            raise ValueError("min_completion_fraction must be in [0, 1]")
        if self.schedule.total_rounds != self.rounds:
            raise ValueError("schedule.total_rounds must equal rounds")


@dataclass
class RoundRecord:
    t: int
    lr: float
    sampled: list[int]
    completed: int
    mean_local_loss: float
    eval_mse: float | None
    threshold_counts: list[int] | None
    bytes_up: int
    bytes_down: int
    cumulative_bytes: int
    wall_time: float
    optimizer_steps: int
    gradient_evals: int


@dataclass
class FedRunResult:
    final_weights: np.ndarray
    swa_weights: np.ndarray
    records: list[RoundRecord]
    optimizer_steps: int
    gradient_evals: int
    warnings: list[str]


def sample_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, ceil(fraction * K)) ids."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    size = max(1, int(np.ceil(fraction * n_clients)))
    return sorted(int(i) for i in rng.choice(n_clients, size=size, replace=False))


def collect_with_failures(expected_ids: list[int], updates: list[ClientUpdate],
                          min_completion_fraction: float) -> tuple[list[ClientUpdate], bool]:
    """Keep completed updates; signal whether the round may proceed.

    Proceeds iff completed/expected >= the threshold (a threshold of 0
    disables the check). Aggregation itself still needs at least one
    completed update.
    """
    done = [u for u in updates if u.completed]
    if not expected_ids:
        return done, False
    ok = len(done) / len(expected_ids) >= min_completion_fraction
    return done, ok


def sample_batch_masks(rng: np.random.Generator, batch: int,
                       n_patches: int, n_masked: int) -> np.ndarray:
    """(batch, n_masked) sorted unique indices, one mask per image."""
    order = np.argsort(rng.random((batch, n_patches)), axis=1)
    return np.sort(order[:, :n_masked], axis=1)


def local_train(model: MaeModel, global_weights: np.ndarray, images: np.ndarray,
                config: FedConfig, lr: float, rng: np.random.Generator,
                client_id: int = 0) -> ClientUpdate:
    """E local epochs of minibatch updates starting from the global weights.

    A non-finite loss anywhere marks the update as not completed (the
    simulation's stand-in for a crashed client) rather than raising.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("client dataset is empty")
    arch = model.arch
    theta = global_weights.copy()
    inner = make_optimizer(config.inner_optimizer)
    final_epoch_losses: list[float] = []

    try:
        # overflow inside a crashing client is expected; detection is explicit
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(config.local_epochs):
                order = rng.permutation(n)
                last = epoch == config.local_epochs - 1
                for start in range(0, n, config.batch_size):
                    batch = images[order[start:start + config.batch_size]]
                    masks = sample_batch_masks(rng, batch.shape[0],
                                               arch.n_patches, arch.n_masked)

                    def loss_and_grad(p):
                        return model.loss_and_grad(p, batch, masks)

                    if config.sam is not None:
                        theta, loss = sam_step(theta, loss_and_grad, inner,
                                               config.sam, lr)
                    else:
                        loss, grad = loss_and_grad(theta)
                        if not np.isfinite(loss):
                            raise FloatingPointError(f"non-finite loss {loss}")
                        theta = inner.step(theta, grad, lr)
                    if last:
                        final_epoch_losses.append(loss)
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("non-finite weights after local training")
    except FloatingPointError:
        return ClientUpdate(client_id, global_weights.copy(), n,
                            local_loss=float("nan"), completed=False)

    return ClientUpdate(client_id, theta, n,
                        local_loss=float(np.mean(final_epoch_losses)))


def _steps_per_round(config: FedConfig, client_sizes: list[int]) -> int:
    per_epoch = sum(int(np.ceil(n / config.batch_size)) for n in client_sizes)
    return per_epoch * config.local_epochs


def run_federated_training(config: FedConfig, client_datasets: list[np.ndarray],
                           model: MaeModel, init_weights: np.ndarray,
                           master_seed: int, eval_fn=None) -> FedRunResult:
    """Execute the full round loop; returns final and checkpoint-averaged weights.

    `eval_fn(weights) -> (masked MSE, threshold counts)` is called on each
    round's aggregated model when provided; its results land in the records.
    """
    n_clients = len(client_datasets)
    if n_clients == 0:
        raise ValueError("need at least one client")
    theta = init_weights.copy()
    strategy = make_strategy(config.strategy, theta.size, config.strategy_params)
    swa_state = SwaState(theta.copy(), 0)
    sched = config.schedule
    records: list[RoundRecord] = []
    warnings: list[str] = []
    total_steps = total_grad_evals = 0
    cumulative_bytes = 0
    grad_evals_per_step = 2 if (config.sam is not None and config.sam.rho > 0) else 1
    param_bytes = theta.size * config.bytes_per_param

    for t in range(config.rounds):
        started = time.perf_counter()
        if t < sched.swa_start_fraction * config.rounds and config.swa_enabled:
            swa_state = SwaState(theta.copy(), 0)
        lr = lr_for_round(sched, t)

        accepted: list[ClientUpdate] | None = None
        sampled: list[int] = []
        for attempt in range(config.max_round_retries + 1):
            sampled = sample_clients(n_clients, config.client_fraction,
                                     rng_for(master_seed, "sample", t, attempt))
            updates = []
            for k in sampled:
                rng = rng_for(master_seed, "local", t, k, attempt)
                updates.append(local_train(model, theta, client_datasets[k],
                                           config, lr, rng, client_id=k))
            done, ok = collect_with_failures(sampled, updates,
                                             config.min_completion_fraction)
            if ok and done:
                accepted = done
                break
            warnings.append(f"round {t} attempt {attempt}: "
                            f"{len(done)}/{len(sampled)} clients completed")
        if accepted is None:
            raise RoundAbortedError(
                f"round {t} failed {config.max_round_retries + 1} attempts: "
                f"completion fraction below {config.min_completion_fraction}")

        steps = _steps_per_round(config, [len(client_datasets[k]) for k in sampled])
        total_steps += steps
        total_grad_evals += steps * grad_evals_per_step

        theta = apply_strategy(strategy, theta, accepted)
        if config.swa_enabled and swa_due(t, config.rounds, sched.swa_start_fraction, sched.cycle):
            swa_state = swa_update(swa_state, theta)

        eval_mse, counts = (None, None)
        if eval_fn is not None:
            eval_mse, counts = eval_fn(theta)

        bytes_down = len(sampled) * param_bytes
        bytes_up = len(accepted) * param_bytes
        cumulative_bytes += bytes_up + bytes_down
        records.append(RoundRecord(
            t=t, lr=lr, sampled=sampled, completed=len(accepted),
            mean_local_loss=float(np.mean([u.local_loss for u in accepted])),
            eval_mse=eval_mse, threshold_counts=counts,
            bytes_up=bytes_up, bytes_down=bytes_down,
            cumulative_bytes=cumulative_bytes,
            wall_time=time.perf_counter() - started,
            optimizer_steps=steps, gradient_evals=steps * grad_evals_per_step))

    warnings.extend(strategy.warnings)
    return FedRunResult(theta, swa_state.theta_swa, records,
                        total_steps, total_grad_evals, warnings)


ROUND_LOG_HEADER = [
    "t", "strategy", "lr", "sampled_ids", "completed", "mean_local_loss",
    "eval_masked_mse", "thre_0.3", "thre_0.1", "thre_0.05", "thre_0.01",
    "bytes_up", "bytes_down", "cumulative_bytes",
]


def write_round_log(path, records: list[RoundRecord], strategy: str) -> None:
    """One CSV row per round; wall time deliberately excluded so reruns match."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUND_LOG_HEADER)
        for r in records:
            counts = r.threshold_counts or ["", "", "", ""]
            writer.writerow([
                r.t, strategy, repr(r.lr), ";".join(str(i) for i in r.sampled),
                r.completed, repr(r.mean_local_loss),
                "" if r.eval_mse is None else repr(r.eval_mse),
                *counts, r.bytes_up, r.bytes_down, r.cumulative_bytes,
            ])
