"""Server-side aggregation strategies and checkpoint averaging.

All strategies consume `ClientUpdate` messages (full post-training weight
vectors plus example counts and local loss) and emit the next global weight
vector. Updates are sorted by client id before any computation, so results
are invariant to arrival order; ties in the selection rule break toward the
lowest client id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClientUpdate:
    """Wire message a client returns after local training."""

    client_id: int
    weights: np.ndarray
    num_examples: int
    local_loss: float
    completed: bool = True

    def __post_init__(self):
        if self.completed and self.num_examples <= 0:
            raise ValueError("completed update must carry a positive example count")


def _sorted_completed(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    done = sorted((u for u in updates if u.completed), key=lambda u: u.client_id)
    if not done:
        raise ValueError("no completed updates to aggregate")
    lengths = {u.weights.size for u in done}
    if len(lengths) != 1:
        raise ValueError(f"update vectors disagree in length: {sorted(lengths)}")
    return done


def aggregate_fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Example-count-weighted coordinate-wise mean."""
    done = _sorted_completed(updates)
    total = sum(u.num_examples for u in done)
    out = np.zeros_like(done[0].weights)
    for u in done:
        out += (u.num_examples / total) * u.weights
    return out


def aggregate_fedavgm(updates: list[ClientUpdate], current: np.ndarray,
                      velocity: np.ndarray, beta: float,
                      server_lr: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Server momentum on the pseudo-gradient current - fedavg(updates)."""
    delta = current - aggregate_fedavg(updates)
    velocity = beta * velocity + delta
    return current - server_lr * velocity, velocity


def aggregate_fedadam(updates: list[ClientUpdate], current: np.ndarray,
                      m: np.ndarray, v: np.ndarray, beta1: float = 0.9,
                      beta2: float = 0.99, tau: float = 1e-3,
                      server_lr: float = 0.1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adaptive server update toward the average of client models."""
    delta = aggregate_fedavg(updates) - current
    m = beta1 * m + (1 - beta1) * delta
    v = beta2 * v + (1 - beta2) * delta * delta
    return current + server_lr * m / (np.sqrt(v) + tau), m, v


def aggregate_median(updates: list[ClientUpdate], trim_fraction: float = 0.0,
                     mode: str = "median") -> np.ndarray:
    """Coordinate-wise median, or trimmed mean dropping floor(trim*n) per end."""
    done = _sorted_completed(updates)
    stacked = np.stack([u.weights for u in done])
    if mode == "median":
        return np.median(stacked, axis=0)
    if mode != "trimmed_mean":
        raise ValueError(f"unknown median mode {mode!r}")
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must be in [0, 0.5)")
    n = stacked.shape[0]
    k = int(np.floor(trim_fraction * n))
    if 2 * k >= n:
        raise ValueError(f"trimming {k} per end removes all {n} values")
    ordered = np.sort(stacked, axis=0)
    return ordered[k:n - k].mean(axis=0)


@dataclass
class QFedAvgResult:
    weights: np.ndarray
    fell_back_to_fedavg: bool = False


def aggregate_qfedavg(updates: list[ClientUpdate], current: np.ndarray,
                      q: float, lipschitz: float = 0.1) -> QFedAvgResult:
    """Fairness-reweighted update: clients with higher loss pull harder.

    Per client: delta_k = L (current - theta_k), weighted by F_k^q, with
    normalizer h_k = q F_k^(q-1) ||delta_k||^2 + L F_k^q. When every client
    reports zero loss the normalizer vanishes and the update falls back to
    plain weighted averaging (flagged in the result).
    """
    done = _sorted_completed(updates)
    losses = np.array([u.local_loss for u in done])
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("local losses must be finite and non-negative")
    if q != 0.0 and np.all(losses == 0.0):
        return QFedAvgResult(aggregate_fedavg(done), fell_back_to_fedavg=True)

    # Guard individual zero losses (F^(q-1) diverges for q < 1).
    losses = np.maximum(losses, 1e-12)
    num = np.zeros_like(current)
    denom = 0.0
    for u, f in zip(done, losses):
        delta = lipschitz * (current - u.weights)
        fq = f ** q
        num += fq * delta
        denom += q * f ** (q - 1.0) * float(delta @ delta) + lipschitz * fq
    return QFedAvgResult(current - num / denom)


def krum_scores(vectors: list[np.ndarray], f: int) -> np.ndarray:
    """Sum of squared distances to each vector's n-f-2 nearest peers."""
    n = len(vectors)
    stacked = np.stack(vectors)
    sq = np.sum((stacked[:, None, :] - stacked[None, :, :]) ** 2, axis=2)
    neighbors = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:neighbors].sum()
    return scores


def aggregate_krum(updates: list[ClientUpdate], f: int) -> tuple[np.ndarray, int]:
    """Select the single update closest to its peers; tolerates f byzantine.

    Requires n >= 2f + 3. Returns (weights, selected client id); score ties
    go to the lowest client id because updates are pre-sorted.
    """
    done = _sorted_completed(updates)
    n = len(done)
    if f < 0:
        raise ValueError("byzantine bound f must be non-negative")
    if n < 2 * f + 3:
        raise ValueError(f"krum needs at least 2f+3 = {2 * f + 3} updates, got {n}")
    scores = krum_scores([u.weights for u in done], f)
    best = int(np.argmin(scores))  # argmin keeps the first (lowest id) on ties
    return done[best].weights.copy(), done[best].client_id


# ------------------------------------------------------------ weight averaging

@dataclass
class SwaState:
    """Running mean of absorbed checkpoints.

    Equals the arithmetic mean of everything absorbed so far; `n_models`
    counts absorptions. The pre-phase snapshot passed at construction only
    survives if nothing is ever absorbed.
    """

    theta_swa: np.ndarray
    n_models: int = 0

    def copy(self) -> "SwaState":
        return SwaState(self.theta_swa.copy(), self.n_models)


def swa_update(state: SwaState, theta_new: np.ndarray) -> SwaState:
    """Absorb one checkpoint into the running mean."""
    if theta_new.shape != state.theta_swa.shape:
        raise ValueError("checkpoint length does not match averaged weights")
    merged = (state.theta_swa * state.n_models + theta_new) / (state.n_models + 1)
    return SwaState(merged, state.n_models + 1)


def swa_due(t: int, total_rounds: int, swa_start_fraction: float, cycle: int) -> bool:
    """Absorb at the top of each cycle once the late phase has begun."""
    return t >= swa_start_fraction * total_rounds and t % cycle == 0


# ----------------------------------------------------------- strategy objects

@dataclass
class StrategyState:
    """Holds whatever per-run server state the chosen strategy needs."""

    name: str
    params: dict = field(default_factory=dict)
    velocity: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)


STRATEGY_NAMES = ("fedavg", "fedavgm", "fedadam", "fedmedian", "qfedavg", "krum")


def make_strategy(name: str, model_size: int, params: dict | None = None) -> StrategyState:
    if name not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {name!r}; choose from {STRATEGY_NAMES}")
    state = StrategyState(name, dict(params or {}))
    if name == "fedavgm":
        state.velocity = np.zeros(model_size)
    elif name == "fedadam":
        state.m = np.zeros(model_size)
        state.v = np.zeros(model_size)
    return state


def apply_strategy(state: StrategyState, current: np.ndarray,
                   updates: list[ClientUpdate]) -> np.ndarray:
    p = state.params
    if state.name == "fedavg":
        return aggregate_fedavg(updates)
    if state.name == "fedavgm":
        new, state.velocity = aggregate_fedavgm(
            updates, current, state.velocity, p.get("beta", 0.9), p.get("server_lr", 1.0))
        return new
    if state.name == "fedadam":
        new, state.m, state.v = aggregate_fedadam(
            updates, current, state.m, state.v, p.get("beta1", 0.9),
            p.get("beta2", 0.99), p.get("tau", 1e-3), p.get("server_lr", 0.1))
        return new
    if state.name == "fedmedian":
        return aggregate_median(updates, p.get("trim_fraction", 0.0), p.get("mode", "median"))
    if state.name == "qfedavg":
        result = aggregate_qfedavg(updates, current, p.get("q", 2.0), p.get("lipschitz", 0.1))
        if result.fell_back_to_fedavg:
            state.warnings.append("qfedavg normalizer vanished; fell back to fedavg")
        return result.weights
    if state.name == "krum":
        weights, chosen = aggregate_krum(updates, p.get("f", 1))
        state.params["last_selected"] = chosen
        return weights
    raise AssertionError(state.name)
