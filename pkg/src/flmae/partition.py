"""Non-IID client partitioning of a corpus.

Two generators: fixed size fractions reproducing the nine-site skew of the
reference deployment (one site holds nearly half the data, the smallest one
a tenth of a percent), and a Dirichlet split over latent classes with a
tunable concentration. Both produce true partitions: disjoint, covering,
and deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import DomainShift
from .seeding import rng_for

# Nine-site example-count fractions (percent / 100), in fixed site order.
ENDO700K_CLIENT_NAMES = (
    "Cholec80_for_Segmentation", "DSAD", "ESAD", "GLENDA_v1.0", "HeiCo",
    "LapGyn4_v1.2", "PSI_AVA", "SurgicalActions160", "hSDB-instrument",
)
ENDO700K_FRACTIONS = (0.2425, 0.0180, 0.0592, 0.0015, 0.4772,
                      0.0520, 0.1002, 0.0010, 0.0484)
ENDO700K_IMAGE_COUNTS = (178129, 13195, 43456, 1083, 350539,
                         38192, 73618, 761, 35576)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split the corpus and which per-client transforms to apply.

    `content_skew` (fractions mode) controls how much of each client's quota
    is filled preferentially from client-specific image families: 0 gives an
    IID content split (sizes still skewed), 1 makes each site hold its own
    kind of imagery, matching how real silos differ in content and not just
    volume.
    """

    mode: str = "fractions"
    fractions: tuple[float, ...] = ENDO700K_FRACTIONS
    alpha: float = 1.0
    n_clients: int | None = None  # dirichlet mode; fractions mode infers it
    shifts: tuple[DomainShift, ...] | None = None
    content_skew: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fractions", "dirichlet"):
            raise ValueError("mode must be 'fractions' or 'dirichlet'")
        if self.mode == "fractions":
            if any(f <= 0 for f in self.fractions):
                raise ValueError("fractions must all be positive")
            if abs(sum(self.fractions) - 1.0) > 1e-9:
                raise ValueError(f"fractions sum to {sum(self.fractions)}, not 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.content_skew <= 1.0:
            raise ValueError("content_skew must be in [0, 1]")

    @property
    def client_count(self) -> int:
        return len(self.fractions) if self.mode == "fractions" else int(self.n_clients)


def endo700k_fractions() -> PartitionSpec:
    """The nine-site size distribution, normalized."""
    total = sum(ENDO700K_FRACTIONS)
    return PartitionSpec(mode="fractions",
                         fractions=tuple(f / total for f in ENDO700K_FRACTIONS))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def partition_by_fractions(n_images: int, spec: PartitionSpec, seed: int,
                           families: np.ndarray | None = None) -> list[np.ndarray]:
    """Disjoint covering index sets with |set_k| = round(frac_k * n).

    Rounding leftovers are assigned one at a time starting from the largest
    client, which keeps the size skew exact even for small corpora. When
    `families` are given and content_skew > 0, that share of each client's
    quota is drawn from the client's preferred families (client k prefers
    family k mod n_families), the rest from the common pool.
    """
    fracs = np.asarray(spec.fractions)
    sizes = np.array([_round_half_up(f * n_images) for f in fracs])
    largest_first = np.argsort(-fracs, kind="stable")
    leftover = n_images - int(sizes.sum())
    step = 1 if leftover > 0 else -1
    for i in range(abs(leftover)):
        sizes[largest_first[i % len(fracs)]] += step
    if sizes.min() < 1:
        min_frac = fracs.min()
        need = int(np.ceil(0.5 / min_frac))
        raise ValueError(
            f"corpus of {n_images} images leaves a client empty; "
            f"smallest fraction {min_frac} needs at least {need} images")

    rng = rng_for(seed, "partition")
    if families is None or spec.content_skew == 0.0:
        order = rng.permutation(n_images)
        parts, start = [], 0
        for size in sizes:
            parts.append(np.sort(order[start:start + size]))
            start += size
        return parts

    families = np.asarray(families)
    n_families = int(families.max()) + 1
    pools = [list(rng.permutation(np.flatnonzero(families == f)))
             for f in range(n_families)]
    taken = np.zeros(n_images, dtype=bool)

    # preferred-family pass: largest clients pick first so their quota of
    # preferred content is available
    parts_raw: list[list[int]] = [[] for _ in sizes]
    for k in largest_first:
        want = int(round(spec.content_skew * sizes[k]))
        pool = pools[k % n_families]
        while want > 0 and pool:
            idx = pool.pop()
            if not taken[idx]:
                parts_raw[k].append(idx)
                taken[idx] = True
                want -= 1

    # common pool fills every remaining slot
    rest = list(rng.permutation(np.flatnonzero(~taken)))
    for k in largest_first:
        need = sizes[k] - len(parts_raw[k])
        for _ in range(need):
            parts_raw[k].append(rest.pop())
    return [np.sort(np.array(p, dtype=np.intp)) for p in parts_raw]


def partition_dirichlet(families: np.ndarray, alpha: float, n_clients: int,
                        seed: int, max_resample: int = 10) -> list[np.ndarray]:
    """Per-class client proportions drawn from Dirichlet(alpha).

    Small alpha concentrates each class on few clients; alpha -> infinity
    approaches an IID split. Resamples when a client comes out empty, up to
    `max_resample` attempts.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    families = np.asarray(families)
    if n_clients == 1:
        return [np.arange(families.size)]

    for attempt in range(max_resample):
        rng = rng_for(seed, "partition", attempt)
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for cls in np.unique(families):
            idx = np.flatnonzero(families == cls)
            rng.shuffle(idx)
            proportions = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(proportions) * idx.size).astype(int)[:-1]
            for client, chunk in enumerate(np.split(idx, cuts)):
                buckets[client].extend(chunk.tolist())
        if all(buckets):
            return [np.sort(np.array(b)) for b in buckets]
    raise ValueError(
        f"dirichlet(alpha={alpha}) left a client empty in {max_resample} attempts")


def write_manifest(path, parts: list[np.ndarray]) -> None:
    """Client id -> index list, JSON with stable key order."""
    payload = {str(k): [int(i) for i in idx] for k, idx in enumerate(parts)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=0)
        fh.write("\n")


def read_manifest(path) -> list[np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [np.array(payload[str(k)], dtype=np.intp) for k in range(len(payload))]


def heterogeneity_score(client_images: list[np.ndarray]) -> float:
    """Mean pairwise L2 distance between per-client mean-pixel vectors."""
    means = [imgs.mean(axis=0).ravel() for imgs in client_images]
    n = len(means)
    if n < 2:
        return 0.0
    dists = [np.linalg.norm(means[i] - means[j])
             for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(dists))
