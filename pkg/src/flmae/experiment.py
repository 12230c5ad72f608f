"""Run orchestration: baselines, strategy sweeps, probes, and report files.

A "row" is one training arm of the strategy comparison: the centralized
baseline (same optimizer-step budget on pooled data), the sharpness-aware
federated configuration, or one plain aggregation strategy. Rows share the
corpus, partition, schedule, and evaluation protocol; replications rerun a
row with shifted training seeds on the same data environment.

Everything written to disk is deterministic for a given (config, seed):
reports carry no timestamps, floats are serialized with repr, and JSON keys
are sorted, so identical runs produce byte-identical output trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .corpus import apply_domain_shift
from .federation import (FedRunResult, RoundAbortedError, run_federated_training,
                         write_round_log)
from .mae import (MaeModel, count_params, init_params, load_checkpoint,
                  patchify_batch, sample_mask, save_checkpoint)
from .optim import SamConfig
from .partition import (ENDO700K_CLIENT_NAMES, ENDO700K_IMAGE_COUNTS,
                        partition_by_fractions, partition_dirichlet, write_manifest)
from .probe import ProbeConfig, ProbeReport, run_probe
from .seeding import rng_for
from .stats import comm_cost, compare_models_paired, macs_report

# Training arms of the strategy comparison table.
ROW_PRESETS: dict[str, dict] = {
    "centralized": {"kind": "centralized"},
    "adaptive_fedsam": {"kind": "federated", "strategy": "fedavg", "sam": "adaptive"},
    "fedavg": {"kind": "federated", "strategy": "fedavg", "sam": None},
    "fedmedian": {"kind": "federated", "strategy": "fedmedian", "sam": None},
    "qfedavg_q2": {"kind": "federated", "strategy": "qfedavg", "sam": None,
                   "params": {"q": 2.0}},
    "qfedavg_q05": {"kind": "federated", "strategy": "qfedavg", "sam": None,
                    "params": {"q": 0.5}},
    "fedavgm": {"kind": "federated", "strategy": "fedavgm", "sam": None},
    "krum": {"kind": "federated", "strategy": "krum", "sam": None},
    "fedadam": {"kind": "federated", "strategy": "fedadam", "sam": None},
}


@dataclass
class Environment:
    """Materialized data shared by every row of a sweep."""

    client_datasets: list[np.ndarray]
    client_families: list[np.ndarray]
    eval_images: np.ndarray
    eval_mask_idx: np.ndarray
    partition: list[np.ndarray]
    train_images: np.ndarray
    train_families: np.ndarray


def build_environment(cfg: ExperimentConfig) -> Environment:
    """Generate the corpus, split it into shifted client silos, fix eval masks.

    The last `eval.size` corpus indices form the held-out evaluation set.
    Each client's images get that client's domain transform; with
    eval.domain = shifted (the default) the held-out images are pushed
    through the client transforms round-robin, so evaluation spans the same
    domain mixture the federation trains on. eval.domain = canonical leaves
    them untransformed.
    """
    corpus = cfg.corpus()
    arch = cfg.arch()
    images, families = corpus.materialize()
    n_train = cfg["corpus.images"]
    train, eval_images = images[:n_train], images[n_train:]
    train_families = families[:n_train]

    spec = cfg.partition_spec()
    if spec.mode == "fractions":
        parts = partition_by_fractions(n_train, spec, cfg["seed"],
                                       families=train_families)
    else:
        parts = partition_dirichlet(train_families, spec.alpha,
                                    spec.client_count, cfg["seed"])

    client_datasets, client_families = [], []
    for k, idx in enumerate(parts):
        data = train[idx]
        if spec.shifts is not None:
            shift = spec.shifts[k]
            data = np.stack([apply_domain_shift(img, shift) for img in data])
        client_datasets.append(data)
        client_families.append(train_families[idx])

    if spec.shifts is not None and cfg["eval.domain"] == "shifted":
        n_shift = len(spec.shifts)
        eval_images = np.stack([
            apply_domain_shift(img, spec.shifts[i % n_shift])
            for i, img in enumerate(eval_images)
        ])

    eval_masks = [sample_mask(arch.n_patches, arch.mask_ratio,
                              rng_for(cfg["seed"], "eval", i))
                  for i in range(eval_images.shape[0])]
    eval_mask_idx = np.array([m.masked_indices for m in eval_masks], dtype=np.intp)
    return Environment(client_datasets, client_families, eval_images,
                       eval_mask_idx, parts, train, train_families)


def evaluate_weights(model: MaeModel, weights: np.ndarray, env: Environment,
                     thresholds, reduction: str) -> tuple[float, list[int]]:
    """Masked MSE plus reduced threshold counts over the fixed eval set."""
    pred = model.reconstruct(weights, env.eval_images, env.eval_mask_idx)
    targets = patchify_batch(env.eval_images, model.arch.patch_size)
    per_patch = ((pred - targets) ** 2).mean(axis=2)
    masked = np.take_along_axis(per_patch, env.eval_mask_idx, axis=1)
    per_image = np.stack([(per_patch < t).sum(axis=1) for t in thresholds], axis=1)
    if reduction == "max":
        counts = per_image.max(axis=0)
    else:
        counts = np.rint(per_image.mean(axis=0))
    return float(masked.mean()), [int(c) for c in counts]


@dataclass
class RowResult:
    row: str
    rep: int
    seed: int
    status: str                      # "ok" | "failed"
    final_counts: list[int] | None
    swa_counts: list[int] | None
    final_mse: float | None
    swa_mse: float | None
    optimizer_steps: int
    gradient_evals: int
    run: FedRunResult | None


def run_row(cfg: ExperimentConfig, env: Environment, row: str, rep: int,
            eval_each_round: bool = False) -> RowResult:
    """Train one arm for one replication."""
    preset = ROW_PRESETS[row]
    arch = cfg.arch()
    model = MaeModel(arch)
    run_seed = cfg["seed"] + rep
    init = init_params(arch, rng_for(run_seed, "init"))
    thresholds = cfg["eval.thresholds"]
    reduction = cfg["eval.reduction"]

    eval_fn = None
    if eval_each_round:
        eval_fn = lambda w: evaluate_weights(model, w, env, thresholds, reduction)

    if preset["kind"] == "centralized":
        pooled = np.concatenate(env.client_datasets, axis=0)
        fed = cfg.fed_config(strategy="fedavg", sam=None, sam_override=True,
                             strategy_params={})
        datasets = [pooled]
    else:
        sam = None
        if preset["sam"] == "adaptive":
            sam = SamConfig(rho=cfg["sam.rho"], adaptive=True, eta=cfg["sam.eta"])
        elif preset["sam"] == "plain":
            sam = SamConfig(rho=cfg["sam.rho"], adaptive=False, eta=cfg["sam.eta"])
        params = dict(cfg.strategy_params(preset["strategy"]))
        params.update(preset.get("params", {}))
        fed = cfg.fed_config(strategy=preset["strategy"], sam=sam,
                             sam_override=True, strategy_params=params)
        datasets = env.client_datasets

    try:
        result = run_federated_training(fed, datasets, model, init, run_seed,
                                        eval_fn=eval_fn)
    except RoundAbortedError:
        return RowResult(row, rep, run_seed, "failed", None, None, None, None,
                         0, 0, None)

    final_mse, final_counts = evaluate_weights(model, result.final_weights, env,
                                               thresholds, reduction)
    swa_mse, swa_counts = evaluate_weights(model, result.swa_weights, env,
                                           thresholds, reduction)
    return RowResult(row, rep, run_seed, "ok", final_counts, swa_counts,
                     final_mse, swa_mse, result.optimizer_steps,
                     result.gradient_evals, result)


# ------------------------------------------------------------------- reports

def _ablation_header(thresholds) -> list[str]:
    cols = ["row", "rep", "seed", "status"]
    cols += [f"thre_{t}" for t in thresholds]
    cols += [f"swa_thre_{t}" for t in thresholds]
    cols += ["eval_mse", "swa_eval_mse", "optimizer_steps", "gradient_evals"]
    return cols


def write_ablation_csv(path, results: list[RowResult], thresholds) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ablation_header(thresholds))
        for r in results:
            if r.status == "ok":
                writer.writerow([r.row, r.rep, r.seed, r.status,
                                 *r.final_counts, *r.swa_counts,
                                 repr(r.final_mse), repr(r.swa_mse),
                                 r.optimizer_steps, r.gradient_evals])
            else:
                blank = [""] * (2 * len(thresholds))
                writer.writerow([r.row, r.rep, r.seed, r.status, *blank,
                                 "", "", r.optimizer_steps, r.gradient_evals])


def emit_run_artifacts(outdir: Path, cfg: ExperimentConfig, arch, result: RowResult) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    if result.run is not None:
        write_round_log(outdir / "rounds.csv", result.run.records, result.row)
        save_checkpoint(outdir / "final.bin", arch, result.run.final_weights)
        save_checkpoint(outdir / "swa.bin", arch, result.run.swa_weights)
    summary = {
        "row": result.row, "rep": result.rep, "seed": result.seed,
        "status": result.status,
        "thresholds": list(cfg["eval.thresholds"]),
        "final_counts": result.final_counts, "swa_counts": result.swa_counts,
        "final_mse": result.final_mse, "swa_mse": result.swa_mse,
        "optimizer_steps": result.optimizer_steps,
        "gradient_evals": result.gradient_evals,
        "warnings": result.run.warnings if result.run else [],
    }
    (outdir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def run_ablation(cfg: ExperimentConfig, outdir, rows: list[str] | None = None,
                 reps: int | None = None, eval_each_round: bool = False) -> list[RowResult]:
    """One row per strategy x replication; failures mark the row, not the sweep."""
    rows = rows if rows is not None else cfg.ablation_rows()
    reps = reps if reps is not None else cfg["reps"]
    unknown = [r for r in rows if r not in ROW_PRESETS]
    if unknown:
        raise ValueError(f"unknown ablation rows: {unknown}")

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    arch = cfg.arch()
    write_manifest(outdir / "partition.json", env.partition)

    results = []
    for row in rows:
        for rep in range(reps):
            result = run_row(cfg, env, row, rep, eval_each_round=eval_each_round)
            emit_run_artifacts(outdir / "runs" / f"{row}_rep{rep}", cfg, arch, result)
            results.append(result)
    write_ablation_csv(outdir / "ablation.csv", results, cfg["eval.thresholds"])
    return results


def run_single(cfg: ExperimentConfig, outdir, row: str,
               eval_each_round: bool = True) -> RowResult:
    """One arm, rep 0, with per-round evaluation in the round log."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    result = run_row(cfg, env, row, 0, eval_each_round=eval_each_round)
    emit_run_artifacts(outdir, cfg, cfg.arch(), result)
    return result


def run_configured_federated(cfg: ExperimentConfig, outdir,
                             strategy: str | None = None,
                             eval_each_round: bool = True) -> RowResult:
    """Federated run driven directly by the config (sam.enabled honored)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    arch = cfg.arch()
    model = MaeModel(arch)
    run_seed = cfg["seed"]
    init = init_params(arch, rng_for(run_seed, "init"))
    fed = cfg.fed_config(strategy=strategy)
    name = strategy or cfg["fed.strategy"]
    eval_fn = None
    if eval_each_round:
        eval_fn = lambda w: evaluate_weights(model, w, env, cfg["eval.thresholds"],
                                             cfg["eval.reduction"])
    try:
        run = run_federated_training(fed, env.client_datasets, model, init,
                                     run_seed, eval_fn=eval_fn)
    except RoundAbortedError:
        result = RowResult(name, 0, run_seed, "failed", None, None, None, None, 0, 0, None)
        emit_run_artifacts(outdir, cfg, arch, result)
        raise
    final_mse, final_counts = evaluate_weights(model, run.final_weights, env,
                                               cfg["eval.thresholds"], cfg["eval.reduction"])
    swa_mse, swa_counts = evaluate_weights(model, run.swa_weights, env,
                                           cfg["eval.thresholds"], cfg["eval.reduction"])
    result = RowResult(name, 0, run_seed, "ok", final_counts, swa_counts,
                       final_mse, swa_mse, run.optimizer_steps, run.gradient_evals, run)
    emit_run_artifacts(outdir, cfg, arch, result)
    return result


def compare_checkpoints(cfg: ExperimentConfig, path_a, path_b, outdir) -> dict:
    """Paired per-image comparison of two checkpoints on the shared eval set."""
    arch_a, weights_a = load_checkpoint(path_a)
    arch_b, weights_b = load_checkpoint(path_b)
    if arch_a != arch_b:
        raise ValueError("checkpoints have different architectures")
    env = build_environment(cfg)
    model = MaeModel(arch_a)

    def score(weights, index):
        pred = model.reconstruct(weights, env.eval_images[index:index + 1],
                                 env.eval_mask_idx[index:index + 1])
        target = patchify_batch(env.eval_images[index:index + 1], arch_a.patch_size)
        per_patch = ((pred - target) ** 2).mean(axis=2)
        return float(np.take_along_axis(per_patch, env.eval_mask_idx[index:index + 1],
                                        axis=1).mean())

    report = compare_models_paired(
        lambda w, i: score(w, i), weights_a, weights_b,
        units=range(env.eval_images.shape[0]), higher_is_better=False,
        metric="eval_masked_mse")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "comparison.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report


def run_probe_suite(cfg: ExperimentConfig, encoder_weights: np.ndarray,
                    outdir, modes=("full", "frozen"),
                    seeds: list[int] | None = None) -> list[ProbeReport]:
    """Full-vs-frozen comparison over several probe seeds, written as CSV."""
    import csv

    arch = cfg.arch()
    env = build_environment(cfg)
    n = min(cfg["probe.images"], env.train_images.shape[0])
    images, labels = env.train_images[:n], env.train_families[:n]
    seeds = seeds if seeds is not None else list(range(cfg["probe.seeds"]))

    reports = []
    for seed in seeds:
        for mode in modes:
            pc = ProbeConfig(mode=mode, head=cfg["probe.head"],
                             epochs=cfg["probe.epochs"], lr=cfg["probe.lr"])
            reports.append(run_probe(arch, encoder_weights, pc, images, labels,
                                     seed=seed))

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "probe.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "seed", "accuracy", "f1_macro", "epochs",
                         "encoder_checksum_pre", "encoder_checksum_post"])
        for r in reports:
            writer.writerow([r.mode, r.seed, repr(r.accuracy), repr(r.f1_macro),
                             r.epochs, r.encoder_checksum_pre, r.encoder_checksum_post])
    return reports


def cost_report(cfg: ExperimentConfig, outdir, params_override: float | None = None,
                bytes_per_param: int | None = None) -> dict:
    """Communication and compute accounting for the configured run shape."""
    arch = cfg.arch()
    params = params_override if params_override is not None else float(count_params(arch))
    bpp = bytes_per_param if bytes_per_param is not None else cfg["fed.bytes_per_param"]
    spec = cfg.partition_spec()
    clients = spec.client_count
    sampled = max(1, int(np.ceil(cfg["fed.client_fraction"] * clients)))
    comm = comm_cost(params, bpp, cfg["fed.rounds"], sampled)

    payload = {
        "communication": comm.to_json(),
        "gradient_evals_per_step": {"plain": 1, "sharpness_aware": 2},
        "reference_macs": macs_report(ENDO700K_IMAGE_COUNTS,
                                      client_names=ENDO700K_CLIENT_NAMES),
    }
    if spec.mode == "fractions":
        sizes = [len(p) for p in partition_by_fractions(cfg["corpus.images"], spec, cfg["seed"])]
        payload["desk_scale_macs"] = macs_report(sizes, macs_per_image=matmul_macs_per_image(arch))
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "cost.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return payload


def matmul_macs_per_image(arch) -> float:
    """Analytic multiply-accumulate count of one forward pass (matmuls only)."""

    def block(n, d):
        return 12 * n * d * d + 2 * n * n * d

    n_vis = arch.n_patches - arch.n_masked
    enc = n_vis * arch.patch_dim * arch.encoder_dim
    enc += arch.encoder_depth * block(n_vis, arch.encoder_dim)
    dec = n_vis * arch.encoder_dim * arch.decoder_dim
    dec += arch.decoder_depth * block(arch.n_patches, arch.decoder_dim)
    dec += arch.n_patches * arch.decoder_dim * arch.patch_dim
    return float(enc + dec)
