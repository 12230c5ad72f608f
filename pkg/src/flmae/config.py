"""Experiment configuration: flat dotted-key text files, strictly validated.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Unknown keys are rejected and every violation is reported in one pass, not
just the first. An effective-config echo (all keys, defaults filled, sorted)
is written next to run outputs and re-parses to an equal config.

Defaults are desk-scale values chosen so a full strategy sweep finishes in
minutes; they are not tuned to match any larger deployment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SyntheticCorpus, default_client_shifts
from .federation import FedConfig
from .mae import MaeArchitecture
from .optim import LrSchedule, SamConfig
from .partition import ENDO700K_FRACTIONS, PartitionSpec


class ConfigError(ValueError):
    """Invalid configuration; message lists every violation found."""


_DEFAULT_ROWS = ("centralized", "adaptive_fedsam", "fedavg", "fedmedian",
                 "qfedavg_q2", "qfedavg_q05", "fedavgm", "krum", "fedadam")

# key -> (type tag, default). Type tags: int, float, bool, str, floats (list).
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 7),
    "reps": ("int", 3),
    "out": ("str", "runs"),
    "corpus.images": ("int", 9000),
    "corpus.size": ("int", 16),
    "corpus.channels": ("int", 3),
    "corpus.families": ("int", 9),
    "corpus.noise": ("float", 0.08),
    "eval.size": ("int", 64),
    "eval.thresholds": ("floats", [0.3, 0.1, 0.05, 0.01]),
    "eval.reduction": ("str", "mean"),
    "eval.domain": ("str", "shifted"),
    "partition.mode": ("str", "fractions"),
    "partition.fractions": ("floats", list(ENDO700K_FRACTIONS)),
    "partition.alpha": ("float", 1.0),
    "partition.clients": ("int", 9),
    "partition.content_skew": ("float", 1.0),
    "shift.enabled": ("bool", True),
    "shift.strength": ("float", 1.0),
    "fed.rounds": ("int", 40),
    "fed.client_fraction": ("float", 1.0),
    "fed.local_epochs": ("int", 1),
    "fed.batch": ("int", 32),
    "fed.strategy": ("str", "fedavg"),
    "fed.min_completion": ("float", 0.5),
    "fed.retries": ("int", 3),
    "fed.inner": ("str", "adam"),
    "fed.bytes_per_param": ("int", 8),
    "lr.gamma1": ("float", 2e-3),
    "lr.gamma2": ("float", 2e-4),
    "lr.cycle": ("int", 2),
    "lr.swa_start": ("float", 0.75),
    "lr.shape": ("str", "linear"),
    "sam.enabled": ("bool", False),
    "sam.rho": ("float", 0.5),
    "sam.adaptive": ("bool", True),
    "sam.eta": ("float", 0.01),
    "swa.enabled": ("bool", True),
    "strategy.q": ("float", 2.0),
    "strategy.qffl_lr": ("float", 0.1),
    "strategy.beta": ("float", 0.9),
    "strategy.server_lr_avgm": ("float", 1.0),
    "strategy.beta1": ("float", 0.9),
    "strategy.beta2": ("float", 0.99),
    "strategy.tau": ("float", 1e-3),
    "strategy.server_lr_adam": ("float", 0.1),
    "strategy.trim_fraction": ("float", 0.1),
    "strategy.median_mode": ("str", "median"),
    "strategy.krum_f": ("int", 1),
    "arch.patch": ("int", 4),
    "arch.enc_dim": ("int", 32),
    "arch.dec_dim": ("int", 16),
    "arch.enc_depth": ("int", 2),
    "arch.dec_depth": ("int", 1),
    "arch.heads": ("int", 2),
    "arch.mask_ratio": ("float", 0.75),
    "probe.epochs": ("int", 40),
    "probe.lr": ("float", 0.05),
    "probe.head": ("str", "linear"),
    "probe.images": ("int", 256),
    "probe.seeds": ("int", 5),
    "ablation.rows": ("str", ",".join(_DEFAULT_ROWS)),
}


def _parse_value(kind: str, raw: str, key: str, errors: list[str]):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return [float(v) for v in raw.split(",") if v.strip()]
        return raw
    except ValueError:
        errors.append(f"{key}: cannot parse {raw!r} as {kind}")
        return SCHEMA[key][1]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Typed view over the raw key map; fully determines a run."""

    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: (v if not isinstance(v, list) else list(v)) for k, (_, v) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    # -- constituent objects -------------------------------------------

    def corpus(self) -> SyntheticCorpus:
        return SyntheticCorpus(
            n_images=self["corpus.images"] + self["eval.size"],
            image_size=self["corpus.size"], channels=self["corpus.channels"],
            n_families=self["corpus.families"], seed=self["seed"],
            noise=self["corpus.noise"])

    def arch(self) -> MaeArchitecture:
        return MaeArchitecture(
            image_size=self["corpus.size"], patch_size=self["arch.patch"],
            channels=self["corpus.channels"], encoder_dim=self["arch.enc_dim"],
            decoder_dim=self["arch.dec_dim"], encoder_depth=self["arch.enc_depth"],
            decoder_depth=self["arch.dec_depth"], heads=self["arch.heads"],
            mask_ratio=self["arch.mask_ratio"])

    def partition_spec(self) -> PartitionSpec:
        shifts = None
        if self["shift.enabled"]:
            n = len(self["partition.fractions"]) if self["partition.mode"] == "fractions" \
                else self["partition.clients"]
            shifts = tuple(default_client_shifts(n, self["shift.strength"]))
        if self["partition.mode"] == "fractions":
            total = sum(self["partition.fractions"])
            return PartitionSpec(mode="fractions",
                                 fractions=tuple(f / total for f in self["partition.fractions"]),
                                 shifts=shifts,
                                 content_skew=self["partition.content_skew"])
        return PartitionSpec(mode="dirichlet", alpha=self["partition.alpha"],
                             n_clients=self["partition.clients"], shifts=shifts)

    def schedule(self) -> LrSchedule:
        return LrSchedule(gamma1=self["lr.gamma1"], gamma2=self["lr.gamma2"],
                          total_rounds=self["fed.rounds"], cycle=self["lr.cycle"],
                          swa_start_fraction=self["lr.swa_start"], shape=self["lr.shape"])

    def sam_config(self) -> SamConfig | None:
        if not self["sam.enabled"]:
            return None
        return SamConfig(rho=self["sam.rho"], adaptive=self["sam.adaptive"],
                         eta=self["sam.eta"])

    def strategy_params(self, strategy: str) -> dict:
        if strategy == "qfedavg":
            return {"q": self["strategy.q"], "lipschitz": self["strategy.qffl_lr"]}
        if strategy == "fedavgm":
            return {"beta": self["strategy.beta"], "server_lr": self["strategy.server_lr_avgm"]}
        if strategy == "fedadam":
            return {"beta1": self["strategy.beta1"], "beta2": self["strategy.beta2"],
                    "tau": self["strategy.tau"], "server_lr": self["strategy.server_lr_adam"]}
        if strategy == "fedmedian":
            return {"trim_fraction": self["strategy.trim_fraction"],
                    "mode": self["strategy.median_mode"]}
        if strategy == "krum":
            return {"f": self["strategy.krum_f"]}
        return {}

    def fed_config(self, strategy: str | None = None, sam: SamConfig | None = None,
                   sam_override: bool = False, strategy_params: dict | None = None) -> FedConfig:
        name = strategy or self["fed.strategy"]
        return FedConfig(
            rounds=self["fed.rounds"], client_fraction=self["fed.client_fraction"],
            local_epochs=self["fed.local_epochs"], batch_size=self["fed.batch"],
            schedule=self.schedule(),
            sam=sam if sam_override else self.sam_config(),
            strategy=name,
            strategy_params=strategy_params if strategy_params is not None
            else self.strategy_params(name),
            swa_enabled=self["swa.enabled"],
            min_completion_fraction=self["fed.min_completion"],
            max_round_retries=self["fed.retries"],
            inner_optimizer=self["fed.inner"],
            bytes_per_param=self["fed.bytes_per_param"])

    def ablation_rows(self) -> list[str]:
        return [r.strip() for r in self["ablation.rows"].split(",") if r.strip()]

    # -- validation and echo --------------------------------------------

    def validate(self) -> list[str]:
        """All invariant violations, empty when the config is sound."""
        errors: list[str] = []
        v = self.values

        def check(cond: bool, message: str):
            if not cond:
                errors.append(message)

        check(v["corpus.images"] >= 1, "corpus.images: must be >= 1")
        check(0 <= v["corpus.noise"] <= 0.5, "corpus.noise: must be in [0, 0.5]")
        check(v["eval.size"] >= 1, "eval.size: must be >= 1")
        check(v["reps"] >= 1, "reps: must be >= 1")
        check(v["corpus.size"] % v["arch.patch"] == 0,
              "arch.patch: corpus.size must be divisible by patch size")
        check(0 <= v["arch.mask_ratio"] < 1, "arch.mask_ratio: must be in [0, 1)")
        check(v["fed.rounds"] >= 1, "fed.rounds: must be >= 1")
        check(0 < v["fed.client_fraction"] <= 1, "fed.client_fraction: must be in (0, 1]")
        check(v["fed.local_epochs"] >= 1, "fed.local_epochs: must be >= 1")
        check(v["fed.batch"] >= 1, "fed.batch: must be >= 1")
        check(0 <= v["fed.min_completion"] <= 1, "fed.min_completion: must be in [0, 1]")
        check(v["lr.gamma1"] >= v["lr.gamma2"] > 0, "lr.gamma1/gamma2: need gamma1 >= gamma2 > 0")
        check(v["lr.cycle"] >= 1, "lr.cycle: must be >= 1")
        check(0 < v["lr.swa_start"] < 1, "lr.swa_start: must be in (0, 1)")
        check(v["lr.shape"] in ("linear", "constant"), "lr.shape: linear or constant")
        check(not v["sam.enabled"] or v["sam.rho"] > 0,
              "sam.rho: must be positive when sam.enabled")
        check(v["sam.eta"] > 0, "sam.eta: must be positive")
        check(v["partition.mode"] in ("fractions", "dirichlet"),
              "partition.mode: fractions or dirichlet")
        if v["partition.mode"] == "fractions":
            check(all(f > 0 for f in v["partition.fractions"]),
                  "partition.fractions: must all be positive")
            check(abs(sum(v["partition.fractions"]) - 1.0) < 1e-6,
                  f"partition.fractions: sum {sum(v['partition.fractions'])}, expected 1")
        check(v["partition.alpha"] > 0, "partition.alpha: must be positive")
        check(0 <= v["partition.content_skew"] <= 1,
              "partition.content_skew: must be in [0, 1]")
        check(v["eval.reduction"] in ("max", "mean"), "eval.reduction: max or mean")
        check(v["eval.domain"] in ("shifted", "canonical"), "eval.domain: shifted or canonical")
        ths = v["eval.thresholds"]
        check(len(ths) > 0 and all(a > b for a, b in zip(ths, ths[1:])),
              "eval.thresholds: must be strictly decreasing")
        check(v["fed.strategy"] in ("fedavg", "fedavgm", "fedadam", "fedmedian",
                                    "qfedavg", "krum"),
              f"fed.strategy: unknown strategy {v['fed.strategy']!r}")
        check(v["fed.inner"] in ("sgd", "momentum", "adam"), "fed.inner: sgd, momentum or adam")
        check(v["probe.head"] in ("linear", "two_layer"), "probe.head: linear or two_layer")
        check(0 <= v["strategy.trim_fraction"] < 0.5, "strategy.trim_fraction: in [0, 0.5)")
        check(v["strategy.median_mode"] in ("median", "trimmed_mean"),
              "strategy.median_mode: median or trimmed_mean")
        check(v["arch.enc_dim"] % v["arch.heads"] == 0 and v["arch.dec_dim"] % v["arch.heads"] == 0,
              "arch.heads: must divide enc_dim and dec_dim")
        from .experiment import ROW_PRESETS  # late import; experiment imports config
        for row in self.ablation_rows():
            check(row in ROW_PRESETS, f"ablation.rows: unknown row {row!r}")
        return errors

    def echo(self) -> str:
        lines = [f"{k} = {_format_value(self.values[k])}" for k in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    errors: list[str] = []
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        raw[key] = _parse_value(SCHEMA[key][0], value, key, errors)

    config = ExperimentConfig(raw)
    errors.extend(config.validate())
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return config


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; empty file means all defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def write_echo(config: ExperimentConfig, outdir) -> Path:
    out = Path(outdir) / "effective_config.txt"
    out.write_text(config.echo(), encoding="utf-8")
    return out
