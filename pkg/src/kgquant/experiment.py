"""Experiment configuration files and single-run orchestration.

Configs are INI files with sections ``[data]``, ``[quant]``, ``[train]``,
``[loss]``, ``[eval]`` and ``[run]``. Any key can be overridden with a
``section.key=value`` string. The effective config is written next to every
output, and its hash is stamped into every artifact header.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .evaluate import CUTOFFS, RankingReport, count_params, evaluate, results_row
from .kg import KnowledgeGraph, load_directory, synth_kg
from .model import Scorer, load_checkpoint, load_optimizer, save_checkpoint, save_optimizer
from .quantize import QuantConfig, Quantization, codes_to_matrix, quantize_all, variant_config, write_codes
from .scorer import LossConfig
from .trainer import TrainConfig, train


class ConfigError(ValueError):
    """Bad or inconsistent experiment configuration."""


DEFAULTS = {
    "data": {
        "path": "",
        "name": "",
        "synth_seed": "1",
        "synth_entities": "200",
        "synth_relations": "8",
        "synth_triples": "1500",
        "synth_skew": "1.0",
    },
    "quant": {
        "relation_strategy": "connected",
        "anchor_strategy": "nearest_path",
        "weight_scheme": "equal",
        "abstract_mode": "false",
        "d": "none",
        "k": "5",
        "anchor_selection": "degree",
        "anchors": "0.1",
        "ppr_damping": "0.85",
        "ppr_iterations": "50",
    },
    "train": {
        "learning_rate": "0.001",
        "batch_size": "128",
        "epochs": "300",
        "dim": "16",
        "hidden": "none",
        "beta1": "0.9",
        "beta2": "0.999",
        "epsilon": "1e-08",
        "eval_every": "0",
    },
    "loss": {
        "kind": "nssal",
        "margin": "6.0",
        "temperature": "1.0",
        "negatives": "8",
    },
    "eval": {
        "cutoffs": "1,3,10",
        "split": "test",
    },
    "run": {
        "seeds": "1",
        "variant": "designed",
        "variants": "designed,+RQ",
        "out": "runs",
    },
}


def _opt_int(value: str) -> int | None:
    return None if value.strip().lower() in ("none", "", "inf") else int(value)


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _int_list(value: str) -> list[int]:
    return [int(x) for x in value.replace(" ", "").split(",") if x]


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {s: dict(kv) for s, kv in DEFAULTS.items()})
    source: str | None = None

    # -- access

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = str(value)

    def override(self, assignments) -> "ExperimentConfig":
        for item in assignments or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
            self.set(section.strip(), key.strip(), value.strip())
        return self

    # -- typed views

    @property
    def seeds(self) -> list[int]:
        seeds = _int_list(self.get("run", "seeds"))
        if not seeds:
            raise ConfigError("seed list must be non-empty")
        return seeds

    @property
    def variants(self) -> list[str]:
        return [v.strip() for v in self.get("run", "variants").split(",") if v.strip()]

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    @property
    def dataset_name(self) -> str:
        name = self.get("data", "name")
        if name:
            return name
        path = self.get("data", "path")
        if path:
            return Path(path).name
        d = self.values["data"]
        return (f"synth-{d['synth_seed']}-{d['synth_entities']}-{d['synth_relations']}"
                f"-{d['synth_triples']}-{d['synth_skew']}")

    def quant_config(self, seed: int, variant: str | None = None) -> QuantConfig:
        q = self.values["quant"]
        try:
            anchors = float(q["anchors"])
            base = QuantConfig(
                relation_strategy=q["relation_strategy"],
                anchor_strategy=q["anchor_strategy"],
                weight_scheme=q["weight_scheme"],
                abstract_mode=_bool(q["abstract_mode"]),
                d=_opt_int(q["d"]),
                k=int(q["k"]),
                anchor_selection=q["anchor_selection"],
                anchor_count_or_fraction=anchors,
                ppr_damping=float(q["ppr_damping"]),
                ppr_iterations=int(q["ppr_iterations"]),
                seed=seed,
            )
            return variant_config(base, variant or self.get("run", "variant"))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[quant]: {exc}") from exc

    def loss_config(self) -> LossConfig:
        s = self.values["loss"]
        try:
            return LossConfig(s["kind"], float(s["margin"]), float(s["temperature"]), int(s["negatives"]))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[loss]: {exc}") from exc

    def train_config(self, seed: int) -> TrainConfig:
        t = self.values["train"]
        try:
            return TrainConfig(
                learning_rate=float(t["learning_rate"]),
                batch_size=int(t["batch_size"]),
                epochs=int(t["epochs"]),
                dim=int(t["dim"]),
                hidden=_opt_int(t["hidden"]),
                loss=self.loss_config(),
                beta1=float(t["beta1"]),
                beta2=float(t["beta2"]),
                epsilon=float(t["epsilon"]),
                seed=seed,
                eval_every=int(t["eval_every"]),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[train]: {exc}") from exc

    @property
    def cutoffs(self) -> tuple[int, ...]:
        return tuple(_int_list(self.get("eval", "cutoffs")))

    def validate(self) -> "ExperimentConfig":
        self.quant_config(self.seeds[0])
        self.train_config(self.seeds[0])
        for v in self.variants:
            self.quant_config(self.seeds[0], v)
        path = self.get("data", "path")
        if path and not Path(path).exists():
            raise ConfigError(f"dataset path does not exist: {path}")
        return self

    # -- serialisation

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_dict(self.values)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def hash(self, sections=("data", "quant", "train", "loss"), exclude=(("train", "epochs"),)) -> str:
        """Hash of the settings that shape a run; run length is left out so runs can be extended."""
        picked = {s: {k: v for k, v in self.values[s].items() if (s, k) not in exclude} for s in sections}
        blob = json.dumps(picked, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path=None, overrides=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        cfg.source = str(path)
    cfg.override(overrides)
    return cfg


def load_graph(cfg: ExperimentConfig) -> KnowledgeGraph:
    d = cfg.values["data"]
    if d["path"]:
        path = Path(d["path"])
        if not path.exists():
            raise ConfigError(f"dataset path does not exist: {path}")
        return load_directory(path)
    return synth_kg(int(d["synth_seed"]), int(d["synth_entities"]), int(d["synth_relations"]),
                    int(d["synth_triples"]), float(d["synth_skew"]))


# ---------------------------------------------------------------------------
# one run


@dataclass
class RunResult:
    seed: int
    variant: str
    report: RankingReport
    row: dict
    run_dir: Path | None
    quant: Quantization
    history: list


def run_one(
    kg: KnowledgeGraph,
    cfg: ExperimentConfig,
    seed: int,
    variant: str | None = None,
    run_dir=None,
    quant: Quantization | None = None,
    resume: bool = False,
) -> RunResult:
    """Quantize (unless ``quant`` is given), train, evaluate; write artifacts to ``run_dir``.

    With ``resume`` the model and optimizer state in ``run_dir`` are loaded
    and training continues from the recorded epoch.
    """
    variant = variant or cfg.get("run", "variant")
    config_hash = cfg.hash()
    if quant is None:
        quant = quantize_all(kg, cfg.quant_config(seed, variant))
    pool = codes_to_matrix(quant.codes, quant.l)

    state, start_epoch = None, 0
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if resume:
            state, header = load_checkpoint(run_dir / "model.ckpt")
            if header.get("config_hash") != config_hash:
                raise ConfigError(
                    f"refusing to resume: config hash {config_hash} differs from checkpoint's "
                    f"{header.get('config_hash')}"
                )
            load_optimizer(run_dir / "optimizer.bin", state)
            start_epoch = int(header["epoch"])
            seed = int(header["seed"])
        else:
            write_codes(run_dir / "codes.txt", quant, config_hash)
            (run_dir / "metrics.jsonl").write_text("")

    tcfg = cfg.train_config(seed)
    meta = {"config_hash": config_hash, "seed": seed, "variant": variant,
            "dim": tcfg.dim, "hidden": tcfg.hidden or 2 * tcfg.dim, "l": quant.l}

    def on_epoch(record, st):
        if run_dir is None:
            return
        with (run_dir / "metrics.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "epoch": record.epoch, "loss": record.loss, "val_mrr": record.val_mrr,
                "val_hits10": record.val_hits10, "seconds": round(record.seconds, 4),
            }) + "\n")

    t0 = time.perf_counter()
    result = train(kg, pool, tcfg, state=state, start_epoch=start_epoch, on_epoch=on_epoch)
    n_params = count_params(result.state)
    report = evaluate(Scorer(result.state, pool), kg, cfg.get("eval", "split"), cfg.cutoffs or CUTOFFS, n_params)
    row = results_row(report, cfg.dataset_name, variant, seed)

    if run_dir is not None:
        final_meta = dict(meta, epoch=tcfg.epochs)
        save_checkpoint(run_dir / "model.ckpt", result.state, final_meta)
        save_optimizer(run_dir / "optimizer.bin", result.state, final_meta)
        if result.best_state is not None:
            save_checkpoint(run_dir / "best.ckpt", result.best_state,
                            dict(meta, epoch=result.best_epoch, val_mrr=result.best_mrr))
        (run_dir / "report.txt").write_text(report.as_text() + f" seconds={time.perf_counter() - t0:.3f}\n")
    return RunResult(seed, variant, report, row, run_dir, quant, result.history)


def with_overrides(cfg: ExperimentConfig, **section_values) -> ExperimentConfig:
    new = ExperimentConfig({s: dict(kv) for s, kv in cfg.values.items()}, cfg.source)
    for section, kv in section_values.items():
        for k, v in kv.items():
            new.set(section, k, v)
    return new
