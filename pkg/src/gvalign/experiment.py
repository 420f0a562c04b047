"""Config-driven experiment orchestration: one JSON document per run.

A run executes the full incremental protocol for one method variant:
"baseline" trains stage 1 without mixup and skips alignment, "mixup-only"
adds the mixup term, "gvalign" adds classifier alignment on top. Sweeps
rerun the same config across exemplar budgets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, nn
from .data import (
    Dataset,
    ExemplarBank,
    ScenarioSpec,
    build_scenario,
    load_csv,
    make_synthetic_clusters,
)
from .seeding import child_rng, child_seed
from .stage1 import MixupConfig, Stage1Config
from .stage2 import AlignConfig, IncrementalState, run_task

METHODS = ("baseline", "mixup-only", "gvalign")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass
class SyntheticSpec:
    classes: int = 20
    dim: int = 8
    separation: float = 4.0
    within_std: float = 1.0
    samples_per_class: int = 130


@dataclass
class ModelSpec:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 16
    head: str = "linear"
    final_activation: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "gvalign"
    exemplars_per_class: int = 20
    out_dir: str = "results"
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    csv_path: str | None = None
    csv_delimiter: str = ","
    model: ModelSpec = field(default_factory=ModelSpec)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: AlignConfig = field(default_factory=AlignConfig)
    mixup_new_only: bool = False
    herding_normalize: bool = False
    export_regions: bool = False
    region_resolution: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.exemplars_per_class < 0:
            raise ConfigError("exemplars_per_class must be >= 0")
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("configure exactly one dataset source (synthetic or csv)")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            ds = doc.get("dataset", {})
            synthetic = None
            if "synthetic" in ds:
                synthetic = SyntheticSpec(**ds["synthetic"])
            csv_cfg = ds.get("csv", {})
            s1 = dict(doc.get("stage1", {}))
            mixup_new_only = bool(s1.pop("mixup_new_only", False))
            sgd_keys = ("epochs", "batch_size", "learning_rate", "decay_epochs", "decay_factor")
            sgd = nn.SgdConfig(**{k: s1.pop(k) for k in sgd_keys if k in s1})
            return cls(
                seed=int(doc.get("seed", 0)),
                method=doc.get("method", "gvalign"),
                exemplars_per_class=int(doc.get("exemplars_per_class", 20)),
                out_dir=doc.get("out_dir", "results"),
                synthetic=synthetic,
                csv_path=csv_cfg.get("path"),
                csv_delimiter=csv_cfg.get("delimiter", ","),
                model=ModelSpec(**doc.get("model", {})),
                scenario=ScenarioSpec(**doc.get("scenario", {})),
                stage1=Stage1Config(sgd=sgd, **s1),
                stage2=AlignConfig(**doc.get("stage2", {})),
                mixup_new_only=mixup_new_only,
                herding_normalize=bool(doc.get("herding_normalize", False)),
                export_regions=bool(doc.get("export_regions", False)),
                region_resolution=int(doc.get("region_resolution", 64)),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        dataset: dict = {}
        if self.synthetic is not None:
            dataset["synthetic"] = {
                "classes": self.synthetic.classes,
                "dim": self.synthetic.dim,
                "separation": self.synthetic.separation,
                "within_std": self.synthetic.within_std,
                "samples_per_class": self.synthetic.samples_per_class,
            }
        else:
            dataset["csv"] = {"path": self.csv_path, "delimiter": self.csv_delimiter}
        return {
            "seed": self.seed,
            "method": self.method,
            "exemplars_per_class": self.exemplars_per_class,
            "out_dir": self.out_dir,
            "dataset": dataset,
            "model": {
                "hidden": list(self.model.hidden),
                "feature_dim": self.model.feature_dim,
                "head": self.model.head,
                "final_activation": self.model.final_activation,
            },
            "scenario": {
                "kind": self.scenario.kind,
                "base_classes": self.scenario.base_classes,
                "new_classes_per_task": self.scenario.new_classes_per_task,
                "num_tasks": self.scenario.num_tasks,
                "imbalance_ratio": self.scenario.imbalance_ratio,
                "max_per_class": self.scenario.max_per_class,
                "test_per_class": self.scenario.test_per_class,
            },
            "stage1": {
                "epochs": self.stage1.sgd.epochs,
                "batch_size": self.stage1.sgd.batch_size,
                "learning_rate": self.stage1.sgd.learning_rate,
                "decay_epochs": list(self.stage1.sgd.decay_epochs),
                "decay_factor": self.stage1.sgd.decay_factor,
                "incremental_loss": self.stage1.incremental_loss,
                "distill_weight": self.stage1.distill_weight,
                "temperature": self.stage1.temperature,
                "mixup_new_only": self.mixup_new_only,
            },
            "stage2": {
                "learning_rate": self.stage2.learning_rate,
                "epochs": self.stage2.epochs,
                "samples_per_class": self.stage2.samples_per_class,
                "batch_size": self.stage2.batch_size,
            },
            "herding_normalize": self.herding_normalize,
            "export_regions": self.export_regions,
            "region_resolution": self.region_resolution,
        }


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


@dataclass
class RunResult:
    config: ExperimentConfig
    matrix: metrics.AccuracyMatrix
    group_reports: list[metrics.GroupReport]
    average_incremental_accuracy: float
    task_results: list
    files: dict[str, Path]


def _build_dataset(config: ExperimentConfig) -> Dataset:
    if config.synthetic is not None:
        s = config.synthetic
        return make_synthetic_clusters(
            s.classes,
            s.dim,
            s.separation,
            s.within_std,
            s.samples_per_class,
            seed=child_seed(config.seed, "synthetic-data"),
        )
    return load_csv(config.csv_path, delimiter=config.csv_delimiter)


def run(config: ExperimentConfig, persist: bool = True) -> RunResult:
    """Execute the incremental protocol for config.method and write results."""
    dataset = _build_dataset(config)
    scenario = ScenarioSpec(
        kind=config.scenario.kind,
        base_classes=config.scenario.base_classes,
        new_classes_per_task=config.scenario.new_classes_per_task,
        num_tasks=config.scenario.num_tasks,
        imbalance_ratio=config.scenario.imbalance_ratio,
        max_per_class=config.scenario.max_per_class,
        test_per_class=config.scenario.test_per_class,
        seed=child_seed(config.seed, "scenario"),
    )
    tasks = build_scenario(dataset, scenario)

    extractor = nn.MlpFeatureExtractor.create(
        [dataset.input_dim] + list(config.model.hidden) + [config.model.feature_dim],
        rng=child_rng(config.seed, "model-init"),
        final_activation=config.model.final_activation,
    )
    model = nn.Model(extractor, nn.ClassifierBank(mode=config.model.head))
    state = IncrementalState(ExemplarBank(capacity=config.exemplars_per_class))
    stage1_cfg = Stage1Config(
        sgd=config.stage1.sgd,
        incremental_loss=config.stage1.incremental_loss,
        distill_weight=config.stage1.distill_weight,
        temperature=config.stage1.temperature,
        mixup=MixupConfig(
            enabled=config.method != "baseline", new_only=config.mixup_new_only
        ),
    )

    n_stages = config.scenario.num_tasks + 1
    matrix = metrics.AccuracyMatrix(n_stages)
    group_reports, task_results, loss_curves, region_grids = [], [], [], {}
    for t in range(n_stages):
        result = run_task(
            model,
            dataset,
            tasks[: t + 1],
            state,
            stage1_cfg,
            config.stage2,
            seed=config.seed,
            align=config.method == "gvalign",
            herding_normalize=config.herding_normalize,
        )
        matrix.set_row(t, result.prefix_accuracy)
        group_reports.append(
            metrics.group_accuracy(result.per_class_accuracy, state.train_counts)
        )
        loss_curves.append(
            {"task": t, "stage1": result.stage1_losses, "stage2": result.stage2_losses}
        )
        task_results.append(result)
        if config.export_regions and config.model.feature_dim == 2:
            feats = model.features(dataset.samples[np.concatenate([tk.test_indices() for tk in tasks[: t + 1]])])
            lo, hi = feats.min(axis=0) - 1.0, feats.max(axis=0) + 1.0
            bounds = ((float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])))
            grid = metrics.decision_region_grid(model.head, bounds, config.region_resolution)
            region_grids[t] = (grid, bounds, config.region_resolution)

    files = {}
    if persist:
        files = metrics.persist_results(
            config.out_dir,
            {"config": config.to_dict(), "seed": config.seed, "method": config.method},
            matrix,
            group_reports,
            loss_curves,
            region_grids or None,
        )
    return RunResult(
        config=config,
        matrix=matrix,
        group_reports=group_reports,
        average_incremental_accuracy=metrics.average_incremental_accuracy(matrix),
        task_results=task_results,
        files=files,
    )


def sweep(
    config: ExperimentConfig,
    exemplar_counts: list[int],
    methods: list[str] | None = None,
    persist: bool = True,
) -> list[dict]:
    """Rerun the experiment per exemplar budget (and method), collect results.

    Writes sweep.csv plus a non-decreasing-trend summary per method; the
    trend is reported, not asserted.
    """
    if any(c < 0 for c in exemplar_counts):
        raise ConfigError("exemplar counts must be non-negative")
    methods = list(methods) if methods else [config.method]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    out_root = Path(config.out_dir)
    rows = []
    for method in methods:
        for count in exemplar_counts:
            sub = ExperimentConfig.from_dict(
                {
                    **config.to_dict(),
                    "method": method,
                    "exemplars_per_class": count,
                    "out_dir": str(out_root / f"{method}_m{count}"),
                }
            )
            result = run(sub, persist=persist)
            rows.append(
                {
                    "method": method,
                    "exemplars": count,
                    "avg_inc_acc": result.average_incremental_accuracy,
                }
            )
    if persist:
        out_root.mkdir(parents=True, exist_ok=True)
        lines = ["method,exemplars,avg_inc_acc"]
        for r in rows:
            lines.append(f"{r['method']},{r['exemplars']},{r['avg_inc_acc']:.17g}")
        (out_root / "sweep.csv").write_text("\n".join(lines) + "\n")
        summary = {}
        for method in methods:
            accs = [r["avg_inc_acc"] for r in rows if r["method"] == method]
            summary[method] = {
                "avg_inc_acc": accs,
                "non_decreasing": bool(all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))),
            }
        (out_root / "sweep_summary.json").write_text(
            json.dumps({"exemplar_counts": exemplar_counts, "methods": summary}, indent=2, sort_keys=True)
            + "\n"
        )
    return rows
