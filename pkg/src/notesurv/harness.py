"""Experiment orchestration: configs, splits, cross-validation, grid search
and the end-to-end pipeline that writes metrics, curves, attention maps and
checkpoints."""

from __future__ import annotations

import configparser
import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .dataset import DataError, FeatureSchema, SurvivalDataset, load_dataset, simulate
from .encoder import EncoderConfig, dump_attention
from .metrics import (
    ConfusionMatrix, RocCurve, c_index, confusion, mean_confusion, roc_auc, write_report,
)
from .model import ModelConfig, NeuralSurvModel, TrainConfig, fit_neural
from .preprocess import (
    Imputer, Standardizer, filter_missing, fit_impute, fit_standardize,
)
from .survival import CoxModel, ConvergenceError, survival_curve, write_curves

log = logging.getLogger(__name__)

TASKS = {"mortality": "bce", "survival": "pll"}
CHECKPOINT_VERSION = 1


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "survival"
    encoder: str = "attention"
    batch_size: int = 24
    seq_len: int = 512
    epochs: int = 4
    dropout: float = 0.1
    lr: float = 1e-2
    encoder_lr: float | None = 3e-3
    activation: str = "selu"
    hidden: tuple[int, ...] = (64, 64)
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    vocab_size: int = 8000
    tfidf_features: int = 2000
    extra_stopwords: tuple[str, ...] = ()
    split_fraction: float = 0.7
    folds: int = 5
    stratify: bool = True
    seed: int = 0
    missing_threshold: float = 0.4
    impute_iterations: int = 10
    baselines: bool = True
    curve_points: int = 100
    attention_notes: int = 4
    data_path: str = ""
    out_dir: str = "out"
    # synthetic cohort, used when data_path is empty
    sim_n: int = 2000
    sim_beta: tuple[float, ...] = (0.8, -0.6, 0.4, 0.0, 0.0)
    sim_signal: tuple[tuple[str, float], ...] = (
        ("pneumothorax", 2.25), ("hemorrhage", 1.8), ("intubated", 1.5),
        ("stable", -1.8), ("ambulating", -1.5))
    sim_rate: float = 0.01
    sim_horizon: float = 100.0
    sim_missing: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}")
        if self.encoder not in ("none", "tfidf", "attention"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.activation not in ("relu", "selu"):
            raise ValueError("activation must be relu or selu")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("batch_size must be >= 1 and seq_len >= 2")

    @property
    def loss(self) -> str:
        return TASKS[self.task]

    @property
    def metric(self) -> str:
        return "auc" if self.task == "mortality" else "c_index"

    def model_config(self, encoder: str | None = None) -> ModelConfig:
        enc = EncoderConfig(layers=self.layers, heads=self.heads, d_model=self.d_model,
                            max_len=self.seq_len, dropout=self.dropout,
                            activation=self.activation)
        return ModelConfig(encoder=encoder or self.encoder, hidden=self.hidden,
                           activation=self.activation, dropout=self.dropout,
                           encoder_config=enc, vocab_size=self.vocab_size,
                           tfidf_features=self.tfidf_features,
                           extra_stopwords=self.extra_stopwords)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.lr,
                           self.seed if seed is None else seed, self.encoder_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kwargs[f.name] = v
        return cls(**kwargs)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _split_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _parse_signal(text: str) -> tuple[tuple[str, float], ...]:
    pairs = []
    for item in _split_list(text):
        token, _, value = item.partition(":")
        pairs.append((token.strip(), float(value)))
    return tuple(pairs)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    "str": str,
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "float | None": lambda s: None if s.strip().lower() in ("", "none") else float(s),
    "tuple[int, ...]": lambda s: tuple(int(x) for x in _split_list(s)),
    "tuple[float, ...]": lambda s: tuple(float(x) for x in _split_list(s)),
    "tuple[str, ...]": lambda s: tuple(_split_list(s)),
    "tuple[tuple[str, float], ...]": _parse_signal,
}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_field(name: str, text: str) -> Any:
    if name not in _FIELD_TYPES:
        raise KeyError(f"unknown config key {name!r}")
    try:
        return _PARSERS[_FIELD_TYPES[name]](text)
    except ValueError as err:
        raise ValueError(f"config key {name!r}: {err}") from None


def _profiles() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read_string(resources.files("notesurv").joinpath("data")
                       .joinpath("defaults.ini").read_text(encoding="utf-8"))
    return parser


def profile_names() -> list[str]:
    return _profiles().sections()


def load_config(path=None, profile: str | None = None,
                **overrides) -> tuple[ExperimentConfig, dict[str, list]]:
    """Build a config from a profile, an optional INI file and overrides.

    Returns the config and the grid (empty unless the file has a [grid]
    section).
    """
    values: dict[str, Any] = {}
    grid: dict[str, list] = {}
    user = configparser.ConfigParser()
    if path is not None:
        if not user.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        if user.has_section("experiment"):
            profile = profile or user.get("experiment", "profile", fallback=None)
    if profile:
        profiles = _profiles()
        if not profiles.has_section(profile):
            raise KeyError(f"unknown profile {profile!r}; choose from {profiles.sections()}")
        values.update({k: parse_field(k, v) for k, v in profiles.items(profile)
                       if k not in profiles.defaults()})
    if user.has_section("experiment"):
        values.update({k: parse_field(k, v) for k, v in user.items("experiment")
                       if k != "profile"})
    if user.has_section("grid"):
        for k, v in user.items("grid"):
            grid[k] = [parse_field(k, item) for item in _grid_items(k, v)]
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values), grid


def _grid_items(name: str, text: str) -> list[str]:
    # tuple-valued keys separate alternatives with ';'
    if _FIELD_TYPES.get(name, "").startswith("tuple"):
        return [s.strip() for s in text.split(";") if s.strip()]
    return _split_list(text)


# -- splitting ---------------------------------------------------------------

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _class_orders(events: np.ndarray, rng: np.random.Generator, stratify: bool):
    if not stratify:
        return [rng.permutation(events.size)]
    return [rng.permutation(np.flatnonzero(events == c)) for c in (0, 1)]


def split_indices(events: Sequence[int], fraction: float = 0.7, seed: int = 0,
                  stratify: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Random train/test index split with ceil(fraction * n) training rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    events = np.asarray(events)
    n = events.size
    n_train = math.ceil(fraction * n - 1e-9)
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} records at {fraction} leaves one side empty")
    rng = np.random.default_rng(seed)
    groups = [g for g in _class_orders(events, rng, stratify) if g.size]
    # largest-remainder allocation keeps class shares and the exact total
    quotas = np.array([fraction * g.size for g in groups])
    take = np.floor(quotas).astype(int)
    for k in np.argsort(-(quotas - take), kind="stable")[: n_train - take.sum()]:
        take[k] += 1
    train = np.concatenate([g[:t] for g, t in zip(groups, take)])
    test = np.concatenate([g[t:] for g, t in zip(groups, take)])
    return np.sort(train), np.sort(test)


def split(dataset: SurvivalDataset, fraction: float = 0.7, seed: int = 0,
          stratify: bool = True) -> tuple[SurvivalDataset, SurvivalDataset]:
    tr, te = split_indices(dataset.events, fraction, seed, stratify)
    return dataset.subset(tr), dataset.subset(te)


def kfold_indices(events: Sequence[int], k: int = 5, seed: int = 0,
                  stratify: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validation folds partition the rows; fold sizes differ by at most one."""
    events = np.asarray(events)
    n = events.size
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    order = np.concatenate(_class_orders(events, rng, stratify))
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


def kfold(dataset: SurvivalDataset, k: int = 5, seed: int = 0, stratify: bool = True):
    return [(dataset.subset(tr), dataset.subset(va))
            for tr, va in kfold_indices(dataset.events, k, seed, stratify)]


# -- fitted experiment -------------------------------------------------------

@dataclass
class Preprocessor:
    threshold: float
    imputer: Imputer
    standardizer: Standardizer

    @classmethod
    def fit(cls, train: SurvivalDataset, threshold: float = 0.4, iterations: int = 10,
            seed: int = 0) -> tuple["Preprocessor", SurvivalDataset]:
        kept = filter_missing(train, threshold)
        imputer, imputed = fit_impute(kept, iterations, seed)
        std = fit_standardize(imputed)
        return cls(threshold, imputer, std), std.apply(imputed)

    def transform(self, dataset: SurvivalDataset) -> SurvivalDataset:
        kept = filter_missing(dataset, self.threshold)
        return self.standardizer.apply(self.imputer.apply(kept))

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "imputer": self.imputer.to_dict(),
                "standardizer": self.standardizer.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Preprocessor":
        return cls(d["threshold"], Imputer.from_dict(d["imputer"]),
                   Standardizer.from_dict(d["standardizer"]))


@dataclass
class EvalReport:
    task: str
    n: int
    auc: float | None = None
    c_index: float | None = None
    confusion: ConfusionMatrix | None = None
    roc: RocCurve | None = None
    loss_history: list[float] = field(default_factory=list)
    baselines: dict[str, Any] = field(default_factory=dict)

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n": self.n,
            "auc": self.auc,
            "c_index": self.c_index,
            "confusion": self.confusion.to_dict() if self.confusion else None,
            "roc_points": self.roc.points if self.roc else None,
            "loss_history": list(self.loss_history),
            "baselines": self.baselines,
        }


@dataclass
class FittedExperiment:
    config: ExperimentConfig
    preprocessor: Preprocessor
    model: NeuralSurvModel
    baselines: dict[str, Any] = field(default_factory=dict)

    def evaluate(self, raw: SurvivalDataset) -> EvalReport:
        data = self.preprocessor.transform(raw)
        report = EvalReport(self.config.task, len(data),
                            loss_history=list(self.model.loss_history))
        scores = self.model.predict(data)
        if self.config.task == "mortality":
            report.roc = roc_auc(scores, data.events)
            report.auc = report.roc.auc
            report.confusion = confusion(scores, data.events)
        else:
            report.c_index = c_index(scores, data.times, data.events)
        for name, base in self.baselines.items():
            report.baselines[name] = _score_baseline(base, data, self.config.task)
        return report

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "preprocess": self.preprocessor.to_dict(),
            "model": self.model.to_dict(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "FittedExperiment":
        blob = json.loads(Path(path).read_text())
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('format_version')!r}")
        return cls(ExperimentConfig.from_dict(blob["config"]),
                   Preprocessor.from_dict(blob["preprocess"]),
                   NeuralSurvModel.from_dict(blob["model"]))


def _score_baseline(base, data: SurvivalDataset, task: str):
    if isinstance(base, str):
        return {"error": base}
    scores = base.predict(data)
    if task == "mortality":
        return {"auc": roc_auc(scores, data.events).auc}
    return {"c_index": c_index(scores, data.times, data.events)}


def fit_experiment(train_raw: SurvivalDataset, config: ExperimentConfig,
                   seed: int | None = None) -> FittedExperiment:
    """Fit preprocessing and model on ``train_raw`` only."""
    seed = config.seed if seed is None else seed
    pre, train = Preprocessor.fit(train_raw, config.missing_threshold,
                                  config.impute_iterations, seed)
    model = fit_neural(train, config.model_config(), config.loss, config.train_config(seed))
    fitted = FittedExperiment(config, pre, model)
    if config.baselines:
        fitted.baselines = _fit_baselines(train, config, seed)
    return fitted


def _fit_baselines(train: SurvivalDataset, config: ExperimentConfig, seed: int):
    out: dict[str, Any] = {}
    if config.task == "survival":
        try:
            out["cox"] = CoxModel.fit(train)
        except (ConvergenceError, np.linalg.LinAlgError) as err:
            out["cox"] = str(err)
    elif config.encoder != "none":
        out["mlp_no_notes"] = fit_neural(train, config.model_config(encoder="none"),
                                         config.loss, config.train_config(seed))
    return out


# -- cross-validation and grid search ----------------------------------------

@dataclass
class CvReport:
    metric: str
    folds: list[EvalReport]

    @property
    def values(self) -> np.ndarray:
        return np.array([f.metric(self.metric) for f in self.folds], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std())

    @property
    def mean_confusion(self) -> ConfusionMatrix | None:
        mats = [f.confusion for f in self.folds if f.confusion is not None]
        return mean_confusion(mats) if mats else None

    def to_dict(self) -> dict:
        cm = self.mean_confusion
        return {
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "fold_values": self.values.tolist(),
            "mean_confusion": cm.to_dict() if cm else None,
            "folds": [f.to_dict() for f in self.folds],
        }


def _run_fold(dataset, config, cell, fold, tr, va):
    seed = derive_seed(config.seed, cell, fold)
    fitted = fit_experiment(dataset.subset(tr), config, seed)
    return fitted.evaluate(dataset.subset(va))


def cross_validate(dataset: SurvivalDataset, config: ExperimentConfig, cell: int = 0,
                   workers: int = 1) -> CvReport:
    """k-fold CV with preprocessing refit inside every fold.

    Fold membership depends only on ``config.seed``; each fold trains with
    a seed derived from (seed, cell, fold), so results do not depend on
    scheduling.
    """
    folds = kfold_indices(dataset.events, config.folds, config.seed, config.stratify)
    jobs = [(dataset, config, cell, f, tr, va) for f, (tr, va) in enumerate(folds)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(lambda job: _run_fold(*job), jobs))
    else:
        reports = [_run_fold(*job) for job in jobs]
    return CvReport(config.metric, reports)


@dataclass
class GridResult:
    best: ExperimentConfig
    best_report: CvReport
    table: list[dict]

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(), "best_mean": self.best_report.mean,
                "table": self.table}


def grid_cells(base: ExperimentConfig, grid: dict[str, Sequence]) -> list[ExperimentConfig]:
    if not grid:
        return [base]
    keys = list(grid)
    return [replace(base, **dict(zip(keys, combo)))
            for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(dataset: SurvivalDataset, base: ExperimentConfig,
                grid: dict[str, Sequence], workers: int = 1) -> GridResult:
    """Cross-validate every grid cell; pick the highest mean headline metric.

    Ties go to the earliest cell.  Failing cells are reported and skipped.
    """
    cells = grid_cells(base, grid)
    table, best, best_report = [], None, None
    for k, cfg in enumerate(cells):
        row = {"cell": k, "params": {key: _jsonable(getattr(cfg, key)) for key in grid}}
        try:
            report = cross_validate(dataset, cfg, cell=k, workers=workers)
        except (ValueError, RuntimeError, FloatingPointError) as err:
            log.warning("grid cell %d failed: %s", k, err)
            row.update(status="failed", error=str(err))
            table.append(row)
            continue
        row.update(status="ok", metric=report.metric, fold_values=report.values.tolist(),
                   mean=report.mean, std=report.std)
        table.append(row)
        if best_report is None or report.mean > best_report.mean:
            best, best_report = cfg, report
    if best is None:
        raise RuntimeError("every grid cell failed")
    return GridResult(best, best_report, table)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


# -- pipeline ----------------------------------------------------------------

def load_data(config: ExperimentConfig) -> SurvivalDataset:
    if config.data_path:
        return load_dataset(config.data_path)
    return simulate(config.sim_n, config.sim_beta, config.sim_rate, config.sim_horizon,
                    dict(config.sim_signal), config.seed, missing_rate=config.sim_missing)


def update_manifest(out_dir, config: ExperimentConfig, artifacts: dict[str, Path]) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"artifacts": {}}
    manifest["config_hash"] = config.digest()
    manifest["config"] = config.to_dict()
    for name, p in artifacts.items():
        manifest["artifacts"][name] = str(Path(p).relative_to(out_dir))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def write_curves_for(fitted: FittedExperiment, raw: SurvivalDataset, path) -> Path:
    model = fitted.model
    if model.baseline is None:
        raise ValueError("survival curves need a model trained on the survival task")
    data = fitted.preprocessor.transform(raw)
    times = model.baseline.times
    step = max(1, math.ceil(times.size / max(1, fitted.config.curve_points)))
    grid = np.concatenate([[0.0], times[::step]])
    risks = model.output(data)
    write_curves(path, ((pid, survival_curve(model.baseline, r, grid))
                        for pid, r in zip(data.ids, risks)))
    return Path(path)


def write_attention_for(fitted: FittedExperiment, raw: SurvivalDataset, path) -> Path:
    data = fitted.preprocessor.transform(raw)
    dumps = [fitted.model.attention(r) for r in data.records[: fitted.config.attention_notes]]
    return dump_attention(dumps, path)


def run_pipeline(config: ExperimentConfig, out_dir=None) -> dict[str, Path]:
    """Ingest, split, preprocess on train, fit, evaluate on test, write artifacts."""
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_data(config)
    train, test = split(data, config.split_fraction, config.seed, config.stratify)
    fitted = fit_experiment(train, config)
    report = fitted.evaluate(test)

    artifacts = {
        "metrics": write_report(report.to_dict(), out_dir / "metrics.json"),
        "checkpoint": fitted.save(out_dir / "checkpoint.json"),
    }
    if config.task == "survival":
        artifacts["curves"] = write_curves_for(fitted, test, out_dir / "curves.csv")
    if config.encoder == "attention":
        artifacts["attention"] = write_attention_for(fitted, test, out_dir / "attention.json")
    update_manifest(out_dir, config, artifacts)
    return artifacts
