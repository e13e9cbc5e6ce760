"""Training regimes, early stopping and the split x run experiment protocol."""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .exceptions import ConfigError, GatposError, TrainingAborted
from .graph import Dataset, SplitAssignment, build_negative_distribution, generate_splits, load_splits
from .layers import (
    MODEL_KINDS,
    POSITIONAL_KINDS,
    GraphModel,
    ModelHyperparams,
    PositionalModel,
    build_model,
    positional_forward,
)
from .objectives import Adam, LossReport, l2_penalty, supervised_loss, unsupervised_loss

logger = logging.getLogger(__name__)

REGIMES = ("joint", "frozen")
_MASK64 = (1 << 64) - 1
# run index used when deriving split-generation seeds, outside any real run index
_SPLIT_STREAM = 1 << 32


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 output function (64-bit avalanche mix)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, split: int, run: int) -> int:
    """Seed for (split, run): ``mix(mix(mix(master) ^ split) ^ run)``."""
    h = splitmix64(master & _MASK64)
    h = splitmix64(h ^ (split & _MASK64))
    return splitmix64(h ^ (run & _MASK64))


@dataclass
class ExperimentConfig:
    """Everything that determines a run. Defaults are the published GAT-POS settings."""

    dataset: str = ""
    model: str = "gat-pos"
    regime: str = "joint"
    seed: int = 0
    num_splits: int = 10
    runs_per_split: int = 10
    splits: str = "generate"
    lr: float = 5e-3
    weight_decay: float = 5e-4
    dropout: float = 0.5
    positional_dim: int = 64
    positional_layers: int = 2
    hidden_units: int | None = None
    hidden_heads: int | None = None
    output_heads: int = 1
    gcn_hidden: int = 64
    residual: bool = True
    leaky_slope: float = 0.2
    lam: float = 1.0
    num_negatives: int = 1
    negative_exponent: float = 0.75
    normalize_losses: bool = False
    max_epochs: int = 1000
    patience: int = 100

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.regime == "frozen" and self.model not in POSITIONAL_KINDS:
            raise ConfigError("the frozen regime needs a positional model kind")
        if self.runs_per_split < 1 or self.num_splits < 1:
            raise ConfigError("num_splits and runs_per_split must be at least 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be at least 1")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict, **overrides) -> "ExperimentConfig":
        """Build from a mapping, rejecting unknown keys; ``overrides`` win."""
        known = set(cls.field_names())
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)

    def hyperparams(self, dataset_name: str) -> ModelHyperparams:
        return ModelHyperparams.for_dataset(
            dataset_name,
            hidden_units=self.hidden_units,
            hidden_heads=self.hidden_heads,
            output_heads=self.output_heads,
            positional_dim=self.positional_dim,
            positional_layers=self.positional_layers,
            dropout=self.dropout,
            leaky_slope=self.leaky_slope,
            residual=self.residual,
            gcn_hidden=self.gcn_hidden,
        )


@dataclass
class RunResult:
    test_accuracy: float
    best_val_accuracy: float
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)
    pretrain_history: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        """JSON form; wall time is left out so artifacts are reproducible."""
        return {
            "test_accuracy": self.test_accuracy,
            "best_val_accuracy": self.best_val_accuracy,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "history": self.history,
            "pretrain_history": self.pretrain_history,
        }


def evaluate(model: GraphModel, dataset: Dataset, idx, params: dict | None = None) -> float:
    """Accuracy of argmax predictions (ties to the lowest class) with dropout off."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        return 0.0
    pred = predict_logits(model, dataset, params).argmax(axis=1)
    return _accuracy(pred, dataset.labels, idx)


def _features(tape, dataset: Dataset):
    x = dataset.feature_operand
    return tape.constant(x) if isinstance(x, np.ndarray) else x


def _accuracy(pred, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    return float(np.mean(pred[idx] == labels[idx])) if len(idx) else 0.0


def predict_logits(model: GraphModel, dataset: Dataset, params: dict | None = None) -> np.ndarray:
    params = model.params if params is None else params
    tape = Tape()
    leaves = {k: tape.constant(v) for k, v in params.items()}
    out = model.forward(leaves, _features(tape, dataset), dataset.graph, training=False)
    return out.logits.data


class _Objective:
    """Builds the per-epoch total loss and its gradients for one run."""

    def __init__(self, model: GraphModel, dataset: Dataset, split: SplitAssignment, config: ExperimentConfig):
        self.model = model
        self.dataset = dataset
        self.split = split
        self.config = config
        self.dist = None
        if model.has_positional and dataset.graph.num_arcs:
            self.dist = build_negative_distribution(dataset.graph, config.negative_exponent)

    def _positional_loss(self, p, rng, negatives=None):
        cfg, graph = self.config, self.dataset.graph
        lu = unsupervised_loss(p, graph, self.dist, cfg.num_negatives, rng, negatives)
        if cfg.normalize_losses:
            lu = ad.scale(lu, 1.0 / (graph.num_arcs * (1 + cfg.num_negatives)))
        return lu

    def __call__(self, params, trainable, rng, use_unsupervised=True, training=True, negatives=None):
        cfg, model, ds = self.config, self.model, self.dataset
        tape = Tape()
        leaves = {k: tape.variable(v, name=k) if k in trainable else tape.constant(v, name=k)
                  for k, v in params.items()}
        out = model.forward(leaves, _features(tape, ds), ds.graph, rng, training)

        ls = supervised_loss(out.logits, ds.labels, self.split.train_idx)
        if cfg.normalize_losses:
            ls = ad.scale(ls, 1.0 / len(self.split.train_idx))
        total = ls
        lu_value = 0.0
        if use_unsupervised and out.positional is not None and self.dist is not None:
            lu = self._positional_loss(out.positional, rng, negatives)
            lu_value = lu.item()
            total = ad.add(total, ad.scale(lu, cfg.lam))
        decayed = [leaves[k] for k in model.weight_names if k in trainable]
        l2_value = 0.0
        if decayed and cfg.weight_decay:
            l2 = l2_penalty(decayed)
            l2_value = l2.item()
            total = ad.add(total, ad.scale(l2, cfg.weight_decay))
        report = LossReport(ls.item(), lu_value, l2_value, total.item())
        grads = ad.backward(tape, total, [leaves[k] for k in trainable])
        return report, {leaf.name: g for leaf, g in grads.items()}


def _check_finite(report: LossReport, epoch: int):
    for term in ("supervised", "unsupervised", "l2_penalty", "total"):
        if not math.isfinite(getattr(report, term)):
            raise TrainingAborted(f"non-finite {term} loss at epoch {epoch}", epoch=epoch, term=term)


def _supervised_phase(model, dataset, split, config, rng, trainable, use_unsupervised):
    params = model.params
    objective = _Objective(model, dataset, split, config)
    opt = Adam(config.lr)
    best_val, best_epoch, snapshot, bad = -1.0, 0, None, 0
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        report, grads = objective(params, trainable, rng, use_unsupervised=use_unsupervised)
        _check_finite(report, epoch)
        opt.step(params, grads)
        pred = predict_logits(model, dataset, params).argmax(axis=1)
        val_acc = _accuracy(pred, dataset.labels, split.val_idx)
        train_acc = _accuracy(pred, dataset.labels, split.train_idx)
        history.append({"epoch": epoch, **report.as_dict(), "train_acc": train_acc, "val_acc": val_acc})
        if val_acc > best_val:
            best_val, best_epoch, bad = val_acc, epoch, 0
            snapshot = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
            if bad >= config.patience:
                break
    # restore the best-validation parameters in place
    for k, v in snapshot.items():
        params[k][...] = v
    return best_val, best_epoch, epoch, history


def train_joint(model: GraphModel, dataset: Dataset, split: SplitAssignment, config: ExperimentConfig,
                rng: np.random.Generator) -> RunResult:
    """Optimize all parameters on supervised + lambda * unsupervised + L2.

    ``model.params`` ends at the best-validation snapshot.
    """
    start = time.perf_counter()
    trainable = list(model.params)
    best_val, best_epoch, epochs, history = _supervised_phase(
        model, dataset, split, config, rng, trainable, use_unsupervised=True
    )
    test_acc = evaluate(model, dataset, split.test_idx)
    return RunResult(test_acc, best_val, best_epoch, epochs, history, wall_time=time.perf_counter() - start)


def pretrain_positional(model: GraphModel, dataset: Dataset, config: ExperimentConfig, rng,
                        negatives=None) -> list:
    """Fit the positional parameters alone on the unsupervised loss.

    Early-stops on the loss itself and restores the lowest-loss snapshot.
    ``negatives`` (``[arcs, Q]``) holds the negative draws fixed across
    epochs, making the objective deterministic; by default they are redrawn
    every epoch.
    """
    params = model.params
    names = model.positional_names
    dist = build_negative_distribution(dataset.graph, config.negative_exponent)
    opt = Adam(config.lr)
    best, snapshot, bad, history = math.inf, None, 0, []
    for epoch in range(1, config.max_epochs + 1):
        tape = Tape()
        leaves = {k: tape.variable(params[k], name=k) for k in names}
        weights = [leaves[f"pos.W{t + 1}"] for t in range(model.hyperparams.positional_layers)]
        p = positional_forward(PositionalModel(leaves["pos.p0"], weights))
        lu = unsupervised_loss(p, dataset.graph, dist, config.num_negatives, rng, negatives)
        value = lu.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite unsupervised loss at pretraining epoch {epoch}",
                                  epoch=epoch, term="unsupervised")
        grads = ad.backward(tape, lu, list(leaves.values()))
        history.append({"epoch": epoch, "unsupervised": value})
        if value < best:
            best, bad = value, 0
            snapshot = {k: params[k].copy() for k in names}
        else:
            bad += 1
            if bad >= config.patience:
                break
        opt.step(params, {leaf.name: g for leaf, g in grads.items()})
    for k, v in snapshot.items():
        params[k][...] = v
    return history


def train_frozen(model: GraphModel, dataset: Dataset, split: SplitAssignment, config: ExperimentConfig,
                 rng: np.random.Generator) -> RunResult:
    """Pretrain the positional model, freeze it, then train the classifier."""
    if not model.has_positional:
        raise ConfigError("the frozen regime needs a positional model kind")
    start = time.perf_counter()
    pretrain = pretrain_positional(model, dataset, config, rng)
    frozen = set(model.positional_names)
    trainable = [k for k in model.params if k not in frozen]
    best_val, best_epoch, epochs, history = _supervised_phase(
        model, dataset, split, config, rng, trainable, use_unsupervised=False
    )
    test_acc = evaluate(model, dataset, split.test_idx)
    return RunResult(test_acc, best_val, best_epoch, epochs, history, pretrain, time.perf_counter() - start)


def train_run(dataset: Dataset, split: SplitAssignment, config: ExperimentConfig, seed: int):
    """Build a fresh model from ``seed`` and train it under ``config.regime``."""
    rng = np.random.default_rng(seed)
    model = build_model(config.model, dataset, config.hyperparams(dataset.name), rng)
    trainer = train_frozen if config.regime == "frozen" else train_joint
    return model, trainer(model, dataset, split, config, rng)


# --------------------------------------------------------------------------
# experiment protocol


@dataclass
class AggregateResult:
    mean: float
    std: float
    per_run: list
    config: dict

    @classmethod
    def from_runs(cls, per_run, config: dict) -> "AggregateResult":
        per_run = sorted((int(s), int(r), float(a)) for s, r, a in per_run)
        accs = np.array([a for _, _, a in per_run])
        return cls(float(accs.mean()), float(accs.std()), per_run, config)

    @property
    def per_split(self) -> dict:
        out = {}
        for s, _, a in self.per_run:
            out.setdefault(s, []).append(a)
        return {s: float(np.mean(v)) for s, v in out.items()}

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "mean": self.mean,
            "std": self.std,
            "per_run": [list(t) for t in self.per_run],
            "per_split": {str(k): v for k, v in self.per_split.items()},
        }

    def cell(self) -> str:
        """``mean ± std%`` with two decimals, as printed in result tables."""
        return format_cell(self.mean, self.std)


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}%"


class ExperimentFailed(GatposError, RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def resolve_splits(config: ExperimentConfig, dataset: Dataset) -> list[SplitAssignment]:
    """Split files from ``config.splits`` (a directory of JSON files), or generated ones."""
    if config.splits == "generate":
        return [generate_splits(dataset, derive_seed(config.seed, i, _SPLIT_STREAM)) for i in range(config.num_splits)]
    files = sorted(Path(config.splits).glob("*.json"))
    if not files:
        raise ConfigError(f"no split files (*.json) found in {config.splits}")
    return [load_splits(f, dataset.num_nodes) for f in files[: config.num_splits]]


_WORKER_STATE: dict = {}


def _run_job(job):
    split_i, run_i = job
    dataset, splits, config = _WORKER_STATE["args"]
    seed = derive_seed(config.seed, split_i, run_i)
    _, result = train_run(dataset, splits[split_i], config, seed)
    logger.info("split %d run %d: test acc %.4f (best epoch %d)", split_i, run_i, result.test_accuracy, result.best_epoch)
    return split_i, run_i, result


def run_experiment(config: ExperimentConfig, dataset: Dataset, splits=None, jobs: int = 1) -> AggregateResult:
    """Train ``runs_per_split`` models on every split and aggregate test accuracy.

    The standard deviation is the population std over all split x run
    accuracies. With ``jobs > 1`` runs execute in forked worker processes;
    results are identical to the serial order.
    """
    splits = resolve_splits(config, dataset) if splits is None else list(splits)
    jobs_list = [(s, r) for s in range(len(splits)) for r in range(config.runs_per_split)]
    _WORKER_STATE["args"] = (dataset, splits, config)
    results, errors = [], []
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as pool:
                futures = [pool.submit(_run_job, job) for job in jobs_list]
                for fut in futures:
                    try:
                        results.append(fut.result())
                    except TrainingAborted as exc:
                        errors.append(exc)
        else:
            for job in jobs_list:
                try:
                    results.append(_run_job(job))
                except TrainingAborted as exc:
                    errors.append(exc)
    finally:
        _WORKER_STATE.clear()
    per_run = [(s, r, res.test_accuracy) for s, r, res in results]
    if errors:
        partial = AggregateResult.from_runs(per_run, config.to_dict()) if per_run else None
        raise ExperimentFailed(f"{len(errors)} run(s) aborted: {errors[0]}", partial)
    return AggregateResult.from_runs(per_run, config.to_dict())
