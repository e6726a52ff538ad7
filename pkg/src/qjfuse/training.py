"""Optimizer, metrics, training loop with early stopping, and evaluation helpers."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import Coupling, Dataset, SyntheticSpec, generate_synthetic, iter_batches, load_splits, mask_features, split_dataset
from .losses import task_loss, total_loss
from .model import ModelConfig, QJFusionModel

log = logging.getLogger(__name__)

DEFAULT_MASK_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

# Per-dataset presets; modality learning rates map text/audio/video onto parameter groups.
PRESETS = {
    "mosi": {"steps": 20, "temperature": 0.07, "batch_size": 32, "dropout": 0.1,
             "lr": {"modality:text": 5e-5, "modality:audio": 2e-3, "modality:video": 2e-4}},
    "mosei": {"steps": 10, "temperature": 0.07, "batch_size": 16, "dropout": 0.15,
              "lr": {"modality:text": 5e-6, "modality:audio": 1e-4, "modality:video": 2e-5}},
    "sims": {"steps": 20, "temperature": 0.05, "batch_size": 32, "dropout": 0.1,
             "lr": {"modality:text": 5e-6, "modality:audio": 1e-3, "modality:video": 5e-5}},
}


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam moments with decoupled weight decay and per-group learning rates."""

    def __init__(self, params: dict[str, ad.Tensor], groups: dict[str, list[str]], lrs: dict[str, float],
                 weight_decay: float = 5e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = {}
        default = lrs.get("default", 1e-3)
        for g, names in groups.items():
            for n in names:
                self.lr[n] = float(lrs.get(g, default))
        for v in self.lr.values():
            if not v > 0:
                raise ConfigError("learning rates must be positive")
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = grads.get(n)
            if g is None:
                g = np.zeros_like(p.data)
            lr = self.lr[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            p.data *= 1.0 - lr * self.wd
            p.data -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


# ------------------------------------------------------------------ metrics


def weighted_f1(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    total = 0.0
    for c in np.unique(y_true):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += f1 * np.sum(y_true == c)
    return float(total / len(y_true)) if len(y_true) else 0.0


def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0)) if denom > 0 else 0.0


def class_scores(num_classes: int, configured=None) -> np.ndarray:
    if configured is not None:
        return np.asarray(configured, dtype=np.float64)
    return np.linspace(-3.0, 3.0, num_classes)


def metrics_from_probs(probs: np.ndarray, labels, scores=None, centers=None) -> dict:
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    out = {"accuracy": float(np.mean(pred == labels)) if len(labels) else 0.0,
           "f1_weighted": weighted_f1(labels, pred)}
    if scores is not None and np.isfinite(scores).any():
        ok = np.isfinite(scores)
        s_true = scores[ok]
        s_pred = probs[ok] @ class_scores(probs.shape[1], centers)
        out["acc2"] = float(np.mean((s_pred >= 0) == (s_true >= 0)))
        out["acc3"] = float(np.mean(np.sign(np.round(s_pred)) == np.sign(np.round(s_true))))
        out["acc5"] = float(np.mean(np.round(np.clip(s_pred, -2, 2)) == np.round(np.clip(s_true, -2, 2))))
        out["acc7"] = float(np.mean(np.round(np.clip(s_pred, -3, 3)) == np.round(np.clip(s_true, -3, 3))))
        out["mae"] = float(np.mean(np.abs(s_pred - s_true)))
        out["corr"] = pearson(s_pred, s_true)
    return out


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    batch_size: int = 32
    epochs: int = 50
    patience: int = 5
    lr: dict = field(default_factory=lambda: {"default": 3e-3})
    weight_decay: float = 5e-3
    seed: int = 0
    mask_rates: list = field(default_factory=lambda: list(DEFAULT_MASK_RATES))
    mask_seeds: int = 5
    eval_batch_size: int = 256
    variants: list = field(default_factory=lambda: ["full", "no_qj"])
    checkpoint: str | None = None
    validate: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_json(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        preset = obj.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model_obj = dict(obj.pop("model", {}))
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            pre = PRESETS[preset]
            model_obj.setdefault("steps", pre["steps"])
            model_obj.setdefault("temperature", pre["temperature"])
            model_obj.setdefault("dropout", pre["dropout"])
            obj.setdefault("batch_size", pre["batch_size"])
            obj.setdefault("lr", dict(pre["lr"], default=1e-3))
        try:
            model = ModelConfig.from_json(model_obj)
            return cls(model=model, **obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_json(obj)


def load_data(cfg: RunConfig, base_dir: Path | None = None) -> dict[str, Dataset]:
    """Train/valid/test splits from a synthetic spec or a ``qjd1`` manifest."""
    spec = cfg.data
    if "synthetic" in spec:
        syn = dict(spec["synthetic"])
        syn.setdefault("dims", dict(cfg.model.modalities))
        try:
            s = SyntheticSpec(**syn)
        except TypeError as exc:
            raise ConfigError(f"synthetic spec: {exc}") from None
        full = generate_synthetic(s)
        splits = split_dataset(full, cfg.split, cfg.seed)
    elif "manifest" in spec:
        path = Path(spec["manifest"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        splits = load_splits(path)
        if "train" not in splits:
            raise ConfigError("manifest must provide a 'train' split")
        if "valid" not in splits or "test" not in splits:
            pieces = split_dataset(splits["train"], cfg.split, cfg.seed)
            splits = {**pieces, **{k: v for k, v in splits.items() if k != "train"}}
    else:
        raise ConfigError("data must contain 'synthetic' or 'manifest'")
    names = list(cfg.model.modalities)
    for split, ds in splits.items():
        missing = [n for n in names if n not in ds.features]
        if missing:
            raise ConfigError(f"split {split!r} lacks modalities {missing}")
        for n in names:
            if ds.features[n].shape[1] != cfg.model.modalities[n]:
                raise ConfigError(f"modality {n!r}: data dim {ds.features[n].shape[1]} != model dim "
                                  f"{cfg.model.modalities[n]}")
        if ds.num_classes != cfg.model.C:
            raise ConfigError(f"data has {ds.num_classes} classes, model expects {cfg.model.C}")
        splits[split] = ds.select_modalities(names)
    return splits


# ------------------------------------------------------------------- training


def _batch_features(ds: Dataset, idx) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in ds.features.items()}


def batch_loss(model: QJFusionModel, ds: Dataset, idx, tag: str, dropout_rng=None):
    out = model.forward(_batch_features(ds, idx), [ds.ids[i] for i in idx], tag=tag, dropout_rng=dropout_rng)
    task = task_loss(out.prediction.probs, ds.labels[idx])
    con = model.contrastive(out.states)
    return total_loss(task, con, model.params), task, con, out


def evaluate(model: QJFusionModel, ds: Dataset, batch_size: int = 256, record_entropy: bool = False) -> dict:
    probs, ent, jumps, task_sum = [], [], [], 0.0
    for idx in iter_batches(ds, batch_size):
        out = model.forward(_batch_features(ds, idx), [ds.ids[i] for i in idx], tag="eval",
                            record_entropy=record_entropy)
        p = out.prediction.probs.data
        probs.append(p)
        ent.append(out.entropy.mean(axis=1))
        if out.records is not None:
            jumps.append(out.records.jumps.mean(axis=0).reshape(len(idx), -1).mean(axis=1))
        task_sum += task_loss(out.prediction.probs, ds.labels[idx]).item() * len(idx)
    probs = np.concatenate(probs) if probs else np.zeros((0, model.cfg.C))
    metrics = metrics_from_probs(probs, ds.labels, ds.scores, model.cfg.class_scores)
    metrics["task_loss"] = task_sum / max(len(ds), 1)
    metrics["mean_entropy"] = float(np.concatenate(ent).mean()) if ent else 0.0
    metrics["jump_fraction"] = float(np.concatenate(jumps).mean()) if jumps else 0.0
    return metrics


@dataclass
class TrainResult:
    model: QJFusionModel
    history: list
    best_epoch: int
    metrics: dict


def train(cfg: RunConfig, splits: dict[str, Dataset] | None = None, progress=None) -> TrainResult:
    """Train with AdamW and early stopping on validation task loss; returns the best model."""
    splits = splits if splits is not None else load_data(cfg)
    train_ds, valid_ds = splits["train"], splits["valid"]
    model = QJFusionModel(cfg.model, seed=cfg.seed)
    opt = AdamW(model.params, model.parameter_groups(), cfg.lr, cfg.weight_decay)
    best = (np.inf, -1, None)
    history, bad_epochs = [], 0
    for epoch in range(cfg.epochs):
        losses = []
        for b, idx in enumerate(iter_batches(train_ds, cfg.batch_size, cfg.seed, epoch)):
            drng = np.random.default_rng([cfg.seed, epoch, b, 0xD0])
            try:
                with Tape() as tape:
                    loss, task, con, _ = batch_loss(model, train_ds, idx, f"train{epoch}", drng)
                grads = tape.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value in epoch {epoch} batch {b} "
                                    f"(first id {train_ds.ids[idx[0]]}): {exc}") from exc
            named = {n: grads.get(p.node_id) for n, p in model.params.items()}
            if any(g is not None and not np.isfinite(g).all() for g in named.values()):
                raise TrainingError(f"non-finite gradient in epoch {epoch} batch {b} "
                                    f"(first id {train_ds.ids[idx[0]]})")
            opt.step(named)
            losses.append((loss.item(), task.item(), con.item()))
        val = evaluate(model, valid_ds, cfg.eval_batch_size)
        arr = np.array(losses)
        row = {"epoch": epoch, "train_total": float(arr[:, 0].mean()), "train_task": float(arr[:, 1].mean()),
               "train_con": float(arr[:, 2].mean()), "valid_task": val["task_loss"],
               "valid_accuracy": val["accuracy"]}
        history.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d: %s", epoch, row)
        if val["task_loss"] < best[0]:
            best = (val["task_loss"], epoch, {n: p.data.copy() for n, p in model.params.items()})
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    for n, arr in best[2].items():
        model.params[n].data[...] = arr
    test = evaluate(model, splits["test"], cfg.eval_batch_size)
    return TrainResult(model, history, best[1], test)


def masked_eval(model: QJFusionModel, ds: Dataset, rates, seeds: int = 5, base_seed: int = 0,
                batch_size: int = 256) -> list[dict]:
    """Metrics at each mask rate, averaged over ``seeds`` mask draws (rate 0 is evaluated once)."""
    rows = []
    for rate in rates:
        runs = []
        for s in range(1 if rate == 0 else seeds):
            masked = ds if rate == 0 else mask_features(ds, rate, base_seed + s)
            runs.append(evaluate(model, masked, batch_size))
        keys = [k for k in runs[0] if isinstance(runs[0][k], float)]
        rows.append({"mask_rate": float(rate), **{k: float(np.mean([r[k] for r in runs])) for k in keys}})
    return rows


def average_drop_rate(rows: list[dict], metric: str) -> float:
    """Mean relative decline (%) of ``metric`` at masked rates versus the unmasked row."""
    base = rows[0][metric]
    drops = [(base - r[metric]) / base * 100.0 for r in rows[1:]] if base else []
    return float(np.mean(drops)) if drops else 0.0


def with_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Copy of ``cfg`` for an ablation: a :class:`Variant` name or ``only:<modality>``."""
    out = copy.deepcopy(cfg)
    if variant.startswith("only:"):
        name = variant.split(":", 1)[1]
        if name not in out.model.modalities:
            raise ConfigError(f"unknown modality {name!r} in variant {variant!r}")
        out.model.modalities = {name: out.model.modalities[name]}
        out.model.variant = "full"
    else:
        try:
            out.model.variant = ModelConfig(variant=variant).variant
        except ValueError:
            raise ConfigError(f"unknown variant {variant!r}") from None
    return out


def ablate(cfg: RunConfig, variants, splits: dict[str, Dataset] | None = None, progress=None) -> list[dict]:
    """Train every variant on the same splits and seed; one result row per variant.

    Single-modality variants see the same samples restricted to their modality.
    """
    splits = splits if splits is not None else load_data(cfg)
    rows = []
    for v in variants:
        vcfg = with_variant(cfg, v)
        names = list(vcfg.model.modalities)
        vsplits = {k: ds.select_modalities(names) for k, ds in splits.items()}
        res = train(vcfg, vsplits, progress=None if progress is None else (lambda r, v=v: progress(v, r)))
        m = res.metrics
        row = {"variant": v, "seed": cfg.seed, "best_epoch": res.best_epoch, "epochs_run": len(res.history)}
        row.update({k: m[k] for k in sorted(m)})
        rows.append(row)
    return rows


__all__ = ["ablate", "AdamW", "RunConfig", "ConfigError", "TrainingError", "train", "evaluate", "masked_eval",
           "average_drop_rate", "metrics_from_probs", "weighted_f1", "pearson", "load_data",
           "with_variant", "Coupling", "PRESETS", "DEFAULT_MASK_RATES"]
