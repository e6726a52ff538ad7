"""Multimodal datasets: synthetic generators, JSON Lines ingestion, masking, splits."""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MANIFEST_FORMAT = "qjd1"


class SchemaError(ValueError):
    pass


@dataclass
class SampleRecord:
    id: str
    features: dict[str, np.ndarray]
    label: int
    score: float | None = None


@dataclass
class Dataset:
    """Column-oriented collection of samples; treat as immutable."""

    ids: list[str]
    features: dict[str, np.ndarray]
    labels: np.ndarray
    scores: np.ndarray | None = None
    num_classes: int = 2

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        for name, x in self.features.items():
            if x.shape[0] != n:
                raise SchemaError(f"modality {name!r} has {x.shape[0]} rows, expected {n}")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def modalities(self) -> dict[str, int]:
        return {name: x.shape[1] for name, x in self.features.items()}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset([self.ids[i] for i in idx], {k: v[idx] for k, v in self.features.items()},
                       self.labels[idx], None if self.scores is None else self.scores[idx],
                       self.num_classes)

    def select_modalities(self, names) -> "Dataset":
        return Dataset(list(self.ids), {k: self.features[k] for k in names}, self.labels,
                       self.scores, self.num_classes)

    def records(self) -> Iterator[SampleRecord]:
        for i, sid in enumerate(self.ids):
            score = None
            if self.scores is not None and np.isfinite(self.scores[i]):
                score = float(self.scores[i])
            yield SampleRecord(sid, {k: v[i] for k, v in self.features.items()}, int(self.labels[i]), score)

    @classmethod
    def from_records(cls, records, modalities: dict[str, int], num_classes: int) -> "Dataset":
        records = list(records)
        feats = {name: np.zeros((len(records), d)) for name, d in modalities.items()}
        for i, rec in enumerate(records):
            for name in modalities:
                feats[name][i] = rec.features[name]
        scores = None
        if any(r.score is not None for r in records):
            scores = np.array([np.nan if r.score is None else r.score for r in records])
        return cls([r.id for r in records], feats, np.array([r.label for r in records], dtype=np.int64),
                   scores, num_classes)


# ------------------------------------------------------------------ synthetic


class Coupling(str, enum.Enum):
    MARGINAL = "marginal"
    XOR_JOINT = "xor_joint"


@dataclass
class SyntheticSpec:
    n_samples: int = 4000
    dims: dict[str, int] = field(default_factory=lambda: {"m1": 32, "m2": 32, "m3": 32})
    coupling: Coupling = Coupling.XOR_JOINT
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.coupling = Coupling(self.coupling)
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.coupling is Coupling.XOR_JOINT and len(self.dims) < 2:
            raise ValueError("XOR_JOINT needs at least two modalities")


def unit_directions(dims: dict[str, int], seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0xD1])
    out = {}
    for name, d in dims.items():
        u = rng.normal(size=d)
        out[name] = u / np.linalg.norm(u)
    return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Binary-label multimodal data with a chosen cross-modal dependence.

    ``XOR_JOINT``: latent bits ``b1, b2``; label ``b1 xor b2``.  The first
    modality carries ``b1`` as ``+-u1`` plus Gaussian noise, the second ``b2``
    likewise, any further modality is unit Gaussian noise.  Each modality alone
    is independent of the label.  ``MARGINAL``: every modality carries the
    label itself.
    """
    rng = np.random.default_rng([spec.seed, 0x5A])
    names = list(spec.dims)
    dirs = unit_directions(spec.dims, spec.seed)
    n = spec.n_samples
    feats = {}
    if spec.coupling is Coupling.XOR_JOINT:
        bits = rng.integers(0, 2, size=(n, 2))
        labels = bits[:, 0] ^ bits[:, 1]
        for m, name in enumerate(names):
            d = spec.dims[name]
            if m < 2:
                sign = (2 * bits[:, m] - 1)[:, None]
                feats[name] = sign * dirs[name] + spec.noise * rng.normal(size=(n, d))
            else:
                feats[name] = rng.normal(size=(n, d))
    else:
        labels = rng.integers(0, 2, size=n)
        for name in names:
            sign = (2 * labels - 1)[:, None]
            feats[name] = sign * dirs[name] + spec.noise * rng.normal(size=(n, spec.dims[name]))
    width = len(str(n - 1))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    return Dataset(ids, feats, labels, None, num_classes=2)


# ---------------------------------------------------------------- JSON Lines


def score_to_class(score: float, num_classes: int) -> int:
    """Bin a sentiment score in [-3, 3] into ``num_classes`` ordered classes."""
    if num_classes == 2:
        return int(score >= 0)
    if num_classes == 3:
        return 0 if score < 0 else (1 if score == 0 else 2)
    if num_classes == 5:
        return int(np.round(np.clip(score, -2, 2))) + 2
    if num_classes == 7:
        return int(np.round(np.clip(score, -3, 3))) + 3
    edges = np.linspace(-3, 3, num_classes + 1)[1:-1]
    return int(np.searchsorted(edges, score, side="right"))


def _record_json(rec: SampleRecord) -> str:
    return json.dumps({"id": rec.id, "label": rec.label, "score": rec.score,
                       "features": {k: [float(x) for x in v] for k, v in rec.features.items()}})


def write_jsonl(path, dataset: Dataset) -> None:
    with open(path, "w") as fh:
        for rec in dataset.records():
            fh.write(_record_json(rec) + "\n")


def load_jsonl(path, modalities: dict[str, int], num_classes: int) -> Dataset:
    """Read and dimension-check a JSON Lines feature file.

    Records with a ``score`` but no ``label`` get a label binned from the score.
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "features" not in obj:
                raise SchemaError(f"{path}:{lineno}: record needs a 'features' object")
            feats = obj["features"]
            unknown = set(feats) - set(modalities)
            if unknown:
                raise SchemaError(f"{path}:{lineno}: unknown modality {sorted(unknown)[0]!r}")
            parsed = {}
            for name, d in modalities.items():
                if name not in feats:
                    raise SchemaError(f"{path}:{lineno}: missing modality {name!r}")
                v = np.asarray(feats[name], dtype=np.float64)
                if v.ndim == 2:  # [time, d] sequences are mean-pooled
                    v = v.mean(axis=0)
                if v.shape != (d,):
                    raise SchemaError(f"{path}:{lineno}: modality {name!r} has dim {v.shape}, expected {d}")
                if not np.isfinite(v).all():
                    raise SchemaError(f"{path}:{lineno}: non-finite values in {name!r}")
                parsed[name] = v
            score = obj.get("score")
            label = obj.get("label")
            if label is None:
                if score is None:
                    raise SchemaError(f"{path}:{lineno}: record needs 'label' or 'score'")
                label = score_to_class(float(score), num_classes)
            if not 0 <= int(label) < num_classes:
                raise SchemaError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            records.append(SampleRecord(str(obj.get("id", lineno)), parsed, int(label),
                                        None if score is None else float(score)))
    return Dataset.from_records(records, modalities, num_classes)


@dataclass
class DatasetManifest:
    modalities: dict[str, int]
    num_classes: int
    files: dict[str, str]
    sizes: dict[str, int]
    format: str = MANIFEST_FORMAT

    def to_json(self) -> dict:
        return {"format": self.format, "modalities": self.modalities, "num_classes": self.num_classes,
                "files": self.files, "sizes": self.sizes}

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        obj = json.loads(Path(path).read_text())
        if obj.get("format") != MANIFEST_FORMAT:
            raise SchemaError(f"{path}: expected manifest format {MANIFEST_FORMAT!r}")
        return cls(obj["modalities"], obj["num_classes"], obj["files"], obj.get("sizes", {}))


def save_splits(directory, splits: dict[str, Dataset]) -> Path:
    """Write ``<split>.jsonl`` files plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    files = {}
    for name, ds in splits.items():
        files[name] = f"{name}.jsonl"
        write_jsonl(directory / files[name], ds)
    manifest = DatasetManifest(first.modalities, first.num_classes, files,
                               {k: len(v) for k, v in splits.items()})
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2))
    return path


def load_splits(manifest_path) -> dict[str, Dataset]:
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    out = {}
    for split, fname in manifest.files.items():
        ds = load_jsonl(manifest_path.parent / fname, manifest.modalities, manifest.num_classes)
        if split in manifest.sizes and manifest.sizes[split] != len(ds):
            raise SchemaError(f"{fname}: {len(ds)} records, manifest says {manifest.sizes[split]}")
        out[split] = ds
    return out


# ---------------------------------------------------------------- masking


def _stable_key(text: str) -> int:
    return zlib.crc32(text.encode())


def mask_features(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Zero a uniformly chosen ``floor(rate * d)`` entries of every modality vector."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    feats = {}
    for m, (name, x) in enumerate(dataset.features.items()):
        d = x.shape[1]
        k = int(math.floor(rate * d + 1e-9))
        out = x.copy()
        if k:
            for i, sid in enumerate(dataset.ids):
                rng = np.random.default_rng([seed, _stable_key(sid), m])
                out[i, rng.permutation(d)[:k]] = 0.0
        feats[name] = out
    return Dataset(list(dataset.ids), feats, dataset.labels.copy(),
                   None if dataset.scores is None else dataset.scores.copy(), dataset.num_classes)


# ---------------------------------------------------------------- splitting


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  names=("train", "valid", "test")) -> dict[str, Dataset]:
    ratios = np.asarray(ratios, dtype=np.float64)
    if abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(dataset)
    perm = np.random.default_rng([seed, 0x5B]).permutation(n)
    sizes = [int(round(r * n)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    out, start = {}, 0
    for name, size in zip(names, sizes):
        if size <= 0:
            raise ValueError(f"split {name!r} is empty")
        out[name] = dataset.subset(np.sort(perm[start:start + size]))
        start += size
    return out


def iter_batches(dataset: Dataset, batch_size: int, seed: int | None = None,
                 epoch: int = 0) -> Iterator[np.ndarray]:
    """Index batches; shuffled with ``(seed, epoch)`` when ``seed`` is given.  The last partial batch is kept."""
    idx = np.arange(len(dataset))
    if seed is not None:
        idx = np.random.default_rng([seed, epoch, 0xBA]).permutation(len(dataset))
    for start in range(0, len(idx), batch_size):
        yield idx[start:start + batch_size]


def split_and_batch(dataset: Dataset, ratios, batch_size: int, seed: int):
    """Deterministic split plus a per-epoch reshuffling train batch iterator factory."""
    splits = split_dataset(dataset, ratios, seed)

    def train_batches(epoch: int):
        return iter_batches(splits["train"], batch_size, seed, epoch)

    return splits, train_batches
