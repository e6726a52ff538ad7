"""End-to-end quantum-jump fusion network.

Pipeline per sample: modality adapters produce ``2D`` reals that become a
complex ``D``-vector, normalized into a pure state; cyclic pairs
``psi_n (x) psi_{n+1}`` are evolved by the jump dynamics; every evolved pair is
measured against a trainable bank of ``M`` unit vectors, giving
``Q[M, N]``; a row-wise max over pairs feeds a one-hidden-layer classifier.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexTensor, Tensor
from .losses import ContrastiveConfig, init_attention, init_loss_weights, num_chunks, pairwise_contrastive
from .qjump import Convention, JumpGenerator, TrajectoryConfig, TrajectoryRecords, evolve_trajectory
from .states import NORM_EPS, tensor_product, uniform_state, von_neumann_entropy

CHECKPOINT_FORMAT = "qjf1"
_MAGIC = b"QJF1"


class Variant(str, enum.Enum):
    FULL = "full"
    NO_QJ = "no_qj"
    UNITARY_ONLY = "unitary_only"
    DM_CONCAT = "dm_concat"
    DM_ADD = "dm_add"


@dataclass
class ModelConfig:
    modalities: dict[str, int] = field(default_factory=lambda: {"m1": 32, "m2": 32, "m3": 32})
    D: int = 10
    K: int = 4
    M: int = 32
    C: int = 3
    steps: int = 20
    dt: float = 0.1
    convention: str = "paper"
    hidden: int | None = None
    dropout: float = 0.1
    shared_generator: bool = True
    variant: str = "full"
    attn_dim: int = 8
    temperature: float = 0.07
    contrastive: bool = True
    h_scale: float | None = None
    l_scale: float | None = None
    init_rate: float = 1.0
    head_scale: float = 1.0
    class_scores: list | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        self.convention = Convention(self.convention).value
        if self.D < 1 or self.K < 1 or self.M < 1 or self.C < 2:
            raise ValueError("D, K, M must be >= 1 and C >= 2")
        if len(self.modalities) < 1:
            raise ValueError("at least one modality is required")

    @property
    def J(self) -> int:
        return self.D * self.D

    @property
    def N(self) -> int:
        return len(self.modalities)

    @property
    def hidden_width(self) -> int:
        return self.hidden or self.M

    def trajectory(self, seed: int = 0, record_entropy: bool = False) -> TrajectoryConfig:
        return TrajectoryConfig(self.dt, self.steps, seed, record_entropy)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Prediction:
    logits: Tensor
    probs: Tensor
    pooled: Tensor


@dataclass
class ForwardOutput:
    prediction: Prediction
    states: list[ComplexTensor]
    pairs_in: np.ndarray | None
    pairs_out: ComplexTensor | None
    Q: Tensor | None
    entropy: np.ndarray          # [B, N] post-fusion pair entropies (zeros for DM variants)
    records: TrajectoryRecords | None
    substituted: int
    step_states: list | None = None


def pair_key(sample_id: str, pair: str, tag: str) -> int:
    s = f"{sample_id}|{pair}|{tag}".encode()
    return (zlib.crc32(s) << 32) | zlib.adler32(s)


def cyclic_pairs(names: list[str]) -> list[tuple[int, int]]:
    """``(n, n+1 mod N)`` for every modality; a single modality pairs with itself."""
    N = len(names)
    return [(n, (n + 1) % N) for n in range(N)]


def pair_states(states: list[ComplexTensor]) -> list[ComplexTensor]:
    return [tensor_product(states[a], states[b]) for a, b in cyclic_pairs(list(range(len(states))))]


def encode_to_state(raw: ComplexTensor, eps: float = NORM_EPS) -> tuple[ComplexTensor, np.ndarray]:
    """Normalize rows of ``raw[B, D]``; rows with norm <= eps become the uniform state.

    Returns the states and a boolean mask of substituted rows.
    """
    D = raw.shape[-1]
    norms = np.sqrt((raw.re.data ** 2 + raw.im.data ** 2).sum(axis=-1))
    bad = norms <= eps
    if not bad.any():
        n = ad.cnorm(raw, axis=-1, keepdims=True)
        return ComplexTensor(ad.div(raw.re, n), ad.div(raw.im, n)), bad
    uni = uniform_state(D).real
    fill = bad[:, None] * uni[None, :]
    ok = (~bad).astype(np.float64)[:, None]
    shifted = ComplexTensor(ad.add(raw.re, fill), raw.im)
    n = ad.cnorm(shifted, axis=-1, keepdims=True)
    re = ad.add(ad.mul(ad.div(shifted.re, n), ok), fill)
    im = ad.mul(ad.div(shifted.im, n), ok)
    return ComplexTensor(re, im), bad


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep)


class QJFusionModel:
    """Parameters plus forward pass; parameters live in ``self.params`` (name -> leaf tensor)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng([seed, 0x11])
        D, J, M, H, C = cfg.D, cfg.J, cfg.M, cfg.hidden_width, cfg.C
        p: dict[str, Tensor] = {}
        for name, d in cfg.modalities.items():
            p[f"adapter.{name}.W"] = ad.parameter(rng.normal(scale=1.0 / math.sqrt(d), size=(d, 2 * D)))
            p[f"adapter.{name}.b"] = ad.parameter(np.zeros(2 * D))
        p["adapter.ln.gain"] = ad.parameter(np.ones(2 * D))
        p["adapter.ln.bias"] = ad.parameter(np.zeros(2 * D))
        p["adapter.out.W"] = ad.parameter(rng.normal(scale=1.0 / math.sqrt(2 * D), size=(2 * D, 2 * D)))
        p["adapter.out.b"] = ad.parameter(np.zeros(2 * D))

        self.generators: list[JumpGenerator] = []
        n_gen = 1 if cfg.shared_generator else cfg.N
        for g in range(n_gen):
            gen = JumpGenerator.init(J, cfg.K, rng, cfg.h_scale, cfg.l_scale, cfg.init_rate, cfg.convention)
            self.generators.append(gen)
            prefix = "qj" if n_gen == 1 else f"qj{g}"
            for key, t in gen.parameters().items():
                p[prefix + key[2:]] = t

        m = (rng.normal(size=(M, J)) + 1j * rng.normal(size=(M, J))) / math.sqrt(2 * J)
        p["meas.re"] = ad.parameter(m.real)
        p["meas.im"] = ad.parameter(m.imag)
        # pooled probabilities are O(1/J); scale first layer accordingly
        p["head.W1"] = ad.parameter(rng.normal(scale=cfg.head_scale * J / math.sqrt(M), size=(M, H)))
        p["head.b1"] = ad.parameter(np.zeros(H))
        p["head.W2"] = ad.parameter(rng.normal(scale=1.0 / math.sqrt(H), size=(H, C)))
        p["head.b2"] = ad.parameter(np.zeros(C))

        if cfg.variant == Variant.DM_CONCAT.value:
            width = cfg.N * 2 * D * D
            p["dm.W"] = ad.parameter(rng.normal(scale=1.0 / math.sqrt(width), size=(width, C)) * D)
            p["dm.b"] = ad.parameter(np.zeros(C))
        elif cfg.variant == Variant.DM_ADD.value:
            width = 2 * D * D
            p["dm.W"] = ad.parameter(rng.normal(scale=1.0 / math.sqrt(width), size=(width, C)) * D)
            p["dm.b"] = ad.parameter(np.zeros(C))
            p["dm.mix"] = ad.parameter(np.zeros(cfg.N))

        if 2 * D % num_chunks(2 * D) == 0:
            p.update(init_attention(D, cfg.attn_dim, rng))
        p.update(init_loss_weights())
        for name, t in p.items():
            t.name = name
        self.params = p

    # ------------------------------------------------------------- structure

    @property
    def variant(self) -> Variant:
        return Variant(self.cfg.variant)

    @property
    def modality_names(self) -> list[str]:
        return list(self.cfg.modalities)

    def generator_for(self, pair: int) -> JumpGenerator:
        return self.generators[0 if self.cfg.shared_generator else pair]

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names per optimizer group (each modality adapter is its own group)."""
        groups: dict[str, list[str]] = {}
        for name in self.params:
            parts = name.split(".")
            if parts[0] == "adapter" and parts[1] in self.cfg.modalities:
                g = f"modality:{parts[1]}"
            elif parts[0] == "adapter":
                g = "adapter"
            elif parts[0].startswith("qj"):
                g = "qjump"
            elif parts[0] in ("meas", "head", "dm"):
                g = "head" if parts[0] != "meas" else "measurement"
            else:
                g = parts[0]
            groups.setdefault(g, []).append(name)
        return groups

    # --------------------------------------------------------------- forward

    def encode(self, features: dict[str, np.ndarray]) -> tuple[list[ComplexTensor], int]:
        p, D = self.params, self.cfg.D
        states, substituted = [], 0
        for name in self.modality_names:
            x = ad.constant(np.asarray(features[name], dtype=np.float64))
            h = ad.add(ad.matmul(x, p[f"adapter.{name}.W"]), p[f"adapter.{name}.b"])
            h = ad.layer_norm(ad.tanh(h), p["adapter.ln.gain"], p["adapter.ln.bias"])
            out = ad.add(ad.matmul(h, p["adapter.out.W"]), p["adapter.out.b"])
            raw = ComplexTensor(ad.getitem(out, (slice(None), slice(0, D))),
                                ad.getitem(out, (slice(None), slice(D, 2 * D))))
            psi, bad = encode_to_state(raw)
            substituted += int(bad.sum())
            states.append(psi)
        return states, substituted

    def measurement_bank(self) -> ComplexTensor:
        m = ComplexTensor(self.params["meas.re"], self.params["meas.im"])
        n = ad.cnorm(m, axis=-1, keepdims=True)
        return ComplexTensor(ad.div(m.re, n), ad.div(m.im, n))

    def measure(self, psi: ComplexTensor) -> Tensor:
        """``Q[B, M, N] = |<m_i|psi_n>|^2`` for evolved pairs ``psi[B, N, J]``."""
        bank = self.measurement_bank()
        amp = ad.cmatmul(psi, bank.conj().transpose())      # [B, N, M]
        return ad.transpose(ad.abs2(amp), (0, 2, 1))

    def head(self, Q: Tensor, rng: np.random.Generator | None = None) -> Prediction:
        p = self.params
        pooled, _ = ad.max_with_argmax(Q, axis=-1)
        x = dropout(pooled, self.cfg.dropout, rng)
        h = ad.relu(ad.add(ad.matmul(x, p["head.W1"]), p["head.b1"]))
        h = dropout(h, self.cfg.dropout, rng)
        logits = ad.add(ad.matmul(h, p["head.W2"]), p["head.b2"])
        return Prediction(logits, ad.softmax(logits, axis=-1), pooled)

    def fuse(self, pairs: list[ComplexTensor], ids, tag: str, seed: int, record_entropy: bool = False,
             observe=None, forced: np.ndarray | None = None):
        """Evolve every pair batch; returns ``(psi[B, N, J], records)`` with records over ``B*N`` rows.

        ``forced[T, B*N]`` replays a recorded branch sequence instead of sampling.
        """
        cfg = self.cfg
        B, J = pairs[0].shape
        N = len(pairs)
        names = self.modality_names
        couples = cyclic_pairs(names)
        zero = self.variant is Variant.UNITARY_ONLY
        traj = cfg.trajectory(seed, record_entropy)
        if cfg.shared_generator:
            stacked = ComplexTensor(ad.reshape(ad.stack([q.re for q in pairs], axis=1), (B * N, J)),
                                    ad.reshape(ad.stack([q.im for q in pairs], axis=1), (B * N, J)))
            keys = np.array([pair_key(sid, f"{names[a]}|{names[b]}", tag)
                             for sid in ids for a, b in couples], dtype=np.uint64)
            psi, rec = evolve_trajectory(self.generators[0], stacked, traj, keys=keys, observe=observe,
                                         forced=forced, zero_rates=zero)
            return psi.reshape(B, N, J), rec
        outs, recs = [], []
        for n, q in enumerate(pairs):
            a, b = couples[n]
            keys = np.array([pair_key(sid, f"{names[a]}|{names[b]}", tag) for sid in ids], dtype=np.uint64)
            fn = None if forced is None else np.asarray(forced).reshape(cfg.steps, B, N)[:, :, n]
            psi, rec = evolve_trajectory(self.generators[n], q, traj, keys=keys, forced=fn, zero_rates=zero)
            outs.append(psi)
            recs.append(rec)
        psi = ComplexTensor(ad.stack([o.re for o in outs], axis=1), ad.stack([o.im for o in outs], axis=1))
        # interleave to the [B*N] row order used by the shared path
        merged = TrajectoryRecords(
            np.stack([r.branch for r in recs], axis=2).reshape(cfg.steps, B * N),
            np.stack([r.gamma_total for r in recs], axis=2).reshape(cfg.steps, B * N),
            np.stack([r.annihilated for r in recs], axis=2).reshape(cfg.steps, B * N),
            None if not record_entropy else np.stack([r.entropy for r in recs], axis=2).reshape(cfg.steps + 1, B * N),
            sum(r.clamped for r in recs))
        return psi, merged

    def _dm_features(self, states: list[ComplexTensor]) -> Tensor:
        from .states import density_matrix
        D = self.cfg.D
        rhos = [density_matrix(s) for s in states]
        B = states[0].shape[0]
        if self.variant is Variant.DM_CONCAT:
            parts = []
            for r in rhos:
                parts += [ad.reshape(r.re, (B, D * D)), ad.reshape(r.im, (B, D * D))]
            return ad.concat(parts, axis=-1)
        w = ad.softmax(self.params["dm.mix"])
        re = im = None
        for n, r in enumerate(rhos):
            wn = ad.getitem(w, n)
            tr, ti = ad.mul(r.re, wn), ad.mul(r.im, wn)
            re = tr if re is None else ad.add(re, tr)
            im = ti if im is None else ad.add(im, ti)
        return ad.concat([ad.reshape(re, (B, D * D)), ad.reshape(im, (B, D * D))], axis=-1)

    def forward(self, features: dict[str, np.ndarray], ids, tag: str = "eval", seed: int | None = None,
                dropout_rng: np.random.Generator | None = None, record_entropy: bool = False,
                keep_steps: bool = False, forced: np.ndarray | None = None) -> ForwardOutput:
        seed = self.seed if seed is None else seed
        states, substituted = self.encode(features)
        B = states[0].shape[0]
        N = len(states)
        if self.variant in (Variant.DM_CONCAT, Variant.DM_ADD):
            feats = self._dm_features(states)
            logits = ad.add(ad.matmul(dropout(feats, self.cfg.dropout, dropout_rng), self.params["dm.W"]),
                            self.params["dm.b"])
            pred = Prediction(logits, ad.softmax(logits, axis=-1), feats)
            return ForwardOutput(pred, states, None, None, None, np.zeros((B, N)), None, substituted)

        pairs = pair_states(states)
        pairs_in = np.stack([q.numpy() for q in pairs], axis=1)
        records = None
        step_states = [] if keep_steps else None
        if self.variant is Variant.NO_QJ:
            psi = ComplexTensor(ad.stack([q.re for q in pairs], axis=1), ad.stack([q.im for q in pairs], axis=1))
            if keep_steps:
                step_states = [pairs_in] * (self.cfg.steps + 1)
            if record_entropy:
                ent = von_neumann_entropy(pairs_in.reshape(B * N, -1))
                records = TrajectoryRecords(np.full((self.cfg.steps, B * N), -1),
                                            np.zeros((self.cfg.steps, B * N)),
                                            np.zeros((self.cfg.steps, B * N), dtype=bool),
                                            np.tile(ent, (self.cfg.steps + 1, 1)))
        else:
            observe = None
            if keep_steps:
                def observe(t, z):
                    step_states.append(z.reshape(B, N, -1))
            psi, records = self.fuse(pairs, ids, tag, seed, record_entropy, observe, forced)
        Q = self.measure(psi)
        pred = self.head(Q, dropout_rng)
        entropy = von_neumann_entropy(psi.numpy().reshape(B * N, -1)).reshape(B, N)
        return ForwardOutput(pred, states, pairs_in, psi, Q, entropy, records, substituted, step_states)

    def predict_from_pairs(self, psi: np.ndarray) -> np.ndarray:
        """Class probabilities from evolved pair states ``psi[B, N, J]`` (no dropout, no tape)."""
        Q = self.measure(ComplexTensor.from_numpy(psi))
        return self.head(Q).probs.data

    def contrastive(self, states: list[ComplexTensor]) -> Tensor:
        if not self.cfg.contrastive or "attn.Wq" not in self.params:
            return ad.constant(0.0)
        return pairwise_contrastive(states, self.params, ContrastiveConfig(self.cfg.temperature))

    # ------------------------------------------------------------ checkpoint

    def save(self, path, extra: dict | None = None) -> None:
        """Binary checkpoint: magic, u64 header length, JSON header, little-endian float64 blobs."""
        arrays, offset = [], 0
        for name, t in self.params.items():
            arrays.append({"name": name, "shape": list(t.shape), "offset": offset})
            offset += t.data.size * 8
        header = {"format": CHECKPOINT_FORMAT, "config": self.cfg.to_json(), "seed": self.seed,
                  "arrays": arrays, "extra": extra or {}}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for t in self.params.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["QJFusionModel", dict]:
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        (hlen,) = struct.unpack("<Q", raw[4:12])
        header = json.loads(raw[12:12 + hlen])
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        model = cls(ModelConfig.from_json(header["config"]), seed=header["seed"])
        base = 12 + hlen
        for entry in header["arrays"]:
            t = model.params[entry["name"]]
            n = int(np.prod(entry["shape"]))
            start = base + entry["offset"]
            t.data[...] = np.frombuffer(raw[start:start + 8 * n], dtype="<f8").reshape(entry["shape"])
        return model, header.get("extra", {})
