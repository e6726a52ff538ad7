"""Task cross-entropy, cross-modal contrastive loss and the weighted objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexTensor, Tensor

PROB_FLOOR = 1e-12
COS_EPS = 1e-12


def task_loss(probs: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy on probabilities ``probs[B, C]``.

    Probabilities are clamped to ``[1e-12, 1]`` before the log.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, C = probs.shape
    if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must be {B} class ids in [0, {C})")
    p_true = ad.getitem(probs, (np.arange(B), labels))
    return ad.neg(ad.mean(ad.log(ad.clip(p_true, PROB_FLOOR, 1.0))))


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    similarity: str = "cosine"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.similarity != "cosine":
            raise ValueError(f"unsupported similarity {self.similarity!r}")


def cosine_matrix(za: Tensor, zb: Tensor) -> Tensor:
    """``sim[m, k] = cos(za[m], zb[k])`` with ``1e-12`` added to the norm product."""
    na = ad.l2_norm(za, axis=-1, keepdims=True)
    nb = ad.l2_norm(zb, axis=-1, keepdims=True)
    dots = ad.matmul(za, ad.transpose(zb))
    return ad.div(dots, ad.add(ad.matmul(na, ad.transpose(nb)), COS_EPS))


def contrastive_loss(za: Tensor, zb: Tensor, cfg: ContrastiveConfig | None = None) -> Tensor:
    """InfoNCE with in-batch negatives: row ``m`` of ``za`` should match row ``m`` of ``zb``."""
    cfg = cfg or ContrastiveConfig()
    if za.shape != zb.shape or za.ndim != 2 or za.shape[0] < 1:
        raise ValueError(f"expected two [M, h] batches, got {za.shape} and {zb.shape}")
    M = za.shape[0]
    logits = ad.mul(cosine_matrix(za, zb), 1.0 / cfg.temperature)
    logp = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.mean(ad.getitem(logp, (np.arange(M), np.arange(M)))))


def num_chunks(width: int, preferred: int = 4) -> int:
    for c in (preferred, 2, 1):
        if width % c == 0:
            return c
    return 1


def init_attention(D: int, h: int, rng: np.random.Generator) -> dict[str, Tensor]:
    width = 2 * D
    c = num_chunks(width)
    tok = width // c
    scale = 1.0 / math.sqrt(tok)
    return {name: ad.parameter(rng.normal(scale=scale, size=(tok, h)), name)
            for name in ("attn.Wq", "attn.Wk", "attn.Wv")}


def _tokens(state: ComplexTensor, c: int) -> Tensor:
    r = ad.concat([state.re, state.im], axis=-1)
    B, width = r.shape
    return ad.reshape(r, (B, c, width // c))


def _attend(q_tok: Tensor, kv_tok: Tensor, params: dict[str, Tensor]) -> Tensor:
    Wq, Wk, Wv = params["attn.Wq"], params["attn.Wk"], params["attn.Wv"]
    h = Wq.shape[1]
    Q = ad.matmul(q_tok, Wq)
    Kt = ad.matmul(kv_tok, Wk)
    V = ad.matmul(kv_tok, Wv)
    att = ad.softmax(ad.mul(ad.matmul(Q, ad.transpose(Kt)), 1.0 / math.sqrt(h)), axis=-1)
    out = ad.matmul(att, V)
    return ad.reshape(out, (out.shape[0], -1))


def cross_attention_vectors(state_a: ComplexTensor, state_b: ComplexTensor,
                            params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Single-head cross-attention between two batches of pure states ``[B, D]``.

    Each state's ``(re, im)`` concatenation is cut into equal chunks (4 when the
    width allows) that act as tokens.  ``z_a`` queries with ``a`` and attends
    over ``b``; ``z_b`` swaps the roles.  Projections are shared.
    """
    tok = params["attn.Wq"].shape[0]
    c = (2 * state_a.shape[-1]) // tok
    ta, tb = _tokens(state_a, c), _tokens(state_b, c)
    return _attend(ta, tb, params), _attend(tb, ta, params)


def pairwise_contrastive(states: list[ComplexTensor], params: dict[str, Tensor],
                         cfg: ContrastiveConfig | None = None) -> Tensor:
    """Contrastive loss averaged over all unordered modality pairs (0 for a single modality)."""
    terms = []
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            za, zb = cross_attention_vectors(states[i], states[j], params)
            terms.append(contrastive_loss(za, zb, cfg))
    if not terms:
        return ad.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def init_loss_weights() -> dict[str, Tensor]:
    w0 = float(np.log(np.expm1(1.0)))
    return {"loss.w_task": ad.parameter(w0, "loss.w_task"), "loss.w_con": ad.parameter(w0, "loss.w_con")}


def total_loss(task: Tensor, con: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """``alpha*task + beta*con + 0.5*(log 1/alpha + log 1/beta)`` with softplus-positive weights.

    The log barrier keeps the trainable weights from collapsing to zero; for a
    fixed task loss ``l`` the optimal ``alpha`` is ``1 / (2 l)``.
    """
    alpha = ad.softplus(weights["loss.w_task"])
    beta = ad.softplus(weights["loss.w_con"])
    reg = ad.mul(ad.add(ad.log(alpha), ad.log(beta)), -0.5)
    return ad.add(ad.add(ad.mul(alpha, task), ad.mul(beta, con)), reg)
