"""Pure-state algebra: normalization, tensor products, projective measurement,
density matrices, partial trace and entanglement entropy.

Differentiable functions take and return :class:`~qjfuse.autodiff.ComplexTensor`
(leading axes are batch axes).  The analysis functions (partial trace, Schmidt
coefficients, entropy) work on plain complex numpy arrays and never touch the
tape.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexTensor

NORM_EPS = 1e-12
SCHMIDT_FLOOR = 1e-12


class NearZeroNorm(ValueError):
    """A vector is too small to normalize into a state."""


def _np(z) -> np.ndarray:
    if isinstance(z, ComplexTensor):
        return z.numpy()
    return np.asarray(z, dtype=np.complex128)


def normalize(v: ComplexTensor, eps: float = NORM_EPS) -> ComplexTensor:
    """``v / ||v||`` along the last axis; raises :class:`NearZeroNorm` if any norm is <= eps."""
    norms = np.sqrt((v.re.data ** 2 + v.im.data ** 2).sum(axis=-1))
    if np.any(norms <= eps):
        raise NearZeroNorm(f"state norm {norms.min():.3e} is below {eps:.0e}")
    n = ad.cnorm(v, axis=-1, keepdims=True)
    return ComplexTensor(ad.div(v.re, n), ad.div(v.im, n))


def tensor_product(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Joint state with amplitudes ``out[i*D + j] = a[i] b[j]``."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"subsystem dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return ad.kron(a, b)


def measure_prob(m: ComplexTensor, s: ComplexTensor) -> ad.Tensor:
    """``|<m|s>|^2`` along the last axis."""
    return ad.abs2(ad.inner(m, s))


def density_matrix(psi: ComplexTensor) -> ComplexTensor:
    """Differentiable projector ``|psi><psi|`` (batched over leading axes)."""
    d = psi.shape[-1]
    lead = psi.shape[:-1]
    col = psi.reshape(lead + (d, 1))
    row = psi.conj().reshape(lead + (1, d))
    return ad.cmul(col, row)


def density_from_pure(states, probs) -> np.ndarray:
    """``rho = sum_i p_i |psi_i><psi_i|`` for an ensemble of pure states."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"ensemble probabilities must be >= 0 and sum to 1 (sum={probs.sum()!r})")
    psis = np.stack([_np(s).reshape(-1) for s in states])
    if len(psis) != len(probs):
        raise ValueError("one probability per state is required")
    return np.einsum("k,ki,kj->ij", probs, psis, psis.conj())


def _square_dims(n: int) -> tuple[int, int]:
    d = math.isqrt(n)
    if d * d != n:
        raise ValueError(f"joint dimension {n} is not a perfect square; pass dims explicitly")
    return d, d


def partial_trace(s, keep: str = "A", dims: tuple[int, int] | None = None) -> np.ndarray:
    """Reduced density matrix of subsystem ``keep`` (``"A"`` or ``"B"``).

    ``s`` is either a joint pure state of length ``dA*dB`` or a joint density
    matrix of shape ``(dA*dB, dA*dB)``.
    """
    s = _np(s)
    n = s.shape[0]
    da, db = dims if dims is not None else _square_dims(n)
    if s.ndim == 1:
        m = s.reshape(da, db)
        return m @ m.conj().T if keep == "A" else m.T @ m.conj()
    rho = s.reshape(da, db, da, db)
    if keep == "A":
        return np.einsum("ijkj->ik", rho)
    if keep == "B":
        return np.einsum("ijil->jl", rho)
    raise ValueError(f"keep must be 'A' or 'B', got {keep!r}")


def schmidt_coefficients(s, dims: tuple[int, int] | None = None) -> np.ndarray:
    """Singular values of the ``dA x dB`` reshape of ``s``; descending.

    Accepts a batch ``[..., dA*dB]`` and returns ``[..., min(dA, dB)]``.
    """
    s = _np(s)
    if not np.isfinite(s).all():
        raise np.linalg.LinAlgError("non-finite state amplitudes")
    da, db = dims if dims is not None else _square_dims(s.shape[-1])
    return np.linalg.svd(s.reshape(s.shape[:-1] + (da, db)), compute_uv=False)


def _entropy_from_probs(p: np.ndarray, base: float | None) -> np.ndarray:
    p = np.where(p < SCHMIDT_FLOOR, 0.0, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    S = terms.sum(axis=-1)
    if base is not None:
        S = S / math.log(base)
    return np.maximum(S, 0.0)


def von_neumann_entropy(s, dims: tuple[int, int] | None = None, base: float | None = None):
    """Entanglement entropy ``-sum lambda^2 ln lambda^2`` of a bipartite pure state.

    Natural log unless ``base`` is given (``base=2`` gives bits).  Schmidt
    coefficients under 1e-12 count as zero.  Batched over leading axes.
    """
    lam = schmidt_coefficients(s, dims)
    lam = np.where(lam < SCHMIDT_FLOOR, 0.0, lam)
    S = _entropy_from_probs(lam ** 2, base)
    return float(S) if S.ndim == 0 else S


def entropy_of_density(rho, base: float | None = None) -> float:
    """``-tr(rho ln rho)`` from the eigenvalues of a Hermitian density matrix."""
    w = np.linalg.eigvalsh(_np(rho))
    return float(_entropy_from_probs(np.clip(w, 0.0, None), base))


def uniform_state(d: int) -> np.ndarray:
    return np.full(d, 1.0 / math.sqrt(d), dtype=np.complex128)


def basis_state(d: int, i: int) -> np.ndarray:
    e = np.zeros(d, dtype=np.complex128)
    e[i] = 1.0
    return e


def maximally_entangled(d: int) -> np.ndarray:
    """``(1/sqrt d) sum_i |ii>``."""
    psi = np.zeros(d * d, dtype=np.complex128)
    psi[np.arange(d) * d + np.arange(d)] = 1.0 / math.sqrt(d)
    return psi


def random_state(d: int, rng: np.random.Generator, batch: tuple[int, ...] = ()) -> np.ndarray:
    z = rng.normal(size=batch + (d,)) + 1j * rng.normal(size=batch + (d,))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)
