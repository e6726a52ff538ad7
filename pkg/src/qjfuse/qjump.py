"""Quantum-jump (Monte Carlo wave function) dynamics with learnable generators.

A :class:`JumpGenerator` holds a free Hamiltonian seed ``A`` (``H = (A + A^dagger)/2``),
``K`` Lindblad operators and ``K`` rate seeds (``gamma_k = softplus(r_k)``).
:func:`evolve_trajectory` advances a batch of joint states for ``T`` steps;
each step either applies the coherent propagator or collapses onto
``L_k|psi>`` (renormalized).  Branch draws come from per-trajectory counter
streams and are never differentiated; the gradient follows whichever branch
was taken.

Two jump-rate conventions are supported.  ``PAPER`` uses
``p_k = gamma_k |<psi|L_k|psi>|^2`` with a plain unitary no-jump step.
``STANDARD`` uses ``p_k = gamma_k <psi|L_k^dagger L_k|psi>`` together with the
damped no-jump propagator ``exp(-i H_eff dt)``, ``H_eff = H - i/2 sum gamma_k L_k^dagger L_k``,
which is the first-order unraveling of the Lindblad equation.  Only STANDARD
converges to :func:`master_equation_step`.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexTensor, Tensor
from .states import von_neumann_entropy

ANNIHILATION_EPS = 1e-12
UNITARY = -1


class Convention(str, enum.Enum):
    PAPER = "paper"
    STANDARD = "standard"


class AnnihilatedState(ValueError):
    """A Lindblad channel maps the state to (numerically) zero."""


class NonHermitianError(ValueError):
    pass


# ------------------------------------------------------------------ generators


@dataclass
class JumpGenerator:
    A: ComplexTensor
    L: ComplexTensor
    r: Tensor
    convention: Convention = Convention.PAPER

    @classmethod
    def init(cls, J: int, K: int, rng: np.random.Generator, h_scale: float | None = None,
             l_scale: float | None = None, rate: float = 1.0,
             convention: Convention | str = Convention.PAPER) -> "JumpGenerator":
        h_scale = 1.0 / math.sqrt(J) if h_scale is None else h_scale
        l_scale = 1.0 / math.sqrt(J) if l_scale is None else l_scale
        A = h_scale * (rng.normal(size=(J, J)) + 1j * rng.normal(size=(J, J))) / math.sqrt(2)
        L = l_scale * (rng.normal(size=(K, J, J)) + 1j * rng.normal(size=(K, J, J))) / math.sqrt(2)
        r = np.full(K, inverse_softplus(rate))
        return cls.from_numpy(A, L, r, convention)

    @classmethod
    def from_numpy(cls, A, L, r, convention: Convention | str = Convention.PAPER) -> "JumpGenerator":
        L = np.asarray(L, dtype=np.complex128)
        if L.ndim == 2:
            L = L[None]
        return cls(ComplexTensor.from_numpy(A, True, "qj.A"),
                   ComplexTensor.from_numpy(L, True, "qj.L"),
                   ad.parameter(np.atleast_1d(np.asarray(r, dtype=np.float64)), "qj.r"),
                   Convention(convention))

    @classmethod
    def from_physical(cls, H, Ls, gammas, convention: Convention | str = Convention.STANDARD) -> "JumpGenerator":
        """Build from a Hermitian ``H`` and strictly positive rates ``gammas``."""
        gammas = np.atleast_1d(np.asarray(gammas, dtype=np.float64))
        return cls.from_numpy(H, Ls, inverse_softplus(gammas), convention)

    @property
    def dim(self) -> int:
        return self.A.shape[-1]

    @property
    def channels(self) -> int:
        return self.L.shape[0]

    def hamiltonian(self) -> ComplexTensor:
        return build_hamiltonian(self.A)

    def rates(self) -> Tensor:
        return ad.softplus(self.r)

    def parameters(self) -> dict[str, Tensor]:
        return {"qj.A.re": self.A.re, "qj.A.im": self.A.im, "qj.L.re": self.L.re,
                "qj.L.im": self.L.im, "qj.r": self.r}


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def build_hamiltonian(A: ComplexTensor) -> ComplexTensor:
    """``(A + A^dagger) / 2``."""
    return ad.cscale(ad.cadd(A, ad.dagger(A)), 0.5)


# --------------------------------------------------------------- propagators


def expm(X: ComplexTensor, order: int = 8, theta: float = 0.5) -> ComplexTensor:
    """Matrix exponential by scaling and squaring with a truncated Taylor series.

    The number of squarings ``s`` is chosen from the detached 1-norm so that
    ``||X||_1 / 2^s <= theta``; the rest is composed from tape ops and is
    therefore differentiable.
    """
    Xn = X.numpy()
    n = Xn.shape[-1]
    norm1 = np.abs(Xn).sum(axis=-2).max()
    s = int(math.ceil(math.log2(norm1 / theta))) if norm1 > theta else 0
    Xs = ad.cscale(X, 2.0 ** -s) if s else X
    eye = ComplexTensor(np.eye(n))
    P = eye
    for k in range(order, 0, -1):
        P = ad.cadd(eye, ad.cscale(ad.cmatmul(Xs, P), 1.0 / k))
    for _ in range(s):
        P = ad.cmatmul(P, P)
    return P


def expm_eig(H: np.ndarray, t: complex) -> np.ndarray:
    """Reference ``exp(t H)`` for Hermitian ``H`` via eigendecomposition (not differentiable)."""
    w, V = np.linalg.eigh(H)
    return (V * np.exp(t * w)) @ V.conj().T


def check_hermitian(H: ComplexTensor | np.ndarray, tol: float = 1e-9) -> None:
    Hn = H.numpy() if isinstance(H, ComplexTensor) else np.asarray(H)
    dev = np.abs(Hn - Hn.conj().T).max()
    if dev > tol:
        raise NonHermitianError(f"Hamiltonian deviates from Hermitian by {dev:.3e}")


def propagator(H: ComplexTensor, dt: float) -> ComplexTensor:
    """``exp(-i H dt)`` (hbar = 1)."""
    # -i*dt*(Hr + i Hi) = dt*Hi - i dt*Hr
    return expm(ComplexTensor(ad.mul(H.im, dt), ad.mul(H.re, -dt)))


def apply_operator(U: ComplexTensor, psi: ComplexTensor) -> ComplexTensor:
    """``U|psi>`` for a single state ``psi[J]`` or a batch of row vectors ``psi[..., J]``."""
    if psi.ndim == 1:
        return ad.cmatvec(U, psi)
    return ad.cmatmul(psi, U.transpose())


def unitary_step(H: ComplexTensor, psi: ComplexTensor, dt: float) -> ComplexTensor:
    check_hermitian(H)
    return apply_operator(propagator(H, dt), psi)


def effective_hamiltonian(H: ComplexTensor, L: ComplexTensor, gammas: Tensor) -> ComplexTensor:
    """``H - (i/2) sum_k gamma_k L_k^dagger L_k``."""
    LdL = ad.cmatmul(ad.dagger(L), L)
    g = ad.reshape(gammas, (-1, 1, 1))
    damp = ComplexTensor(ad.sum(ad.mul(LdL.re, g), axis=0), ad.sum(ad.mul(LdL.im, g), axis=0))
    # -(i/2) (Dr + i Di) = Di/2 - i Dr/2
    return ad.cadd(H, ComplexTensor(ad.mul(damp.im, 0.5), ad.mul(damp.re, -0.5)))


def _normalize_rows(z: ComplexTensor) -> ComplexTensor:
    n = ad.cnorm(z, axis=-1, keepdims=True)
    return ComplexTensor(ad.div(z.re, n), ad.div(z.im, n))


# ---------------------------------------------------------- jump probabilities


def jump_probabilities(gen: JumpGenerator, psi: ComplexTensor, dt: float | None = None):
    """Per-channel rates ``p[..., K]`` and ``gamma_total[...]`` for states ``psi[..., J]``.

    With ``dt`` given, the clamped trigger probability ``clip(gamma_total*dt, 0, 1)``
    is returned as a third (numpy) value.
    """
    L = gen.L
    K, J = L.shape[0], L.shape[-1]
    lead = psi.shape[:-1]
    psi_k = psi.reshape(lead + (1, J))
    Lpsi = ad.cmatmul(psi_k.reshape(lead + (1, 1, J)), L.transpose()).reshape(lead + (K, J))
    if gen.convention is Convention.PAPER:
        amp = ad.abs2(ad.inner(psi_k, Lpsi))
    else:
        amp = ad.sum(ad.abs2(Lpsi), axis=-1)
    p = ad.mul(amp, gen.rates())
    total = ad.sum(p, axis=-1)
    if dt is None:
        return p, total
    return p, total, np.clip(total.data * dt, 0.0, 1.0)


def _rates_numpy(gen: JumpGenerator, psi: np.ndarray, L: np.ndarray | None = None):
    """Detached ``p[R, K]`` and ``L_k psi`` norms, used for sampling."""
    L = gen.L.numpy() if L is None else L
    K, J, _ = L.shape
    Lpsi = (psi @ L.reshape(K * J, J).T).reshape(len(psi), K, J)
    gam = np.logaddexp(0.0, gen.r.data)
    if gen.convention is Convention.PAPER:
        amp = np.abs((psi.conj()[:, None, :] * Lpsi).sum(axis=-1)) ** 2
    else:
        amp = (np.abs(Lpsi) ** 2).sum(axis=-1)
    return amp * gam, np.sqrt((np.abs(Lpsi) ** 2).sum(axis=-1))


def apply_jump(gen: JumpGenerator, k: int, psi: ComplexTensor) -> ComplexTensor:
    """Collapse ``psi`` onto ``L_k psi / ||L_k psi||``."""
    Lk = gen.L[k]
    out = apply_operator(Lk, psi)
    norms = np.sqrt((out.re.data ** 2 + out.im.data ** 2).sum(axis=-1))
    if np.any(norms <= ANNIHILATION_EPS):
        raise AnnihilatedState(f"channel {k} annihilates the state (norm {norms.min():.2e})")
    return _normalize_rows(out)


def sample_branch(gamma_total: float, dt: float, p, rng: np.random.Generator) -> int:
    """Draw ``UNITARY`` (-1) or a channel index for a single trajectory."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("channel rates must be non-negative")
    return int(choose_branches(np.array([gamma_total]), p[None, :], dt, rng.random((1, 2)))[0])


def choose_branches(gamma_total: np.ndarray, p: np.ndarray, dt: float, u: np.ndarray) -> np.ndarray:
    """Vectorized branch choice from uniforms ``u[R, 2]`` (trigger, channel)."""
    prob = np.clip(gamma_total * dt, 0.0, 1.0)
    jump = u[:, 0] < prob
    out = np.full(len(gamma_total), UNITARY, dtype=np.int64)
    if jump.any():
        assert np.all(gamma_total[jump] > 0), "jump drawn with zero total rate"
        cdf = np.cumsum(p[jump], axis=1) / gamma_total[jump, None]
        k = (cdf > u[jump, 1:2]).argmax(axis=1)
        out[jump] = k
    return out


# ------------------------------------------------------------------ streams


def stream_uniforms(seed: int, keys, steps: int) -> np.ndarray:
    """Uniform draws ``[steps, R, 2]``; trajectory ``r`` uses a Philox stream keyed by ``(seed, keys[r])``."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    out = np.empty((steps, len(keys), 2))
    for i, key in enumerate(keys):
        bitgen = np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(key)]))
        out[:, i, :] = np.random.Generator(bitgen).random((steps, 2))
    return out


# -------------------------------------------------------------- trajectories


@dataclass
class TrajectoryConfig:
    dt: float = 0.1
    steps: int = 20
    seed: int = 0
    record_entropy: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class JumpRecord:
    step: int
    branch: str
    channel: int | None
    gamma_total: float
    entropy: float | None = None


@dataclass
class TrajectoryRecords:
    """Per-step outcomes for a batch of ``R`` trajectories.

    ``branch[t, r]`` is ``-1`` for the coherent branch or the channel index.
    ``entropy`` (if recorded) has ``T + 1`` rows, row 0 being the initial state.
    """

    branch: np.ndarray
    gamma_total: np.ndarray
    annihilated: np.ndarray
    entropy: np.ndarray | None = None
    clamped: int = 0

    @property
    def jumps(self) -> np.ndarray:
        return self.branch >= 0

    @property
    def jump_count(self) -> int:
        return int(self.jumps.sum())

    def rows(self, traj: int = 0) -> list[JumpRecord]:
        out = []
        for t in range(self.branch.shape[0]):
            b = int(self.branch[t, traj])
            ent = None if self.entropy is None else float(self.entropy[t + 1, traj])
            out.append(JumpRecord(t + 1, "JUMP" if b >= 0 else "UNITARY", b if b >= 0 else None,
                                  float(self.gamma_total[t, traj]), ent))
        return out

    def to_csv(self, path, traj: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "branch", "channel", "gamma_total", "entropy"])
            for rec in self.rows(traj):
                w.writerow([rec.step, rec.branch, "" if rec.channel is None else rec.channel,
                            repr(rec.gamma_total), "" if rec.entropy is None else repr(rec.entropy)])


def evolve_trajectory(gen: JumpGenerator, psi0: ComplexTensor, cfg: TrajectoryConfig,
                      keys=None, uniforms: np.ndarray | None = None,
                      forced: np.ndarray | None = None,
                      observe: Callable[[int, np.ndarray], None] | None = None,
                      zero_rates: bool = False):
    """Evolve states ``psi0[R, J]`` for ``cfg.steps`` steps.

    Draws come from :func:`stream_uniforms` with ``cfg.seed`` and ``keys``
    (default ``0..R-1``) unless ``uniforms`` is supplied.  ``forced[T, R]``
    replays a branch sequence exactly (used for gradient checks with frozen
    draws).  ``observe(t, psi)`` sees the detached state after every step,
    including ``t = 0``.  ``zero_rates`` disables jumps entirely.

    Returns ``(psi_T, TrajectoryRecords)``.
    """
    if psi0.ndim == 1:
        psi, _ = evolve_trajectory(gen, psi0.reshape(1, -1), cfg, keys, uniforms, forced, observe, zero_rates)
        return psi.reshape(-1), _
    R, J = psi0.shape
    T, dt = cfg.steps, cfg.dt
    if uniforms is None and forced is None and not zero_rates:
        uniforms = stream_uniforms(cfg.seed, np.arange(R) if keys is None else keys, T)
    H = gen.hamiltonian()
    standard = gen.convention is Convention.STANDARD
    if standard and not zero_rates:
        U = propagator(effective_hamiltonian(H, gen.L, gen.rates()), dt)
    else:
        check_hermitian(H)
        U = propagator(H, dt)

    branch = np.full((T, R), UNITARY, dtype=np.int64)
    gtot = np.zeros((T, R))
    annihilated = np.zeros((T, R), dtype=bool)
    entropy = np.zeros((T + 1, R)) if cfg.record_entropy else None
    clamped = 0
    psi = psi0
    K = gen.L.shape[0]
    L_np = gen.L.numpy()
    # all channels in one product: (psi @ L_stack^T)[r, k*J + i] = (L_k psi_r)[i]
    L_stackT = None
    if entropy is not None:
        entropy[0] = von_neumann_entropy(psi.numpy())
    if observe is not None:
        observe(0, psi.numpy())

    for t in range(T):
        psi_np = psi.numpy()
        if zero_rates:
            choice = np.full(R, UNITARY, dtype=np.int64)
        else:
            p, lnorm = _rates_numpy(gen, psi_np, L_np)
            gt = p.sum(axis=1)
            gtot[t] = gt
            clamped += int((gt * dt > 1.0).sum())
            if forced is not None:
                choice = np.asarray(forced[t], dtype=np.int64).copy()
            else:
                choice = choose_branches(gt, p, dt, uniforms[t])
            jumped = choice >= 0
            if jumped.any():
                dead = np.zeros(R, dtype=bool)
                dead[jumped] = lnorm[jumped, choice[jumped]] <= ANNIHILATION_EPS
                annihilated[t] = dead
                choice[dead] = UNITARY
        branch[t] = choice

        # renormalizing also removes the Taylor truncation drift of the unitary branch
        coh = _normalize_rows(apply_operator(U, psi))
        rows = np.flatnonzero(choice >= 0)
        if len(rows):
            keep = (choice < 0).astype(np.float64)[:, None]
            sel = psi.take(rows, axis=0)
            if L_stackT is None:
                L_stackT = gen.L.reshape((K * J, J)).transpose()
            allL = ad.cmatmul(sel, L_stackT).reshape((len(rows) * K, J))
            jumped_psi = _normalize_rows(allL.take(np.arange(len(rows)) * K + choice[rows], axis=0))
            psi = ComplexTensor(ad.add(ad.mul(coh.re, keep), ad.scatter(jumped_psi.re, rows, R)),
                                ad.add(ad.mul(coh.im, keep), ad.scatter(jumped_psi.im, rows, R)))
        else:
            psi = coh
        if entropy is not None:
            entropy[t + 1] = von_neumann_entropy(psi.numpy())
        if observe is not None:
            observe(t + 1, psi.numpy())

    return psi, TrajectoryRecords(branch, gtot, annihilated, entropy, clamped)


# ---------------------------------------------------------- master equation


def lindblad_rhs(rho: np.ndarray, H: np.ndarray, Ls: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    """``-i[H, rho] + sum_k gamma_k (L rho L^dagger - 1/2 {L^dagger L, rho})``."""
    out = -1j * (H @ rho - rho @ H)
    for L, g in zip(Ls, gammas):
        Ld = L.conj().T
        LdL = Ld @ L
        out += g * (L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL))
    return out


def master_equation_step(rho: np.ndarray, H, Ls, gammas, dt: float) -> np.ndarray:
    """One classical RK4 step of the Lindblad equation."""
    H = np.asarray(H, dtype=np.complex128)
    Ls = np.asarray(Ls, dtype=np.complex128).reshape(-1, *H.shape)
    gammas = np.atleast_1d(np.asarray(gammas, dtype=np.float64))
    tr0 = np.trace(rho).real
    k1 = lindblad_rhs(rho, H, Ls, gammas)
    k2 = lindblad_rhs(rho + 0.5 * dt * k1, H, Ls, gammas)
    k3 = lindblad_rhs(rho + 0.5 * dt * k2, H, Ls, gammas)
    k4 = lindblad_rhs(rho + dt * k3, H, Ls, gammas)
    out = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    drift = abs(np.trace(out).real - tr0)
    if drift > 1e-6:
        raise FloatingPointError(f"trace drift {drift:.3e} in master-equation step; reduce dt")
    return out


def integrate_master_equation(rho0: np.ndarray, H, Ls, gammas, dt: float, steps: int,
                              substeps: int = 1) -> np.ndarray:
    """Densities ``[steps + 1, n, n]`` at times ``0, dt, ..., steps*dt``."""
    out = [np.asarray(rho0, dtype=np.complex128)]
    rho = out[0]
    h = dt / substeps
    for _ in range(steps):
        for _ in range(substeps):
            rho = master_equation_step(rho, H, Ls, gammas, h)
        out.append(rho)
    return np.stack(out)


@dataclass
class DensityAverage:
    """Running trajectory average of ``|psi><psi|`` at every step."""

    rho: list = field(default_factory=list)

    def __call__(self, t: int, psi: np.ndarray) -> None:
        self.rho.append(np.einsum("ri,rj->ij", psi, psi.conj()) / len(psi))


def trajectory_average_density(gen: JumpGenerator, psi0, cfg: TrajectoryConfig, n_traj: int,
                               all_steps: bool = False) -> np.ndarray:
    """Average projector over ``n_traj`` independent STANDARD-convention trajectories.

    Returns the final density, or ``[T + 1, J, J]`` with ``all_steps=True``.
    """
    if gen.convention is not Convention.STANDARD:
        raise ValueError("trajectory averages converge to the master equation only under STANDARD")
    psi0 = np.asarray(psi0.numpy() if isinstance(psi0, ComplexTensor) else psi0, dtype=np.complex128)
    batch = ComplexTensor.from_numpy(np.tile(psi0.reshape(1, -1), (n_traj, 1)))
    acc = DensityAverage()
    evolve_trajectory(gen, batch, cfg, observe=acc)
    rho = np.stack(acc.rho)
    return rho if all_steps else rho[-1]
