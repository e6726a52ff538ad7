"""Trajectory averages checked against master-equation integration and closed forms.

Two single-qubit systems with known solutions (basis order ``|g>, |e>``):

* ``amplitude_damping``: ``L = |g><e|``, start in ``|e>``;
  ``rho_ee(t) = exp(-gamma t)``.
* ``dephasing``: ``L = sigma_z``, start in ``|+>``;
  ``Re rho_ge(t) = exp(-2 gamma t) / 2``.

Each trajectory contributes one sample of the tracked observable per step, so
the Monte Carlo standard error comes from the sample spread.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import ComplexTensor
from .qjump import Convention, JumpGenerator, TrajectoryConfig, evolve_trajectory, integrate_master_equation

SYSTEMS = ("amplitude_damping", "dephasing")


@dataclass
class QubitSystem:
    name: str
    H: np.ndarray
    L: np.ndarray          # [1, 2, 2]
    gamma: float
    psi0: np.ndarray

    def observable(self, psi: np.ndarray) -> np.ndarray:
        """Per-trajectory value of the tracked density-matrix entry."""
        if self.name == "amplitude_damping":
            return np.abs(psi[..., 1]) ** 2
        return (psi[..., 0] * psi[..., 1].conj()).real

    def from_density(self, rho: np.ndarray) -> np.ndarray:
        if self.name == "amplitude_damping":
            return rho[..., 1, 1].real
        return rho[..., 0, 1].real

    def closed_form(self, t: np.ndarray) -> np.ndarray:
        if self.name == "amplitude_damping":
            return np.exp(-self.gamma * t)
        return 0.5 * np.exp(-2.0 * self.gamma * t)


def qubit_system(name: str, gamma: float = 1.0) -> QubitSystem:
    if name == "amplitude_damping":
        L = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=np.complex128)
        psi0 = np.array([0.0, 1.0], dtype=np.complex128)
    elif name == "dephasing":
        L = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=np.complex128)
        psi0 = np.array([1.0, 1.0], dtype=np.complex128) / np.sqrt(2.0)
    else:
        raise ValueError(f"unknown system {name!r}; expected one of {SYSTEMS}")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return QubitSystem(name, np.zeros((2, 2), dtype=np.complex128), L[None], float(gamma), psi0)


@dataclass
class ValidationReport:
    system: str
    n_traj: int
    dt: float
    steps: int
    times: np.ndarray
    trajectory: np.ndarray      # trajectory mean of the observable per step
    stderr: np.ndarray          # Monte Carlo standard error per step
    master: np.ndarray          # RK4 master-equation value per step
    exact: np.ndarray           # closed form per step
    runtime: float
    atol: float = 1e-9

    @property
    def deviation(self) -> np.ndarray:
        return np.abs(self.trajectory - self.master)

    @property
    def max_deviation(self) -> float:
        return float(self.deviation.max())

    @property
    def max_exact_deviation(self) -> float:
        return float(np.abs(self.trajectory - self.exact).max())

    @property
    def within_sigma(self) -> np.ndarray:
        return self.deviation <= 3.0 * self.stderr + self.atol

    @property
    def passed(self) -> bool:
        return bool(self.within_sigma.all())

    def lines(self) -> list[str]:
        worst = int(np.argmax(self.deviation / (3.0 * self.stderr + self.atol)))
        return [
            f"system {self.system}: n_traj={self.n_traj} dt={self.dt} steps={self.steps}",
            f"max |trajectory - master equation| = {self.max_deviation:.3e}",
            f"max |trajectory - closed form|     = {self.max_exact_deviation:.3e}",
            f"tightest step {worst}: deviation {self.deviation[worst]:.3e}, 3 sigma {3 * self.stderr[worst]:.3e}",
            f"final value {self.trajectory[-1]:.6f} (master {self.master[-1]:.6f}, exact {self.exact[-1]:.6f})",
            f"runtime {self.runtime:.2f}s",
            "PASS" if self.passed else "FAIL",
        ]


def validate_trajectories(system: str = "amplitude_damping", n_traj: int = 10_000, dt: float = 0.01,
                          steps: int = 100, gamma: float = 1.0, seed: int = 0,
                          substeps: int = 4) -> ValidationReport:
    """Run ``n_traj`` STANDARD-convention trajectories and compare with RK4 and the closed form."""
    t0 = time.perf_counter()
    sys_ = qubit_system(system, gamma)
    # gamma = 0 has no finite softplus preimage; run the jump-free path instead
    gen = JumpGenerator.from_physical(sys_.H, sys_.L, [gamma or 1.0], Convention.STANDARD)
    values = []

    def observe(t, psi):
        values.append(sys_.observable(psi))

    batch = ComplexTensor.from_numpy(np.tile(sys_.psi0, (n_traj, 1)))
    evolve_trajectory(gen, batch, TrajectoryConfig(dt=dt, steps=steps, seed=seed), observe=observe,
                      zero_rates=gamma == 0)
    vals = np.stack(values)                                   # [T + 1, n_traj]
    mean = vals.mean(axis=1)
    stderr = vals.std(axis=1, ddof=1) / np.sqrt(n_traj) if n_traj > 1 else np.zeros(steps + 1)
    rho0 = np.outer(sys_.psi0, sys_.psi0.conj())
    rhos = integrate_master_equation(rho0, sys_.H, sys_.L, [gamma], dt, steps, substeps)
    times = dt * np.arange(steps + 1)
    return ValidationReport(system, n_traj, dt, steps, times, mean, stderr, sys_.from_density(rhos),
                            sys_.closed_form(times), time.perf_counter() - t0)
