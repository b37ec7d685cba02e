"""1D PDE definitions and explicit method-of-lines reference solvers.

All grids are periodic.  A trajectory is laid out like any other series: time
along L, one channel per spatial point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesBatch

FAMILIES = ("advection", "burgers", "diffusion_reaction")

DEFAULT_COEFFS = {
    "advection": {"c": 1.0},
    "burgers": {"nu": 0.1},
    "diffusion_reaction": {"D": 1.0, "k": 0.1},
}


class PdeInstabilityError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PdeSpec:
    family: str
    dx: float
    dt: float
    grid_size: int
    coeffs: dict = field(default_factory=dict)
    blowup: float = 1e6

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown PDE family {self.family!r}; expected one of {FAMILIES}")
        merged = dict(DEFAULT_COEFFS[self.family])
        unknown = set(self.coeffs) - set(merged)
        if unknown:
            raise ValueError(f"unknown coefficient(s) for {self.family}: {sorted(unknown)}")
        merged.update(self.coeffs)
        object.__setattr__(self, "coeffs", merged)
        if self.dx <= 0 or self.dt <= 0 or self.grid_size < 3:
            raise ValueError("dx, dt must be positive and grid_size >= 3")
        for name, number in self.stability_numbers().items():
            limit = 1.0 if name == "courant" else 0.5
            if number > limit:
                raise ValueError(f"unstable discretisation: {name} number {number:.3g} > {limit}")

    def stability_numbers(self, u_max: float = 1.0) -> dict[str, float]:
        c = self.coeffs
        if self.family == "advection":
            return {"courant": abs(c["c"]) * self.dt / self.dx}
        if self.family == "burgers":
            return {"courant": u_max * self.dt / self.dx, "diffusion": c["nu"] * self.dt / self.dx ** 2}
        return {"diffusion": c["D"] * self.dt / self.dx ** 2}

    def to_dict(self) -> dict:
        return {"family": self.family, "dx": self.dx, "dt": self.dt,
                "grid_size": self.grid_size, "coeffs": dict(self.coeffs)}


def _upwind_derivative(u: np.ndarray, speed: np.ndarray, dx: float) -> np.ndarray:
    back = (u - np.roll(u, 1, axis=-1)) / dx
    fwd = (np.roll(u, -1, axis=-1) - u) / dx
    return np.where(speed >= 0, back, fwd)


def _laplacian(u: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(u, -1, axis=-1) - 2 * u + np.roll(u, 1, axis=-1)) / dx ** 2


def rhs(spec: PdeSpec, u: np.ndarray) -> np.ndarray:
    """Semi-discrete right-hand side used by the solver (upwind convection)."""
    c = spec.coeffs
    if spec.family == "advection":
        speed = np.full_like(u, c["c"])
        return -c["c"] * _upwind_derivative(u, speed, spec.dx)
    if spec.family == "burgers":
        return -u * _upwind_derivative(u, u, spec.dx) + c["nu"] * _laplacian(u, spec.dx)
    return c["D"] * _laplacian(u, spec.dx) - c["k"] * u


def solve_pde(spec: PdeSpec, initial_condition, steps: int) -> TimeSeriesBatch:
    """Forward-Euler march of ``steps`` frames (frame 0 is the initial condition).

    ``initial_condition`` may be (N,) or (B, N); the result has shape (B, steps, N).
    """
    u = np.atleast_2d(np.asarray(initial_condition, dtype=np.float64)).copy()
    if u.shape[-1] != spec.grid_size:
        raise ValueError(f"initial condition has {u.shape[-1]} points, spec expects {spec.grid_size}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    frames = [u.copy()]
    for _ in range(steps - 1):
        u = u + spec.dt * rhs(spec, u)
        if not np.isfinite(u).all() or np.abs(u).max() > spec.blowup:
            raise PdeInstabilityError(f"{spec.family} solution blew up (|u| > {spec.blowup})")
        frames.append(u.copy())
    traj = np.stack(frames, axis=1)
    times = np.broadcast_to(np.arange(steps) * spec.dt, traj.shape[:2]).copy()
    names = [f"x{i}" for i in range(spec.grid_size)]
    return TimeSeriesBatch(traj, np.ones_like(traj, dtype=bool), None, times, names)


# ---------------------------------------------------------------- initial conditions

def grid(spec: PdeSpec) -> np.ndarray:
    return np.arange(spec.grid_size) * spec.dx


def gaussian_bumps(spec: PdeSpec, n: int, rng: np.random.Generator, n_bumps: tuple[int, int] = (1, 2),
                   width: tuple[float, float] = (0.1, 0.2), height: tuple[float, float] = (0.5, 1.0)) -> np.ndarray:
    """Randomly placed periodic Gaussian peaks; widths are fractions of the domain."""
    x = grid(spec)
    length = spec.grid_size * spec.dx
    out = np.zeros((n, spec.grid_size))
    for b in range(n):
        for _ in range(rng.integers(n_bumps[0], n_bumps[1] + 1)):
            centre = rng.uniform(0, length)
            w = rng.uniform(*width) * length
            h = rng.uniform(*height)
            d = (x - centre + length / 2) % length - length / 2
            out[b] += h * np.exp(-0.5 * (d / w) ** 2)
    return out


def sine_mixture(spec: PdeSpec, n: int, rng: np.random.Generator, n_components: int = 3,
                 amplitude: tuple[float, float] = (0.1, 0.5)) -> np.ndarray:
    """Sum of low-wavenumber periodic sines with random amplitude and phase."""
    x = grid(spec)
    length = spec.grid_size * spec.dx
    out = np.zeros((n, spec.grid_size))
    for b in range(n):
        for m in range(1, n_components + 1):
            a = rng.uniform(*amplitude)
            phi = rng.uniform(0, 2 * np.pi)
            out[b] += a * np.sin(2 * np.pi * m * x / length + phi)
    return out


def random_initial_conditions(spec: PdeSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.family == "advection":
        return gaussian_bumps(spec, n, rng)
    if spec.family == "burgers":
        return sine_mixture(spec, n, rng)
    return gaussian_bumps(spec, n, rng, n_bumps=(1, 1), width=(0.08, 0.2), height=(0.5, 1.5))


def pde_dataset(spec: PdeSpec, n: int, steps: int, rng: np.random.Generator) -> TimeSeriesBatch:
    return solve_pde(spec, random_initial_conditions(spec, n, rng), steps)
