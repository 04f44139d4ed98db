"""Constitutive laws: VFT viscosity with cap, energy, entropy, dissipation."""
from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class FluidMaterial:
    mu0: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    c: float = 1.0  # heat capacity
    k: float = 1.0  # conductivity

    def __post_init__(self):
        for name in ("mu0", "beta", "gamma", "c", "k"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Transmission:
    """Interface conductance: 0 insulating, finite, or inf superconducting."""

    value: float

    def __post_init__(self):
        if not (self.value >= 0):
            raise ValueError("transmission coefficient must be >= 0")

    @classmethod
    def parse(cls, text):
        if isinstance(text, (int, float)):
            return cls(float(text))
        t = str(text).strip().lower()
        if t in ("inf", "infinity", "superconducting"):
            return cls(math.inf)
        if t in ("insulating",):
            return cls(0.0)
        return cls(float(t))

    @property
    def kind(self):
        if self.value == 0:
            return "insulating"
        if math.isinf(self.value):
            return "superconducting"
        return "finite"

    def __str__(self):
        return "inf" if math.isinf(self.value) else repr(self.value)


@dataclass(frozen=True)
class ViscosityCap:
    M: float = 1e6
    floor: float = 0.5

    def __post_init__(self):
        if not (self.M > 0 and self.floor > 0):
            raise ValueError("cap parameter and floor must be positive")

    def check_floor(self, materials):
        top = max(m.gamma for m in materials)
        if not self.floor > top:
            raise ValueError(f"temperature floor {self.floor} must exceed every VFT gamma (max {top})")


def vft_viscosity(theta, mat):
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= mat.gamma):
        raise ValueError("temperature at or below the VFT singularity")
    return mat.mu0 * np.exp(mat.beta / (theta - mat.gamma))


def capped_viscosity(theta, mat, cap):
    theta = np.asarray(theta, dtype=float)
    thresh = mat.gamma + 1.0 / cap.M
    with np.errstate(over="ignore"):
        top = mat.mu0 * np.exp(cap.M * mat.beta)
        safe = np.where(theta >= thresh, theta - mat.gamma, 1.0)
        out = np.where(theta >= thresh, mat.mu0 * np.exp(mat.beta / safe), top)
    return out


def symmetric_gradient(grad_u):
    g = np.asarray(grad_u, dtype=float)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def dissipation_density(theta, grad_u, mat, cap):
    D = symmetric_gradient(grad_u)
    return capped_viscosity(theta, mat, cap) * np.sum(D * D, axis=(-1, -2))


def internal_energy(theta, mat):
    return mat.c * np.asarray(theta, dtype=float)


def entropy(theta, mat):
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("entropy needs positive temperature")
    return mat.c * np.log(theta)


def entropy_test_function(kind, theta, beta_p=-0.5):
    """Concave increasing test function and its first two derivatives."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("entropy test functions need positive temperature")
    if kind == "log":
        return np.log(theta), 1.0 / theta, -1.0 / theta**2
    if kind == "power":
        if not (-1.0 < beta_p < 0.0):
            raise ValueError("power exponent must lie in (-1, 0)")
        q = beta_p + 1.0
        return theta**q, q * theta**beta_p, q * beta_p * theta ** (beta_p - 1.0)
    raise ValueError(f"unknown entropy family {kind!r}")
