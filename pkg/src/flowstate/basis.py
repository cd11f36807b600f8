"""Functional basis decoder: coefficients -> continuous forecast -> samples."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .scan import DimensionError

FAMILIES = {
    "legendre": (-1.0, 1.0),
    "half_legendre": (0.0, 1.0),
    "fourier": (-1.0, 1.0),
}


class BasisDomainError(ValueError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    family: str = "legendre"
    n: int = 16
    domain: tuple[float, float] = field(default=None)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}; choose from {sorted(FAMILIES)}")
        if self.n < 1:
            raise ValueError("basis needs at least one function")
        expected = FAMILIES[self.family]
        if self.domain is None:
            object.__setattr__(self, "domain", expected)
        elif tuple(map(float, self.domain)) != expected:
            raise ValueError(f"{self.family} basis lives on {expected}, got {self.domain}")


def _legendre_table(x: np.ndarray, n: int) -> np.ndarray:
    """P_0..P_{n-1} at ``x`` via Bonnet's recurrence; shape ``x.shape + (n,)``."""
    out = np.empty(x.shape + (n,), dtype=np.float64)
    out[..., 0] = 1.0
    if n > 1:
        out[..., 1] = x
    for k in range(1, n - 1):
        out[..., k + 1] = ((2 * k + 1) * x * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out


def eval_basis(spec: BasisSpec, u) -> np.ndarray:
    """Orthonormal basis functions at ``u``; trailing axis has length ``spec.n``."""
    u = np.asarray(u, dtype=np.float64)
    a, b = spec.domain
    tol = 1e-12 * (b - a)
    if np.any(u < a - tol) or np.any(u > b + tol):
        raise BasisDomainError(f"u outside [{a}, {b}]")
    deg = np.arange(spec.n)
    if spec.family == "legendre":
        return _legendre_table(u, spec.n) * np.sqrt((2 * deg + 1) / 2.0)
    if spec.family == "half_legendre":
        return _legendre_table(2.0 * u - 1.0, spec.n) * np.sqrt(2 * deg + 1.0)
    # fourier on [-1, 1]: 1/sqrt(2), cos(pi k u), sin(pi k u), ...
    out = np.empty(u.shape + (spec.n,), dtype=np.float64)
    out[..., 0] = 1.0 / np.sqrt(2.0)
    for i in range(1, spec.n):
        k = (i + 1) // 2
        out[..., i] = np.cos(np.pi * k * u) if i % 2 == 1 else np.sin(np.pi * k * u)
    return out


def sample_points(spec: BasisSpec, t_eff: int, t_base_eff: int | None = None) -> np.ndarray:
    """Midpoints ``u_k = a + (b - a) (k - 1/2) / t_base_eff`` for ``k = 1..t_eff``."""
    if t_eff < 1:
        raise ValueError("need at least one sample")
    t_base_eff = t_eff if t_base_eff is None else t_base_eff
    a, b = spec.domain
    k = np.arange(1, t_eff + 1, dtype=np.float64)
    return a + (b - a) * (k - 0.5) / t_base_eff


def basis_matrix(spec: BasisSpec, t_eff: int, t_base_eff: int | None = None) -> np.ndarray:
    """``(t_eff, n)`` matrix mapping coefficients to samples."""
    return eval_basis(spec, sample_points(spec, t_eff, t_base_eff))


def decode_readout(o_last, w_out, k: int, n: int):
    """Linear readout from encoder output(s) to a ``(..., K, n)`` coefficient tensor."""
    ov, wv = ad.value(o_last), ad.value(w_out)
    if wv.ndim != 2 or wv.shape != (k * n, ov.shape[-1]):
        raise DimensionError(f"readout weight {wv.shape} does not map H={ov.shape[-1]} to K*n={k * n}")
    flat = ad.matmul(o_last, ad.transpose(w_out))
    return ad.reshape(flat, ov.shape[:-1] + (k, n))


def sample_coefficients(coeffs, basis_mat):
    """Evaluate ``(..., K, n)`` coefficients on a ``(T, n)`` basis matrix -> ``(..., T, K)``."""
    out = ad.matmul(coeffs, ad.transpose(basis_mat))  # (..., K, T)
    nd = ad.value(out).ndim
    return ad.transpose(out, tuple(range(nd - 2)) + (nd - 1, nd - 2))


@dataclass
class ContinuousForecast:
    coeffs: np.ndarray
    basis: BasisSpec
    s_delta: float = 1.0
    horizon_T_eff: int | None = None
    T_base: int = 24

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != self.basis.n:
            raise DimensionError(f"coeffs must be (K, {self.basis.n}), got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite coefficients")
        if self.s_delta <= 0:
            raise ValueError("s_delta must be positive")
        if self.horizon_T_eff is None:
            self.horizon_T_eff = self.base_steps

    @property
    def base_steps(self) -> int:
        return max(1, round_half_away(self.T_base / self.s_delta))

    def __call__(self, u) -> np.ndarray:
        """Continuous forecast at arbitrary points of the domain; ``(..., K)``."""
        return eval_basis(self.basis, u) @ self.coeffs.T


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def sample_forecast(fc: ContinuousForecast, sort_quantiles: bool = True) -> np.ndarray:
    """Sample ``fc`` on its horizon grid; returns ``(T_eff, K)``."""
    if fc.horizon_T_eff < 1:
        raise ValueError("horizon must be at least one step")
    u = sample_points(fc.basis, fc.horizon_T_eff, fc.base_steps)
    a, b = fc.basis.domain
    if u[-1] > b:
        raise BasisDomainError("horizon exceeds one base forecast; extend with multi-patch inference")
    out = fc(u)
    return np.sort(out, axis=-1) if sort_quantiles else out
