"""Stack of diagonal S5 layers with HiPPO-LegS initialization.

Parameters are plain float64 arrays keyed by name so the optimizer and the
checkpoint format never see complex dtypes; complex matrices are stored as
``*_re``/``*_im`` pairs and assembled inside the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .scan import DimensionError


class InitError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    state_size: int = 32
    hidden_size: int = 32
    input_channels: int = 2
    context_length: int = 256
    min_context: int = 20
    mlp_hidden: int = 64

    def __post_init__(self):
        for f in ("num_layers", "state_size", "hidden_size", "input_channels", "mlp_hidden"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if not 0 < self.min_context < self.context_length:
            raise ValueError("need 0 < min_context < context_length")


@dataclass
class S5LayerParams:
    lambda_re_raw: np.ndarray
    lambda_im: np.ndarray
    B_re: np.ndarray
    B_im: np.ndarray
    C_re: np.ndarray
    C_im: np.ndarray
    D: np.ndarray
    log_delta: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray

    def to_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping[str, np.ndarray]) -> "S5LayerParams":
        return cls(**{f.name: np.asarray(d[f.name]) for f in fields(cls)})

    @property
    def lam(self) -> np.ndarray:
        return -np.exp(self.lambda_re_raw) + 1j * self.lambda_im

    @property
    def B(self) -> np.ndarray:
        return self.B_re + 1j * self.B_im

    @property
    def C(self) -> np.ndarray:
        return self.C_re + 1j * self.C_im


LAYER_KEYS = tuple(f.name for f in fields(S5LayerParams))


def legs_matrix(P: int) -> np.ndarray:
    """HiPPO-LegS state matrix (negative-definite convention)."""
    q = np.sqrt(2.0 * np.arange(P) + 1.0)
    A = np.tril(np.outer(q, q)) - np.diag(np.arange(P, dtype=np.float64))
    return -A


def legs_normal_part(P: int) -> np.ndarray:
    """LegS plus its rank-one correction: ``-I/2`` plus a skew-symmetric matrix."""
    p = np.sqrt(np.arange(P) + 0.5)
    return legs_matrix(P) + np.outer(p, p)


def hippo_eigs(P: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and unitary eigenvectors of the LegS normal part."""
    S = legs_normal_part(P)
    re = np.mean(np.diag(S))
    try:
        w, V = np.linalg.eigh(-1j * S)
    except np.linalg.LinAlgError as exc:
        raise InitError(f"eigendecomposition failed for P={P}") from exc
    lam = re + 1j * w
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(V))):
        raise InitError(f"non-finite HiPPO spectrum for P={P}")
    return lam, V


def hippo_init(
    P: int,
    H: int,
    seed: int,
    *,
    h_in: int | None = None,
    mlp_hidden: int | None = None,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> S5LayerParams:
    if P < 1 or H < 1:
        raise ValueError("P and H must be positive")
    h_in = H if h_in is None else h_in
    mlp_hidden = 2 * H if mlp_hidden is None else mlp_hidden
    rng = np.random.default_rng(seed)
    lam, V = hippo_eigs(P)
    Vh = V.conj().T
    B = Vh @ (rng.normal(size=(P, h_in)) / np.sqrt(h_in))
    C = (rng.normal(size=(H, P)) / np.sqrt(P)) @ V
    log_delta = rng.uniform(np.log(dt_min), np.log(dt_max), size=P)
    return S5LayerParams(
        lambda_re_raw=np.log(-lam.real),
        lambda_im=lam.imag.copy(),
        B_re=B.real.copy(),
        B_im=B.imag.copy(),
        C_re=C.real.copy(),
        C_im=C.imag.copy(),
        D=np.ones(H),
        log_delta=log_delta,
        mlp_w1=rng.normal(size=(mlp_hidden, H)) / np.sqrt(H),
        mlp_b1=np.zeros(mlp_hidden),
        mlp_w2=rng.normal(size=(H, mlp_hidden)) / np.sqrt(mlp_hidden) * 0.5,
        mlp_b2=np.zeros(H),
    )


def discretize(params, s_delta: float):
    """Zero-order-hold discretization at step ``s_delta * exp(log_delta)``.

    ``params`` is an :class:`S5LayerParams` or a mapping of arrays/vars.
    Returns ``(a_bar, b_bar)`` with shapes ``(P,)`` and ``(P, H_in)``.
    """
    if not s_delta > 0:
        raise ValueError(f"s_delta must be positive, got {s_delta}")
    p = params.to_dict() if isinstance(params, S5LayerParams) else params
    lam = ad.complex_(ad.neg(ad.exp(p["lambda_re_raw"])), p["lambda_im"])
    dt = ad.mul(ad.exp(p["log_delta"]), float(s_delta))
    a_bar = ad.exp(ad.mul(lam, dt))
    scale = ad.zoh_scale(lam, dt)
    B = ad.complex_(p["B_re"], p["B_im"])
    b_bar = ad.mul(ad.reshape(scale, (-1, 1)), B)
    return a_bar, b_bar


def _mlp(h, p):
    u = ad.layer_norm(h)
    z = ad.gelu(ad.add(ad.matmul(u, ad.transpose(p["mlp_w1"])), p["mlp_b1"]))
    return ad.add(ad.matmul(z, ad.transpose(p["mlp_w2"])), p["mlp_b2"])


def s5_layer_forward(x_seq, params, s_delta: float = 1.0):
    """One S5 layer over ``(..., L, H_in)``: SSM block, skip, then residual MLP."""
    p = params.to_dict() if isinstance(params, S5LayerParams) else params
    xv = ad.value(x_seq)
    h_in = ad.value(p["B_re"]).shape[1]
    h_out = ad.value(p["C_re"]).shape[0]
    if xv.ndim < 2 or xv.shape[-1] != h_in:
        raise DimensionError(f"input feature size {xv.shape[-1:]} != B columns {h_in}")
    if ad.value(p["D"]).shape != (h_out,):
        raise DimensionError("D must have one entry per output feature")
    a_bar, b_bar = discretize(p, s_delta)
    bu = ad.matmul(x_seq, ad.transpose(b_bar))  # (..., L, P)
    states = ad.linear_scan(a_bar, bu, axis=-2)
    C = ad.complex_(p["C_re"], p["C_im"])
    y = ad.real(ad.matmul(states, ad.transpose(C)))
    if h_in == h_out:
        h = ad.add(ad.add(y, ad.mul(p["D"], x_seq)), x_seq)
    else:
        h = y
    return ad.add(h, _mlp(h, p))


def layer_params(params: Mapping, layer: int) -> dict:
    prefix = f"layers.{layer}."
    return {k: params[prefix + k] for k in LAYER_KEYS}


def encode(x_in, config: EncoderConfig, params: Mapping, s_delta: float = 1.0):
    """Embed ``(..., L, input_channels)`` and run the layer stack; ``(..., L, H)``."""
    xv = ad.value(x_in)
    if xv.shape[-1] != config.input_channels:
        raise DimensionError(f"expected {config.input_channels} input channels, got {xv.shape[-1]}")
    W = params["embed.W"]
    if ad.value(W).shape != (config.hidden_size, config.input_channels):
        raise DimensionError("embedding does not match config")
    h = ad.add(ad.matmul(x_in, ad.transpose(W)), params["embed.b"])
    for layer in range(config.num_layers):
        try:
            lp = layer_params(params, layer)
        except KeyError as exc:
            raise DimensionError(f"missing parameters for layer {layer}: {exc}") from None
        h = s5_layer_forward(h, lp, s_delta)
    return h


def init_encoder(config: EncoderConfig, seed: int, dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict:
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(config.num_layers + 1)
    rng = np.random.default_rng(children[0])
    H = config.hidden_size
    params = {
        "embed.W": rng.normal(size=(H, config.input_channels)),
        "embed.b": np.zeros(H),
    }
    for layer in range(config.num_layers):
        lseed = int(children[layer + 1].generate_state(1)[0])
        lp = hippo_init(config.state_size, H, lseed, mlp_hidden=config.mlp_hidden, dt_min=dt_min, dt_max=dt_max)
        for k, v in lp.to_dict().items():
            params[f"layers.{layer}.{k}"] = v
    return params


def max_real_eigenvalue(params: Mapping) -> float:
    vals = [-np.exp(v).min() for k, v in params.items() if k.endswith("lambda_re_raw")]
    return float(max(vals)) if vals else -np.inf
