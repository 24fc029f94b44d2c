"""Soft-rank channel activation and intervention heads."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    PowerIteration,
    ShapeError,
    Tensor,
    as_tensor,
    linear,
    mean,
    pairwise_diff,
    sigmoid,
    square,
    sum_,
)


class Phase(str, enum.Enum):
    NONE = "None"
    SF = "SF"
    NC = "NC"


@dataclass
class CprlConfig:
    """Mask hyperparameters.

    ``s_branch`` selects the form of the perceptual intervention: ``"printed"``
    computes ``FC_xi(f) * M + f * M``; ``"prose"`` keeps the unmasked part,
    ``FC_xi(f) * M + f * (1 - M)``.
    """

    channels: int = 32
    bias: float = 0.4
    tau: float = 1.0
    s_branch: str = "printed"

    def __post_init__(self):
        if int(self.channels) < 2:
            raise ValueError(f"channels must be >= 2, got {self.channels}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.bias <= 1.0:
            raise ValueError(f"bias must lie in [0, 1], got {self.bias}")
        if self.s_branch not in ("printed", "prose"):
            raise ValueError(f"s_branch must be 'printed' or 'prose', got {self.s_branch!r}")
        self.channels = int(self.channels)


def soft_rank(v, tau: float) -> Tensor:
    """Pairwise-sigmoid soft rank along the last axis.

    ``r_k = sum_j sigmoid((v_k - v_j) / tau)``. With distinct entries and a
    small ``tau`` this approaches ``hard_rank - 0.5`` for 1-based ranks.
    """
    v = as_tensor(v)
    return sum_(sigmoid(pairwise_diff(v) * (1.0 / tau)), axis=-1)


def channel_mask(f, cfg: CprlConfig) -> Tensor:
    f = as_tensor(f)
    K = f.shape[-1]
    if K != cfg.channels:
        raise ShapeError(f"channel_mask: feature width {K} does not match configured K={cfg.channels}")
    return sigmoid(soft_rank(f, cfg.tau) + (cfg.bias * K - K / 2.0))


def activate(f, cfg: CprlConfig, mask=None) -> Tensor:
    """Row-wise ``f * M``; pass ``mask`` to override the computed gate."""
    f = as_tensor(f)
    if f.ndim != 2 or f.shape[1] != cfg.channels:
        raise ShapeError(f"activate: expected (batch, {cfg.channels}), got {f.shape}")
    M = channel_mask(f, cfg) if mask is None else as_tensor(mask)
    return f * M


class InterventionHeads:
    """The two K x K linear maps used to intervene on pooled features."""

    def __init__(self, channels: int, rng: np.random.Generator, sn_iters: int = 100):
        bound = 1.0 / np.sqrt(channels)
        self.phi_weight = Tensor(rng.uniform(-bound, bound, (channels, channels)), requires_grad=True)
        self.phi_bias = Tensor(np.zeros(channels), requires_grad=True)
        self.xi_weight = Tensor(rng.uniform(-bound, bound, (channels, channels)), requires_grad=True)
        self.xi_bias = Tensor(np.zeros(channels), requires_grad=True)
        seed = int(rng.integers(2**31))
        self.phi_power = PowerIteration(channels, seed)
        self.xi_power = PowerIteration(channels, seed + 1)
        self.normalize("phi", sn_iters)
        self.normalize("xi", sn_iters)

    def normalize(self, which: str, iters: int = 1) -> float:
        """Rescale a head weight in place to unit estimated spectral norm."""
        W = self.phi_weight if which == "phi" else self.xi_weight
        power = self.phi_power if which == "phi" else self.xi_power
        sigma = power.run(W.data, iters)
        if sigma > 1e-12:
            W.data = W.data / sigma
        return sigma

    def sigma(self, which: str) -> float:
        if which == "phi":
            return self.phi_power.sigma(self.phi_weight.data)
        return self.xi_power.sigma(self.xi_weight.data)

    def phi(self, f: Tensor) -> Tensor:
        return linear(f, self.phi_weight, self.phi_bias)

    def xi(self, f: Tensor) -> Tensor:
        return linear(f, self.xi_weight, self.xi_bias)


def intervene_c(f, M, heads: InterventionHeads) -> Tensor:
    """Rewrite the low-ranked part of ``f`` with ``FC_phi``; keep the masked part."""
    f, M = as_tensor(f), as_tensor(M)
    return heads.phi(f) * (1.0 - M) + f * M


def intervene_s(f, M, heads: InterventionHeads, s_branch: str = "printed") -> Tensor:
    f, M = as_tensor(f), as_tensor(M)
    keep = M if s_branch == "printed" else 1.0 - M
    return heads.xi(f) * M + f * keep


def pns_risk(y_c, y_s, y) -> Tensor:
    """``mean((y_c - y)^2 - (y_s - y)^2)`` over the batch."""
    y_c, y_s, y = as_tensor(y_c), as_tensor(y_s), as_tensor(y)
    if not (y_c.shape == y_s.shape == y.shape):
        raise ShapeError(f"pns_risk: length mismatch {y_c.shape}, {y_s.shape}, {y.shape}")
    return mean(square(y_c - y) - square(y_s - y))
