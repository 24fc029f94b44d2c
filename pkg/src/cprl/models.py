"""Small quality-regression CNNs with an optional soft-rank channel gate."""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add_bias,
    as_tensor,
    conv2d,
    global_avg_pool,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
)
from .checkpoint import CheckpointError
from .layer import CprlConfig, InterventionHeads, Phase, channel_mask, intervene_c, intervene_s

BACKBONE_KEYS = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                 "conv3.weight", "conv3.bias", "head.weight", "head.bias")


class QualityNet:
    """Three 3x3 conv+relu blocks (C -> 8 -> 16 -> K), global pooling, logistic head.

    With ``cprl`` set, pooled features pass through the soft-rank gate before
    the head and two intervention heads are attached for min-max training.
    ``mask_override`` (``"ones"`` or ``"zeros"``) replaces the computed gate.
    """

    def __init__(self, in_channels: int = 1, cfg: Optional[CprlConfig] = None, cprl: bool = True,
                 seed: int = 0, widths: Tuple[int, int] = (8, 16)):
        self.cfg = cfg if cfg is not None else CprlConfig()
        self.cprl = bool(cprl)
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        self.mask_override: Optional[str] = None

        rng = np.random.default_rng(seed)
        K = self.cfg.channels
        chans = (self.in_channels,) + self.widths + (K,)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for i in range(3):
            fan_in = chans[i] * 9
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"conv{i + 1}.weight"] = Tensor(
                rng.uniform(-bound, bound, (chans[i + 1], chans[i], 3, 3)), requires_grad=True)
            self.params[f"conv{i + 1}.bias"] = Tensor(np.zeros(chans[i + 1]), requires_grad=True)
        bound = 1.0 / np.sqrt(K)
        self.params["head.weight"] = Tensor(rng.uniform(-bound, bound, (K, 1)), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(1), requires_grad=True)
        # heads draw from their own stream so backbone init is identical across variants
        self.heads = InterventionHeads(K, np.random.default_rng([seed, 1])) if self.cprl else None

    # -- description ---------------------------------------------------------
    @property
    def architecture(self) -> str:
        c1, c2 = self.widths
        gate = f"cprl(K={self.cfg.channels},b={self.cfg.bias},tau={self.cfg.tau})" if self.cprl else "none"
        return f"conv3x3[{self.in_channels}->{c1}->{c2}->{self.cfg.channels}]+relu|gap|gate={gate}|linear->sigmoid"

    def backbone_parameters(self):
        return [self.params[k] for k in BACKBONE_KEYS]

    def phi_parameters(self):
        return [self.heads.phi_weight, self.heads.phi_bias] if self.heads else []

    def xi_parameters(self):
        return [self.heads.xi_weight, self.heads.xi_bias] if self.heads else []

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        if self.heads is not None:
            state["phi.weight"] = self.heads.phi_weight.data.copy()
            state["phi.bias"] = self.heads.phi_bias.data.copy()
            state["xi.weight"] = self.heads.xi_weight.data.copy()
            state["xi.bias"] = self.heads.xi_bias.data.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointError(f"checkpoint keys differ from model: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if np.shape(value) != expected[name].shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {np.shape(value)} vs model shape {expected[name].shape}")
        for name in self.params:
            self.params[name].data = np.array(state[name], dtype=np.float64)
        if self.heads is not None:
            self.heads.phi_weight.data = np.array(state["phi.weight"], dtype=np.float64)
            self.heads.phi_bias.data = np.array(state["phi.bias"], dtype=np.float64)
            self.heads.xi_weight.data = np.array(state["xi.weight"], dtype=np.float64)
            self.heads.xi_bias.data = np.array(state["xi.bias"], dtype=np.float64)

    def all_parameters(self):
        return list(self.params.values()) + self.phi_parameters() + self.xi_parameters()

    @contextlib.contextmanager
    def frozen(self):
        """Stop gradients into parameters, e.g. while differentiating w.r.t. the input."""
        params = self.all_parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    @contextlib.contextmanager
    def frozen_except(self, trainable):
        """Like :meth:`frozen` but leaves ``trainable`` differentiable."""
        keep = {id(p) for p in trainable}
        params = [p for p in self.all_parameters() if id(p) not in keep]
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    # -- forward -----------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected input of shape (batch, {self.in_channels}, H, W), got {x.shape}")

    def features(self, x) -> Tensor:
        """Pooled backbone features ``f(x)``, shape (batch, K)."""
        x = as_tensor(x)
        self._check_input(x)
        p = self.params
        h = relu(conv2d(x - 0.5, p["conv1.weight"], p["conv1.bias"]))
        h = relu(conv2d(h, p["conv2.weight"], p["conv2.bias"]))
        h = relu(conv2d(h, p["conv3.weight"], p["conv3.bias"]))
        return global_avg_pool(h)

    def mask(self, f: Tensor) -> Tensor:
        if self.mask_override == "ones":
            return Tensor(np.ones(f.shape))
        if self.mask_override == "zeros":
            return Tensor(np.zeros(f.shape))
        return channel_mask(f, self.cfg)

    def head(self, z: Tensor) -> Tensor:
        logit = add_bias(matmul(z, self.params["head.weight"]), self.params["head.bias"])
        return reshape(sigmoid(logit), (z.shape[0],))

    def forward(self, x) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        """Return ``(score, f, M)``; ``M`` is ``None`` for the baseline."""
        f = self.features(x)
        if not self.cprl:
            return self.head(f), f, None
        M = self.mask(f)
        return self.head(f * M), f, M

    def __call__(self, x) -> Tensor:
        return self.forward(x)[0]

    def activated(self, x) -> Tensor:
        """What the head sees: ``f * M`` for the gated model, ``f`` otherwise."""
        f = self.features(x)
        return f * self.mask(f) if self.cprl else f

    def predict(self, x, batch_size: int = 128) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(Tensor(x[i:i + batch_size])).data)
        return np.concatenate(out) if out else np.zeros(0)

    def predict_intervened(self, x, phase: Phase) -> Tuple[Tensor, Tensor]:
        """Clean score and the score through the ``phase`` intervention head."""
        if not self.cprl:
            raise ValueError("intervened prediction needs a model with the CPRL gate enabled")
        phase = Phase(phase)
        if phase is Phase.NONE:
            raise ValueError("phase must be SF or NC")
        f = self.features(x)
        M = self.mask(f)
        y = self.head(f * M)
        if phase is Phase.SF:
            z = intervene_c(f, M, self.heads)
        else:
            z = intervene_s(f, M, self.heads, self.cfg.s_branch)
        return y, self.head(z)
