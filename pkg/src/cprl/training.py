"""Alternating min-max training of the gated model, and the plain MSE trainer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, mean, mse, no_grad, square
from .checkpoint import save_checkpoint
from .layer import Phase, intervene_c, intervene_s
from .metrics import evaluate

logger = logging.getLogger(__name__)

PHASE_CYCLE = (Phase.NONE, Phase.SF, Phase.NC)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-5
    adversary_lr: Optional[float] = None  # defaults to lr
    betas: Sequence[float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: Optional[float] = 5.0
    seed: int = 0
    pns: bool = True
    objective: str = "full"  # or "branch": only the active intervention term in the min step
    sn_iters: int = 1
    schedule: Sequence[str] = field(default_factory=lambda: [p.value for p in PHASE_CYCLE])

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if int(self.epochs) < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.objective not in ("full", "branch"):
            raise ValueError(f"objective must be 'full' or 'branch', got {self.objective!r}")
        self.schedule = [Phase(p).value for p in self.schedule]
        if not self.schedule:
            raise ValueError("phase schedule is empty")


def phase_at(t: int, schedule: Sequence[str] = tuple(p.value for p in PHASE_CYCLE)) -> Phase:
    return Phase(schedule[t % len(schedule)])


class AdamW:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: List[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Optional[List[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            decayed = p.data - self.lr * self.weight_decay * p.data
            p.data = decayed - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: List[Tensor], max_norm: Optional[float]) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Trainer:
    """Holds the optimizers and runs :meth:`train_step` / :meth:`fit` on one model."""

    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        kw = dict(betas=tuple(cfg.betas), eps=cfg.eps)
        self.opt_main = AdamW(model.backbone_parameters(), cfg.lr, weight_decay=cfg.weight_decay, **kw)
        adv_lr = cfg.lr if cfg.adversary_lr is None else cfg.adversary_lr
        # heads are spectrally normalized, so weight decay would fight the projection
        self.opt_phi = AdamW(model.phi_parameters(), adv_lr, weight_decay=0.0, **kw) if model.cprl else None
        self.opt_xi = AdamW(model.xi_parameters(), adv_lr, weight_decay=0.0, **kw) if model.cprl else None
        self.t = 0

    @property
    def uses_pns(self) -> bool:
        return bool(self.model.cprl and self.cfg.pns)

    def _zero_all(self) -> None:
        for p in self.model.all_parameters():
            p.grad = None

    def _min_step(self, loss: Tensor) -> None:
        self._zero_all()
        loss.backward()
        params = self.model.backbone_parameters()
        clip_grad_norm(params, self.cfg.grad_clip)
        self.opt_main.step()

    def _ascent_step(self, objective: Tensor, which: str) -> None:
        """One AdamW step that increases ``objective`` w.r.t. one intervention head."""
        self._zero_all()
        (objective * -1.0).backward()
        opt = self.opt_phi if which == "phi" else self.opt_xi
        clip_grad_norm(opt.params, self.cfg.grad_clip)
        opt.step()
        self.model.heads.normalize(which, self.cfg.sn_iters)

    def _branches(self, x: Tensor):
        m = self.model
        f = m.features(x)
        M = m.mask(f)
        y_pred = m.head(f * M)
        target = Tensor(y_pred.data)  # prediction without intervention stands in for the label
        y_c = m.head(intervene_c(f, M, m.heads))
        y_s = m.head(intervene_s(f, M, m.heads, m.cfg.s_branch))
        return y_pred, target, y_c, y_s

    def train_step(self, x, y, phase: Phase = Phase.NONE) -> Dict[str, float]:
        """One iteration on a batch. Returns the losses that were minimized."""
        phase = Phase(phase)
        m = self.model
        if phase is not Phase.NONE and not m.cprl:
            raise ValueError(f"phase {phase.value} needs a model with the CPRL gate enabled")
        x = Tensor(np.asarray(x, dtype=np.float64))
        y = Tensor(np.asarray(y, dtype=np.float64).reshape(-1))
        record = {"t": self.t, "phase": phase.value}
        if phase is Phase.NONE:
            loss = mse(m(x), y)
            self._min_step(loss)
            record.update(mse=float(loss.data), loss=float(loss.data))
        else:
            which = "phi" if phase is Phase.SF else "xi"
            # the max player only moves its own head, so backbone features are constants here
            with no_grad():
                f = m.features(x)
                M = m.mask(f)
                target = m.head(f * M)
            with m.frozen_except(m.phi_parameters() if which == "phi" else m.xi_parameters()):
                if phase is Phase.SF:
                    adv = mean(square(m.head(intervene_c(f, M, m.heads)) - target))
                else:
                    adv = mean(square(m.head(intervene_s(f, M, m.heads, m.cfg.s_branch)) - target)) * -1.0
                self._ascent_step(adv, which)

            y_pred, target, y_c, y_s = self._branches(x)
            sf = mean(square(y_c - target))
            nc = mean(square(y_s - target)) * -1.0
            fit = mse(y_pred, y)
            if self.cfg.objective == "full":
                risk = sf + nc
            else:
                risk = sf if phase is Phase.SF else nc
            loss = fit + risk
            self._min_step(loss)
            record.update(mse=float(fit.data), sf=float(sf.data), nc=float(nc.data), loss=float(loss.data))
        self.t += 1
        return record

    def fit(self, images, labels, eval_set=None, checkpoint_path=None, callback=None) -> List[dict]:
        """Run ``cfg.epochs`` epochs; returns the per-epoch curve.

        Each curve row carries ``epoch, split, srcc, plcc, mse, loss, phase_counts``
        with one row per split (``train`` and, if ``eval_set`` is given, ``test``).
        The best-by-test-SRCC parameters are written to ``checkpoint_path``.
        """
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if len(images) == 0:
            raise ValueError("cannot train on an empty dataset")
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2])
        curve: List[dict] = []
        best = -np.inf
        for epoch in range(int(cfg.epochs)):
            order = rng.permutation(len(images))
            losses = []
            counts = {p.value: 0 for p in PHASE_CYCLE}
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                phase = phase_at(self.t, cfg.schedule) if self.uses_pns else Phase.NONE
                rec = self.train_step(images[idx], labels[idx], phase)
                losses.append(rec["loss"])
                counts[phase.value] += 1
            phase_counts = "|".join(f"{k}:{v}" for k, v in counts.items())
            splits = [("train", images, labels)]
            if eval_set is not None:
                splits.append(("test", np.asarray(eval_set[0], dtype=np.float64), np.asarray(eval_set[1])))
            for name, xs, ys in splits:
                row = {"epoch": epoch + 1, "split": name, **evaluate(self.model.predict(xs), ys),
                       "loss": float(np.mean(losses)), "phase_counts": phase_counts}
                curve.append(row)
            score = curve[-1]["srcc"]
            score = -np.inf if score is None else score
            if checkpoint_path is not None and score > best:
                best = score
                save_checkpoint(checkpoint_path, self.model.state_dict())
            logger.info("epoch %d loss %.5f %s", epoch + 1, np.mean(losses), curve[-1])
            if callback is not None:
                callback(epoch, curve)
        return curve


def fit(model, images, labels, cfg: TrainConfig, eval_set=None, checkpoint_path=None) -> List[dict]:
    return Trainer(model, cfg).fit(images, labels, eval_set, checkpoint_path)
