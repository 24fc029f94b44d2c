"""Sign-gradient attacks under an l-infinity budget in [0, 1] pixel space."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, sign, square, sum_

FAMILIES = ("fgsm", "pgd", "score_reflection")
_ALIASES = {"reflect": "score_reflection", "reflection": "score_reflection"}


@dataclass
class AttackSpec:
    family: str = "fgsm"
    epsilon: float = 1.0 / 255
    step_size: Optional[float] = None  # pgd; defaults to epsilon / 4
    steps: int = 10
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        self.family = _ALIASES.get(self.family, self.family)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.family == "pgd":
            if self.steps < 1:
                raise ValueError(f"pgd needs steps >= 1, got {self.steps}")
            if self.alpha <= 0 and self.epsilon > 0:
                raise ValueError(f"pgd needs a positive step size, got {self.alpha}")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else float(self.step_size)


@dataclass
class AdversarialResult:
    x_adv: np.ndarray
    loss: float
    score_before: np.ndarray
    score_after: np.ndarray
    history: List[float] = field(default_factory=list)

    def linf(self, x) -> float:
        return float(np.max(np.abs(self.x_adv - np.asarray(x)))) if self.x_adv.size else 0.0


def _model_of(model):
    return getattr(model, "model_", model)


def _loss_and_grad(model, x: np.ndarray, target: np.ndarray):
    """Summed squared error and its input gradient (samples stay independent)."""
    xt = Tensor(x, requires_grad=True)
    with model.frozen():
        pred = model(xt)
        loss = sum_(square(pred - Tensor(target)))
        loss.backward()
    return float(loss.data), xt.grad, pred.data.copy()


def _validate(x, y, epsilon):
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} targets")
    return x, y


def _project(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into [0, 1] and make ``|x - x0| <= epsilon`` hold as computed in float64.

    ``(x0 + eps) - x0`` can round to one ulp above ``eps``; such pixels are
    pulled back towards ``x0`` one ulp at a time.
    """
    x = np.clip(x, 0.0, 1.0)
    for _ in range(4):
        over = x - x0 > epsilon
        under = x0 - x > epsilon
        if not (over.any() or under.any()):
            break
        x[over] = np.nextafter(x[over], -np.inf)
        x[under] = np.nextafter(x[under], np.inf)
    return x


def _sign_step(model, x, y, epsilon, target_fn: Callable[[np.ndarray], np.ndarray]):
    model = _model_of(model)
    x, y = _validate(x, y, epsilon)
    target = target_fn(y)
    _, grad, before = _loss_and_grad(model, x, target)
    x_adv = _project(x + epsilon * sign(grad), x, epsilon)
    after_loss, _, after = _loss_and_grad(model, x_adv, target)
    return AdversarialResult(x_adv, after_loss, before, after)


def fgsm(model, x, y, epsilon: float = 1.0 / 255) -> AdversarialResult:
    """One signed step up the squared-error loss against the true label."""
    return _sign_step(model, x, y, epsilon, lambda y: y)


def reflection_target(y) -> np.ndarray:
    """``sign(y - 0.5)`` with the tie at 0.5 mapped to 0."""
    return np.sign(np.asarray(y, dtype=np.float64) - 0.5)


def score_reflection(model, x, y, epsilon: float = 1.0 / 255) -> AdversarialResult:
    """Push each score away from the +-1 side its label sits on relative to 0.5."""
    return _sign_step(model, x, y, epsilon, reflection_target)


def pgd(model, x, y, epsilon: float = 1.0 / 255, alpha: Optional[float] = None, steps: int = 10,
        random_start: bool = False, seed: int = 0) -> AdversarialResult:
    """Projected sign ascent on squared error, projected onto the ball and [0, 1]."""
    if steps < 1:
        raise ValueError(f"pgd needs steps >= 1, got {steps}")
    alpha = epsilon / 4 if alpha is None else alpha
    model = _model_of(model)
    x0, y = _validate(x, y, epsilon)
    lo, hi = x0 - epsilon, x0 + epsilon
    x = x0.copy()
    if random_start:
        rng = np.random.default_rng(seed)
        x = _project(x + rng.uniform(-epsilon, epsilon, x.shape), x0, epsilon)
    before = model.predict(x0)
    history = []
    for _ in range(steps):
        loss, grad, _ = _loss_and_grad(model, x, y)
        history.append(loss)
        x = _project(np.clip(x + alpha * sign(grad), lo, hi), x0, epsilon)
    final_loss, _, after = _loss_and_grad(model, x, y)
    history.append(final_loss)
    return AdversarialResult(x, final_loss, before, after, history)


def run_attack(model, x, y, spec: AttackSpec) -> AdversarialResult:
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec.epsilon)
    if spec.family == "score_reflection":
        return score_reflection(model, x, y, spec.epsilon)
    return pgd(model, x, y, spec.epsilon, spec.alpha, spec.steps, spec.random_start, spec.seed)


def attack_batched(model, x, y, spec: AttackSpec, batch_size: int = 64) -> np.ndarray:
    """Adversarial images for a whole dataset, attacked in fixed-order chunks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if spec.epsilon == 0:
        return x.copy()
    out = [run_attack(model, x[i:i + batch_size], y[i:i + batch_size], spec).x_adv
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def attack_sweep(model, x, y, family: str, epsilons: Sequence[float], batch_size: int = 64,
                 **spec_kwargs) -> List[dict]:
    """Attack at every budget in ``epsilons`` and score the result.

    Returns one ``{"epsilon", "srcc", "plcc", "mse"}`` row per budget.
    """
    from .metrics import evaluate

    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ValueError("epsilon grid is empty")
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError(f"epsilon grid must be sorted ascending, got {epsilons}")
    model = _model_of(model)
    rows = []
    for eps in epsilons:
        spec = AttackSpec(family=family, epsilon=eps, **spec_kwargs)
        x_adv = attack_batched(model, x, y, spec, batch_size)
        rows.append({"epsilon": eps, **evaluate(model.predict(x_adv), y)})
    return rows
