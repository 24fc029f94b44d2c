"""IQA evaluation metrics plus output-landscape and activation probes.

Correlations over a constant vector are undefined; they come back as ``None``
(serialized as ``null`` in JSON and ``undefined`` in CSV), never NaN.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .autodiff import Tensor, no_grad, sign, square, sum_

UNDEFINED = None


def _pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64).reshape(-1)
    b = np.asarray(target, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} predictions vs {b.shape[0]} targets")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        return UNDEFINED
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def plcc(pred, target) -> Optional[float]:
    a, b = _pair(pred, target)
    if a.size < 2:
        raise ValueError("plcc needs at least two samples")
    return _pearson(a, b)


def srcc(pred, target) -> Optional[float]:
    """Spearman correlation with average ranks for ties."""
    a, b = _pair(pred, target)
    if a.size < 2:
        raise ValueError("srcc needs at least two samples")
    return _pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def mse(pred, target) -> float:
    a, b = _pair(pred, target)
    d = a - b
    return float(np.dot(d, d) / d.size)


def evaluate(pred, target) -> dict:
    return {"srcc": srcc(pred, target), "plcc": plcc(pred, target), "mse": mse(pred, target)}


def fmt(value) -> str:
    """CSV cell text for a metric value."""
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- probes --------------------------------------------------------------------

PIXEL = 1.0 / 255


def fgsm_direction(model, x, y) -> np.ndarray:
    """``sign`` of the squared-error input gradient (unit l-infinity length)."""
    model = getattr(model, "model_", model)
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with model.frozen():
        loss = sum_(square(model(xt) - Tensor(np.asarray(y, dtype=np.float64).reshape(-1))))
        loss.backward()
    return sign(xt.grad)


def landscape(model, x, y, dir_a=None, dir_b=None, extent: float = 1.0, resolution: int = 11,
              seed: int = 0, clip: bool = True) -> dict:
    """Model scores over the plane ``x + u*dir_a + v*dir_b`` around one image.

    ``x`` is a single image (C, H, W). ``u`` and ``v`` run over
    ``linspace(-extent, extent, resolution)`` in pixel units (1/255).
    ``dir_a`` defaults to the FGSM direction, ``dir_b`` to seeded random +-1.
    Returns ``{"grid", "u", "v", "dir_a", "dir_b"}`` with ``grid[i, j]`` the
    score at ``(u[i], v[j])``.
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    model = getattr(model, "model_", model)
    x = np.asarray(x, dtype=np.float64)
    if dir_a is None:
        dir_a = fgsm_direction(model, x[None], [y])[0]
    if dir_b is None:
        dir_b = np.random.default_rng(seed).choice([-1.0, 1.0], size=x.shape)
    axis = np.linspace(-extent, extent, resolution)
    if resolution % 2:
        axis[resolution // 2] = 0.0
    batch = np.stack([x + (u * PIXEL) * dir_a + (v * PIXEL) * dir_b for u in axis for v in axis])
    if clip:
        batch = np.clip(batch, 0.0, 1.0)
    grid = model.predict(batch).reshape(resolution, resolution)
    return {"grid": grid, "u": axis, "v": axis.copy(), "dir_a": dir_a, "dir_b": dir_b}


def landscape_range(grid) -> float:
    return float(np.max(grid) - np.min(grid))


def activation_dump(model, x_clean, x_adv, stage: str = "pooled") -> List[dict]:
    """Per-channel clean vs adversarial activations, largest clean magnitude first.

    Activations are averaged over the batch. ``stage="pooled"`` reads the pooled
    features, ``stage="activated"`` reads what reaches the head.
    """
    if stage not in ("pooled", "activated"):
        raise ValueError(f"stage must be 'pooled' or 'activated', got {stage!r}")
    model = getattr(model, "model_", model)
    probe = model.features if stage == "pooled" else model.activated
    with no_grad():
        clean = probe(Tensor(np.asarray(x_clean, dtype=np.float64))).data.mean(axis=0)
        adv = probe(Tensor(np.asarray(x_adv, dtype=np.float64))).data.mean(axis=0)
    order = np.argsort(-np.abs(clean), kind="stable")
    return [{"rank": r, "channel": int(k), "clean": float(clean[k]), "adversarial": float(adv[k])}
            for r, k in enumerate(order)]
