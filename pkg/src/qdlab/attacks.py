"""White-box gradient attacks and the random-noise baseline.

All attacks are untargeted, infinity-norm bounded, and clip every output to
both the epsilon-ball of the clean input and the valid pixel range [0, 1].
Budgets are expressed in 0-255 pixel units and scaled by 1/255 to match
inputs. Gradients flow through the quantizer's straight-through path, the
same path training uses, so there is no surrogate model and no obfuscated
gradient.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

from .seeds import split_seed
from .tensor import Tensor, backward, cross_entropy

ATTACK_KINDS = ("random", "fgsm", "rfgsm", "bim", "pgd")


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 8.0  # 0-255 pixel units
    alpha: float = 1.0  # step size, 0-255 units
    iters: int | None = None  # None = pgd_schedule(epsilon)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}, expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iters is not None and self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")


def scale_eps(eps_255: float) -> float:
    """0-255 pixel budget to model input units."""
    return float(eps_255) / 255.0


def pgd_schedule(eps_255: float) -> int:
    """Iteration count floor(min(eps+4, 1.25*eps)); zero budget means zero steps."""
    if eps_255 <= 0:
        return 0
    return int(np.floor(min(eps_255 + 4.0, 1.25 * eps_255)))


@contextmanager
def frozen_params(model):
    """Suspend weight gradients so attacks only differentiate the input."""
    flags = [(p, p.requires_grad) for _, p in model.parameters()]
    for p, _ in flags:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, was in flags:
            p.requires_grad = was


def input_gradient(model, x_arr: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean CE loss)/d(input) at x_arr, eval-mode statistics, true labels."""
    x = Tensor(x_arr, requires_grad=True)
    with frozen_params(model):
        loss = cross_entropy(model.forward(x, train=False), y)
        backward(loss)
    return x.grad


def _project(adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    out = np.clip(adv, x - np.float32(eps), x + np.float32(eps))
    np.clip(out, 0.0, 1.0, out=out)
    return out


def random_attack(x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Uniform noise in [-eps, eps] per pixel; no model knowledge."""
    eps = scale_eps(cfg.epsilon)
    if eps == 0.0:
        return x.copy()
    rng = np.random.default_rng(split_seed(cfg.seed, "attack/random"))
    noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    return _project(x + noise, x, eps)


def fgsm(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """One signed-gradient step of the full budget."""
    eps = scale_eps(cfg.epsilon)
    if eps == 0.0:
        return x.copy()
    g = input_gradient(model, x, y)
    return _project(x + np.float32(eps) * np.sign(g), x, eps)


def r_fgsm(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Random half-budget sign step, then a signed-gradient step for the rest.

    The presample escapes the non-smooth vicinity of the data point; the
    inner radius is exactly half the budget.
    """
    eps = scale_eps(cfg.epsilon)
    if eps == 0.0:
        return x.copy()
    eps1 = eps / 2.0
    rng = np.random.default_rng(split_seed(cfg.seed, "attack/rfgsm"))
    presample = np.sign(rng.standard_normal(size=x.shape)).astype(x.dtype)
    x1 = x + np.float32(eps1) * presample
    g = input_gradient(model, x1, y)
    adv = x1 + np.float32(eps - eps1) * np.sign(g)
    return _project(adv, x, eps)


def bim(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Iterated FGSM with a small step, projected into the ball every step."""
    eps = scale_eps(cfg.epsilon)
    iters = cfg.iters if cfg.iters is not None else pgd_schedule(cfg.epsilon)
    return _iterate(model, x, y, x.copy(), eps, scale_eps(cfg.alpha), iters)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """BIM from a uniform random start inside the ball."""
    eps = scale_eps(cfg.epsilon)
    iters = cfg.iters if cfg.iters is not None else pgd_schedule(cfg.epsilon)
    if eps == 0.0:
        return x.copy()
    rng = np.random.default_rng(split_seed(cfg.seed, "attack/pgd"))
    start = _project(x + rng.uniform(-eps, eps, size=x.shape).astype(x.dtype), x, eps)
    return _iterate(model, x, y, start, eps, scale_eps(cfg.alpha), iters)


def _iterate(model, x, y, adv, eps, alpha, iters):
    for _ in range(iters):
        g = input_gradient(model, adv, y)
        adv = _project(adv + np.float32(alpha) * np.sign(g), x, eps)
    return adv


_DISPATCH = {
    "random": lambda m, x, y, c: random_attack(x, c),
    "fgsm": fgsm,
    "rfgsm": r_fgsm,
    "bim": bim,
    "pgd": pgd,
}


def run_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    return _DISPATCH[cfg.kind](model, x, y, cfg)


def batch_attack_config(cfg: AttackConfig, batch_index: int) -> AttackConfig:
    """Derive a per-batch config so batches draw independent noise streams."""
    return replace(cfg, seed=split_seed(cfg.seed, f"batch/{batch_index}"))
