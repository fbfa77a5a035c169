"""Orthogonality regularization that keeps per-layer spectral norms near 1.

A weight matrix with orthonormal rows has all singular values equal to 1,
so a penalty pulling the small-side Gram matrix toward the identity keeps
every layer non-expansive and stops input perturbations from growing with
depth. Conv kernels participate through their (Cout, Cin*k*k) matrix view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, ShapeError, apply_op, matmul, mul, neg, reshape,
                     transpose, tsum)


@dataclass
class RegConfig:
    beta: float = 0.0
    apply_to: frozenset[str] | None = None  # None = every weight matrix
    aggregation: str = "convex"  # convex | plain-add

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.aggregation not in ("convex", "plain-add"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    def applies(self, name: str) -> bool:
        return self.apply_to is None or name in self.apply_to


@dataclass
class AggregationCoeff:
    """Trainable mixing coefficient of a two-input residual junction."""

    alpha: Tensor = field(default_factory=lambda: Tensor(0.5, requires_grad=True))

    def value(self) -> float:
        return float(self.alpha.data)


def reshape_conv_weight(w: Tensor) -> Tensor:
    """(Cout, Cin, k, k) -> (Cout, Cin*k*k), one flattened filter per row."""
    if w.ndim != 4:
        raise ShapeError(f"expected a rank-4 conv weight, got {w.shape}")
    return reshape(w, (w.shape[0], -1))


def orthogonal_penalty(w: Tensor) -> Tensor:
    """Squared Frobenius distance of the small-side Gram matrix from identity.

    For a rows x cols matrix this is ||W W^T - I||_F^2 when rows <= cols and
    ||W^T W - I||_F^2 otherwise, so the zero set (orthonormal rows or
    columns) is nonempty for every shape.
    """
    if w.ndim != 2:
        raise ShapeError(f"orthogonal_penalty expects a matrix, got {w.shape}")
    r, c = w.shape
    gram = matmul(w, transpose(w)) if r <= c else matmul(transpose(w), w)
    eye = Tensor(np.eye(min(r, c), dtype=w.dtype))
    dev = gram + neg(eye)
    return tsum(mul(dev, dev))


def total_loss(ce: Tensor, weights: list[tuple[str, Tensor]], cfg: RegConfig) -> Tensor:
    """ce + (beta/2) * sum of orthogonal penalties over the selected weights.

    beta == 0 short-circuits to the plain loss so vanilla training is
    bit-identical to a run without the regularizer.
    """
    if cfg.beta == 0.0:
        return ce
    total = ce
    half_beta = Tensor(np.asarray(cfg.beta / 2.0, dtype=ce.dtype))
    for name, w in weights:
        if not cfg.applies(name):
            continue
        mat = reshape_conv_weight(w) if w.ndim == 4 else w
        total = total + mul(half_beta, orthogonal_penalty(mat))
    return total


def convex_aggregate(a: Tensor, b: Tensor, coeff: AggregationCoeff) -> Tensor:
    """alpha * a + (1 - alpha) * b, differentiable in a, b and alpha."""
    if a.shape != b.shape:
        raise ShapeError(f"junction inputs differ: {a.shape} vs {b.shape}")
    alpha = coeff.alpha
    av = a.data.dtype.type(float(alpha.data))
    out = av * a.data + (1 - av) * b.data
    ad, bd = a.data, b.data
    need_a, need_b, need_alpha = a.requires_grad, b.requires_grad, alpha.requires_grad

    def bwd(g):
        ga = g * av if need_a else None
        gb = g * (1 - av) if need_b else None
        gal = np.asarray((g * (ad - bd)).sum(), dtype=alpha.data.dtype).reshape(
            alpha.data.shape) if need_alpha else None
        return ga, gb, gal

    return apply_op("convex_aggregate", (a, b, alpha), out, bwd)


def plain_add(a: Tensor, b: Tensor) -> Tensor:
    """Unconstrained residual sum, the aggregation vanilla nets use."""
    if a.shape != b.shape:
        raise ShapeError(f"junction inputs differ: {a.shape} vs {b.shape}")
    return a + b


def project_coeff(coeff: AggregationCoeff) -> AggregationCoeff:
    """Clip alpha back into [0, 1] after an optimizer step."""
    np.clip(coeff.alpha.data, 0.0, 1.0, out=coeff.alpha.data)
    return coeff


def spectral_report(weights, iters: int = 200, seed: int = 0) -> list[tuple[str, float]]:
    """(layer_name, sigma_max) for each weight matrix, conv weights reshaped."""
    rows = []
    for name, w in weights:
        mat = w.data.reshape(w.shape[0], -1) if w.ndim == 4 else w.data
        rows.append((name, spectral_norm(mat, iters=iters, seed=seed)))
    return rows


def write_spectral_csv(path, rows: list[tuple[str, float]]):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_name", "sigma_max"])
        for name, sigma in rows:
            w.writerow([name, repr(sigma)])


def spectral_norm(w, iters: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration on W^T W, seeded start.

    Verification utility, not part of the training graph. A zero matrix
    returns 0 rather than dividing by zero.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    mat = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"spectral_norm expects a matrix, got {mat.shape}")
    if not mat.any():
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = mat @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        u /= nu
        v = mat.T @ u
        sigma = np.linalg.norm(v)
        if sigma == 0.0:
            return 0.0
        v /= sigma
    return float(sigma)
