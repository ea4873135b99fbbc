"""LayerNorm / RMSNorm and the LayerNorm Jacobian analysis.

The Jacobian helpers work on plain float64 numpy vectors and never use the
learned affine parameters. ``ln_jacobian_analytic`` is the textbook
mean-zero form ``(1/sigma) (I - z z^T / d)``; ``ln_jacobian_full`` composes it
with the centering projection, which is the exact Jacobian of a
mean-subtracting LayerNorm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .reporting import write_csv
from .tensor import Tensor, add, make_rng, mul, no_grad

NormKind = Literal["layernorm", "rmsnorm"]

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class NormSpec:
    kind: NormKind = "rmsnorm"
    eps: float = DEFAULT_EPS
    affine: bool = True

    def __post_init__(self):
        if self.kind not in ("layernorm", "rmsnorm"):
            raise ValueError(f"unknown normalizer kind {self.kind!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def _check_affine(x: Tensor, gain: Tensor | None, bias: Tensor | None) -> None:
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ValueError(f"{name} has shape {p.shape}, expected ({d},) for normalized dim {d}")


def layer_norm(x: Tensor, eps: float = DEFAULT_EPS, gain: Tensor | None = None,
               bias: Tensor | None = None, center: bool = True) -> Tensor:
    """Normalize over the last axis: ``(x - mean) / sqrt(var + eps)``.

    With ``center=False`` the mean is taken to be zero, i.e. the input is
    scaled by ``1 / sqrt(mean(x**2) + eps)`` (the form the Jacobian analysis
    assumes).
    """
    _check_affine(x, gain, bias)
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True) if center else xd
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gy = (g * y).mean(axis=-1, keepdims=True)
        if center:
            return (inv * (g - g.mean(axis=-1, keepdims=True) - y * gy),)
        return (inv * (g - y * gy),)

    out = Tensor._make(y, (x,), backward)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def rms_norm(x: Tensor, eps: float = DEFAULT_EPS, gain: Tensor | None = None) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)``, times ``gain`` when given."""
    return layer_norm(x, eps=eps, gain=gain, center=False)


def apply_norm(x: Tensor, spec: NormSpec, gain: Tensor | None = None,
               bias: Tensor | None = None) -> Tensor:
    if spec.kind == "layernorm":
        return layer_norm(x, spec.eps, gain, bias)
    return rms_norm(x, spec.eps, gain)


# -- Jacobian analysis ---------------------------------------------------------


def _standardize(x_prime) -> tuple[np.ndarray, float, np.ndarray]:
    x = np.asarray(x_prime, dtype=np.float64).reshape(-1)
    sigma = float(x.std())
    if not sigma > 0:
        raise ValueError("LayerNorm Jacobian is undefined for a zero-variance input")
    return x, sigma, (x - x.mean()) / sigma


def ln_jacobian_analytic(x_prime) -> np.ndarray:
    """``(1/sigma) (I - z z^T / d)`` with ``z`` the standardized input."""
    x, sigma, z = _standardize(x_prime)
    d = x.size
    return (np.eye(d) - np.outer(z, z) / d) / sigma


def ln_jacobian_full(x_prime) -> np.ndarray:
    """Exact Jacobian of mean-subtracting LayerNorm (eps -> 0).

    Equal to the analytic form times the centering projection
    ``I - 11^T/d``; annihilates both ``x'`` and the all-ones vector.
    """
    d = np.asarray(x_prime).size
    centering = np.eye(d) - np.full((d, d), 1.0 / d)
    return ln_jacobian_analytic(x_prime) @ centering


def autodiff_jacobian(fn, x_prime) -> np.ndarray:
    """Jacobian of a vector->vector Tensor function, one backward pass per row."""
    x = np.asarray(x_prime, dtype=np.float64).reshape(-1)
    d = x.size
    jac = np.empty((d, d))
    for i in range(d):
        leaf = Tensor(x.copy(), requires_grad=True)
        out = fn(leaf)
        seed = np.zeros(d)
        seed[i] = 1.0
        out.backward(seed)
        jac[i] = leaf.grad
    return jac


def identity_approx_error(x_prime, trials: int, rng: np.random.Generator | None = None,
                          directions: np.ndarray | None = None) -> float:
    """Mean relative error of replacing the LN Jacobian by ``(1/sigma) I``.

    Averages ``||(J - I/sigma) v|| / ||v / sigma||`` over ``trials`` random
    unit vectors ``v`` (or over the rows of ``directions`` when given).
    """
    if directions is None and trials < 1:
        raise ValueError("trials must be at least 1")
    return float(_approx_errors(x_prime, trials, rng, directions).mean())


def _approx_errors(x_prime, trials, rng, directions) -> np.ndarray:
    x, sigma, _ = _standardize(x_prime)
    d = x.size
    jac = ln_jacobian_analytic(x)
    if directions is None:
        rng = rng if rng is not None else make_rng(0)
        directions = rng.standard_normal((trials, d))
    v = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    resid = v @ (jac - np.eye(d) / sigma).T
    return np.linalg.norm(resid, axis=1) / (np.linalg.norm(v, axis=1) / sigma)


@dataclass
class JacobianReport:
    d: int
    sigma: float
    analytic_jacobian: np.ndarray
    autodiff_jacobian: np.ndarray
    identity_approx_error: float
    identity_approx_error_std: float
    null_direction_residuals: dict[str, float] = field(default_factory=dict)


def jacobian_report(x_prime, trials: int = 100, rng: np.random.Generator | None = None,
                    eps: float = 1e-12) -> JacobianReport:
    """Compare the analytic Jacobian against autodiff and probe its null space.

    The autodiff side differentiates the mean-zero LayerNorm form on the
    centered input, where the analytic expression is exact. Null-direction
    residuals are measured on the full (centering) LayerNorm Jacobian.
    """
    x, sigma, _ = _standardize(x_prime)
    centered = x - x.mean()
    analytic = ln_jacobian_analytic(centered)
    auto = autodiff_jacobian(lambda t: layer_norm(t, eps=eps, center=False), centered)
    errs = _approx_errors(x, trials, rng if rng is not None else make_rng(0), None)
    full = ln_jacobian_full(x)
    d = x.size
    return JacobianReport(
        d=d,
        sigma=sigma,
        analytic_jacobian=analytic,
        autodiff_jacobian=auto,
        identity_approx_error=float(errs.mean()),
        identity_approx_error_std=float(errs.std()),
        null_direction_residuals={
            "x": float(np.linalg.norm(full @ x)),
            "ones": float(np.linalg.norm(full @ np.ones(d))),
        },
    )


JACOBIAN_CSV_COLUMNS = ("d", "sigma", "approx_error_mean", "approx_error_std",
                        "null_residual_x", "null_residual_ones")


def jacobian_table(dims=(64, 128, 256, 512), trials: int = 100, seed: int = 0) -> list[JacobianReport]:
    """One report per hidden size, each on a fresh standard Gaussian ``x'``."""
    reports = []
    for d in dims:
        rng = make_rng(seed * 1_000_003 + d)
        reports.append(jacobian_report(rng.standard_normal(d), trials=trials, rng=rng))
    return reports


def write_jacobian_csv(path, reports: list[JacobianReport]) -> None:
    write_csv(path, JACOBIAN_CSV_COLUMNS, (
        (r.d, r.sigma, r.identity_approx_error, r.identity_approx_error_std,
         r.null_direction_residuals["x"], r.null_direction_residuals["ones"])
        for r in reports
    ))


# -- instrumentation -------------------------------------------------------------


class SigmaTrace:
    """Collects the token-averaged std of every normalizer input in a forward pass."""

    def __init__(self):
        self.sigmas: dict[str, float] = {}

    def record(self, name: str, x: Tensor) -> None:
        self.sigmas[name] = float(x.data.std(axis=-1).mean())


def sigma_tracker(model, tokens) -> dict[str, float]:
    """Per-normalizer input std of ``model`` on ``tokens``, in forward order."""
    trace = SigmaTrace()
    with no_grad():
        model.forward(tokens, sigma_trace=trace)
    return trace.sigmas


def expected_random_direction_error(d: int) -> float:
    """E|<u, v>| for independent uniform unit vectors in R^d (closed form)."""
    return math.exp(math.lgamma(d / 2) - math.lgamma((d + 1) / 2)) / math.sqrt(math.pi)
