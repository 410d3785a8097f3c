"""Attention refinement activation.

A shifted-tanh gate for attention scores: positive scores are boosted
relative to plain tanh by a temperature tau that shifts the decaying
exponential in the denominator, and non-positive scores are clipped to
zero.  At tau = 0 the positive branch reduces exactly to tanh, so the
function is a strict generalisation of max(tanh(x), 0).  Rows of refined
scores are NOT renormalised; low-relevance entries stay at zero instead
of being redistributed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation, Tensor


@dataclass(frozen=True)
class ArfParams:
    """Temperature for the refinement gate; tau >= 0, default 2."""

    tau: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.tau) or self.tau < 0:
            raise ContractViolation(f"arf tau must be finite and >= 0, got {self.tau}")


def arf(x: np.ndarray, tau: float = 2.0) -> np.ndarray:
    """Elementwise refinement gate.

    Written as (1 - exp(-2x)) / (1 + exp(-2(x + tau))) on the positive
    branch so all exponents are non-positive there; the raw form
    (e^x - e^-x) / (e^x + e^-(x+2tau)) overflows beyond |x| ~ 709.
    Values are clipped to zero for x <= 0 and lie in [0, 1); note that
    for x beyond ~19 the result rounds to exactly 1.0 in float64.
    """
    ArfParams(tau=float(tau))
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    xs = np.where(pos, x, 1.0)  # dummy on the clipped branch to avoid overflow
    num = -np.expm1(-2.0 * xs)
    den = 1.0 + np.exp(-2.0 * (xs + tau))
    return np.where(pos, num / den, 0.0)


def arf_grad(x: np.ndarray, tau: float = 2.0) -> np.ndarray:
    """Elementwise derivative; the subgradient at the x = 0 kink is 0.

    On the positive branch, with u = exp(-2x) and v = exp(-2(x + tau)),
    the derivative simplifies to 2(u + v) / (1 + v)^2, which recovers
    sech^2 at tau = 0.
    """
    ArfParams(tau=float(tau))
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    u = np.exp(-2.0 * xs)
    v = np.exp(-2.0 * (xs + tau))
    g = 2.0 * (u + v) / (1.0 + v) ** 2
    return np.where(pos, g, 0.0)


def arf_vjp(x: np.ndarray, tau: float, upstream: np.ndarray) -> np.ndarray:
    """Pull an upstream cotangent back through the gate."""
    upstream = np.asarray(upstream)
    if upstream.shape != np.shape(x):
        raise ContractViolation(f"arf_vjp shape mismatch: x {np.shape(x)} vs upstream {upstream.shape}")
    return upstream * arf_grad(x, tau)


def arf_op(t: Tensor, tau: float = 2.0) -> Tensor:
    """Differentiable-graph wrapper around arf/arf_vjp."""
    out = arf(t.data, tau)
    return Tensor._from_op(out, (t,), lambda g: (arf_vjp(t.data, tau, g),))
