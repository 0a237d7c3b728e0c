"""Dense-array primitives with analytic backward passes, Adam, and a
finite-difference gradient oracle.

Everything here operates on numpy arrays. Functions that the model needs to
differentiate come in ``*_forward`` / ``*_backward`` pairs; the forward half
returns whatever cache the backward half consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LN_EPS = 1e-8


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyRowError(ValueError):
    """Raised when a softmax row has no unmasked entry."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient holds NaN or Inf."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def masked_softmax_rows(
    x: np.ndarray, mask: np.ndarray, allow_empty: bool = False
) -> np.ndarray:
    """Softmax over the last axis restricted to entries where ``mask`` is True.

    Masked entries come out as exactly 0. A row with no unmasked entry is an
    error unless ``allow_empty`` is set, in which case the row is all zeros.
    """
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if x.shape != mask.shape:
        raise DimensionError(f"logits {x.shape} and mask {mask.shape} differ")
    has_any = mask.any(axis=-1, keepdims=True)
    if not allow_empty and not has_any.all():
        raise EmptyRowError("softmax row has every entry masked")
    shifted = np.where(mask, x, -np.inf)
    row_max = np.max(shifted, axis=-1, keepdims=True)
    row_max = np.where(has_any, row_max, 0.0)
    ex = np.where(mask, np.exp(np.where(mask, x - row_max, 0.0)), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    return np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    # masked entries have weight 0, so their gradient vanishes automatically
    inner = np.sum(grad_weights * weights, axis=-1, keepdims=True)
    return weights * (grad_weights - inner)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis with population variance, then scale/shift."""
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_forward(x, gamma, beta, eps: float = LN_EPS):
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm input width {d} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    """Return (dx, dgamma, dbeta); parameter grads are summed over leading axes."""
    xhat, inv_std, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def dropout_mask(shape, rate: float, rng: np.random.Generator | None, dtype=float):
    """Inverted-dropout multiplier, or None when dropout is inactive."""
    if rng is None or rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(like), v=np.zeros_like(like), **hyper)


def adam_step(
    param: np.ndarray, grad: np.ndarray, state: AdamState, name: str = "parameter"
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"{name}: param {param.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient for {name}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        m=m,
        v=v,
        step=t,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_param.astype(param.dtype, copy=False), new_state


@dataclass
class Adam:
    """Adam over a dict of named parameters, updating them in place."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = AdamState.fresh(
                    p,
                    learning_rate=self.learning_rate,
                    beta1=self.beta1,
                    beta2=self.beta2,
                    epsilon=self.epsilon,
                )
            new_p, self.states[name] = adam_step(p, grads[name], st, name=name)
            p[...] = new_p


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], at: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at`` (which is not modified)."""
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1, |a|, |b|) over entries."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale))
