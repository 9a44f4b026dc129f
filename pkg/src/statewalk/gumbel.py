"""Gumbel(0,1) noise and the relaxed categorical transform.

Adding Gumbel noise to log-probabilities and taking the argmax draws an exact
categorical sample; dividing the noised logits by a temperature and applying
softmax gives the differentiable relaxation of that draw. Temperature is kept
positive by training its log.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Parameter, Tensor, accumulate_grad, custom_op

# Inverse-CDF sampling needs log(-log(u)); clamp keeps u off both endpoints.
_UNIFORM_EPS = 1e-12


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Draw standard Gumbel noise of the given shape (int or tuple)."""
    if isinstance(shape, int):
        shape = (shape,)
    if any(int(n) < 1 for n in shape):
        raise ValueError(f"sample_gumbel: empty shape {tuple(shape)}")
    u = rng.random(shape)
    u = np.clip(u, _UNIFORM_EPS, 1.0 - _UNIFORM_EPS)
    return -np.log(-np.log(u))


class TemperatureParam:
    """Softmax temperature stored as its log, so it stays positive.

    ``rho`` is the trainable scalar; the temperature is ``exp(rho)``. With
    ``trainable=False`` the parameter exists but is excluded from optimizer
    updates by the owning model.
    """

    def __init__(self, tau_init: float = 1.0, trainable: bool = True):
        if not (tau_init > 0 and np.isfinite(tau_init)):
            raise ValueError(f"temperature must be positive and finite, got {tau_init}")
        self.rho = Parameter(np.array(np.log(tau_init)), name="temperature.rho")
        self.trainable = trainable

    @property
    def tau(self) -> float:
        return float(np.exp(self.rho.data))


def gumbel_softmax(log_theta: Tensor, gamma: np.ndarray, temperature: TemperatureParam,
                   return_log: bool = False):
    """Relaxed sample alpha_i proportional to exp((log_theta_i + gamma_i)/tau).

    ``log_theta`` rows are log-probabilities (gradient flows through them and
    through the temperature); ``gamma`` is fixed noise of the same shape.
    Returns alpha, or (alpha, log_alpha) when ``return_log`` is set; both come
    from the same scaled logits so they are consistent to machine precision.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != log_theta.data.shape:
        raise T.ShapeError("gumbel_softmax", log_theta.data.shape, gamma.shape)
    if not np.all(np.isfinite(gamma)):
        raise NonFiniteError("gumbel_softmax noise")
    noised = T.add(log_theta, Tensor(gamma))
    inv_tau = T.exp(T.neg(temperature.rho))
    scaled = T.mul(noised, inv_tau)
    alpha = T.softmax(scaled)
    if return_log:
        return alpha, T.log_softmax(scaled)
    return alpha


def hard_sample(theta: np.ndarray, rng: np.random.Generator) -> int:
    """Exact categorical draw from a probability row via the argmax trick.

    The argmax of log(theta) + gumbel noise is distributed as theta, for any
    temperature (scaling does not change the argmax).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise T.ShapeError("hard_sample", theta.shape)
    gamma = sample_gumbel(rng, theta.shape[0])
    with np.errstate(divide="ignore"):
        return int(np.argmax(np.log(theta) + gamma))


def relaxed_sample_np(theta: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Numpy-only Gumbel-softmax over one probability row (inference paths)."""
    theta = np.asarray(theta, dtype=np.float64)
    gamma = sample_gumbel(rng, theta.shape[0])
    with np.errstate(divide="ignore"):
        z = (np.log(theta) + gamma) / float(tau)
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def straight_through(alpha: Tensor) -> Tensor:
    """Row-wise one-hot at the argmax; gradient passes through unchanged.

    Ties resolve to the lowest index. Input rows must be probability vectors.
    """
    a = alpha.data
    if a.ndim not in (1, 2):
        raise T.ShapeError("straight_through", a.shape)
    rows = a[None, :] if a.ndim == 1 else a
    if np.any(rows < -1e-9) or not np.allclose(rows.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("straight_through: rows must be probability vectors")
    hard = np.zeros_like(rows)
    hard[np.arange(rows.shape[0]), np.argmax(rows, axis=-1)] = 1.0
    hard = hard[0] if a.ndim == 1 else hard

    def backward(g):
        accumulate_grad(alpha, g)

    return custom_op("straight_through", hard, (alpha,), backward)
