"""MAP objective under the group-aware prior.

The prior is induced by a Bernoulli "robustness achieved" observation whose
log-probability is ``-lam * E[c]`` with cost ``c`` the cross-entropy at
sharpness-perturbed parameters ``theta + rho * eps``. ``eps`` is the
normalized context-loss gradient treated as a constant, so its own
dependence on ``theta`` never enters any gradient.

Minimized objective for a data batch ``B`` and context batch ``C``::

    mean_B xent(theta) + tau/2 * |theta - mu|^2 + lam * mean_C xent(theta + rho * eps)

The data-fit term is a minibatch mean rather than a full-data sum; ``lam``
and ``tau`` are therefore on the scale of a per-example loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import NonFiniteError, value_and_grad
from .model import MlpSpec, ParamVector, apply_perturbation, forward, xent_fn

EPS_FLOOR = 1e-12
DATA_FIT_SOURCES = ("context", "train")
PRIOR_MEAN_SOURCES = ("erm_checkpoint", "zeros")


class NonFiniteLossError(FloatingPointError):
    """A component of the objective (``data_fit``, ``l2`` or ``robustness``) is not finite."""

    def __init__(self, component: str, detail: str = ""):
        self.component = component
        super().__init__(f"non-finite {component} term" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class GapConfig:
    lam: float = 1.0
    rho: float = 0.15
    tau: float = 0.0
    gamma: float = 4.0
    S: int = 128
    prior_mean_source: str = "erm_checkpoint"
    data_fit_source: str = "context"
    context_mode: str = "upsample"

    def __post_init__(self):
        for name in ("lam", "rho", "tau", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.lam < 0 or self.rho < 0 or self.tau < 0:
            raise ValueError("lam, rho and tau must be non-negative")
        if self.S < 1:
            raise ValueError("context batch size S must be positive")
        if self.prior_mean_source not in PRIOR_MEAN_SOURCES:
            raise ValueError(f"prior_mean_source must be one of {PRIOR_MEAN_SOURCES}")
        if self.data_fit_source not in DATA_FIT_SOURCES:
            raise ValueError(f"data_fit_source must be one of {DATA_FIT_SOURCES}")

    def to_dict(self) -> dict:
        return asdict(self)


def _xent_value_and_grad(theta: np.ndarray, spec: MlpSpec, batch, component: str):
    try:
        return value_and_grad(xent_fn(spec), theta, batch)
    except NonFiniteError as exc:
        raise NonFiniteLossError(component, str(exc)) from exc


def epsilon(params: ParamVector, spec: MlpSpec, batch) -> np.ndarray:
    """Unit-norm ascent direction of the mean batch loss on trainable coordinates.

    Returns zeros when the (masked) gradient norm is below ``1e-12``.
    """
    _, grad = _xent_value_and_grad(params.theta, spec, batch, "robustness")
    grad = np.where(params.trainable_mask, grad, 0.0)
    norm = np.linalg.norm(grad)
    if norm < EPS_FLOOR:
        return np.zeros_like(grad)
    return grad / norm


def robustness_term(params: ParamVector, spec: MlpSpec, context_batch, cfg: GapConfig,
                    eps: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """``lam * mean xent`` at ``theta + rho * eps`` and its stop-gradient gradient.

    The gradient is the plain loss gradient evaluated at the perturbed point;
    nothing flows through ``eps``. Pass ``eps`` to reuse a precomputed
    perturbation.
    """
    if cfg.lam == 0:
        return 0.0, np.zeros(params.size)
    if cfg.rho > 0:
        if eps is None:
            eps = epsilon(params, spec, context_batch)
        theta_adv = apply_perturbation(params, eps, cfg.rho)
    else:
        theta_adv = params.theta
    value, grad = _xent_value_and_grad(theta_adv, spec, context_batch, "robustness")
    return cfg.lam * value, cfg.lam * grad


def perturbed_costs(params: ParamVector, spec: MlpSpec, context_batch, cfg: GapConfig) -> np.ndarray:
    """Per-example cost ``c`` (cross-entropy at the perturbed parameters)."""
    x, y = context_batch
    eps = epsilon(params, spec, context_batch) if cfg.rho > 0 else np.zeros(params.size)
    theta_adv = apply_perturbation(params, eps, cfg.rho)
    z = forward(theta_adv, spec, np.asarray(x, dtype=np.float64))
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(z.shape[0]), np.asarray(y)]


def log_aux_likelihood(params: ParamVector, spec: MlpSpec, context_batch, cfg: GapConfig) -> float:
    """Monte Carlo log-probability of the "robust" observation, always <= 0."""
    if cfg.lam == 0:
        return 0.0
    return -cfg.lam * float(np.mean(perturbed_costs(params, spec, context_batch, cfg)))


def data_fit_term(params: ParamVector, spec: MlpSpec, train_batch) -> tuple[float, np.ndarray]:
    if train_batch is None or len(train_batch[1]) == 0:
        return 0.0, np.zeros(params.size)
    return _xent_value_and_grad(params.theta, spec, train_batch, "data_fit")


def l2_term(params: ParamVector, tau: float) -> tuple[float, np.ndarray]:
    if tau == 0:
        return 0.0, np.zeros(params.size)
    diff = params.theta - params.prior_mean
    with np.errstate(over="ignore", invalid="ignore"):
        value = 0.5 * tau * float(diff @ diff)
    if not np.isfinite(value):
        raise NonFiniteLossError("l2")
    return value, tau * diff


def gap_loss_parts(params: ParamVector, spec: MlpSpec, train_batch, context_batch, cfg: GapConfig) -> dict:
    fit, g_fit = data_fit_term(params, spec, train_batch)
    l2, g_l2 = l2_term(params, cfg.tau)
    rob, g_rob = robustness_term(params, spec, context_batch, cfg)
    grad = g_fit
    if cfg.tau != 0:
        grad = grad + g_l2
    if cfg.lam != 0:
        grad = grad + g_rob
    grad = np.where(params.trainable_mask, grad, 0.0)
    return {"data_fit": fit, "l2": l2, "robustness": rob, "value": fit + l2 + rob, "grad": grad}


def gap_loss(params: ParamVector, spec: MlpSpec, train_batch, context_batch, cfg: GapConfig) -> tuple[float, np.ndarray]:
    """Full objective value and its gradient (zero on frozen coordinates)."""
    parts = gap_loss_parts(params, spec, train_batch, context_batch, cfg)
    return parts["value"], parts["grad"]
