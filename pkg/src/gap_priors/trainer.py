"""ERM pretraining, GAP finetuning and multi-seed execution.

Randomness is split into independent streams keyed by ``(seed, stream)``:
minibatch order, context sampling and (for ERM from scratch) the
initialization. Two runs that share a seed and a data batch stream see the
same minibatches regardless of what else they sample.
"""

from __future__ import annotations

import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .context import ContextSampler, weights_for
from .datagen import GroupedDataset
from .evalreport import evaluate
from .gap import GapConfig, gap_loss_parts
from .model import MlpSpec, ParamVector, freeze_all_but_last, init_mlp, xent_fn
from .diffcore import NonFiniteError, value_and_grad

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "linear", "constant")
MODES = ("all_layers", "last_layer")

STREAM_BATCHES = 1
STREAM_CONTEXT = 2


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str):
        self.epoch = epoch
        super().__init__(f"training diverged in epoch {epoch}: {detail}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    initial_lr: float = 0.05
    schedule: str = "cosine"
    alpha_min: float = 0.0
    momentum: float = 0.9
    batch_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0
    mode: str = "all_layers"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    stage: str
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(schedule: str, initial_lr: float, step: int, total_steps: int, alpha_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps if total_steps > 0 else 0.0
    if schedule == "cosine":
        return initial_lr * (alpha_min + (1.0 - alpha_min) * 0.5 * (1.0 + math.cos(math.pi * frac)))
    if schedule == "linear":
        return initial_lr * (1.0 - frac)
    if schedule == "constant":
        return initial_lr
    raise ValueError(f"unknown schedule {schedule!r}")


class MomentumSGD:
    """Heavy-ball SGD: ``v <- m v + g``, ``theta <- theta - lr v`` on trainable coordinates."""

    def __init__(self, size: int, momentum: float, mask: np.ndarray):
        self.momentum = momentum
        self.mask = np.asarray(mask, dtype=bool)
        self.velocity = np.zeros(size)

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        grad = np.where(self.mask, grad, 0.0)
        self.velocity = self.momentum * self.velocity + grad
        out = theta - lr * self.velocity
        # frozen coordinates copied back verbatim so they stay bit-identical
        return np.where(self.mask, out, theta)


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _epoch_metrics(params: ParamVector, spec: MlpSpec, monitor: GroupedDataset | None) -> dict:
    if monitor is None or len(monitor) == 0:
        return {}
    rep = evaluate(params, spec, monitor)
    return {
        "monitor_split": monitor.split_tag,
        "per_group_acc": {str(g): v for g, v in rep.per_group_acc.items()},
        "worst_group_acc": rep.worst_group_acc,
        "overall_acc": rep.overall_acc,
    }


def _sgd_loop(params: ParamVector, spec: MlpSpec, data: GroupedDataset, cfg: TrainConfig,
              step_fn: Callable[[ParamVector, tuple], dict], stage: str,
              monitor: GroupedDataset | None, trace: list | None = None) -> tuple[ParamVector, RunRecord]:
    if len(data) == 0:
        raise ValueError("training data is empty")
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = MomentumSGD(params.size, cfg.momentum, params.trainable_mask)
    batch_rng = rng_stream(cfg.seed, STREAM_BATCHES)
    record = RunRecord(stage=stage, seed=cfg.seed, config={"train": cfg.to_dict()})
    step = 0
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in minibatches(len(data), cfg.batch_size, batch_rng):
            batch = (data.x[idx], data.y[idx])
            try:
                parts = step_fn(params, batch)
            except (NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(epoch, str(exc)) from exc
            lr = lr_at(cfg.schedule, cfg.initial_lr, step, total, cfg.alpha_min)
            params.theta = opt.step(params.theta, parts.pop("grad"), lr)
            if not np.all(np.isfinite(params.theta)):
                raise DivergenceError(epoch, "parameters became non-finite")
            if trace is not None:
                trace.append(params.theta.copy())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            step += 1
        entry = {"epoch": epoch, "lr_end": lr}
        entry.update({k: v / n_batches for k, v in sums.items()})
        entry.update(_epoch_metrics(params, spec, monitor))
        record.epochs.append(entry)
    return params, record


def train_erm(spec: MlpSpec, train: GroupedDataset, cfg: TrainConfig, init: ParamVector | None = None,
              monitor: GroupedDataset | None = None, trace: list | None = None) -> tuple[ParamVector, RunRecord]:
    """Minimize mean cross-entropy (+ ``weight_decay/2 * |theta|^2``) with momentum SGD.

    Group labels of ``train`` are never read. With ``init`` the run
    continues from those parameters (respecting their trainable mask)
    instead of a fresh initialization. ``trace``, if given, collects a copy
    of the parameters after every optimizer step.
    """
    params = init_mlp(spec, cfg.seed) if init is None else init.copy()
    if cfg.mode == "last_layer":
        params = freeze_all_but_last(params)
    fn = xent_fn(spec)
    wd = cfg.weight_decay

    def step_fn(p, batch):
        value, grad = value_and_grad(fn, p.theta, batch)
        parts = {"loss": value}
        if wd:
            parts["weight_decay"] = 0.5 * wd * float(p.theta @ p.theta)
            grad = grad + wd * p.theta
        parts["grad"] = grad
        return parts

    return _sgd_loop(params, spec, train, cfg, step_fn, "erm", monitor, trace)


def finetune_gap(params_erm: ParamVector, spec: MlpSpec, val_context: GroupedDataset, gap_cfg: GapConfig,
                 cfg: TrainConfig, train: GroupedDataset | None = None,
                 monitor: GroupedDataset | None = None, trace: list | None = None) -> tuple[ParamVector, RunRecord]:
    """MAP finetuning under the group-aware prior.

    Data-fit minibatches iterate over ``val_context`` (or over ``train`` when
    ``gap_cfg.data_fit_source == "train"``); every step also draws a fresh
    context batch of size ``S`` from the upweighted context distribution.
    """
    params = params_erm.copy()
    if cfg.mode == "last_layer":
        params = freeze_all_but_last(params)
    if gap_cfg.prior_mean_source == "erm_checkpoint":
        params.prior_mean = params_erm.theta.copy()
    else:
        params.prior_mean = np.zeros(params.size)
    if gap_cfg.data_fit_source == "train":
        if train is None:
            raise ValueError("data_fit_source='train' needs the training set")
        fit_data = train
    else:
        fit_data = val_context
    weights = weights_for(val_context, gap_cfg.gamma, gap_cfg.context_mode)
    sampler = ContextSampler(val_context, weights)
    ctx_rng = rng_stream(cfg.seed, STREAM_CONTEXT)
    need_context = gap_cfg.lam != 0

    def step_fn(p, batch):
        ctx = sampler.sample(gap_cfg.S, ctx_rng) if need_context else None
        parts = gap_loss_parts(p, spec, batch, ctx, gap_cfg)
        parts.pop("value")
        return parts

    params, record = _sgd_loop(params, spec, fit_data, cfg, step_fn, "gap", monitor, trace)
    record.config["gap"] = gap_cfg.to_dict()
    record.config["context"] = weights.to_dict()
    return params, record


# -- multi-seed execution ------------------------------------------------------

@dataclass
class SeedOutcome:
    seed: int
    result: Any = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _call(pipeline, seed):
    try:
        return SeedOutcome(seed, pipeline(seed))
    except Exception as exc:  # noqa: BLE001 - one failing seed must not stop the others
        log.warning("seed %d failed: %s", seed, exc)
        return SeedOutcome(seed, error="".join(traceback.format_exception_only(type(exc), exc)).strip())


def run_seeds(n: int, pipeline: Callable[[int], Any], base_seed: int = 0, jobs: int = 1,
              backend: str = "process") -> list[SeedOutcome]:
    """Run ``pipeline(seed)`` for seeds ``base_seed .. base_seed + n - 1``.

    Results come back in seed order whatever ``jobs`` is. The process
    backend needs a picklable ``pipeline`` (module-level function or
    ``functools.partial`` of one).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = list(range(base_seed, base_seed + n))
    if jobs <= 1:
        return [_call(pipeline, s) for s in seeds]
    pool_cls = ProcessPoolExecutor if backend == "process" else ThreadPoolExecutor
    with pool_cls(max_workers=jobs) as pool:
        futures = [pool.submit(_call, pipeline, s) for s in seeds]
        return [f.result() for f in futures]
