"""MLP classifier over a flat parameter vector.

Weights are stored layer by layer as ``W_k`` (shape ``(out, in)``) followed
by ``b_k``. A boolean mask marks which coordinates the optimizer may touch,
which is how last-layer retraining is expressed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore import ScalarFn, Tape

NONLINEARITIES = ("relu", "tanh")
CHECKPOINT_MAGIC = b"GAPCKPT1"


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    nonlinearity: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("output size (number of classes) must be at least 2")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layout(self) -> tuple["TensorSlot", ...]:
        slots = []
        offset = 0
        for k, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            slots.append(TensorSlot(f"W{k}", offset, (fan_out, fan_in)))
            offset += fan_out * fan_in
            slots.append(TensorSlot(f"b{k}", offset, (fan_out,)))
            offset += fan_out
        return tuple(slots)

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "nonlinearity": self.nonlinearity}


@dataclass(frozen=True)
class TensorSlot:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass
class ParamVector:
    """Flat parameters with their layout, trainable mask and prior mean."""

    theta: np.ndarray
    layout: tuple[TensorSlot, ...]
    trainable_mask: np.ndarray
    prior_mean: np.ndarray = field(default=None)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.trainable_mask = np.asarray(self.trainable_mask, dtype=bool)
        if self.prior_mean is None:
            self.prior_mean = self.theta.copy()
        self.prior_mean = np.asarray(self.prior_mean, dtype=np.float64)
        P = self.theta.size
        pos = 0
        for slot in self.layout:
            if slot.offset != pos:
                raise ValueError(f"layout slot {slot.name} starts at {slot.offset}, expected {pos}")
            pos = slot.stop
        if pos != P:
            raise ValueError(f"layout covers {pos} coordinates but theta has {P}")
        if self.trainable_mask.shape != (P,) or self.prior_mean.shape != (P,):
            raise ValueError("trainable_mask and prior_mean must have the same length as theta")

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def n_trainable(self) -> int:
        return int(self.trainable_mask.sum())

    def copy(self) -> "ParamVector":
        return ParamVector(self.theta.copy(), self.layout, self.trainable_mask.copy(), self.prior_mean.copy())

    def with_theta(self, theta) -> "ParamVector":
        return replace(self, theta=np.array(theta, dtype=np.float64))

    def tensor(self, name: str, theta=None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        for slot in self.layout:
            if slot.name == name:
                return theta[slot.offset:slot.stop].reshape(slot.shape)
        raise KeyError(name)


def init_mlp(spec: MlpSpec, seed: int) -> ParamVector:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    theta = np.zeros(spec.n_params)
    for slot in layout:
        if slot.name.startswith("W"):
            fan_in = slot.shape[1]
            theta[slot.offset:slot.stop] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=slot.size)
    return ParamVector(theta, layout, np.ones(spec.n_params, dtype=bool), theta.copy())


def _activate(h: np.ndarray, nonlinearity: str) -> np.ndarray:
    return np.maximum(h, 0.0) if nonlinearity == "relu" else np.tanh(h)


def forward(theta: np.ndarray, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Logits for a batch ``x`` of shape (n, input_dim); plain numpy, no tape."""
    h = x
    offset = 0
    for k, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        w = theta[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        h = h @ w.T + b
        if k < spec.n_layers - 1:
            h = _activate(h, spec.nonlinearity)
    return h


def predict_logits(params: ParamVector | np.ndarray, spec: MlpSpec, x) -> np.ndarray:
    """Logits for one example (1-d ``x``) or a batch (2-d ``x``)."""
    theta = params.theta if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    if theta.size != spec.n_params:
        raise ValueError(f"parameter vector has length {theta.size}, spec expects {spec.n_params}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected trailing dimension {spec.input_dim}")
    logits = forward(theta, spec, xb)
    return logits[0] if single else logits


def predict(params, spec: MlpSpec, x) -> np.ndarray:
    """Class predictions; ``argmax`` already breaks ties toward the lower index."""
    return np.argmax(predict_logits(params, spec, x), axis=-1)


def logits_on_tape(tape: Tape, theta: int, spec: MlpSpec, x: np.ndarray) -> int:
    h = tape.constant(x, label="inputs")
    for k, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        # offsets recomputed rather than read from layout to keep this pure in spec
        offset = sum(a * b + b for a, b in zip(spec.layer_sizes[:k], spec.layer_sizes[1:k + 1]))
        w = tape.slice(theta, offset, (fan_out, fan_in), label=f"W{k}")
        b = tape.slice(theta, offset + fan_in * fan_out, (fan_out,), label=f"b{k}")
        h = tape.affine(h, w, b, label=f"layer{k}")
        if k < spec.n_layers - 1:
            h = tape.relu(h, label=f"act{k}") if spec.nonlinearity == "relu" else tape.tanh(h, label=f"act{k}")
    return h


def xent_fn(spec: MlpSpec) -> ScalarFn:
    """Mean cross-entropy of the MLP on a batch ``(x, y)``."""

    def build(tape, theta, batch):
        x, y = batch
        return tape.softmax_xent(logits_on_tape(tape, theta, spec, x), y, label="xent")

    return ScalarFn(build, spec.n_params)


def freeze_all_but_last(params: ParamVector) -> ParamVector:
    """Mark only the final affine layer (weights and bias) as trainable."""
    if not params.layout:
        raise ValueError("parameter layout is empty")
    last_w, last_b = params.layout[-2], params.layout[-1]
    mask = np.zeros(params.size, dtype=bool)
    mask[last_w.offset:last_b.stop] = True
    out = params.copy()
    out.trainable_mask = mask
    return out


def apply_perturbation(params: ParamVector, direction, rho: float) -> np.ndarray:
    """``theta + rho * direction`` restricted to trainable coordinates."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != params.theta.shape:
        raise ValueError(f"direction has shape {direction.shape}, expected {params.theta.shape}")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        return params.theta.copy()
    return params.theta + rho * np.where(params.trainable_mask, direction, 0.0)


# -- checkpoints -------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
# then theta, prior_mean and trainable_mask (as 0.0/1.0) as consecutive
# little-endian float64 arrays of length P.

def save_checkpoint(path, params: ParamVector, spec: MlpSpec, metadata: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format": 1,
        "model": spec.to_dict(),
        "n_params": params.size,
        "layout": [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in params.layout],
        "arrays": ["theta", "prior_mean", "trainable_mask"],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.concatenate([params.theta, params.prior_mean, params.trainable_mask.astype(np.float64)])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(body.astype("<f8").tobytes())
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, spec: MlpSpec | None = None) -> tuple[ParamVector, MlpSpec, dict]:
    """Read a checkpoint; if ``spec`` is given its layout must match the file."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    file_spec = MlpSpec(tuple(header["model"]["layer_sizes"]), header["model"]["nonlinearity"])
    if spec is not None and spec != file_spec:
        raise CheckpointError(f"{path}: checkpoint model {file_spec} does not match expected {spec}")
    layout = tuple(TensorSlot(s["name"], s["offset"], tuple(s["shape"])) for s in header["layout"])
    if layout != file_spec.layout():
        raise CheckpointError(f"{path}: stored layout is inconsistent with model {file_spec}")
    P = header["n_params"]
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    if body.size != 3 * P:
        raise CheckpointError(f"{path}: expected {3 * P} values, found {body.size}")
    theta, mean, mask = body[:P].copy(), body[P:2 * P].copy(), body[2 * P:] != 0.0
    return ParamVector(theta, layout, mask, mean), file_spec, header["metadata"]
