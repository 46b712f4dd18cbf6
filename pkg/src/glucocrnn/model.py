"""The convolutional recurrent network and its ablation variants.

Full architecture for a 24 x 3 input window::

    conv1 k=4 -> 8   + relu + maxpool 2     24 -> 12 steps
    conv2 k=4 -> 16  + relu + maxpool 2     12 -> 6
    conv3 k=4 -> 32  + relu + maxpool 2      6 -> 3
    lstm 64 cells over the 3 steps, last hidden state
    dropout (training only)
    dense 256 relu -> dense 32 relu -> dense 1 linear

The output is the glucose change over the horizon, in mg/dL after
multiplying by ``delta_scale``; :func:`predict_bg` adds the current level
back.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .datapipe import NormStats, recover
from .modelfile import ModelFileError, read_container, spec_hash, write_container

VARIANTS = ("crnn", "crnn-no-cnn", "crnn-no-lstm", "nnpg")


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "crnn"
    window: int = 24
    channels: int = 3
    conv: tuple = ((4, 8), (4, 16), (4, 32))  # (kernel length, filters)
    pool: int = 2
    lstm_cells: int = 64
    dense: tuple = (256, 32, 1)
    hidden_act: str = "relu"
    dropout: float = 0.2
    ph_steps: int = 6

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in c) for c in self.conv))
        object.__setattr__(self, "dense", tuple(int(v) for v in self.dense))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.dense or self.dense[-1] != 1:
            raise ValueError("dense stack must end in a single output unit")
        if self.hidden_act not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_act!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.window < 1 or self.channels < 1 or self.ph_steps < 1:
            raise ValueError("window, channels and ph_steps must be positive")
        if self.uses_cnn:
            steps = self.window
            for k, _ in self.conv:
                if k > steps or (steps - self.pool) % self.pool or self.pool > steps:
                    raise ValueError(f"conv/pool stack does not fit a {self.window}-step window")
                steps = (steps - self.pool) // self.pool + 1
        if self.uses_lstm and self.lstm_cells < 1:
            raise ValueError("variant needs lstm_cells >= 1")

    @classmethod
    def nnpg(cls, ph_steps: int = 6, hidden: int = 32) -> "ModelSpec":
        """Feed-forward baseline: flattened window -> tanh layer -> linear."""
        return cls(variant="nnpg", conv=(), lstm_cells=0, dense=(hidden, 1),
                   hidden_act="tanh", dropout=0.0, ph_steps=ph_steps)

    @property
    def uses_cnn(self) -> bool:
        return self.variant in ("crnn", "crnn-no-lstm") and bool(self.conv)

    @property
    def uses_lstm(self) -> bool:
        return self.variant in ("crnn", "crnn-no-cnn")

    @property
    def ablation(self) -> str:
        return {"crnn": "full", "crnn-no-cnn": "no_cnn", "crnn-no-lstm": "no_lstm"}.get(self.variant, "none")

    def sequence_shape(self) -> tuple[int, int]:
        """(steps, channels) after the conv stack."""
        if not self.uses_cnn:
            return self.window, self.channels
        steps = self.window
        for _ in self.conv:
            steps = (steps - self.pool) // self.pool + 1
        return steps, self.conv[-1][1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [list(c) for c in self.conv]
        d["dense"] = list(self.dense)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def hash(self) -> str:
        return spec_hash(self.to_dict())


def layer_shapes(spec: ModelSpec) -> list[tuple[str, list[tuple[str, tuple]]]]:
    """Ordered ``(layer, [(param name, shape), ...])``."""
    layers = []
    cin = spec.channels
    if spec.uses_cnn:
        for j, (k, cout) in enumerate(spec.conv, start=1):
            layers.append((f"conv{j}", [(f"conv{j}.kernel", (k, cin, cout)),
                                        (f"conv{j}.bias", (cout,))]))
            cin = cout
    steps, feat = spec.sequence_shape()
    if spec.uses_lstm:
        H = spec.lstm_cells
        shapes = []
        for name in T.LstmParams.names():
            shape = {"W": (H, feat), "U": (H, H), "b": (H,)}[name[0]]
            shapes.append((f"lstm.{name}", shape))
        layers.append(("lstm", shapes))
        width = H
    else:
        width = steps * feat
    for j, units in enumerate(spec.dense, start=1):
        layers.append((f"dense{j}", [(f"dense{j}.W", (units, width)), (f"dense{j}.b", (units,))]))
        width = units
    return layers


def count_params(spec: ModelSpec) -> dict[str, int]:
    """Per-layer parameter counts plus ``"total"``."""
    counts = {layer: sum(int(np.prod(s)) for _, s in params) for layer, params in layer_shapes(spec)}
    counts["total"] = sum(counts.values())
    return counts


def _glorot_limit(name: str, shape: tuple) -> float:
    if name.endswith(".kernel"):
        k, cin, cout = shape
        return math.sqrt(6.0 / (k * cin + k * cout))
    return math.sqrt(6.0 / (shape[0] + shape[1]))


class Model:
    """Weights plus the preprocessing snapshot needed to use them."""

    def __init__(self, spec: ModelSpec, weights: dict[str, np.ndarray],
                 norm: NormStats | None = None, delta_scale: float = 1.0):
        self.spec = spec
        expected = [(n, s) for _, ps in layer_shapes(spec) for n, s in ps]
        if [n for n, _ in expected] != list(weights):
            raise ValueError("weights do not match the spec's layer layout")
        self.vars = {}
        for name, shape in expected:
            arr = np.asarray(weights[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"{name}: shape {arr.shape} != {tuple(shape)}")
            self.vars[name] = T.Var(arr.copy(), name)
        self.norm = norm
        self.delta_scale = float(delta_scale)

    def parameters(self) -> list[T.Var]:
        return list(self.vars.values())

    def weights(self) -> dict[str, np.ndarray]:
        return {n: v.value.copy() for n, v in self.vars.items()}

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for n, v in self.vars.items():
            v.value = np.array(weights[n], dtype=np.float64)

    def count_params(self) -> int:
        return sum(v.value.size for v in self.vars.values())

    def lstm_params(self) -> T.LstmParams:
        return T.LstmParams(*(self.vars[f"lstm.{n}"] for n in T.LstmParams.names()))

    def forward_raw(self, x, training: bool = False, rng=None, tape: T.Tape | None = None):
        """Network output in units of ``delta_scale``: shape ``(batch,)`` or scalar."""
        spec = self.spec
        xv = T.as_array(x)
        single = xv.ndim == 2
        if single:
            xv = xv[None]
        if xv.ndim != 3 or xv.shape[1:] != (spec.window, spec.channels):
            raise ValueError(f"expected windows of shape ({spec.window}, {spec.channels}), got {xv.shape}")
        h = xv
        if spec.uses_cnn:
            for j in range(1, len(spec.conv) + 1):
                h = T.conv1d(h, self.vars[f"conv{j}.kernel"], self.vars[f"conv{j}.bias"], tape=tape)
                h = T.relu(h, tape=tape)
                h, _ = T.maxpool1d(h, spec.pool, spec.pool, tape=tape)
        batch = xv.shape[0]
        steps, feat = spec.sequence_shape()
        if spec.uses_lstm:
            params = self.lstm_params()
            hs = np.zeros((batch, spec.lstm_cells))
            cs = np.zeros((batch, spec.lstm_cells))
            for t in range(steps):
                x_t = T.take(h, (slice(None), t), tape=tape)
                hs, cs = T.lstm_step(x_t, hs, cs, params, tape=tape)
            h = hs
        else:
            h = T.reshape(h, (batch, steps * feat), tape=tape)
        h = T.dropout(h, spec.dropout, rng, training, tape=tape)
        n = len(spec.dense)
        for j in range(1, n + 1):
            act = "linear" if j == n else spec.hidden_act
            h = T.dense(h, self.vars[f"dense{j}.W"], self.vars[f"dense{j}.b"], act, tape=tape)
        out = T.reshape(h, (batch,), tape=tape)
        if single:
            out = T.reshape(out, (), tape=tape)
        return out

    def forward(self, x) -> np.ndarray | float:
        """Predicted glucose change in mg/dL (inference mode)."""
        out = np.asarray(self.forward_raw(x)) * self.delta_scale
        return float(out) if out.ndim == 0 else out


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights = {}
    for _, params in layer_shapes(spec):
        for name, shape in params:
            if name.rsplit(".", 1)[-1].startswith("b"):
                weights[name] = np.zeros(shape)
            else:
                lim = _glorot_limit(name, shape)
                weights[name] = rng.uniform(-lim, lim, shape)
    return Model(spec, weights)


def forward(model: Model, window):
    return model.forward(window)


def predict_bg(model: Model, window, base_bg):
    """Absolute glucose forecast: current level plus the predicted change."""
    return recover(model.forward(window), base_bg)


def save(model: Model, path) -> None:
    meta = {"delta_scale": model.delta_scale,
            "norm": None if model.norm is None else model.norm.to_dict()}
    write_container(path, "network", model.spec.to_dict(), model.weights(), meta)


def load(path, spec: ModelSpec | None = None) -> Model:
    """Load a network file; with ``spec`` given, refuse any other architecture."""
    header, arrays = read_container(path, kind="network")
    file_spec = ModelSpec.from_dict(header["spec"])
    if spec is not None and spec.hash() != header["spec_hash"]:
        raise ModelFileError(f"{path}: model spec {header['spec_hash']} != requested {spec.hash()}")
    meta = header.get("meta", {})
    norm = NormStats.from_dict(meta["norm"]) if meta.get("norm") else None
    return Model(file_spec, arrays, norm=norm, delta_scale=meta.get("delta_scale", 1.0))
