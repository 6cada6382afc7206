"""Dense networks in plain numpy.

Everything is float64. A network owns a flat list of parameter arrays laid out
as ``[W0, b0, W1, b1, ...]`` with ``Wk`` of shape ``(out, in)``; gradient
buffers and optimizer moments use the same layout.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from . import archive
from .errors import CheckpointError, ContractViolation, TrainingAborted


class Activation(str, Enum):
    MISH = "mish"
    IDENTITY = "identity"


# tanh(softplus(x)) == w / (w + 2) with w = e^x (e^x + 2); one exp per element.
# Beyond x = 20 the ratio is 1.0 in float64, so clipping avoids overflow only.
_MISH_CLIP = 20.0


def _tanh_softplus(x):
    e = np.exp(np.minimum(x, _MISH_CLIP))
    w = e * (e + 2.0)
    return w / (w + 2.0), e


def mish(x):
    """x * tanh(softplus(x)); finite for all finite x and exactly 0 at 0."""
    x = np.asarray(x, dtype=np.float64)
    return x * _tanh_softplus(x)[0]


def mish_grad(x):
    x = np.asarray(x, dtype=np.float64)
    t, e = _tanh_softplus(x)
    sig = e / (1.0 + e)
    return t + x * (1.0 - t * t) * sig


def huber(residual, delta: float = 1.0):
    if delta <= 0:
        raise ContractViolation("huber delta must be positive")
    a = np.abs(np.asarray(residual, dtype=np.float64))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_grad(residual, delta: float = 1.0):
    """Derivative of huber with respect to the residual."""
    return np.clip(np.asarray(residual, dtype=np.float64), -delta, delta)


@dataclass(frozen=True)
class DenseNetSpec:
    input_width: int
    hidden_widths: tuple
    output_width: int
    activation: Activation = Activation.MISH

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "activation", Activation(self.activation))
        widths = (self.input_width, *self.hidden_widths, self.output_width)
        if any(int(w) <= 0 for w in widths):
            raise ContractViolation(f"layer widths must be positive, got {widths}")

    @property
    def widths(self):
        return (self.input_width, *self.hidden_widths, self.output_width)

    def param_shapes(self):
        shapes = []
        w = self.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            shapes.append((fan_out, fan_in))
            shapes.append((fan_out,))
        return shapes

    def to_dict(self):
        return {
            "input_width": self.input_width,
            "hidden_widths": list(self.hidden_widths),
            "output_width": self.output_width,
            "activation": self.activation.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_width"], tuple(d["hidden_widths"]), d["output_width"],
                   Activation(d["activation"]))


class DenseNet:
    """Fully connected network; hidden layers use the spec activation, the
    output layer is linear."""

    def __init__(self, spec: DenseNetSpec, params: Optional[List[np.ndarray]] = None):
        self.spec = spec
        if params is None:
            params = [np.zeros(s) for s in spec.param_shapes()]
        shapes = spec.param_shapes()
        if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
            raise ContractViolation("parameter shapes do not match the network spec")
        self.params = [np.array(p, dtype=np.float64) for p in params]

    @classmethod
    def initialize(cls, spec: DenseNetSpec, rng: np.random.Generator) -> "DenseNet":
        params = []
        for shape in spec.param_shapes():
            if len(shape) == 2:
                fan_out, fan_in = shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                params.append(rng.uniform(-limit, limit, size=shape))
            else:
                params.append(np.zeros(shape))
        return cls(spec, params)

    @property
    def n_layers(self):
        return len(self.params) // 2

    def _act(self, z):
        return mish(z) if self.spec.activation is Activation.MISH else z

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input_width or x.ndim not in (1, 2):
            raise ContractViolation(
                f"expected input width {self.spec.input_width}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        """Apply the network to one vector or a batch of row vectors."""
        x = self._check_input(x)
        h = x
        last = self.n_layers - 1
        for k in range(self.n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ W.T + b
            if k < last:
                h = self._act(h)
        return h

    __call__ = forward

    def backward(self, x, output_grad):
        """Reverse-mode derivatives of ``sum(forward(x) * output_grad)``.

        Returns ``(param_grads, input_grad)``; batched inputs sum parameter
        gradients over rows.
        """
        x = self._check_input(x)
        g = np.asarray(output_grad, dtype=np.float64)
        expected = x.shape[:-1] + (self.spec.output_width,)
        if g.shape != expected:
            raise ContractViolation(f"output_grad shape {g.shape} != {expected}")
        single = x.ndim == 1
        if single:
            x, g = x[None, :], g[None, :]
        mish_on = self.spec.activation is Activation.MISH
        pre, post = [], [x]
        h = x
        last = self.n_layers - 1
        for k in range(self.n_layers):
            z = h @ self.params[2 * k].T + self.params[2 * k + 1]
            pre.append(z)
            h = (mish(z) if mish_on else z) if k < last else z
            post.append(h)
        grads = [None] * len(self.params)
        for k in range(last, -1, -1):
            if k < last and mish_on:
                g = g * mish_grad(pre[k])
            grads[2 * k] = g.T @ post[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k]
        return grads, (g[0] if single else g)

    def copy(self) -> "DenseNet":
        return DenseNet(self.spec, [p.copy() for p in self.params])

    def load_params(self, other: "DenseNet"):
        for dst, src in zip(self.params, other.params):
            np.copyto(dst, src)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def equal_to(self, other: "DenseNet") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(a, b) for a, b in zip(self.params, other.params))


def copy_to_target(net: DenseNet) -> DenseNet:
    return net.copy()


def zero_grads(net: DenseNet) -> List[np.ndarray]:
    return [np.zeros_like(p) for p in net.params]


@dataclass
class OptimizerState:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adaptive: bool = True
    steps: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.step_size <= 0:
            raise ContractViolation("step_size must be positive")


class Optimizer:
    """Adam by default; ``adaptive=False`` gives plain gradient descent."""

    def __init__(self, net: DenseNet, step_size=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, adaptive=True):
        self.net = net
        self.state = OptimizerState(step_size, beta1, beta2, eps, adaptive)
        if adaptive:
            self.state.m = [np.zeros_like(p) for p in net.params]
            self.state.v = [np.zeros_like(p) for p in net.params]

    @property
    def steps(self):
        return self.state.steps

    def step(self, grads: Sequence[np.ndarray]):
        st = self.state
        if len(grads) != len(self.net.params):
            raise ContractViolation("gradient buffer does not match parameters")
        for g, p in zip(grads, self.net.params):
            if g.shape != p.shape:
                raise ContractViolation("gradient buffer does not match parameters")
            if not np.all(np.isfinite(g)):
                raise TrainingAborted("non-finite gradient in optimizer step")
        st.steps += 1
        if not st.adaptive:
            for p, g in zip(self.net.params, grads):
                p -= st.step_size * g
            return
        t = st.steps
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for p, g, m, v in zip(self.net.params, grads, st.m, st.v):
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p -= st.step_size * (m / c1) / (np.sqrt(v / c2) + st.eps)

    def snapshot(self) -> OptimizerState:
        return copy.deepcopy(self.state)


def net_to_arrays(net: DenseNet, prefix: str = ""):
    meta = net.spec.to_dict()
    arrays = {}
    for k in range(net.n_layers):
        arrays[f"{prefix}layer{k}.weight"] = net.params[2 * k]
        arrays[f"{prefix}layer{k}.bias"] = net.params[2 * k + 1]
    return meta, arrays


def net_from_arrays(meta, arrays, prefix: str = "") -> DenseNet:
    spec = DenseNetSpec.from_dict(meta)
    params = []
    for k in range(len(spec.widths) - 1):
        params.append(arrays[f"{prefix}layer{k}.weight"])
        params.append(arrays[f"{prefix}layer{k}.bias"])
    return DenseNet(spec, params)


def save_net(path, net: DenseNet):
    meta, arrays = net_to_arrays(net)
    archive.write(path, {"kind": "densenet", "spec": meta}, arrays)


def load_net(path) -> DenseNet:
    meta, arrays = archive.read(path)
    if meta.get("kind") != "densenet":
        raise CheckpointError(f"{path} does not hold a single network")
    return net_from_arrays(meta["spec"], arrays)
