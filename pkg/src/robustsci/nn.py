"""Dense networks with optional residual skips and frozen layers, plus Adam.

A network is a stack of dense layers.  Each layer computes
``a = act(h @ W + b)`` and then either replaces ``h`` with ``a`` or, for a
residual layer, adds it: ``h = h + a``.  Parameters live in plain numpy arrays;
a forward pass on a tape binds them as leaves so gradients can be read back.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, UsageError
from .numerics import RngStream

ACTIVATIONS = ("tanh", "softplus", "identity")
CHECKPOINT_FORMAT = "robustsci-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "tanh"
    residual: bool = False
    trainable: bool = True
    bias: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        problems = []
        if self.input_dim < 1:
            problems.append("input_dim must be positive")
        if not self.layers:
            problems.append("network needs at least one layer")
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.width < 1:
                problems.append(f"layer {i}: width must be positive")
            if layer.activation not in ACTIVATIONS:
                problems.append(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.residual and layer.width != prev:
                problems.append(f"layer {i}: residual layer needs equal in/out width ({prev} != {layer.width})")
            prev = layer.width
        if self.layers and not any(layer.trainable for layer in self.layers):
            problems.append("at least one layer must be trainable")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(int(data["input_dim"]), tuple(LayerSpec(**layer) for layer in data["layers"]))


def mlp_spec(input_dim: int, hidden: Sequence[int], output_dim: int,
             activation: str = "tanh", output_activation: str = "identity") -> NetworkSpec:
    layers = [LayerSpec(w, activation) for w in hidden]
    layers.append(LayerSpec(output_dim, output_activation))
    return NetworkSpec(input_dim, tuple(layers))


def resnet_spec(input_dim: int, width: int, blocks: int, output_dim: int,
                activation: str = "tanh", output_activation: str = "identity") -> NetworkSpec:
    """Lift to ``width``, then ``blocks`` residual layers, then a dense output."""
    layers = [LayerSpec(width, activation)]
    layers += [LayerSpec(width, activation, residual=True) for _ in range(blocks)]
    layers.append(LayerSpec(output_dim, output_activation))
    return NetworkSpec(input_dim, tuple(layers))


def _activation(name: str):
    return {"tanh": ad.tanh, "softplus": ad.softplus, "identity": ad.identity}[name]


@dataclass
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    # -- parameter plumbing -------------------------------------------------

    def trainable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.spec.layers) if layer.trainable]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays, ordered (W0, b0, W1, b1, ...) over trainable layers."""
        out = []
        for i in self.trainable_indices():
            out.append(self.weights[i])
            if self.spec.layers[i].bias:
                out.append(self.biases[i])
        return out

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        it = iter(params)
        for i in self.trainable_indices():
            self.weights[i] = np.array(next(it), dtype=self.weights[i].dtype)
            if self.spec.layers[i].bias:
                self.biases[i] = np.array(next(it), dtype=self.biases[i].dtype)

    def bind(self, tape: ad.Tape) -> list:
        """Per-layer ``(W, b)`` with trainable arrays placed on ``tape`` as leaves."""
        bound = []
        for i, layer in enumerate(self.spec.layers):
            if layer.trainable:
                w = tape.leaf(self.weights[i], name=f"W{i}")
                b = tape.leaf(self.biases[i], name=f"b{i}") if layer.bias else self.biases[i]
            else:
                w, b = self.weights[i], self.biases[i]
            bound.append((w, b))
        return bound

    def _layer_params(self, params):
        if params is None:
            return list(zip(self.weights, self.biases))
        return params

    @staticmethod
    def param_leaves(bound) -> list:
        leaves = []
        for w, b in bound:
            for p in (w, b):
                if isinstance(p, ad.Node):
                    leaves.append(p)
        return leaves

    def copy(self) -> "Network":
        return Network(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Network":
        """Copy with every parameter array cast to ``dtype``."""
        return Network(self.spec, [w.astype(dtype) for w in self.weights],
                       [b.astype(dtype) for b in self.biases])

    @property
    def dtype(self):
        return self.weights[0].dtype

    # -- evaluation -----------------------------------------------------------

    def forward(self, x, params=None):
        """Network output for a batch ``x`` of shape (n, input_dim)."""
        if ad.value_of(x).ndim != 2 or ad.value_of(x).shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (n, {self.spec.input_dim}), got {ad.value_of(x).shape}")
        h = x
        for layer, (w, b) in zip(self.spec.layers, self._layer_params(params)):
            a = _activation(layer.activation)(ad.add(ad.matmul(h, w), b))
            h = ad.add(h, a) if layer.residual else a
        return h

    __call__ = forward

    def forward_jet(self, x, params=None):
        """Fused equivalent of :meth:`forward_with_derivatives` (first-order tape only).

        Each layer is a single tape record acting on the stacked jet
        ``[h, dh/dx_1 .. dh/dx_d, d2h/dx_1^2 .. d2h/dx_d^2]``.
        """
        xv = ad.value_of(x)
        if xv.ndim != 2 or xv.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (n, {self.spec.input_dim}), got {xv.shape}")
        n, d = xv.shape
        seeds = np.zeros((2 * d, n, d), dtype=xv.dtype)
        for k in range(d):
            seeds[k, :, k] = 1.0
        jet = ad.concatenate([ad.reshape(x, (1, n, d)), seeds], axis=0)
        for layer, (w, b) in zip(self.spec.layers, self._layer_params(params)):
            jet = jet_dense(jet, w, b, layer.activation, layer.residual)
        u = ad.getitem(jet, 0)
        du = [ad.getitem(jet, 1 + k) for k in range(d)]
        d2u = [ad.getitem(jet, 1 + d + k) for k in range(d)]
        return u, du, d2u

    def forward_with_derivatives(self, x, params=None):
        """Output plus its first and pure second derivatives in each input.

        The derivatives are pushed forward layer by layer with ordinary tape
        operations, so the results stay differentiable in the parameters.
        Returns ``(u, du, d2u)`` where ``du[k]`` and ``d2u[k]`` have the shape of
        ``u`` and hold the derivatives in input coordinate ``k``.
        """
        xv = ad.value_of(x)
        if xv.ndim != 2 or xv.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (n, {self.spec.input_dim}), got {xv.shape}")
        n, d = xv.shape
        h = x
        dh = []
        d2h = []
        for k in range(d):
            e = np.zeros((n, d), dtype=xv.dtype)
            e[:, k] = 1.0
            dh.append(e)
            d2h.append(np.zeros((n, d), dtype=xv.dtype))
        for layer, (w, b) in zip(self.spec.layers, self._layer_params(params)):
            z = ad.add(ad.matmul(h, w), b)
            dz = [ad.matmul(g, w) for g in dh]
            d2z = [ad.matmul(g, w) for g in d2h]
            if layer.activation == "identity":
                a, da, d2a = z, dz, d2z
            else:
                if layer.activation == "tanh":
                    a = ad.tanh(z)
                    s1 = ad.sub(1.0, ad.mul(a, a))
                    s2 = ad.mul(-2.0, ad.mul(a, s1))
                else:
                    a = ad.softplus(z)
                    s1 = ad.sigmoid(z)
                    s2 = ad.mul(s1, ad.sub(1.0, s1))
                da = [ad.mul(s1, g) for g in dz]
                d2a = [ad.add(ad.mul(s2, ad.mul(g, g)), ad.mul(s1, gg)) for g, gg in zip(dz, d2z)]
            if layer.residual:
                h = ad.add(h, a)
                dh = [ad.add(p, q) for p, q in zip(dh, da)]
                d2h = [ad.add(p, q) for p, q in zip(d2h, d2a)]
            else:
                h, dh, d2h = a, da, d2a
        return h, dh, d2h


def _activation_derivatives(name: str, z: np.ndarray):
    """Activation value and its first three derivatives at ``z``."""
    if name == "tanh":
        a = np.tanh(z)
        s1 = 1.0 - a * a
        s2 = -2.0 * a * s1
        s3 = s1 * (4.0 * a * a - 2.0 * s1)
    elif name == "softplus":
        a = ad.softplus(z)
        s1 = ad.sigmoid(z)
        s2 = s1 * (1.0 - s1)
        s3 = s2 * (1.0 - 2.0 * s1)
    else:
        a, s1, s2, s3 = z, 1.0, 0.0, 0.0
    return a, s1, s2, s3


def jet_dense(jet, weight, bias, activation: str = "tanh", residual: bool = False):
    """One dense layer applied to a stacked second-order jet, as a single tape op.

    ``jet`` has shape (1 + 2d, n, width): the values, then d first derivatives,
    then d pure second derivatives with respect to the network inputs.
    """
    J = ad.value_of(jet)
    W = ad.value_of(weight)
    B = ad.value_of(bias)
    k, n, win = J.shape
    wout = W.shape[1]
    d = (k - 1) // 2
    # one 2-D GEMM over the whole jet is much faster than a batched matmul
    Z = (J.reshape(k * n, win) @ W).reshape(k, n, wout)
    Z[0] += B
    z, gz, qz = Z[0], Z[1:1 + d], Z[1 + d:]
    a, s1, s2, s3 = _activation_derivatives(activation, z)
    out = np.empty_like(Z)
    out[0] = a
    np.multiply(s1, gz, out=out[1:1 + d])
    np.multiply(gz, gz, out=out[1 + d:])
    out[1 + d:] *= s2
    out[1 + d:] += s1 * qz
    if residual:
        out += J

    def vjp(G, _out, J, W, B):
        Ga, Gg, Gq = G[0], G[1:1 + d], G[1 + d:]
        dZ = np.empty_like(Z)
        np.multiply(Gq, s1, out=dZ[1 + d:])
        dgz = dZ[1:1 + d]
        np.multiply(Gq, gz, out=dgz)
        ds2 = np.sum(dgz * gz, axis=0)
        dgz *= 2.0 * s2
        dgz += Gg * s1
        ds1 = np.sum(Gg * gz + Gq * qz, axis=0)
        dz = dZ[0]
        np.multiply(Ga, s1, out=dz)
        dz += ds1 * s2
        dz += ds2 * s3
        flat = dZ.reshape(k * n, wout)
        dW = J.reshape(k * n, win).T @ flat
        dB = dz.sum(axis=0)
        dJ = (flat @ W.T).reshape(k, n, win)
        if residual:
            dJ += G
        return dJ, dW, np.reshape(dB, np.shape(B))

    return ad.primitive(out, (jet, weight, bias), vjp)


def residual_block_forward(weight, bias, h, activation: str = "tanh"):
    """``h + act(h @ W + b)`` for a single residual layer."""
    if ad.value_of(weight).shape[0] != ad.value_of(weight).shape[1]:
        raise ValueError("residual block needs a square weight matrix")
    return ad.add(h, _activation(activation)(ad.add(ad.matmul(h, weight), bias)))


def network_new(spec: NetworkSpec, seed: int, stream: int = 0) -> Network:
    """Frozen layers draw U(-1, 1); trainable layers are Xavier-uniform with zero bias."""
    rng = RngStream(seed, stream).generator
    weights, biases = [], []
    fan_in = spec.input_dim
    for layer in spec.layers:
        fan_out = layer.width
        if layer.trainable:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, (fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-1.0, 1.0, (fan_in, fan_out))
            b = rng.uniform(-1.0, 1.0, fan_out) if layer.bias else np.zeros(fan_out)
        weights.append(w)
        biases.append(b)
        fan_in = fan_out
    return Network(spec, weights, biases)


def loss_and_grads(net: Network, loss_fn) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn(bound_params)`` on a fresh tape and return its parameter gradients."""
    tape = ad.Tape()
    bound = net.bind(tape)
    loss = loss_fn(bound)
    leaves = Network.param_leaves(bound)
    ad.backward(loss)
    return float(loss.value), [leaf.grad for leaf in leaves]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update; ``params`` are replaced, not mutated."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter {i}: shape {np.shape(p)} != gradient shape {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {i}; Adam step aborted", index=i)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != np.shape(p) for m, p in zip(state.m, params)):
        raise UsageError("Adam moment shapes do not match the parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path, metadata: dict | None = None) -> None:
    """Write parameters as JSON: one entry per (layer, name) with shape and row-major values."""
    entries = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        entries.append({"layer": i, "name": "weight", "shape": list(w.shape), "values": w.ravel().tolist()})
        entries.append({"layer": i, "name": "bias", "shape": list(b.shape), "values": b.ravel().tolist()})
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "metadata": metadata or {},
        "parameters": entries,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[Network, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = NetworkSpec.from_dict(doc["spec"])
    n = len(spec.layers)
    weights: list = [None] * n
    biases: list = [None] * n
    for entry in doc["parameters"]:
        arr = np.asarray(entry["values"], dtype=float).reshape(entry["shape"])
        (weights if entry["name"] == "weight" else biases)[entry["layer"]] = arr
    return Network(spec, weights, biases), doc.get("metadata", {})
