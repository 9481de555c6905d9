"""Gated model zoo: tiny MLP, plain conv stack, and residual conv net.

Every prunable channel carries a continuous gate in [0, 1] that multiplies
the layer's output channel before it flows on; gate 0 is exactly
equivalent to removing the channel's producing and consuming weights.
First conv layers of the conv architectures are ungated; the MLP gates
both hidden layers.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import LeafId
from .tensor import SeededRng


@dataclass
class LayerSpec:
    kind: str  # dense | conv | relu | avgpool | flatten | residual_add
    in_dim: int = 0
    out_dim: int = 0
    ksize: int = 0
    stride: int = 1
    pad: int = 0
    gate: bool = False
    source: int = -1  # residual_add: index of the earlier layer to add


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


class GatedModel:
    """Layer list plus weight arrays and per-layer gate vectors."""

    def __init__(self, arch_name, layers, weights, gates, input_shape):
        self.arch_name = arch_name
        self.layers = layers                # list[LayerSpec]
        self.weights = weights              # {"w{i}": ndarray, "b{i}": ndarray}
        self.gates = gates                  # {layer_index: ndarray[out_dim]}
        self.input_shape = tuple(input_shape)

    def clone(self):
        return GatedModel(
            self.arch_name,
            copy.deepcopy(self.layers),
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.gates.items()},
            self.input_shape,
        )

    def weight_names(self):
        return sorted(self.weights, key=lambda n: (int(n[1:]), n[0]))

    def gated_layers(self):
        return sorted(self.gates)


def _mlp_tiny():
    layers = [
        LayerSpec("dense", in_dim=2, out_dim=64, gate=True),
        LayerSpec("relu"),
        LayerSpec("dense", in_dim=64, out_dim=32, gate=True),
        LayerSpec("relu"),
        LayerSpec("dense", in_dim=32, out_dim=2),
    ]
    return layers, (2,)


def _mlp_micro():
    # small enough for the brute-force derivative matrices (202 params)
    layers = [
        LayerSpec("dense", in_dim=2, out_dim=16, gate=True),
        LayerSpec("relu"),
        LayerSpec("dense", in_dim=16, out_dim=8, gate=True),
        LayerSpec("relu"),
        LayerSpec("dense", in_dim=8, out_dim=2),
    ]
    return layers, (2,)


def _vgg_tiny():
    layers = [
        LayerSpec("conv", in_dim=1, out_dim=6, ksize=3, pad=1),  # first conv: ungated
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=6, out_dim=10, ksize=3, pad=1, gate=True),
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=10, out_dim=8, ksize=3, pad=1, gate=True),
        LayerSpec("relu"),
        LayerSpec("avgpool"),
        LayerSpec("flatten"),
        LayerSpec("dense", in_dim=8, out_dim=2),
    ]
    return layers, (1, 8, 8)


def _res_tiny():
    layers = [
        LayerSpec("conv", in_dim=1, out_dim=8, ksize=3, pad=1),  # first conv: ungated
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=8, out_dim=8, ksize=3, pad=1, gate=True),  # shortcut source
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=8, out_dim=8, ksize=3, pad=1, gate=True),
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=8, out_dim=8, ksize=3, pad=1, gate=True),
        LayerSpec("residual_add", source=3),
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=8, out_dim=8, ksize=3, pad=1, gate=True),
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=8, out_dim=8, ksize=3, pad=1, gate=True),
        LayerSpec("residual_add", source=8),
        LayerSpec("relu"),
        LayerSpec("avgpool"),
        LayerSpec("flatten"),
        LayerSpec("dense", in_dim=8, out_dim=2),
    ]
    return layers, (1, 8, 8)


_ARCHS = {"mlp-tiny": _mlp_tiny, "mlp-micro": _mlp_micro,
          "vgg-tiny": _vgg_tiny, "res-tiny": _res_tiny}


def build_model(arch, seed):
    if arch not in _ARCHS:
        raise ValueError(f"unknown arch {arch!r} (have {sorted(_ARCHS)})")
    layers, input_shape = _ARCHS[arch]()
    rng = SeededRng(seed)
    weights, gates = {}, {}
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            std = np.sqrt(2.0 / spec.in_dim)
            weights[f"w{i}"] = rng.stream(f"init-w{i}").normal((spec.in_dim, spec.out_dim), 0.0, std)
            weights[f"b{i}"] = np.zeros(spec.out_dim)
        elif spec.kind == "conv":
            fan_in = spec.in_dim * spec.ksize * spec.ksize
            std = np.sqrt(2.0 / fan_in)
            weights[f"w{i}"] = rng.stream(f"init-w{i}").normal(
                (spec.out_dim, spec.in_dim, spec.ksize, spec.ksize), 0.0, std)
            weights[f"b{i}"] = np.zeros(spec.out_dim)
        if spec.gate:
            gates[i] = np.ones(spec.out_dim)
    return GatedModel(arch, layers, weights, gates, input_shape)


def _leaf_vars(model, weight_values=None, gate_values=None):
    weight_values = weight_values if weight_values is not None else model.weights
    gate_values = gate_values if gate_values is not None else model.gates
    leaves = {}
    for name in model.weight_names():
        leaves[LeafId(name, "weight")] = ag.Var(weight_values[name])
    for i in model.gated_layers():
        leaves[LeafId(f"g{i}", "mask")] = ag.Var(gate_values[i])
    return leaves


def forward_logits(model, x, weight_values=None, gate_values=None):
    """Record the forward pass; returns (logits Var, leaves dict)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} != input {model.input_shape}")
    leaves = _leaf_vars(model, weight_values, gate_values)
    h = ag.Var(x)
    outs = []
    for i, spec in enumerate(model.layers):
        if spec.kind == "dense":
            h = ag.add(ag.matmul(h, leaves[LeafId(f"w{i}", "weight")]),
                       leaves[LeafId(f"b{i}", "weight")])
        elif spec.kind == "conv":
            h = ag.conv2d(h, leaves[LeafId(f"w{i}", "weight")], spec.stride, spec.pad)
            h = ag.add(h, ag.reshape(leaves[LeafId(f"b{i}", "weight")], (spec.out_dim, 1, 1)))
        elif spec.kind == "relu":
            h = ag.relu(h)
        elif spec.kind == "avgpool":
            h = ag.mean_spatial(h)
        elif spec.kind == "flatten":
            h = ag.reshape(h, (h.data.shape[0], -1))
        elif spec.kind == "residual_add":
            h = ag.add(h, outs[spec.source])
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        if spec.gate:
            g = leaves[LeafId(f"g{i}", "mask")]
            if h.data.ndim == 4:
                g = ag.reshape(g, (1, spec.out_dim, 1, 1))
            h = ag.mul(h, g)
        outs.append(h)
    return h, leaves


def forward_loss(model, batch, weight_values=None, gate_values=None):
    """Mean cross-entropy over the batch; returns (loss Var, leaves)."""
    x, y = batch
    logits, leaves = forward_logits(model, x, weight_values, gate_values)
    loss = ag.cross_entropy(logits, y)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    return loss, leaves


def loss_value(model, batch):
    loss, _ = forward_loss(model, batch)
    return float(loss.data)


def loss_and_grads(model, batches, weight_values=None, gate_values=None):
    """Mean loss over batches and leaf gradients averaged across batches."""
    total = 0.0
    grads = None
    for batch in batches:
        loss, leaves = forward_loss(model, batch, weight_values, gate_values)
        g = ag.backward(loss, leaves)
        total += float(loss.data)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    n = len(batches)
    for k in grads:
        grads[k] /= n
    return total / n, grads


# ---- flat parameter-vector views (used by the influence machinery) ----

def weight_vector(model, weights=None):
    weights = weights if weights is not None else model.weights
    return np.concatenate([weights[n].reshape(-1) for n in model.weight_names()])


def unflatten_weights(model, vec):
    out, pos = {}, 0
    for n in model.weight_names():
        size = model.weights[n].size
        out[n] = vec[pos:pos + size].reshape(model.weights[n].shape)
        pos += size
    if pos != vec.size:
        raise ValueError(f"weight vector length {vec.size}, expected {pos}")
    return out


def set_weight_vector(model, vec):
    model.weights = {k: v.copy() for k, v in unflatten_weights(model, vec).items()}


def gate_full_vector(model, gates=None):
    gates = gates if gates is not None else model.gates
    return np.concatenate([gates[i] for i in model.gated_layers()])


def unflatten_gates(model, vec):
    out, pos = {}, 0
    for i in model.gated_layers():
        size = model.gates[i].size
        out[i] = vec[pos:pos + size].copy()
        pos += size
    if pos != vec.size:
        raise ValueError(f"gate vector length {vec.size}, expected {pos}")
    return out


def flatten_grads_weights(model, grads):
    return np.concatenate([
        grads[LeafId(n, "weight")].reshape(-1) for n in model.weight_names()])


def flatten_grads_gates(model, grads):
    return np.concatenate([
        grads[LeafId(f"g{i}", "mask")] for i in model.gated_layers()])


# ---- training ----

def sgd_step(model, batch, cfg, velocity=None):
    """One momentum-SGD update of the weights (gates are never updated)."""
    _, grads = loss_and_grads(model, [batch])
    if velocity is None:
        velocity = {n: np.zeros_like(model.weights[n]) for n in model.weights}
    for name in model.weight_names():
        g = grads[LeafId(name, "weight")]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        g = g + cfg.weight_decay * model.weights[name]
        velocity[name] = cfg.momentum * velocity[name] + g
        model.weights[name] = model.weights[name] - cfg.lr * velocity[name]
    return velocity


def train(model, dataset, cfg):
    """Seeded minibatch training loop; history rows are (epoch, loss, acc)."""
    x, y = dataset.x, dataset.y
    n = x.shape[0]
    rng = SeededRng(cfg.seed)
    velocity = None
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.stream(f"shuffle{epoch}").permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            velocity = sgd_step(model, (x[idx], y[idx]), cfg, velocity)
        loss, acc = evaluate(model, dataset)
        history.append((epoch, loss, acc))
    return model, history


def evaluate(model, dataset):
    x, y = dataset.x, dataset.y
    logits, _ = forward_logits(model, x)
    loss = float(ag.cross_entropy(logits, y).data)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    return loss, acc
