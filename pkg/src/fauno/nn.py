"""Small fully connected networks with hand-written backprop, plus Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "identity", "softmax")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "tanh"


@dataclass
class ModelParams:
    layers: list[Layer]
    shape_tag: str = "mlp"

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.weight.shape[1] != layer.bias.shape[0]:
                raise ValueError(f"layer {i}: weight/bias mismatch")
            if i and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ValueError(f"layer {i}: input size does not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [l.weight.shape[1] for l in self.layers]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order: W1, b1, W2, b2, ..."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers], self.shape_tag)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for a in self.arrays():
            a[...] = vec[i:i + a.size].reshape(a.shape)
            i += a.size

    def add_(self, deltas: list[np.ndarray], scale: float = 1.0) -> None:
        for a, d in zip(self.arrays(), deltas):
            if a.shape != d.shape:
                raise ValueError(f"shape mismatch {a.shape} vs {d.shape}")
            a += scale * d

    def minus(self, other: "ModelParams") -> list[np.ndarray]:
        return [a - b for a, b in zip(self.arrays(), other.arrays())]

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_mlp(sizes: list[int], activations: list[str], rng: np.random.Generator, shape_tag: str = "mlp") -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out), act))
    return ModelParams(layers, shape_tag)


def zeros_like(params: ModelParams) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in params.arrays()]


def forward(params: ModelParams, x: np.ndarray):
    """Batch forward pass. Softmax layers emit raw logits; masking happens upstream.

    Returns (output, cache) where cache holds every layer's input.
    """
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"expected input (*, {params.in_dim}), got {x.shape}")
    cache = []
    h = x
    for layer in params.layers:
        cache.append(h)
        h = h @ layer.weight + layer.bias
        if layer.activation == "tanh":
            h = np.tanh(h)
    cache.append(h)
    return h, cache


def backward(params: ModelParams, cache: list[np.ndarray], dout: np.ndarray, input_grad: bool = False):
    """Gradients of sum(dout * output) w.r.t. W1, b1, W2, b2, ...

    With ``input_grad`` the gradient w.r.t. the network input is returned too.
    """
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))
    g = dout
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - cache[i + 1] ** 2)
        grads[2 * i] = cache[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i or input_grad:
            g = g @ layer.weight.T
    return (grads, g) if input_grad else grads


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: ModelParams, grads: list[np.ndarray]) -> None:
        arrays = params.arrays()
        if not self.m:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def reset(self) -> None:
        self.t = 0
        self.m = []
        self.v = []

    def state(self) -> dict:
        return {"t": self.t, "m": [x.tolist() for x in self.m], "v": [x.tolist() for x in self.v]}

    def load_state(self, doc: dict) -> None:
        self.t = int(doc["t"])
        self.m = [np.asarray(x, dtype=np.float64) for x in doc["m"]]
        self.v = [np.asarray(x, dtype=np.float64) for x in doc["v"]]


def params_to_dict(params: ModelParams) -> dict:
    return {
        "shape_tag": params.shape_tag,
        "dims": params.dims,
        "layers": [
            {"activation": l.activation, "weight": l.weight.tolist(), "bias": l.bias.tolist()} for l in params.layers
        ],
    }


def params_from_dict(doc: dict) -> ModelParams:
    layers = [
        Layer(np.asarray(l["weight"], dtype=np.float64), np.asarray(l["bias"], dtype=np.float64), l["activation"])
        for l in doc["layers"]
    ]
    params = ModelParams(layers, doc.get("shape_tag", "mlp"))
    if "dims" in doc and list(doc["dims"]) != params.dims:
        raise ValueError(f"checkpoint dims {doc['dims']} do not match weights {params.dims}")
    return params
