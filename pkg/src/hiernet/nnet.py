"""Minimal dense network core with manual backpropagation.

Everything runs on 64-bit numpy arrays shaped ``(batch, features)``. A
``Network`` is an ordered layer list split by two boundaries into three
layer groups (first / middle / last); each group can be stepped with its
own learning rate, which is how freezing and discriminative fine-tuning
are expressed. The final layer is always a two-class softmax, so every
model is a binary classifier producing per-row probability pairs.
"""

import copy
import math

import numpy as np

from .errors import NumericError, ShapeError


def kaiming_init(fan_in: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Draw a weight tensor from Normal(0, 2/fan_in)."""
    if not isinstance(fan_in, (int, np.integer)) or fan_in < 1:
        raise ValueError(f"fan_in must be a positive integer, got {fan_in!r}")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Layer:
    """Base layer: forward caches whatever backward needs."""

    kind = "base"

    def forward(self, x: np.ndarray, training: bool, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Return gradient w.r.t. the input; stash parameter grads on self."""
        raise NotImplementedError

    def named_params(self):
        """Yield (name, array) pairs; empty for stateless layers."""
        return []

    def named_grads(self):
        return []

    def reinit(self, rng: np.random.Generator) -> None:
        """Fresh Kaiming weights, zero biases. No-op for stateless layers."""

    def spec(self) -> dict:
        return {"kind": self.kind}

    @property
    def in_dim(self):
        """Expected input width, or None if any width is accepted."""
        return None


class Dense(Layer):
    """Fully connected layer: y = x @ W + b, Kaiming-initialized."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng=None):
        if in_dim < 1 or out_dim < 1:
            raise ValueError("dense dims must be positive")
        self._in = int(in_dim)
        self._out = int(out_dim)
        if rng is None:
            self.W = np.zeros((in_dim, out_dim))
        else:
            self.W = kaiming_init(in_dim, (in_dim, out_dim), rng)
        self.b = np.zeros(out_dim)
        self._x = None
        self.dW = None
        self.db = None

    def forward(self, x, training, rng=None):
        if x.shape[1] != self._in:
            raise ShapeError(f"dense expects {self._in} columns, got {x.shape[1]}")
        self._x = x
        return x @ self.W + self.b

    def backward(self, grad_out):
        self.dW = self._x.T @ grad_out
        self.db = grad_out.sum(axis=0)
        return grad_out @ self.W.T

    def named_params(self):
        return [("W", self.W), ("b", self.b)]

    def named_grads(self):
        return [("W", self.dW), ("b", self.db)]

    def reinit(self, rng):
        self.W = kaiming_init(self._in, (self._in, self._out), rng)
        self.b = np.zeros(self._out)

    def spec(self):
        return {"kind": self.kind, "in_dim": self._in, "out_dim": self._out}

    @property
    def in_dim(self):
        return self._in


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._x = None

    def forward(self, x, training, rng=None):
        self._x = x
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return grad_out * (self._x > 0)


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-p), eval is the identity."""

    kind = "dropout"

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)
        self._scaled_mask = None

    def forward(self, x, training, rng=None):
        if not training or self.p == 0.0:
            self._scaled_mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = rng.random(x.shape) >= self.p
        self._scaled_mask = mask / (1.0 - self.p)
        return x * self._scaled_mask

    def backward(self, grad_out):
        if self._scaled_mask is None:
            return grad_out
        return grad_out * self._scaled_mask

    def spec(self):
        return {"kind": self.kind, "p": self.p}


class AggResidualBlock(Layer):
    """Residual block aggregating C parallel Dense-ReLU-Dense branches.

    Output is ``x + sum_i branch_i(x)``; input and output widths are equal
    so the identity shortcut always type-checks.
    """

    kind = "agg_residual"

    def __init__(self, dim: int, cardinality: int, branch_width: int, rng=None):
        if cardinality < 1:
            raise ValueError("cardinality must be >= 1")
        if dim < 1 or branch_width < 1:
            raise ValueError("block dims must be positive")
        self.dim = int(dim)
        self.cardinality = int(cardinality)
        self.branch_width = int(branch_width)
        self.W1 = []
        self.b1 = []
        self.W2 = []
        self.b2 = []
        for _ in range(cardinality):
            if rng is None:
                self.W1.append(np.zeros((dim, branch_width)))
                self.W2.append(np.zeros((branch_width, dim)))
            else:
                self.W1.append(kaiming_init(dim, (dim, branch_width), rng))
                self.W2.append(kaiming_init(branch_width, (branch_width, dim), rng))
            self.b1.append(np.zeros(branch_width))
            self.b2.append(np.zeros(dim))
        self._x = None
        self._pre = None
        self._act = None
        self.dW1 = self.db1 = self.dW2 = self.db2 = None

    def forward(self, x, training, rng=None):
        if x.shape[1] != self.dim:
            raise ShapeError(f"block expects {self.dim} columns, got {x.shape[1]}")
        self._x = x
        self._pre = []
        self._act = []
        out = x.copy()
        for i in range(self.cardinality):
            pre = x @ self.W1[i] + self.b1[i]
            act = np.maximum(pre, 0.0)
            self._pre.append(pre)
            self._act.append(act)
            out += act @ self.W2[i] + self.b2[i]
        return out

    def backward(self, grad_out):
        dx = grad_out.copy()
        self.dW1, self.db1, self.dW2, self.db2 = [], [], [], []
        for i in range(self.cardinality):
            self.dW2.append(self._act[i].T @ grad_out)
            self.db2.append(grad_out.sum(axis=0))
            dact = (grad_out @ self.W2[i].T) * (self._pre[i] > 0)
            self.dW1.append(self._x.T @ dact)
            self.db1.append(dact.sum(axis=0))
            dx += dact @ self.W1[i].T
        return dx

    def named_params(self):
        out = []
        for i in range(self.cardinality):
            out += [
                (f"br{i}.W1", self.W1[i]),
                (f"br{i}.b1", self.b1[i]),
                (f"br{i}.W2", self.W2[i]),
                (f"br{i}.b2", self.b2[i]),
            ]
        return out

    def named_grads(self):
        out = []
        for i in range(self.cardinality):
            out += [
                (f"br{i}.W1", self.dW1[i]),
                (f"br{i}.b1", self.db1[i]),
                (f"br{i}.W2", self.dW2[i]),
                (f"br{i}.b2", self.db2[i]),
            ]
        return out

    def reinit(self, rng):
        for i in range(self.cardinality):
            self.W1[i] = kaiming_init(self.dim, (self.dim, self.branch_width), rng)
            self.b1[i] = np.zeros(self.branch_width)
            self.W2[i] = kaiming_init(self.branch_width, (self.branch_width, self.dim), rng)
            self.b2[i] = np.zeros(self.dim)

    def spec(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "cardinality": self.cardinality,
            "branch_width": self.branch_width,
        }

    @property
    def in_dim(self):
        return self.dim


class SoftmaxOutput(Layer):
    """Row-wise softmax over the class logits; caches log-probs for the loss."""

    kind = "softmax"

    def __init__(self, num_classes: int = 2):
        if num_classes != 2:
            raise ValueError("only two-class outputs are supported")
        self.num_classes = num_classes
        self.log_probs = None
        self.probs = None

    def forward(self, x, training, rng=None):
        if x.shape[1] != self.num_classes:
            raise ShapeError(f"softmax expects {self.num_classes} columns, got {x.shape[1]}")
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.log_probs = shifted - lse
        self.probs = np.exp(self.log_probs)
        return self.probs

    def spec(self):
        return {"kind": self.kind, "num_classes": self.num_classes}

    @property
    def in_dim(self):
        return self.num_classes


LAYER_KINDS = {
    "dense": Dense,
    "relu": ReLU,
    "dropout": Dropout,
    "agg_residual": AggResidualBlock,
    "softmax": SoftmaxOutput,
}

FORMAT_VERSION = 1


def layer_from_spec(spec: dict, rng=None) -> Layer:
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(spec["in_dim"], spec["out_dim"], rng=rng)
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        return Dropout(spec["p"])
    if kind == "agg_residual":
        return AggResidualBlock(spec["dim"], spec["cardinality"], spec["branch_width"], rng=rng)
    if kind == "softmax":
        return SoftmaxOutput(spec.get("num_classes", 2))
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """Ordered layer stack partitioned into first/middle/last groups.

    ``boundaries = (b1, b2)`` assigns layers ``[0, b1)`` to the first
    group, ``[b1, b2)`` to the middle, and ``[b2, n)`` to the last. The
    final layer must be the two-class softmax.
    """

    def __init__(self, layers, boundaries):
        b1, b2 = boundaries
        if not 0 <= b1 <= b2 <= len(layers):
            raise ValueError(f"bad group boundaries {boundaries} for {len(layers)} layers")
        if not layers or not isinstance(layers[-1], SoftmaxOutput):
            raise ValueError("network must end with a two-class softmax layer")
        if any(isinstance(l, SoftmaxOutput) for l in layers[:-1]):
            raise ValueError("softmax is only allowed as the final layer")
        self.layers = list(layers)
        self.boundaries = (int(b1), int(b2))
        self.training = False

    # -- mode -------------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # -- structure --------------------------------------------------------

    def group_of(self, layer_index: int) -> int:
        b1, b2 = self.boundaries
        if layer_index < b1:
            return 0
        return 1 if layer_index < b2 else 2

    @property
    def input_dim(self) -> int:
        for layer in self.layers:
            if layer.in_dim is not None:
                return layer.in_dim
        return 0

    def named_parameters(self):
        """All parameter tensors as (name, array, group) triples, layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            group = self.group_of(i)
            for name, arr in layer.named_params():
                out.append((f"{i}.{name}", arr, group))
        return out

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    # -- compute ----------------------------------------------------------

    def forward(self, x: np.ndarray, rng=None) -> np.ndarray:
        """Probability pairs for each input row."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"expected a (batch, features) array, got shape {x.shape}")
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, self.training, rng=rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return x

    def loss(self, x, labels, rng=None) -> float:
        """Mean cross-entropy of the batch under the current mode."""
        labels = _checked_labels(labels, np.asarray(x).shape[0])
        self.forward(x, rng=rng)
        log_probs = self.layers[-1].log_probs
        return float(-log_probs[np.arange(len(labels)), labels].mean())

    def loss_and_grads(self, x, labels, rng=None):
        """One train-mode forward/backward pass.

        Returns ``(loss, grads)`` where grads maps parameter names (as in
        :meth:`named_parameters`) to arrays of matching shape. Dropout
        masks drawn in the forward pass are reused on the way back.
        """
        x = np.asarray(x, dtype=np.float64)
        labels = _checked_labels(labels, x.shape[0])
        was_training = self.training
        self.training = True
        try:
            probs = self.forward(x, rng=rng)
            log_probs = self.layers[-1].log_probs
            loss = float(-log_probs[np.arange(len(labels)), labels].mean())
            if not math.isfinite(loss):
                raise NumericError("non-finite training loss")
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(labels)), labels] = 1.0
            grad = (probs - onehot) / x.shape[0]
            for layer in reversed(self.layers[:-1]):
                grad = layer.backward(grad)
        finally:
            self.training = was_training
        grads = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.named_grads():
                grads[f"{i}.{name}"] = arr
        return loss, grads


def _checked_labels(labels, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ValueError(f"labels must be a vector of length {n_rows}")
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ValueError("labels must be 0 or 1")
    return labels.astype(np.intp)


def sgd_step(net: Network, grads: dict, group_lrs) -> Network:
    """In-place SGD update with one learning rate per layer group.

    A group learning rate of exactly zero leaves that group's parameter
    bytes untouched.
    """
    first, middle, last = group_lrs
    if first < 0 or middle < 0 or last < 0:
        raise ValueError("learning rates must be non-negative")
    lrs = (first, middle, last)
    for name, param, group in net.named_parameters():
        lr = lrs[group]
        if lr == 0.0:
            continue
        param -= lr * grads[name]
    return net


# -- serialization ----------------------------------------------------------


def network_to_doc(net: Network) -> dict:
    """JSON-ready document: layer specs, boundaries, flat parameter arrays."""
    params = []
    for name, arr, _ in net.named_parameters():
        params.append({"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()})
    return {
        "format_version": FORMAT_VERSION,
        "layers": [layer.spec() for layer in net.layers],
        "group_boundaries": list(net.boundaries),
        "params": params,
    }


def network_from_doc(doc: dict) -> Network:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format {doc.get('format_version')!r}")
    layers = [layer_from_spec(spec) for spec in doc["layers"]]
    net = Network(layers, tuple(doc["group_boundaries"]))
    stored = {p["name"]: p for p in doc["params"]}
    for name, arr, _ in net.named_parameters():
        entry = stored.pop(name, None)
        if entry is None:
            raise ValueError(f"missing parameter {name!r} in network document")
        data = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if data.shape != arr.shape:
            raise ValueError(f"parameter {name!r} has shape {data.shape}, expected {arr.shape}")
        arr[...] = data
    if stored:
        raise ValueError(f"unused parameters in network document: {sorted(stored)}")
    return net


def save_network(net: Network, path: str) -> None:
    from .ioutil import write_json

    write_json(path, network_to_doc(net))


def load_network(path: str) -> Network:
    from .ioutil import read_json

    return network_from_doc(read_json(path))


# -- stock architecture ------------------------------------------------------


def default_specs(input_dim, base_width=32, cardinality=4, branch_width=8, head_widths=(24, 16)):
    """Layer specs for the stock classifier: dense stem, aggregated
    residual block, then the dropout head ending in the two-class softmax."""
    h1, h2 = head_widths
    specs = [
        {"kind": "dense", "in_dim": int(input_dim), "out_dim": int(base_width)},
        {"kind": "relu"},
        {"kind": "agg_residual", "dim": int(base_width), "cardinality": int(cardinality),
         "branch_width": int(branch_width)},
        {"kind": "relu"},
        {"kind": "dense", "in_dim": int(base_width), "out_dim": int(h1)},
        {"kind": "relu"},
        {"kind": "dropout", "p": 0.25},
        {"kind": "dense", "in_dim": int(h1), "out_dim": int(h2)},
        {"kind": "relu"},
        {"kind": "dropout", "p": 0.5},
        {"kind": "dense", "in_dim": int(h2), "out_dim": 2},
        {"kind": "softmax", "num_classes": 2},
    ]
    return specs, (2, 4)


def build_network(specs, boundaries, rng: np.random.Generator) -> Network:
    return Network([layer_from_spec(s, rng=rng) for s in specs], boundaries)
