"""Exact differentiation for small feed-forward networks.

Two pieces live here:

* an array-valued reverse-mode tape (`Node`) supporting the primitives the
  degradation-model loss is built from: +, -, *, matmul, tanh, square,
  indexing, concat, sum;
* a jet propagator for multilayer perceptrons that carries input
  directional derivatives (value, first order, and the (t, .) second-order
  pairs) through every layer in closed form.

The jet propagator is written against plain operators, so it runs on raw
float64 arrays for inference and on tape Nodes when parameter gradients
are required. Derivative orders are limited to what the residual loss
needs: <= 2nd in t, 1st in the remaining inputs, 1st in parameters of any
composed expression.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, ShapeMismatch, UnsupportedPrimitive

ACTIVATIONS = ("tanh", "identity", "square")


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _value_of(x):
    if isinstance(x, Node):
        return x.value
    if isinstance(x, np.ndarray):
        return x
    if isinstance(x, (float, int)):
        return np.float64(x)
    raise UnsupportedPrimitive(f"unsupported operand type {type(x).__name__}")


class Node:
    """One array-valued variable on the reverse-mode tape."""

    __slots__ = ("value", "parents", "grad", "requires_grad")
    __array_ufunc__ = None  # keep numpy from hijacking reflected operators

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)  # (parent Node, vjp callable) pairs
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    # -- elementwise ----------------------------------------------------
    def __add__(self, other):
        ov = _value_of(other)
        parents = [(self, lambda g: _unbroadcast(g, self.value.shape))]
        if isinstance(other, Node):
            parents.append((other, lambda g: _unbroadcast(g, ov.shape)))
        return Node(self.value + ov, parents)

    __radd__ = __add__

    def __neg__(self):
        return Node(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        ov = _value_of(other)
        parents = [(self, lambda g: _unbroadcast(g, self.value.shape))]
        if isinstance(other, Node):
            parents.append((other, lambda g: _unbroadcast(-g, ov.shape)))
        return Node(self.value - ov, parents)

    def __rsub__(self, other):
        ov = _value_of(other)
        return Node(ov - self.value, [(self, lambda g: _unbroadcast(-g, self.value.shape))])

    def __mul__(self, other):
        ov = _value_of(other)
        parents = [(self, lambda g: _unbroadcast(g * ov, self.value.shape))]
        if isinstance(other, Node):
            sv = self.value
            parents.append((other, lambda g: _unbroadcast(g * sv, ov.shape)))
        return Node(self.value * ov, parents)

    __rmul__ = __mul__

    # -- matmul (A @ W with 2-D W, A of 2 or 3 dims) --------------------
    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def tanh(self):
        t = np.tanh(self.value)
        return Node(t, [(self, lambda g: g * (1.0 - t * t))])

    def square(self):
        return Node(self.value * self.value, [(self, lambda g: g * (2.0 * self.value))])

    def sum(self):
        shape = self.value.shape
        return Node(self.value.sum(), [(self, lambda g: np.broadcast_to(g, shape))])

    def __getitem__(self, idx):
        shape = self.value.shape

        def vjp(g):
            out = np.zeros(shape, dtype=np.float64)
            out[idx] = g
            return out

        return Node(self.value[idx], [(self, vjp)])

    def reshape(self, *shape):
        old = self.value.shape
        return Node(self.value.reshape(*shape), [(self, lambda g: g.reshape(old))])

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.value.ndim)))
        inverse = tuple(np.argsort(axes))
        return Node(self.value.transpose(*axes), [(self, lambda g: g.transpose(*inverse))])

    # -- reverse pass ----------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.value.ndim != 0:
            raise ShapeMismatch("backward() requires a scalar node")
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g


def _matmul(a, b):
    av, bv = _value_of(a), _value_of(b)
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul shapes {av.shape} @ {bv.shape}")
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: g @ bv.swapaxes(-1, -2)))
    if isinstance(b, Node):
        ndims = tuple(range(av.ndim - 1))
        parents.append((b, lambda g: np.tensordot(av, g, axes=(ndims, ndims))))
    out = av @ bv
    if not parents:
        return out
    return Node(out, parents)


def tanh(x):
    return x.tanh() if isinstance(x, Node) else np.tanh(x)


def square(x):
    return x.square() if isinstance(x, Node) else x * x


def nsum(x):
    return x.sum() if isinstance(x, Node) else np.float64(np.sum(x))


def concat(parts, axis=0):
    if not any(isinstance(p, Node) for p in parts):
        return np.concatenate(parts, axis=axis)
    values = [_value_of(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parents = []
    for k, p in enumerate(parts):
        if not isinstance(p, Node):
            continue
        sl = [slice(None)] * values[k].ndim
        sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
        parents.append((p, lambda g, sl=tuple(sl): g[sl]))
    return Node(np.concatenate(values, axis=axis), parents)


def grad_params(loss: Node, params: dict) -> dict:
    """Gradients of a scalar loss for every tracked parameter Node.

    `params` maps names to Nodes; entries that are plain arrays (frozen
    parameters) receive no gradient entry.
    """
    if not isinstance(loss, Node):
        raise UnsupportedPrimitive("loss must be a tape Node")
    loss.backward()
    out = {}
    for name, p in params.items():
        if isinstance(p, Node):
            out[name] = np.zeros_like(p.value) if p.grad is None else p.grad
    return out


# ---------------------------------------------------------------------------
# Multilayer perceptron
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Feed-forward net: tanh hidden layers, identity output, scalar out.

    `activation` exists so differentiation tests can plant closed-form
    functions (identity -> linear nets, square -> polynomials); every
    production model is tanh.
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"activation {self.activation!r} not in {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidSpec("weights/biases must be non-empty and aligned")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise InvalidSpec(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise InvalidSpec(f"layer {k}: input width {w.shape[0]} mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidSpec(f"layer {k}: non-finite parameters")
        if self.weights[-1].shape[1] != 1:
            raise InvalidSpec("output must be scalar")

    @property
    def m_in(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def widths(self) -> list:
        return [self.m_in] + [int(w.shape[1]) for w in self.weights]

    @classmethod
    def create(cls, m_in: int, hidden_layers: int, width: int,
               rng: np.random.Generator, activation: str = "tanh") -> "Mlp":
        """Xavier-normal weights (std^2 = 2/(fan_in+fan_out)), zero biases."""
        dims = [m_in] + [width] * hidden_layers + [1]
        weights, biases = [], []
        for fi, fo in zip(dims[:-1], dims[1:]):
            std = np.sqrt(2.0 / (fi + fo))
            weights.append(rng.normal(0.0, std, size=(fi, fo)))
            biases.append(np.zeros(fo))
        return cls(weights=weights, biases=biases, activation=activation)

    def copy(self) -> "Mlp":
        return Mlp(weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases],
                   activation=self.activation)

    def param_arrays(self) -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = w
            out[f"b{k}"] = b
        return out

    def to_dict(self) -> dict:
        return {
            "schema": "kneedeep-mlp-v1",
            "widths": self.widths,
            "activation": self.activation,
            "weights": [[float(v) for v in w.reshape(-1)] for w in self.weights],
            "biases": [[float(v) for v in b] for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("schema") != "kneedeep-mlp-v1":
            raise InvalidSpec(f"unknown mlp schema {d.get('schema')!r}")
        widths = d["widths"]
        weights = [np.asarray(w, dtype=np.float64).reshape(fi, fo)
                   for w, fi, fo in zip(d["weights"], widths[:-1], widths[1:])]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return cls(weights=weights, biases=biases, activation=d["activation"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Jet propagation
# ---------------------------------------------------------------------------

def mlp_jet(weights, biases, activation: str, X, seeds=None, t_seed: int = 0,
            second: bool = False):
    """Propagate value and input-directional derivatives through the net.

    X: (n, m_in) input values (array or Node). seeds: (d, n, m_in) tangent
    directions; None disables derivative tracking. When `second` is set,
    the (seeds[t_seed], seeds[k]) second-order pairs are carried too.
    Returns (value (n,1), jet1 (d,n,1) or None, jet2 (d,n,1) or None).
    Parameters may be Nodes, in which case every output is a Node.
    """
    A = X
    J1 = seeds
    J2 = 0.0 if (second and seeds is not None) else None
    n_layers = len(weights)
    for k in range(n_layers):
        W, b = weights[k], biases[k]
        Z = A @ W + b
        if J1 is not None:
            J1 = J1 @ W
            if second:
                J2 = J2 @ W if not isinstance(J2, float) else 0.0
        if k == n_layers - 1:  # identity output layer
            A = Z
            continue
        if activation == "identity":
            A = Z
        elif activation == "tanh":
            T = tanh(Z)
            if J1 is not None:
                S = 1.0 - square(T)
                if second:
                    Zt = J1[t_seed]
                    curv = (-2.0 * T) * S
                    J2 = S * J2 + curv * (Zt * J1) if not isinstance(J2, float) \
                        else curv * (Zt * J1)
                J1 = S * J1
            A = T
        else:  # square
            if J1 is not None:
                if second:
                    Zt = J1[t_seed]
                    J2 = 2.0 * (Z * J2 + Zt * J1) if not isinstance(J2, float) \
                        else 2.0 * (Zt * J1)
                J1 = 2.0 * (Z * J1)
            A = square(Z)
    if isinstance(J2, float):
        J2 = None
    return A, J1, J2


def _identity_seeds(n: int, m: int) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(np.eye(m)[:, None, :], (m, n, m)))


def _check_input(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.m_in:
        raise ShapeMismatch(f"input length {x.shape} != m_in {net.m_in}")
    return x


def forward(net: Mlp, x) -> float:
    """Scalar net output for one input vector."""
    x = _check_input(net, x)
    val, _, _ = mlp_jet(net.weights, net.biases, net.activation, x[None, :])
    return float(val[0, 0])


def forward_batch(net: Mlp, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.m_in:
        raise ShapeMismatch(f"batch shape {X.shape} != (n, {net.m_in})")
    val, _, _ = mlp_jet(net.weights, net.biases, net.activation, X)
    return val[:, 0]


def grad_input(net: Mlp, x) -> np.ndarray:
    """Exact d(out)/d(input_j) for one input vector."""
    x = _check_input(net, x)
    seeds = _identity_seeds(1, net.m_in)
    _, J1, _ = mlp_jet(net.weights, net.biases, net.activation, x[None, :], seeds)
    return J1[:, 0, 0].copy()


def second_time_derivatives(net: Mlp, x, t_index: int = 0):
    """(d(out)/dt, d2(out)/dt2, d2(out)/dt dx_j) at one input vector.

    The cross-derivative vector covers the non-time inputs in input order.
    """
    x = _check_input(net, x)
    if not 0 <= t_index < net.m_in:
        raise ShapeMismatch(f"t_index {t_index} out of range for m_in {net.m_in}")
    seeds = _identity_seeds(1, net.m_in)
    _, J1, J2 = mlp_jet(net.weights, net.biases, net.activation, x[None, :],
                        seeds, t_seed=t_index, second=True)
    d_t = float(J1[t_index, 0, 0])
    d_tt = float(J2[t_index, 0, 0])
    others = [j for j in range(net.m_in) if j != t_index]
    d_tx = J2[others, 0, 0].copy()
    return d_t, d_tt, d_tx


def tracked_params(net: Mlp, frozen: bool = False):
    """Wrap parameters as tape Nodes (or leave raw arrays when frozen)."""
    if frozen:
        weights, biases = list(net.weights), list(net.biases)
    else:
        weights = [Node(w, requires_grad=True) for w in net.weights]
        biases = [Node(b, requires_grad=True) for b in net.biases]
    named = {}
    for k in range(len(weights)):
        named[f"w{k}"] = weights[k]
        named[f"b{k}"] = biases[k]
    return weights, biases, named
