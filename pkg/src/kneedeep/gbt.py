"""Gradient-boosted trees with softmax cross-entropy for 3-phase detection.

Newton boosting, one regression tree per class per round: with p_hat the
softmax of the accumulated scores, per-sample gradient g = p_hat - y and
hessian h = p_hat (1 - p_hat) for the class being fit. Splits are found
by exact greedy scan over midpoints of consecutive distinct feature
values, maximizing

    gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda)
                - (G_L+G_R)^2/(H_L+H_R+lambda)] - gamma

and a leaf's weight is -G/(H+lambda), applied scaled by the learning
rate. Splits leaving a child with hessian sum below min_child_weight are
rejected. No subsampling, no histogram approximation: the datasets here
are hundreds of rows.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateFeatures, EmptyClassWarning, InvalidSpec, ShapeMismatch

N_CLASSES = 3
FEATURE_NAMES = ("u1", "u2", "u3", "t")


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 100
    learning_rate: float = 0.0207
    max_depth: int = 8
    min_child_weight: float = 7.0  # minimum hessian sum per leaf
    reg_lambda: float = 1.0
    reg_gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise InvalidSpec("n_rounds must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidSpec("learning_rate must be positive")
        if self.max_depth < 1:
            raise InvalidSpec("max_depth must be >= 1")


@dataclass
class TreeNode:
    """Internal node (feature, threshold, children) or leaf (weight)."""

    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def predict_one(self, v: np.ndarray) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if v[node.feature] < node.threshold else node.right
        return node.weight

    def to_list(self, out: list) -> None:
        # preorder; leaves encode feature = -1
        if self.is_leaf:
            out.append({"feature": -1, "weight": float(self.weight)})
        else:
            out.append({"feature": int(self.feature), "threshold": float(self.threshold)})
            self.left.to_list(out)
            self.right.to_list(out)

    @staticmethod
    def from_list(items: list, pos: int = 0) -> tuple["TreeNode", int]:
        d = items[pos]
        if d["feature"] < 0:
            return TreeNode(weight=d["weight"]), pos + 1
        left, pos2 = TreeNode.from_list(items, pos + 1)
        right, pos3 = TreeNode.from_list(items, pos2)
        return TreeNode(feature=d["feature"], threshold=d["threshold"],
                        left=left, right=right), pos3


@dataclass
class GbtModel:
    """Per-round, per-class regression trees plus the fit configuration."""

    trees: list  # trees[round][class] -> TreeNode
    config: GbtConfig
    feature_names: tuple = FEATURE_NAMES
    n_classes: int = N_CLASSES

    def scores(self, V: np.ndarray, n_rounds: int | None = None) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        if V.ndim != 2 or V.shape[1] != len(self.feature_names):
            raise ShapeMismatch(f"expected (n, {len(self.feature_names)}) inputs, got {V.shape}")
        s = np.zeros((V.shape[0], self.n_classes))
        for per_class in self.trees[:n_rounds]:
            for k, tree in enumerate(per_class):
                for i in range(V.shape[0]):
                    s[i, k] += tree.predict_one(V[i])
        return s

    def to_dict(self) -> dict:
        serial = []
        for per_class in self.trees:
            round_items = []
            for tree in per_class:
                nodes: list = []
                tree.to_list(nodes)
                round_items.append(nodes)
            serial.append(round_items)
        return {"schema": "kneedeep-gbt-v1", "n_classes": self.n_classes,
                "feature_names": list(self.feature_names),
                "config": {k: getattr(self.config, k) for k in
                           ("n_rounds", "learning_rate", "max_depth",
                            "min_child_weight", "reg_lambda", "reg_gamma", "seed")},
                "trees": serial}

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("schema") != "kneedeep-gbt-v1":
            raise InvalidSpec(f"unknown gbt schema {d.get('schema')!r}")
        trees = []
        for round_items in d["trees"]:
            per_class = []
            for nodes in round_items:
                tree, _ = TreeNode.from_list(nodes)
                per_class.append(tree)
            trees.append(per_class)
        return cls(trees=trees, config=GbtConfig(**d["config"]),
                   feature_names=tuple(d["feature_names"]), n_classes=d["n_classes"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GbtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _best_split(X, g, h, idx, cfg: GbtConfig):
    """Exact greedy scan; returns (gain, feature, threshold) or None.

    Candidate thresholds are midpoints of consecutive distinct sorted
    values; ties break toward the lower feature index, then the lower
    threshold.
    """
    G = g[idx].sum()
    H = h[idx].sum()
    parent = G * G / (H + cfg.reg_lambda)
    best = None
    for f in range(X.shape[1]):
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        sg = g[idx][order]
        sh = h[idx][order]
        cg = np.cumsum(sg)
        ch = np.cumsum(sh)
        # split after position i (left = [0..i]) only where the value changes
        change = np.nonzero(sv[:-1] < sv[1:])[0]
        for i in change:
            HL = ch[i]
            HR = H - HL
            if HL < cfg.min_child_weight or HR < cfg.min_child_weight:
                continue
            GL = cg[i]
            GR = G - GL
            gain = 0.5 * (GL * GL / (HL + cfg.reg_lambda)
                          + GR * GR / (HR + cfg.reg_lambda) - parent) - cfg.reg_gamma
            thr = 0.5 * (sv[i] + sv[i + 1])
            if best is None or gain > best[0]:
                best = (gain, f, thr)
    return best


def _build_tree(X, g, h, idx, depth, cfg: GbtConfig) -> TreeNode:
    if depth < cfg.max_depth:
        found = _best_split(X, g, h, idx, cfg)
        if found is not None and found[0] > 0.0:
            _, f, thr = found
            mask = X[idx, f] < thr
            left = _build_tree(X, g, h, idx[mask], depth + 1, cfg)
            right = _build_tree(X, g, h, idx[~mask], depth + 1, cfg)
            return TreeNode(feature=f, threshold=thr, left=left, right=right)
    G = g[idx].sum()
    H = h[idx].sum()
    return TreeNode(weight=-cfg.learning_rate * G / (H + cfg.reg_lambda))


def fit(X, y, config: GbtConfig = GbtConfig()) -> GbtModel:
    """Fit the 3-class phase classifier on rows (u1, u2, u3, t)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != len(FEATURE_NAMES):
        raise ShapeMismatch(f"expected (n, {len(FEATURE_NAMES)}) design matrix, got {X.shape}")
    if y.shape != (X.shape[0],):
        raise ShapeMismatch("labels length does not match design matrix")
    if not np.all(np.isin(y, (1, 2, 3))):
        raise InvalidSpec("labels must be phases in {1, 2, 3}")
    if X.shape[0] > 1 and np.all(X == X[0]):
        raise DegenerateFeatures("all design-matrix rows are identical")
    n = X.shape[0]
    Y = np.zeros((n, N_CLASSES))
    Y[np.arange(n), y - 1] = 1.0
    scores = np.zeros((n, N_CLASSES))
    trees: list = []
    for _ in range(config.n_rounds):
        P = softmax(scores)
        per_class = []
        for k in range(N_CLASSES):
            g = P[:, k] - Y[:, k]
            h = P[:, k] * (1.0 - P[:, k])
            tree = _build_tree(X, g, h, np.arange(n), 0, config)
            per_class.append(tree)
            for i in range(n):
                scores[i, k] += tree.predict_one(X[i])
        trees.append(per_class)
    model = GbtModel(trees=trees, config=config)
    train_pred = predict_batch(model, X)
    missing = [k for k in (1, 2, 3) if (y == k).any() and not (train_pred == k).any()]
    if missing:
        warnings.warn(f"classes never predicted on training data: {missing}",
                      EmptyClassWarning)
    return model


def predict_proba(model: GbtModel, v) -> np.ndarray:
    """Softmax class probabilities for one (u1, u2, u3, t) vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (len(model.feature_names),):
        raise ShapeMismatch(f"expected length-{len(model.feature_names)} input, got {v.shape}")
    return softmax(model.scores(v[None, :]))[0]


def predict(model: GbtModel, v) -> int:
    """Phase in {1,2,3}; ties break toward the earlier (lower) phase."""
    p = predict_proba(model, v)
    return int(np.argmax(p)) + 1


def predict_batch(model: GbtModel, V: np.ndarray) -> np.ndarray:
    P = softmax(model.scores(V))
    return np.argmax(P, axis=1) + 1


def cross_entropy(model_or_scores, X=None, y=None) -> float:
    """Mean categorical cross-entropy of the data term in the boosting loss."""
    if isinstance(model_or_scores, GbtModel):
        scores = model_or_scores.scores(X)
    else:
        scores = np.asarray(model_or_scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    P = softmax(scores)
    return float(-np.mean(np.log(P[np.arange(len(y)), y - 1] + 1e-300)))
