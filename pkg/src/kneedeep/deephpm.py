"""Per-degradation-mode hidden-dynamics model.

A surrogate net F(t, x) fits the mode trajectory while a dynamics net
G(t, x, u, u_x) fits its growth rate; the two are tied by the residual
H = dF/dt - G evaluated at the labelled points. Training minimizes

    w_u * sum (F - u)^2  +  w_H * sum H^2  +  w_Ht * sum (dH/dt)^2

with full-batch Adam. Transfer to a new usage scenario freezes G and
retrains F only.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import (
    Mlp,
    Node,
    _identity_seeds,
    concat,
    mlp_jet,
    nsum,
    square,
    tracked_params,
)
from .errors import (
    InvalidSpec,
    NonFiniteLoss,
    ShapeMismatch,
    TooFewSamples,
    ValueOutOfRange,
)

log = logging.getLogger(__name__)

MODES = ("lli", "lam_ne", "lam_pe")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_u: float = 1.0
    w_H: float = 1.0
    w_Ht: float = 1.0
    seed: int = 0
    frozen: str = "none"  # "none" | "dynamics"

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidSpec("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidSpec("learning_rate must be positive")
        if min(self.w_u, self.w_H, self.w_Ht) < 0:
            raise InvalidSpec("loss weights must be nonnegative")
        if self.frozen not in ("none", "dynamics"):
            raise InvalidSpec(f"frozen must be 'none' or 'dynamics', got {self.frozen!r}")


@dataclass
class DeepHpmModel:
    """Trained surrogate + dynamics pair for one degradation mode."""

    mode: str
    surrogate: Mlp  # m_in = 1 + m, input (t ++ x)
    dynamics: Mlp   # m_in = 2m + 2, input (t ++ x ++ u ++ u_x)
    set_kind: str = "IV17"
    norm_ref: dict | None = None
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidSpec(f"mode {self.mode!r} not in {MODES}")
        if self.dynamics.m_in != 2 * self.surrogate.m_in:
            raise InvalidSpec(
                f"dynamics input width {self.dynamics.m_in} != "
                f"2 x surrogate input width {self.surrogate.m_in}")

    @property
    def n_features(self) -> int:
        return self.surrogate.m_in - 1

    def to_dict(self) -> dict:
        return {"schema": "kneedeep-deephpm-v1", "mode": self.mode,
                "set_kind": self.set_kind, "surrogate": self.surrogate.to_dict(),
                "dynamics": self.dynamics.to_dict(), "norm_ref": self.norm_ref,
                "training_meta": self.training_meta}

    @classmethod
    def from_dict(cls, d: dict) -> "DeepHpmModel":
        if d.get("schema") != "kneedeep-deephpm-v1":
            raise InvalidSpec(f"unknown model schema {d.get('schema')!r}")
        return cls(mode=d["mode"], surrogate=Mlp.from_dict(d["surrogate"]),
                   dynamics=Mlp.from_dict(d["dynamics"]), set_kind=d["set_kind"],
                   norm_ref=d.get("norm_ref"), training_meta=d.get("training_meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "DeepHpmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Residual evaluation
# ---------------------------------------------------------------------------

def _hpm_terms(F_w, F_b, F_act, G_w, G_b, G_act, t: np.ndarray, X: np.ndarray):
    """Batched (F, F_t, H, H_t) with parameters either raw or tracked.

    H_t chains through the u and u_x arguments of the dynamics net: the
    dynamics input along a trajectory is z(t) = (t, x, F, F_x), so
    dG/dt is the directional derivative along (1, 0, F_t, F_tx).
    """
    n, m = X.shape
    inp = np.concatenate([t[:, None], X], axis=1)
    seeds = _identity_seeds(n, 1 + m)
    F, J1, J2 = mlp_jet(F_w, F_b, F_act, inp, seeds, t_seed=0, second=True)
    F_t = J1[0]
    F_tt = J2[0]
    F_x = J1[1:].reshape(m, n).transpose()
    F_tx = J2[1:].reshape(m, n).transpose()
    g_in = concat([t[:, None], X, F, F_x], axis=1)
    g_tan = concat([np.ones((n, 1)), np.zeros((n, m)), F_t, F_tx], axis=1)
    g_seeds = g_tan.reshape(1, n, 2 * m + 2)
    G, GJ1, _ = mlp_jet(G_w, G_b, G_act, g_in, g_seeds)
    H = F_t - G
    H_t = F_tt - GJ1[0]
    return F, F_t, H, H_t


def _check_pairs(t, X, u=None):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, 1)
    if X.ndim != 2 or X.shape[0] != t.shape[0] or X.shape[1] < 1:
        raise ShapeMismatch(f"X shape {X.shape} incompatible with t length {t.shape[0]}")
    if u is None:
        return t, X, None
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape[0] != t.shape[0]:
        raise ShapeMismatch("u length does not match t")
    return t, X, u


def residual_batch(model: DeepHpmModel, t, X) -> tuple[np.ndarray, np.ndarray]:
    """PDE residual H and its exact time gradient H_t at (t_i, x_i)."""
    t, X, _ = _check_pairs(t, X)
    if X.shape[1] != model.n_features:
        raise ShapeMismatch(f"expected {model.n_features} features, got {X.shape[1]}")
    _, _, H, H_t = _hpm_terms(model.surrogate.weights, model.surrogate.biases,
                              model.surrogate.activation, model.dynamics.weights,
                              model.dynamics.biases, model.dynamics.activation, t, X)
    return H[:, 0], H_t[:, 0]


def residual(model: DeepHpmModel, t: float, x) -> tuple[float, float]:
    H, H_t = residual_batch(model, [t], np.asarray(x, dtype=np.float64)[None, :])
    return float(H[0]), float(H_t[0])


def predict_batch(model: DeepHpmModel, t, X) -> np.ndarray:
    """Raw surrogate output F(t, x); intentionally not clipped to [0, 1]."""
    t, X, _ = _check_pairs(t, X)
    if X.shape[1] != model.n_features:
        raise ShapeMismatch(f"expected {model.n_features} features, got {X.shape[1]}")
    inp = np.concatenate([t[:, None], X], axis=1)
    val, _, _ = mlp_jet(model.surrogate.weights, model.surrogate.biases,
                        model.surrogate.activation, inp)
    return val[:, 0]


def predict(model: DeepHpmModel, t: float, x) -> float:
    return float(predict_batch(model, [t], np.asarray(x, dtype=np.float64)[None, :])[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, arrays: list, cfg: TrainConfig):
        self.arrays = arrays
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.step = 0

    def update(self, grads: list) -> None:
        c = self.cfg
        self.step += 1
        bc1 = 1.0 - c.beta1 ** self.step
        bc2 = 1.0 - c.beta2 ** self.step
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            a -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _loss_graph(F, G, cfg: TrainConfig, t, X, u, colloc):
    """Build the weighted loss and return (loss Node, parts, tracked params)."""
    F_w, F_b, F_named = tracked_params(F)
    G_w, G_b, G_named = tracked_params(G, frozen=cfg.frozen == "dynamics")
    Fv, _, H, H_t = _hpm_terms(F_w, F_b, F.activation, G_w, G_b, G.activation, t, X)
    L_u = nsum(square(Fv - u[:, None]))
    L_H = nsum(square(H))
    L_Ht = nsum(square(H_t))
    if colloc is not None:
        tc, Xc = colloc
        _, _, Hc, Hc_t = _hpm_terms(F_w, F_b, F.activation, G_w, G_b, G.activation, tc, Xc)
        L_H = L_H + nsum(square(Hc))
        L_Ht = L_Ht + nsum(square(Hc_t))
    loss = cfg.w_u * L_u + cfg.w_H * L_H + cfg.w_Ht * L_Ht
    parts = (float(loss.value), float(L_u.value), float(L_H.value), float(L_Ht.value))
    return loss, parts, F_named, G_named


def _run_training(F: Mlp, G: Mlp, t, X, u, cfg: TrainConfig, colloc):
    """Full-batch Adam on the residual loss; mutates F (and G) in place."""
    trainables = list(F.weights) + list(F.biases)
    names = [f"F.w{k}" for k in range(len(F.weights))] + \
            [f"F.b{k}" for k in range(len(F.biases))]
    if cfg.frozen == "none":
        trainables += list(G.weights) + list(G.biases)
        names += [f"G.w{k}" for k in range(len(G.weights))] + \
                 [f"G.b{k}" for k in range(len(G.biases))]
    opt = _Adam(trainables, cfg)
    history = np.empty((cfg.epochs, 4), dtype=np.float64)
    for epoch in range(cfg.epochs):
        loss, parts, F_named, G_named = _loss_graph(F, G, cfg, t, X, u, colloc)
        if not np.isfinite(parts[0]):
            raise NonFiniteLoss(epoch)
        loss.backward()
        grads = [F_named[f"w{k}"].grad for k in range(len(F.weights))] + \
                [F_named[f"b{k}"].grad for k in range(len(F.biases))]
        if cfg.frozen == "none":
            grads += [G_named[f"w{k}"].grad for k in range(len(G.weights))] + \
                     [G_named[f"b{k}"].grad for k in range(len(G.biases))]
        grads = [np.zeros_like(a) if g is None else g for g, a in zip(grads, trainables)]
        opt.update(grads)
        history[epoch] = parts
    return history


def _pin_dead_feature_columns(F: Mlp, G: Mlp, X: np.ndarray) -> None:
    """Zero the first-layer weights fed by constant-zero feature columns.

    A feature that is identically zero in the batch carries no signal, yet
    Xavier-random weights on it give the surrogate an arbitrary derivative
    in that direction, which the dynamics net then reads through its u_x
    input. With both weight rows zeroed the gradient to them vanishes
    identically, so d(surrogate)/dx_j stays 0 for the whole run and the
    dynamics net is constrained exactly on the u_x_j = 0 slice it will be
    queried on. Min-max normalization maps constant columns to zero, so
    structurally-empty histogram bins hit this path.
    """
    m = X.shape[1]
    dead = [j for j in range(m) if np.all(X[:, j] == 0.0)]
    for j in dead:
        F.weights[0][1 + j, :] = 0.0       # x_j input of the surrogate
        G.weights[0][m + 2 + j, :] = 0.0   # u_x_j input of the dynamics net


def _validate_training_inputs(t, X, u, min_samples=4):
    t, X, u = _check_pairs(t, X, u)
    if t.shape[0] < min_samples:
        raise TooFewSamples(f"need >= {min_samples} samples, got {t.shape[0]}")
    if not np.all(np.isfinite(u)) or u.min() < 0.0 or u.max() > 1.0:
        raise ValueOutOfRange("targets must lie in [0, 1]")
    return t, X, u


def train(pairs, widths: tuple, config: TrainConfig = TrainConfig(),
          mode: str = "lli", set_kind: str = "IV17", norm_ref: dict | None = None,
          colloc=None) -> tuple[DeepHpmModel, np.ndarray]:
    """Train one degradation-mode model from (t_i, x_i, u_i) labelled pairs.

    widths = (hidden_layers, neurons); the surrogate and dynamics nets share
    the same structure. Returns (model, history) where history rows are
    (total, data, residual, residual_gradient) per epoch.
    """
    t, X, u = _validate_training_inputs(*pairs)
    layers, neurons = int(widths[0]), int(widths[1])
    m = X.shape[1]
    rng = np.random.default_rng(config.seed)
    F = Mlp.create(1 + m, layers, neurons, rng)
    G = Mlp.create(2 * m + 2, layers, neurons, rng)
    _pin_dead_feature_columns(F, G, X)
    history = _run_training(F, G, t, X, u, config, colloc)
    meta = {"seed": config.seed, "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "loss_weights": [config.w_u, config.w_H, config.w_Ht],
            "widths": [layers, neurons], "frozen": config.frozen,
            "n_samples": int(t.shape[0])}
    model = DeepHpmModel(mode=mode, surrogate=F, dynamics=G, set_kind=set_kind,
                         norm_ref=norm_ref, training_meta=meta)
    return model, history


def fine_tune(pretrained: DeepHpmModel, target_pairs,
              config: TrainConfig = TrainConfig(frozen="dynamics"),
              colloc=None) -> tuple[DeepHpmModel, np.ndarray]:
    """Adapt a pre-trained model to a new scenario.

    The dynamics net is frozen (bit-identical before/after) and only the
    surrogate is retrained on the target-scenario pairs, which must be
    normalized with the SOURCE statistics the dynamics net was trained in.
    """
    t, X, u = _validate_training_inputs(*target_pairs)
    if config.frozen != "dynamics":
        config = replace(config, frozen="dynamics")
    F = pretrained.surrogate.copy()
    G = pretrained.dynamics.copy()
    theta_before = [a.copy() for a in G.weights + G.biases]
    history = _run_training(F, G, t, X, u, config, colloc)
    for before, after in zip(theta_before, G.weights + G.biases):
        if before.tobytes() != after.tobytes():
            raise InvalidSpec("frozen dynamics parameters changed during fine-tune")
    meta = dict(pretrained.training_meta)
    meta.update({"fine_tuned": True, "ft_seed": config.seed, "ft_epochs": config.epochs,
                 "ft_n_samples": int(t.shape[0])})
    model = DeepHpmModel(mode=pretrained.mode, surrogate=F, dynamics=G,
                         set_kind=pretrained.set_kind, norm_ref=pretrained.norm_ref,
                         training_meta=meta)
    return model, history
