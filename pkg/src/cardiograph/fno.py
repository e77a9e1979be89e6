"""Fourier neural operator with hand-written reverse-mode gradients.

Network: pointwise lifting ``P``, ``T`` Fourier layers
``h <- act(W h + K h + b)`` where ``K`` multiplies retained Fourier modes by
learned complex matrices, then a two-stage pointwise projection
``Q2 act(Q1 h)``. Tensors are laid out ``(batch, channels, *spatial)``.
Everything runs in float64 numpy.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import __version__, epds
from .exceptions import (ConfigError, NonFiniteLoss, ShapeMismatch, Unsupported,
                         ZeroTarget)
from .geometry import Geometry
from .spectral import check_modes, mode_shape, spectral_conv, spectral_conv_backward
from .validation import as_mask_matrix, as_target_matrix

# ---------------------------------------------------------------- activations

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Each activation is a pair (forward, derivative). The forward returns the
# value plus an auxiliary array reused by the derivative, so exact GELU
# evaluates the Gaussian CDF once per element.


def _gelu_fwd(z):
    cdf = ndtr(z)
    return z * cdf, cdf


def _gelu_bwd(z, cdf):
    out = np.multiply(z, z)
    out *= -0.5
    np.exp(out, out=out)
    out *= z
    out *= _INV_SQRT2PI
    out += cdf
    return out


def _relu_fwd(z):
    return np.maximum(z, 0.0), None


def _relu_bwd(z, _):
    return (z > 0).astype(float)


def _tanh_fwd(z):
    t = np.tanh(z)
    return t, t


def _tanh_bwd(z, t):
    return 1.0 - t * t


def _identity_fwd(z):
    return z, None


def _identity_bwd(z, _):
    return np.ones_like(z)


ACTIVATIONS = {
    "gelu": (_gelu_fwd, _gelu_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "identity": (_identity_fwd, _identity_bwd),
}


def gelu(x):
    return _gelu_fwd(np.asarray(x, dtype=float))[0]


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class FnoConfig:
    layers: int = 4
    width: int = 32
    modes: tuple = (16, 4)
    q_hidden: int = 128
    activation: str = "gelu"
    lr0: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 20
    epochs: int = 300
    plateau_factor: float = 0.95
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.layers < 1 or self.width < 1 or self.q_hidden < 1:
            raise ConfigError("layers, width and q_hidden must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0 < self.plateau_factor <= 1) or self.lr0 <= 0 or self.min_lr < 0:
            raise ConfigError("invalid learning-rate schedule")

    def to_dict(self):
        d = asdict(self)
        d["modes"] = list(self.modes)
        d["betas"] = list(self.betas)
        return d


def default_modes(ndim: int) -> tuple:
    return (16, 4) if ndim == 2 else (16, 8, 4)


# ---------------------------------------------------------------- features

def featurize(masks, geometry: Geometry) -> np.ndarray:
    """Stack ``[mask, x/Lx, y/Ly(, z/Lz)]`` as grid channels."""
    if not geometry.is_structured:
        raise Unsupported("FNO input needs a structured grid")
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    if masks.shape[1] != geometry.n_nodes:
        raise ShapeMismatch(f"masks have {masks.shape[1]} entries, grid has {geometry.n_nodes}")
    coords = geometry.to_grid((geometry.coords / np.asarray(geometry.extent)).T)
    out = np.empty((masks.shape[0], 1 + geometry.ndim) + tuple(geometry.dims))
    out[:, 0] = geometry.to_grid(masks)
    out[:, 1:] = coords[None]
    return out


# ---------------------------------------------------------------- parameters

def param_names(layers: int):
    names = ["P", "bP"]
    for t in range(layers):
        names += [f"W{t}", f"R{t}", f"b{t}"]
    return names + ["Q1", "bQ1", "Q2", "bQ2"]


def init_params(cfg: FnoConfig, in_channels: int, rng: np.random.Generator) -> dict:
    """Kaiming-normal weights (fan-in, gain sqrt(2)); zero biases."""
    w, q = cfg.width, cfg.q_hidden
    ks = mode_shape(cfg.modes)
    p = {"P": rng.normal(0.0, math.sqrt(2.0 / in_channels), (w, in_channels)),
         "bP": np.zeros(w)}
    fan_r = w * int(np.prod(ks))
    for t in range(cfg.layers):
        p[f"W{t}"] = rng.normal(0.0, math.sqrt(2.0 / w), (w, w))
        std = math.sqrt(2.0 / fan_r / 2.0)  # variance split between re and im
        p[f"R{t}"] = rng.normal(0.0, std, (w, w) + ks) + 1j * rng.normal(0.0, std, (w, w) + ks)
        p[f"b{t}"] = np.zeros(w)
    p["Q1"] = rng.normal(0.0, math.sqrt(2.0 / w), (q, w))
    p["bQ1"] = np.zeros(q)
    p["Q2"] = rng.normal(0.0, math.sqrt(2.0 / q), (1, q))
    p["bQ2"] = np.zeros(1)
    return p


def count_params(params: dict, convention: str = "complex") -> int:
    """Trainable parameter total.

    ``"complex"`` counts each complex spectral weight once (the usual deep
    learning framework convention); ``"real"`` counts real scalars.
    """
    if convention not in ("complex", "real"):
        raise ConfigError(f"unknown counting convention '{convention}'")
    k = 2 if convention == "real" else 1
    return int(sum(v.size * (k if np.iscomplexobj(v) else 1) for v in params.values()))


def count_params_formula(cfg: FnoConfig, in_channels: int, convention: str = "complex") -> int:
    w, q = cfg.width, cfg.q_hidden
    k = 2 if convention == "real" else 1
    spectral = k * w * w * int(np.prod(mode_shape(cfg.modes)))
    per_layer = w * w + spectral + w
    return (in_channels + 1) * w + cfg.layers * per_layer + (w + 1) * q + (q + 1)


# ---------------------------------------------------------------- network

def _pointwise(M, x):
    """Channel mixing ``M[o, c] x[b, c, ...]``."""
    B, C = x.shape[:2]
    y = np.matmul(M, x.reshape(B, C, -1))
    return y.reshape((B, M.shape[0]) + x.shape[2:])


def _bias(b, ndim):
    return b.reshape((1, -1) + (1,) * ndim)


def fourier_layer(a, W, R, b, modes, activation="gelu"):
    """One hidden update ``act(W a + K a + b)``; returns output only."""
    if W.shape[1] != a.shape[1] or R.shape[:2] != W.shape or b.shape != (W.shape[0],):
        raise ShapeMismatch("fourier_layer weight shapes do not match the input channels")
    y, _ = spectral_conv(a, R, modes)
    z = _pointwise(W, a) + y + _bias(b, a.ndim - 2)
    if callable(activation):
        return activation(z)
    return ACTIVATIONS[activation][0](z)[0]


def forward(params: dict, x: np.ndarray, cfg: FnoConfig, cache: bool = False):
    """Network output ``(batch, 1, *spatial)`` (and the tape when ``cache``)."""
    check_modes(x.shape[2:], cfg.modes)
    act, _ = ACTIVATIONS[cfg.activation]
    nd = x.ndim - 2
    tape = {"x": x}
    h = _pointwise(params["P"], x) + _bias(params["bP"], nd)
    for t in range(cfg.layers):
        y, a_hat = spectral_conv(h, params[f"R{t}"], cfg.modes)
        z = _pointwise(params[f"W{t}"], h) + y + _bias(params[f"b{t}"], nd)
        if cache:
            tape[f"h{t}"], tape[f"ahat{t}"], tape[f"z{t}"] = h, a_hat, z
        h, aux = act(z)
        if cache:
            tape[f"aux{t}"] = aux
    zq = _pointwise(params["Q1"], h) + _bias(params["bQ1"], nd)
    q, auxq = act(zq)
    out = _pointwise(params["Q2"], q) + _bias(params["bQ2"], nd)
    if cache:
        tape.update(hT=h, zq=zq, q=q, auxq=auxq)
        return out, tape
    return out


def loss_rel_l2(pred, target):
    """Mean over the batch of ``||pred - target|| / ||target||``; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    B = pred.shape[0]
    diff = (pred - target).reshape(B, -1)
    tn = np.linalg.norm(target.reshape(B, -1), axis=1)
    if np.any(tn == 0):
        raise ZeroTarget("target with zero norm in relative loss")
    dn = np.linalg.norm(diff, axis=1)
    loss = float(np.mean(dn / tn))
    safe = np.where(dn > 0, dn, 1.0)
    g = diff / (safe * tn)[:, None] / B
    g[dn == 0] = 0.0
    return loss, g.reshape(pred.shape)


def _pointwise_grads(M, x, g):
    """Gradients of ``<g, M x>``: (dM, dx)."""
    B, C = x.shape[:2]
    xf = x.reshape(B, C, -1)
    gf = g.reshape(B, g.shape[1], -1)
    # per-sample products avoid the transposed copies a single contraction makes
    dM = gf[0] @ xf[0].T
    for b in range(1, B):
        dM += gf[b] @ xf[b].T
    dx = np.matmul(M.T, gf).reshape(x.shape)
    return dM, dx


def backward(params: dict, tape: dict, grad_out: np.ndarray, cfg: FnoConfig) -> dict:
    """Reverse sweep over the tape from ``forward(..., cache=True)``."""
    _, dact = ACTIVATIONS[cfg.activation]
    nd = grad_out.ndim - 2
    axes = (0,) + tuple(range(2, 2 + nd))
    grads = {}
    grads["bQ2"] = grad_out.sum(axis=axes)
    grads["Q2"], dq = _pointwise_grads(params["Q2"], tape["q"], grad_out)
    dzq = dq * dact(tape["zq"], tape["auxq"])
    grads["bQ1"] = dzq.sum(axis=axes)
    grads["Q1"], dh = _pointwise_grads(params["Q1"], tape["hT"], dzq)
    for t in reversed(range(cfg.layers)):
        dz = dh * dact(tape[f"z{t}"], tape[f"aux{t}"])
        h = tape[f"h{t}"]
        grads[f"b{t}"] = dz.sum(axis=axes)
        grads[f"W{t}"], dh_w = _pointwise_grads(params[f"W{t}"], h, dz)
        dh_s, grads[f"R{t}"] = spectral_conv_backward(dz, params[f"R{t}"], tape[f"ahat{t}"], cfg.modes)
        dh = dh_w + dh_s
    grads["bP"] = dh.sum(axis=axes)
    grads["P"], _ = _pointwise_grads(params["P"], tape["x"], dh)
    return grads


def loss_and_grads(params, x, target, cfg):
    out, tape = forward(params, x, cfg, cache=True)
    loss, g = loss_rel_l2(out, target)
    return loss, backward(params, tape, g, cfg)


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam on a dict of arrays; complex arrays are updated per real component."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(_real(v).shape) for k, v in params.items()}
        self.v = {k: np.zeros(_real(v).shape) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            g = _real(grads[k])
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = _real(params[k])
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _real(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return np.ascontiguousarray(a).view(np.float64)
    return a


class ReduceOnPlateau:
    """Multiply lr by ``factor`` whenever the monitored loss fails to improve."""

    def __init__(self, lr, factor=0.95, min_lr=1e-6, patience=0):
        self.lr = lr
        self.factor = factor
        self.min_lr = min_lr
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, loss) -> bool:
        """Record an epoch loss; returns True when it is a new best."""
        if loss < self.best:
            self.best = loss
            self.bad = 0
            return True
        self.bad += 1
        if self.bad > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad = 0
        return False


# ---------------------------------------------------------------- training

@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def best_envelope(self):
        return np.minimum.accumulate(np.asarray(self.test_loss)) if self.test_loss else np.array([])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss", "lr"])
            for row in zip(self.epoch, self.train_loss, self.test_loss, self.lr):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _batched_loss(params, x, y, cfg, batch):
    total = 0.0
    for i in range(0, x.shape[0], batch):
        loss, _ = loss_rel_l2(forward(params, x[i:i + batch], cfg), y[i:i + batch])
        total += loss * min(batch, x.shape[0] - i)
    return total / x.shape[0]


def train(x_train, y_train, cfg: FnoConfig, x_test=None, y_test=None, params=None,
          callback=None):
    """Adam over shuffled mini-batches with a reduce-on-plateau schedule.

    The schedule monitors the test loss (training loss when no test set is
    given). Returns ``(best_params, history)``.
    """
    from .dataset import STREAM_BATCH, STREAM_INIT, substream

    if params is None:
        params = init_params(cfg, x_train.shape[1], substream(cfg.seed, STREAM_INIT))
    params = {k: v.copy() for k, v in params.items()}
    best = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, cfg.lr0, cfg.betas, cfg.eps)
    sched = ReduceOnPlateau(cfg.lr0, cfg.plateau_factor, cfg.min_lr)
    hist = History()
    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        lr = sched.lr
        opt.lr = lr
        perm = substream(cfg.seed, STREAM_BATCH, epoch).permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss, grads = loss_and_grads(params, x_train[idx], y_train[idx], cfg)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, "training loss")
            opt.step(params, grads)
            total += loss * len(idx)
        train_loss = total / n
        if x_test is not None:
            test_loss = _batched_loss(params, x_test, y_test, cfg, cfg.batch_size)
        else:
            test_loss = train_loss
        if not np.isfinite(test_loss):
            raise NonFiniteLoss(epoch, "test loss")
        if sched.update(test_loss):
            best = {k: v.copy() for k, v in params.items()}
        hist.epoch.append(epoch)
        hist.train_loss.append(train_loss)
        hist.test_loss.append(test_loss)
        hist.lr.append(lr)
        if callback is not None:
            callback(epoch, train_loss, test_loss, lr)
    return (best if cfg.epochs else params), hist


# ---------------------------------------------------------------- estimator

class FourierNeuralOperatorRegressor(RegressorMixin, BaseEstimator):
    """FNO surrogate mapping stimulus masks to nodal time maps.

    ``X`` rows are node masks, ``y`` rows nodal targets on ``geometry``.
    Targets are divided by their mean magnitude before training; the
    scale is stored and undone at prediction time.
    """

    def __init__(self, geometry=None, layers=4, width=32, modes=None, q_hidden=128,
                 activation="gelu", lr0=1e-3, batch_size=20, epochs=300,
                 plateau_factor=0.95, min_lr=1e-6, seed=0, verbose=False):
        self.geometry = geometry
        self.layers = layers
        self.width = width
        self.modes = modes
        self.q_hidden = q_hidden
        self.activation = activation
        self.lr0 = lr0
        self.batch_size = batch_size
        self.epochs = epochs
        self.plateau_factor = plateau_factor
        self.min_lr = min_lr
        self.seed = seed
        self.verbose = verbose

    def make_config(self) -> FnoConfig:
        if self.geometry is None:
            raise ConfigError("FourierNeuralOperatorRegressor needs a geometry")
        modes = self.modes or default_modes(self.geometry.ndim)
        return FnoConfig(self.layers, self.width, tuple(modes), self.q_hidden, self.activation,
                         self.lr0, batch_size=self.batch_size, epochs=self.epochs,
                         plateau_factor=self.plateau_factor, min_lr=self.min_lr, seed=self.seed)

    def _xy(self, X, y, geometry):
        X = as_mask_matrix(X)
        x = featurize(X, geometry)
        if y is None:
            return x, None
        y = as_target_matrix(y, X.shape[0])
        return x, geometry.to_grid(y)[:, None] / self.target_scale_

    def fit(self, X, y, X_val=None, y_val=None):
        self.config_ = self.make_config()
        X = as_mask_matrix(X)
        y = as_target_matrix(y, X.shape[0])
        scale = float(np.mean(np.abs(y)))
        if scale == 0:
            raise ZeroTarget("all training targets are zero")
        self.target_scale_ = scale
        x, t = self._xy(X, y, self.geometry)
        xv = tv = None
        if X_val is not None:
            xv, tv = self._xy(X_val, y_val, self.geometry)

        def log(epoch, tr, te, lr):
            if self.verbose:
                print(f"epoch {epoch:4d} train {tr:.4e} test {te:.4e} lr {lr:.3e}", flush=True)

        self.params_, self.history_ = train(x, t, self.config_, xv, tv, callback=log)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, geometry: Geometry | None = None) -> np.ndarray:
        """Nodal predictions; ``geometry`` may differ from the training grid."""
        check_is_fitted(self, "params_")
        geometry = geometry or self.geometry
        x, _ = self._xy(X, None, geometry)
        out = []
        for i in range(0, x.shape[0], self.config_.batch_size):
            out.append(forward(self.params_, x[i:i + self.config_.batch_size], self.config_))
        grid = np.concatenate(out)[:, 0] * self.target_scale_
        return geometry.from_grid(grid)

    def score(self, X, y, sample_weight=None):
        """Negative mean relative L2 error (higher is better)."""
        from .metrics import rel_l2

        return -rel_l2(self.predict(X), y)[0]

    def n_parameters(self, convention="complex") -> int:
        check_is_fitted(self, "params_")
        return count_params(self.params_, convention)


def save_model(model: FourierNeuralOperatorRegressor, path, extra_meta=None) -> None:
    check_is_fitted(model, "params_")
    meta = {
        "type": "fno",
        "tool_version": __version__,
        "config": model.config_.to_dict(),
        "target_scale": model.target_scale_,
        "geometry": model.geometry.describe(),
    }
    meta.update(extra_meta or {})
    arrays = {}
    for k, v in model.params_.items():
        if np.iscomplexobj(v):
            arrays[f"{k}_re"] = v.real
            arrays[f"{k}_im"] = v.imag
        else:
            arrays[k] = v
    h = model.history_
    if h.epoch:
        arrays["loss_history"] = np.column_stack([h.epoch, h.train_loss, h.test_loss, h.lr])
    epds.write(path, meta, arrays)


def load_model(path) -> FourierNeuralOperatorRegressor:
    from .dataset import geometry_from_meta

    meta, arrays = epds.read(path)
    if meta.get("type") != "fno":
        raise ConfigError(f"{path} does not hold an FNO model")
    cfg = FnoConfig(**meta["config"])
    geometry = geometry_from_meta(meta["geometry"], arrays)
    model = FourierNeuralOperatorRegressor(
        geometry, cfg.layers, cfg.width, cfg.modes, cfg.q_hidden, cfg.activation, cfg.lr0,
        cfg.batch_size, cfg.epochs, cfg.plateau_factor, cfg.min_lr, cfg.seed)
    model.config_ = cfg
    model.target_scale_ = meta["target_scale"]
    params = {}
    for name in param_names(cfg.layers):
        if name.startswith("R"):
            params[name] = arrays[f"{name}_re"] + 1j * arrays[f"{name}_im"]
        else:
            params[name] = arrays[name]
    model.params_ = params
    hist = History()
    if "loss_history" in arrays:
        lh = arrays["loss_history"]
        hist = History([int(e) for e in lh[:, 0]], list(lh[:, 1]), list(lh[:, 2]), list(lh[:, 3]))
    model.history_ = hist
    model.n_features_in_ = geometry.n_nodes
    model.meta_ = meta
    return model

