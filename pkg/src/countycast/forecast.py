"""Double-window LSTM with static-feature projection, written directly in numpy.

Network per window: dynamic inputs (exogenous features plus the target's own
history) go through an affine projection into the LSTM; the final hidden
state at each step is concatenated with a projection of the county's static
vector and mapped to next-day target by a linear head. Training uses
teacher forcing inside the input window; forecasts come from an
autoregressive rollout.

All arrays are float64. Parameters live in a dict keyed by
``Wd bd Ws bs W b Wr br``; gate blocks of ``W``/``b`` are ordered
input, forget, candidate, output.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericFault
from .windows import (
    ForecastTask,
    TrainingWindow,
    WindowSet,
    as_window_set,
    chronological_split,
    pretest_windows,
)

CHECKPOINT_FORMAT = "countycast-dwlstm"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("Wd", "bd", "Ws", "bs", "W", "b", "Wr", "br")
WEIGHT_NAMES = ("Wd", "Ws", "W", "Wr")
_STD_FLOOR = 1e-12
TRANSFORMS = ("log1p", "identity")


@dataclass(frozen=True)
class DwlstmConfig:
    w_in: int = 10
    w_out: int = 10
    dynamic_size: int | None = None  # None: taken from the panel at train time
    static_size: int | None = None
    dyn_proj: int = 16
    static_proj: int = 8
    hidden: int = 32
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    weight_quantile: float = 0.9  # theta defaults to this quantile of training targets
    weight_threshold: float | None = None  # explicit theta in target units
    weight_boost: float = 4.0
    l2: float = 1e-4
    clip_norm: float = 5.0
    patience: int = 20
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    forget_bias: float = 1.0
    clamp: bool = True
    target_transform: str = "log1p"  # applied to the target before z-scoring
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(v) for v in self.split))
        for name in ("dyn_proj", "static_proj", "hidden", "epochs", "batch_size", "patience", "w_out"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"DwlstmConfig.{name} must be positive, got {getattr(self, name)}")
        for name in ("dynamic_size", "static_size"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"DwlstmConfig.{name} must be positive, got {v}")
        if self.w_in < 2:
            raise ConfigError("DwlstmConfig.w_in must be >= 2")
        if self.l2 < 0:
            raise ConfigError("DwlstmConfig.l2 must be >= 0")
        if self.weight_boost < 0:
            raise ConfigError("DwlstmConfig.weight_boost must be >= 0")
        if not 0.0 <= self.weight_quantile <= 1.0:
            raise ConfigError("DwlstmConfig.weight_quantile must lie in [0, 1]")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate and clip_norm must be positive")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise ConfigError("split must be three non-negative fractions summing to 1")
        if self.split[0] == 0 or self.split[1] == 0:
            raise ConfigError("train and validation fractions must be positive")
        if self.target_transform not in TRANSFORMS:
            raise ConfigError(f"target_transform must be one of {', '.join(TRANSFORMS)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "DwlstmConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model keys: {', '.join(sorted(extra))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


# ---- normalization ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Normalizer:
    dyn_mean: np.ndarray
    dyn_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray
    target_mean: float
    target_std: float
    transform: str = "identity"

    @classmethod
    def identity(cls, dynamic_size: int, static_size: int) -> "Normalizer":
        return cls(np.zeros(dynamic_size), np.ones(dynamic_size), np.zeros(static_size), np.ones(static_size), 0.0, 1.0)

    @classmethod
    def fit(cls, ws: WindowSet, transform: str = "identity") -> "Normalizer":
        """z-score stats from the (county, day) cells the windows cover,
        counting each cell once."""
        days = ws.start[:, None] + np.arange(ws.w_in + 1)[None, :]
        cells = np.unique(np.stack([np.repeat(ws.county, ws.w_in + 1), days.ravel()]), axis=1)
        key = {(int(c), int(d)) for c, d in cells.T}
        dyn_rows, tgt = {}, {}
        for n in range(len(ws)):
            c, s = int(ws.county[n]), int(ws.start[n])
            for k in range(ws.w_in):
                dyn_rows[(c, s + k)] = ws.dyn[n, k]
                tgt[(c, s + k)] = ws.hist[n, k]
            tgt[(c, s + ws.w_in)] = ws.step_targets[n, -1]
        assert set(tgt) == key
        dyn = np.array([dyn_rows[k] for k in sorted(dyn_rows)])
        t = _forward_transform(np.array([tgt[k] for k in sorted(tgt)]), transform)
        counties = np.unique(ws.county)
        first = {int(c): int(np.flatnonzero(ws.county == c)[0]) for c in counties}
        stat = ws.static[[first[int(c)] for c in counties]]
        tm, tsd = float(t.mean()), float(_safe_std(t))
        # the last dynamic column is the target history, scaled like the target
        return cls(
            np.append(dyn.mean(axis=0), tm), np.append(_safe_std(dyn), tsd),
            stat.mean(axis=0), _safe_std(stat), tm, tsd, transform,
        )

    def dyn(self, x):
        """Normalize dynamic rows whose last column is the target history."""
        x = np.array(x, dtype=float)
        x[..., -1] = _forward_transform(x[..., -1], self.transform)
        return (x - self.dyn_mean) / self.dyn_std

    def static(self, s):
        return (s - self.static_mean) / self.static_std

    def target(self, y):
        return (_forward_transform(y, self.transform) - self.target_mean) / self.target_std

    def denormalize_target(self, z):
        u = np.asarray(z, dtype=float) * self.target_std + self.target_mean
        return np.expm1(u) if self.transform == "log1p" else u

    def to_dict(self) -> dict:
        return {
            "dyn_mean": self.dyn_mean.tolist(),
            "dyn_std": self.dyn_std.tolist(),
            "static_mean": self.static_mean.tolist(),
            "static_std": self.static_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "transform": self.transform,
        }

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(
            np.array(d["dyn_mean"], dtype=float),
            np.array(d["dyn_std"], dtype=float),
            np.array(d["static_mean"], dtype=float),
            np.array(d["static_std"], dtype=float),
            float(d["target_mean"]),
            float(d["target_std"]),
            d.get("transform", "identity"),
        )


def _forward_transform(y, transform: str):
    y = np.asarray(y, dtype=float)
    if transform == "log1p":
        # counts are >= 0; the floor keeps slightly negative inputs finite
        return np.log1p(np.maximum(y, -0.5))
    return y


def _safe_std(x):
    sd = np.asarray(x, dtype=float).std(axis=0)
    return np.where(sd < _STD_FLOOR, 1.0, sd)


# ---- model ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DwlstmModel:
    config: DwlstmConfig
    params: dict
    norm: Normalizer
    theta: float  # weighting threshold, target units
    objective: str = ""
    dynamic_names: tuple[str, ...] = ()
    static_names: tuple[str, ...] = ()
    log: tuple[tuple[int, float, float], ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        for name in PARAM_NAMES:
            if name not in self.params:
                raise DataError(f"missing parameter {name}")
            a = self.params[name]
            if a.shape != shapes[name]:
                raise DataError(f"parameter {name} has shape {a.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(a)):
                raise NumericFault(f"parameter {name} is not finite")

    @property
    def dynamic_size(self) -> int:
        return self.config.dynamic_size

    @property
    def static_size(self) -> int:
        return self.config.static_size

    def with_params(self, params) -> "DwlstmModel":
        return replace(self, params={k: np.array(v, dtype=float) for k, v in params.items()})


def param_shapes(cfg: DwlstmConfig) -> dict:
    if cfg.dynamic_size is None or cfg.static_size is None:
        raise ConfigError("dynamic_size and static_size must be set to build a model")
    H, P, S = cfg.hidden, cfg.dyn_proj, cfg.static_proj
    return {
        "Wd": (P, cfg.dynamic_size),
        "bd": (P,),
        "Ws": (S, cfg.static_size),
        "bs": (S,),
        "W": (4 * H, P + H),
        "b": (4 * H,),
        "Wr": (1, H + S),
        "br": (1,),
    }


def init_params(cfg: DwlstmConfig, rng: np.random.Generator) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; forget-gate bias set to ``forget_bias``."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        fan_in = {"Wd": cfg.dynamic_size, "bd": cfg.dynamic_size, "Ws": cfg.static_size, "bs": cfg.static_size}.get(
            name, cfg.dyn_proj + cfg.hidden if name in ("W", "b") else cfg.hidden + cfg.static_proj
        )
        bound = 1.0 / math.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape)
    H = cfg.hidden
    out["b"][H: 2 * H] = cfg.forget_bias
    return out


def zero_params(cfg: DwlstmConfig) -> dict:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def init_model(cfg: DwlstmConfig, seed: int | None = None, norm: Normalizer | None = None, theta: float = 0.0) -> DwlstmModel:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    norm = norm or Normalizer.identity(cfg.dynamic_size, cfg.static_size)
    return DwlstmModel(cfg, init_params(cfg, rng), norm, theta)


# ---- building blocks --------------------------------------------------------


def project(v, weights, bias) -> np.ndarray:
    """Affine map ``weights @ v + bias``; ``v`` may carry leading batch axes."""
    v = np.asarray(v, dtype=float)
    weights = np.asarray(weights, dtype=float)
    bias = np.asarray(bias, dtype=float)
    if weights.ndim != 2 or v.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise DataError(f"dimension mismatch: input {v.shape}, weights {weights.shape}, bias {bias.shape}")
    return v @ weights.T + bias


def _gates(x, h, c, W, b):
    H = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    s = expit(z)
    i = s[..., :H]
    f = s[..., H: 2 * H]
    g = np.tanh(z[..., 2 * H: 3 * H])
    o = s[..., 3 * H:]
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return i, f, g, o, c_new, tc, o * tc


def lstm_step(x, h, c, params):
    """One LSTM cell update. ``params`` holds ``W`` (4H, X+H) and ``b`` (4H,)."""
    W = np.asarray(params["W"], dtype=float)
    b = np.asarray(params["b"], dtype=float)
    x, h, c = (np.asarray(a, dtype=float) for a in (x, h, c))
    H = h.shape[-1]
    if c.shape != h.shape or W.shape != (4 * H, x.shape[-1] + H) or b.shape != (4 * H,):
        raise DataError(f"dimension mismatch: x {x.shape}, h {h.shape}, c {c.shape}, W {W.shape}")
    *_, c_new, _, h_new = _gates(x, h, c, W, b)
    return h_new, c_new


def _head(h, sp, params):
    return np.concatenate([h, sp], axis=-1) @ params["Wr"][0] + params["br"][0]


@dataclass(frozen=True, eq=False)
class ForwardResult:
    """Per-step predictions (normalized target units) and the final state."""

    pred: np.ndarray  # (N, w_in)
    h: np.ndarray
    c: np.ndarray
    cache: dict

    def predictions(self, model: DwlstmModel) -> np.ndarray:
        return model.norm.denormalize_target(self.pred)


def model_inputs(model: DwlstmModel, ws: WindowSet):
    """Normalized dynamic sequence (N, w_in, D_dyn) and static matrix (N, S)."""
    dyn = model.norm.dyn(np.concatenate([ws.dyn, ws.hist[..., None]], axis=2))
    stat = model.norm.static(ws.static)
    if dyn.shape[2] != model.dynamic_size or stat.shape[1] != model.static_size:
        raise DataError(
            f"window has {dyn.shape[2]} dynamic / {stat.shape[1]} static inputs, "
            f"model expects {model.dynamic_size} / {model.static_size}"
        )
    return dyn, stat


def forward(window, model: DwlstmModel) -> ForwardResult:
    ws = as_window_set(window)
    X, S = model_inputs(model, ws)
    return _forward_arrays(X, S, model.params)


def _forward_arrays(X, S, params) -> ForwardResult:
    N, T, _ = X.shape
    H = params["W"].shape[0] // 4
    XP = project(X, params["Wd"], params["bd"])
    sp = project(S, params["Ws"], params["bs"])
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    steps = []
    pred = np.empty((N, T))
    for t in range(T):
        i, f, g, o, c_new, tc, h_new = _gates(XP[:, t], h, c, params["W"], params["b"])
        steps.append((h, c, i, f, g, o, tc, h_new))
        h, c = h_new, c_new
        pred[:, t] = _head(h, sp, params)
        if not np.all(np.isfinite(pred[:, t])):
            raise NumericFault("non-finite value in forward pass", step=t)
    return ForwardResult(pred, h, c, {"X": X, "S": S, "XP": XP, "sp": sp, "steps": steps})


def rollout(model: DwlstmModel, window, w_out: int | None = None, clamp: bool | None = None) -> np.ndarray:
    """Autoregressive forecast of ``w_out`` days following the input window.

    The first forecast is the network's prediction after the last input day.
    Each forecast (after clamping) is fed back as the next step's target
    input while the exogenous inputs stay at their last observed value.
    Returns target units, shape (w_out,) for a single window or (N, w_out).
    """
    single = isinstance(window, TrainingWindow)
    ws = as_window_set(window)
    w_out = model.config.w_out if w_out is None else int(w_out)
    clamp = model.config.clamp if clamp is None else clamp
    N = len(ws)
    out = np.zeros((N, max(w_out, 0)))
    if w_out > 0:
        fr = forward(ws, model)
        p = model.params
        X, _ = model_inputs(model, ws)
        exog = X[:, -1, :-1]
        sp = fr.cache["sp"]
        y, h, c = fr.pred[:, -1], fr.h, fr.c
        for k in range(w_out):
            v = model.norm.denormalize_target(y)
            if clamp:
                v = np.maximum(v, 0.0)
            out[:, k] = v
            if k + 1 == w_out:
                break
            x = np.concatenate([exog, model.norm.target(v)[:, None]], axis=1)
            h, c = lstm_step(project(x, p["Wd"], p["bd"]), h, c, p)
            y = _head(h, sp, p)
            if not np.all(np.isfinite(y)):
                raise NumericFault("non-finite value in rollout", step=k + 1)
    return out[0] if single else out


# ---- loss and gradients -----------------------------------------------------


def loss_weights(target, theta: float, alpha: float) -> np.ndarray:
    return 1.0 + alpha * (np.asarray(target) > theta)


def weighted_mse(pred, target, theta: float, alpha: float, lam: float, params=()) -> float:
    """sum(w * (pred - target)^2) / sum(w) + lam * sum of squared weights.

    ``params`` is either a parameter dict (only the weight matrices are
    penalized, biases are not) or an iterable of arrays to penalize.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DataError(f"length mismatch: {pred.shape} vs {target.shape}")
    w = loss_weights(target, theta, alpha)
    data = float(np.sum(w * (pred - target) ** 2) / np.sum(w)) if pred.size else 0.0
    return data + lam * _sq_norm(params)


def _sq_norm(params) -> float:
    arrays = [params[k] for k in WEIGHT_NAMES] if isinstance(params, Mapping) else list(params)
    return float(sum(np.sum(np.asarray(a) ** 2) for a in arrays))


def normalized_targets(model: DwlstmModel, ws: WindowSet):
    y = model.norm.target(ws.step_targets)
    return y, float(model.norm.target(model.theta))


def window_loss(window, model: DwlstmModel) -> float:
    ws = as_window_set(window)
    fr = forward(ws, model)
    y, theta = normalized_targets(model, ws)
    cfg = model.config
    return weighted_mse(fr.pred, y, theta, cfg.weight_boost, cfg.l2, model.params)


def backward(window, model: DwlstmModel, result: ForwardResult | None = None):
    """Exact gradients of :func:`window_loss` for every parameter.

    Returns ``(grads, loss)``. Pass the :class:`ForwardResult` of the same
    window to skip recomputing the forward pass.
    """
    ws = as_window_set(window)
    if result is None:
        result = forward(ws, model)
    y, theta = normalized_targets(model, ws)
    cfg = model.config
    return _backward_arrays(result, y, theta, cfg.weight_boost, cfg.l2, model.params)


def _backward_arrays(fr: ForwardResult, y, theta, alpha, lam, p):
    X, S, XP, sp = fr.cache["X"], fr.cache["S"], fr.cache["XP"], fr.cache["sp"]
    N, T, _ = X.shape
    H = p["W"].shape[0] // 4
    w = loss_weights(y, theta, alpha)
    wsum = w.sum()
    resid = fr.pred - y
    loss = float(np.sum(w * resid**2) / wsum) + lam * _sq_norm(p)
    dy = 2.0 * w * resid / wsum  # (N, T)

    g = {k: np.zeros_like(v) for k, v in p.items()}
    Wr_h, Wr_s = p["Wr"][0, :H], p["Wr"][0, H:]
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H))
    dsp = np.zeros_like(sp)
    dXP = np.zeros_like(XP)
    W = p["W"]
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, gg, o, tc, h = fr.cache["steps"][t]
        d = dy[:, t]
        g["Wr"][0] += np.concatenate([d @ h, d @ sp])
        g["br"][0] += d.sum()
        dsp += d[:, None] * Wr_s
        dh = dh_next + d[:, None] * Wr_h
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * gg
        dgg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dgg * (1.0 - gg * gg), do * o * (1.0 - o)], axis=1
        )
        g["W"] += dz.T @ np.concatenate([XP[:, t], h_prev], axis=1)
        g["b"] += dz.sum(axis=0)
        dcat = dz @ W
        dXP[:, t] = dcat[:, : XP.shape[2]]
        dh_next = dcat[:, XP.shape[2]:]
    flatX = X.reshape(N * T, -1)
    flatD = dXP.reshape(N * T, -1)
    g["Wd"] += flatD.T @ flatX
    g["bd"] += flatD.sum(axis=0)
    g["Ws"] += dsp.T @ S
    g["bs"] += dsp.sum(axis=0)
    for k in WEIGHT_NAMES:
        g[k] += 2.0 * lam * p[k]
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise NumericFault(f"non-finite gradient for {k}")
    return g, loss


# ---- training ---------------------------------------------------------------


class TrainingDiverged(NumericFault):
    """Loss became non-finite; ``model`` holds the last good parameters."""

    def __init__(self, message, model, step=None):
        super().__init__(message, step)
        self.model = model


@dataclass
class _Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        self.t += 1
        for k in PARAM_NAMES:
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in PARAM_NAMES))
    if total > max_norm:
        s = max_norm / total
        for k in PARAM_NAMES:
            grads[k] = grads[k] * s
    return total


def _set_loss(X, S, y, theta, cfg, params) -> float:
    if X.shape[0] == 0:
        return math.nan
    fr = _forward_arrays(X, S, params)
    return weighted_mse(fr.pred, y, theta, cfg.weight_boost, cfg.l2, params)


def train(panel, task: ForecastTask, config: DwlstmConfig | None = None) -> DwlstmModel:
    """Fit on windows that end before the task's test period.

    Those windows are split chronologically by start date into
    train/validation/test blocks (``config.split``). Normalization stats and
    the weighting threshold come from the train block only. The returned
    model carries the parameters with the best validation loss; its log has
    one row per epoch, epoch 0 being the untrained initialization.
    """
    config = config or DwlstmConfig(w_in=task.w_in, w_out=task.w_out)
    panel = task.apply_filters(panel)
    if panel.n_counties < 2:
        raise DataError("training needs at least 2 counties")
    if panel.n_days < task.w_in + task.w_out + 10:
        raise DataError(f"panel has {panel.n_days} days, need at least {task.w_in + task.w_out + 10}")
    config = replace(
        config,
        w_in=task.w_in,
        w_out=task.w_out,
        dynamic_size=len(panel.dynamic_names) + 1,
        static_size=len(panel.static_names),
    )
    target = panel.outcome(task.objective)
    ts, _ = task.test_range(panel)
    pre = pretest_windows(panel, target, task, ts)
    tr, va, te = chronological_split(pre, config.split)
    if len(tr) == 0 or len(va) == 0:
        raise DataError("not enough windows for a train/validation split")

    norm = Normalizer.fit(tr, config.target_transform)
    theta = config.weight_threshold
    if theta is None:
        theta = float(np.quantile(tr.step_targets, config.weight_quantile))
    rng = np.random.default_rng(config.seed)
    base = DwlstmModel(
        config,
        init_params(config, rng),
        norm,
        theta,
        objective=task.objective,
        dynamic_names=tuple(panel.dynamic_names) + (task.objective,),
        static_names=tuple(panel.static_names),
        meta={
            "train_windows": len(tr),
            "validation_windows": len(va),
            "test_windows": len(te),
            "train_last_day": str(panel.dates[tr.last_day()]),
            "test_start": str(panel.dates[ts]),
        },
    )
    theta_n = float(norm.target(theta))
    data = {}
    for name, ws in (("train", tr), ("val", va), ("test", te)):
        X, S = model_inputs(base, ws) if len(ws) else (np.zeros((0, config.w_in, config.dynamic_size)), None)
        data[name] = (X, S, norm.target(ws.step_targets))

    params = {k: v.copy() for k, v in base.params.items()}
    adam = _Adam(config.learning_rate)
    log = [(0, _set_loss(*data["train"], theta_n, config, params), _set_loss(*data["val"], theta_n, config, params))]
    best_val, best_params, best_epoch = log[0][2], {k: v.copy() for k, v in params.items()}, 0
    Xtr, Str, ytr = data["train"]
    n = Xtr.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            try:
                fr = _forward_arrays(Xtr[idx], Str[idx], params)
                grads, _ = _backward_arrays(fr, ytr[idx], theta_n, config.weight_boost, config.l2, params)
            except NumericFault as exc:
                raise TrainingDiverged(f"training diverged in epoch {epoch}", base.with_params(best_params), exc.step)
            clip_gradients(grads, config.clip_norm)
            adam.step(params, grads)
        try:
            tl = _set_loss(*data["train"], theta_n, config, params)
            vl = _set_loss(*data["val"], theta_n, config, params)
        except NumericFault:
            tl = vl = math.nan
        if not (math.isfinite(tl) and math.isfinite(vl)):
            raise TrainingDiverged(f"loss is not finite in epoch {epoch}", base.with_params(best_params))
        log.append((epoch, tl, vl))
        if vl < best_val:
            best_val, best_epoch = vl, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= config.patience:
            break

    final_train = _set_loss(*data["train"], theta_n, config, best_params)
    test_loss = _set_loss(*data["test"], theta_n, config, best_params) if len(te) else math.nan
    meta = dict(base.meta, best_epoch=best_epoch, final_train_loss=final_train, test_loss=test_loss)
    return replace(base, params=best_params, log=tuple(log), meta=meta)


def final_train_loss(model: DwlstmModel) -> float:
    return float(model.meta["final_train_loss"])


# ---- persistence ------------------------------------------------------------


def save_checkpoint(model: DwlstmModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "objective": model.objective,
        "dynamic_names": list(model.dynamic_names),
        "static_names": list(model.static_names),
        "theta": model.theta,
        "normalization": model.norm.to_dict(),
        "params": {k: {"shape": list(model.params[k].shape), "data": model.params[k].ravel().tolist()} for k in PARAM_NAMES},
        "log": [list(r) for r in model.log],
        "meta": model.meta,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | os.PathLike) -> DwlstmModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path} has format {doc.get('format')!r} version {doc.get('format_version')!r}; "
            f"expected {CHECKPOINT_FORMAT!r} version {CHECKPOINT_VERSION}"
        )
    cfg = DwlstmConfig.from_dict(dict(doc["config"], split=tuple(doc["config"]["split"])))
    params = {}
    for k in PARAM_NAMES:
        rec = doc["params"][k]
        a = np.array(rec["data"], dtype=float)
        if a.size != math.prod(rec["shape"]):
            raise DataError(f"checkpoint parameter {k} has {a.size} values for shape {rec['shape']}")
        params[k] = a.reshape(rec["shape"])
    return DwlstmModel(
        cfg,
        params,
        Normalizer.from_dict(doc["normalization"]),
        float(doc["theta"]),
        objective=doc["objective"],
        dynamic_names=tuple(doc["dynamic_names"]),
        static_names=tuple(doc["static_names"]),
        log=tuple((int(e), float(a), float(b)) for e, a, b in doc["log"]),
        meta=doc["meta"],
    )


def write_training_log(model: DwlstmModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tl, vl in model.log:
            w.writerow([e, repr(tl), repr(vl)])
    return path
