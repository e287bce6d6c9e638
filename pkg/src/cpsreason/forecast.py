"""One-step-ahead forecasters for the four feature property classes."""

from __future__ import annotations

import itertools
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from sklearn.ensemble import RandomForestRegressor
from torch import nn

ARTIFACT_FORMAT = "cpsreason-model"
ARTIFACT_VERSION = 1

# search spaces per property class
TREE_GRID_FULL = {"n_estimators": [1, 50, 100, 250, 500, 1000], "max_features": [1, 3, 5, 7, 9, 11],
                  "target": ["change"]}
WINDOW_GRID_FULL = {"arch": ["lstm"], "layers": [1, 2, 3], "batch": [32, 64], "epochs": [100, 200, 500],
                    "dropout": [0.0, 0.2], "nodes": [20, 50, 100]}
TREE_GRID_FAST = {"n_estimators": [50], "max_features": [3, 11], "target": ["change"]}
WINDOW_GRID_FAST = {"arch": ["mlp"], "layers": [1], "batch": [64], "epochs": [100], "dropout": [0.0],
                    "nodes": [20]}
GRID_PROFILES = {"full": {"tree": TREE_GRID_FULL, "window": WINDOW_GRID_FULL},
                 "fast": {"tree": TREE_GRID_FAST, "window": WINDOW_GRID_FAST}}


class ForecastError(ValueError):
    pass


class ClassMisassignmentError(ForecastError):
    """A constant forecaster was asked to fit a non-constant series."""


class InsufficientDataError(ForecastError):
    pass


class TrainingError(ForecastError):
    """Optimisation diverged (non-finite loss)."""


def expand_grid(grid: Dict[str, Sequence]) -> List[dict]:
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    train_min: float
    train_max: float

    def __post_init__(self):
        if not self.train_max >= self.train_min:
            raise ValueError(f"train_max {self.train_max} < train_min {self.train_min}")

    @classmethod
    def fit(cls, values) -> "ScalerParams":
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        if len(v) == 0:
            raise ForecastError("cannot fit a scaler on an all-NaN series")
        return cls(float(v.min()), float(v.max()))

    @property
    def span(self) -> float:
        # a constant training series keeps unit span so departures stay visible
        d = self.train_max - self.train_min
        return d if d > 0 else 1.0

    def scale(self, x):
        return (np.asarray(x, dtype=np.float64) - self.train_min) / self.span

    def unscale(self, y):
        return np.asarray(y, dtype=np.float64) * self.span + self.train_min


def scale(x, p: ScalerParams):
    return p.scale(x)


def unscale(y, p: ScalerParams):
    return p.unscale(y)


# --------------------------------------------------------------------------
# design matrices
# --------------------------------------------------------------------------


def lag_matrix(x: np.ndarray, w: int) -> np.ndarray:
    """Row i holds x[i .. i+w-1], the history for target x[i+w]."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= w:
        raise InsufficientDataError(f"need more than w={w} samples, got {len(x)}")
    return np.lib.stride_tricks.sliding_window_view(x, w)[:-1]


def design(x: np.ndarray, covariates: Optional[np.ndarray], w: int):
    """Inputs [x_{t-w..t-1}, z_t] and targets x_t for t = w..n-1."""
    lags = lag_matrix(x, w)
    y = np.asarray(x, dtype=np.float64)[w:]
    if covariates is None or covariates.shape[1] == 0:
        return lags, y
    return np.hstack([lags, covariates[w:]]), y


# --------------------------------------------------------------------------
# forecasters
# --------------------------------------------------------------------------


class Forecaster:
    kind = "base"

    def __init__(self, w: int, n_cov: int, hp: Optional[dict] = None):
        self.w = int(w)
        self.n_cov = int(n_cov)
        self.hp = dict(hp or {})

    def predict_batch(self, lags: np.ndarray, covs: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def predict(self, lags, covs=()) -> float:
        lags = np.asarray(lags, dtype=np.float64)
        covs = np.asarray(covs, dtype=np.float64)
        if lags.shape != (self.w,) or covs.shape != (self.n_cov,):
            raise ForecastError(f"expected {self.w} lags and {self.n_cov} covariates, got {lags.shape[0]} and "
                                f"{covs.size}")
        return float(self.predict_batch(lags[None, :], covs[None, :] if self.n_cov else None)[0])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(w={self.w}, n_cov={self.n_cov}, hp={self.hp})"


class ConstantForecaster(Forecaster):
    kind = "Constant"

    def __init__(self, value: float, w: int = 1, n_cov: int = 0):
        super().__init__(w, n_cov)
        self.value = float(value)

    def predict_batch(self, lags, covs=None):
        return np.full(len(lags), self.value)


def fit_constant(train, w: int = 1, n_cov: int = 0) -> ConstantForecaster:
    v = np.asarray(train, dtype=np.float64)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        raise InsufficientDataError("constant fit needs at least one finite sample")
    if np.any(v != v[0]):
        raise ClassMisassignmentError(f"series is not constant (range {v.min()}..{v.max()})")
    return ConstantForecaster(v[0], w, n_cov)


class TreeEnsembleForecaster(Forecaster):
    kind = "TreeEnsemble"

    def __init__(self, model: RandomForestRegressor, w: int, n_cov: int, hp: dict):
        super().__init__(w, n_cov, hp)
        self.model = model
        self.target = hp.get("target", "level")

    def predict_batch(self, lags, covs=None):
        X = lags if covs is None or self.n_cov == 0 else np.hstack([lags, covs])
        out = self.model.predict(X)
        return lags[:, -1] + out if self.target == "change" else out


def fit_tree_ensemble(train, covariates: Optional[np.ndarray], w: int, hp: dict, seed: int = 0
                      ) -> TreeEnsembleForecaster:
    """Bagged regression trees over lags plus covariates (all in scaled units).

    ``hp["target"]`` picks what the trees learn: "level" (x_t itself) or
    "change" (x_t minus the last lag, added back at prediction time). Change
    targets turn ramps into near-constant targets, so forecasts do not snap to
    the exact levels seen in training.
    """
    target = hp.get("target", "level")
    if target not in ("level", "change"):
        raise ForecastError(f"unknown tree target {target!r}")
    n_cov = 0 if covariates is None else covariates.shape[1]
    if covariates is not None and len(covariates) != len(train):
        raise ForecastError("covariates are not aligned with the series")
    X, y = design(train, covariates, w)
    ok = np.isfinite(X).all(axis=1) & np.isfinite(y)
    if ok.sum() == 0:
        raise InsufficientDataError("no complete training rows")
    model = RandomForestRegressor(n_estimators=int(hp["n_estimators"]),
                                  max_features=min(int(hp["max_features"]), X.shape[1]),
                                  random_state=seed, n_jobs=1)
    model.fit(X[ok], y[ok] - X[ok, w - 1] if target == "change" else y[ok])
    return TreeEnsembleForecaster(model, w, n_cov, hp)


class _MLP(nn.Module):
    def __init__(self, w: int, nodes: int, layers: int, dropout: float):
        super().__init__()
        blocks: List[nn.Module] = []
        width = w
        for _ in range(layers):
            blocks += [nn.Linear(width, nodes), nn.ReLU(), nn.Dropout(dropout)]
            width = nodes
        self.body = nn.Sequential(*blocks)
        self.head = nn.Linear(width, 1)

    def forward(self, x):
        return self.head(self.body(x)).squeeze(-1)


class _LSTM(nn.Module):
    def __init__(self, w: int, nodes: int, layers: int, dropout: float):
        super().__init__()
        self.rnn = nn.LSTM(1, nodes, num_layers=layers, batch_first=True, dropout=dropout if layers > 1 else 0.0)
        self.head = nn.Linear(nodes, 1)

    def forward(self, x):
        out, _ = self.rnn(x.unsqueeze(-1))
        return self.head(out[:, -1]).squeeze(-1)


# scaled history is clipped to this band before it reaches a network, so a burst
# far outside the training range cannot drive forecasts astray for a whole window
WINDOW_INPUT_CLIP = (-0.5, 1.5)


class WindowRegressor(Forecaster):
    kind = "WindowRegressor"

    def __init__(self, net: nn.Module, w: int, hp: dict, clip=WINDOW_INPUT_CLIP):
        super().__init__(w, 0, hp)
        self.net = net
        self.clip = tuple(clip)

    def predict_batch(self, lags, covs=None):
        self.net.eval()
        x = np.clip(np.asarray(lags, dtype=np.float64), *self.clip)
        with torch.no_grad():
            out = self.net(torch.as_tensor(x, dtype=torch.float32))
        return out.double().numpy()


def fit_window_regressor(train, w: int, hp: dict, seed: int = 0, lr: float = 1e-3) -> WindowRegressor:
    """Autoregressive network over the last ``w`` values, trained with Adam on MSE."""
    X, y = design(train, None, w)
    ok = np.isfinite(X).all(axis=1) & np.isfinite(y)
    X, y = np.clip(X[ok], *WINDOW_INPUT_CLIP), y[ok]
    if len(y) == 0:
        raise InsufficientDataError("no complete training windows")
    torch.set_num_threads(1)  # single-threaded kernels keep results bit-identical
    torch.manual_seed(seed)
    arch = hp.get("arch", "mlp")
    cls = {"mlp": _MLP, "lstm": _LSTM}[arch]
    net = cls(w, int(hp["nodes"]), int(hp["layers"]), float(hp["dropout"]))
    # start from the training mean so early epochs cannot wander far off
    nn.init.zeros_(net.head.weight)
    with torch.no_grad():
        net.head.bias.fill_(float(y.mean()))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    batch = int(hp["batch"])
    loss_fn = nn.MSELoss()
    net.train()
    for _ in range(int(hp["epochs"])):
        perm = torch.randperm(len(yt), generator=gen)
        for i in range(0, len(yt), batch):
            idx = perm[i:i + batch]
            opt.zero_grad()
            loss = loss_fn(net(Xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss with hp={hp}")
            loss.backward()
            opt.step()
    net.eval()
    return WindowRegressor(net, w, hp)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_artifact(obj, path, provenance: Optional[dict] = None) -> None:
    header = {"format": ARTIFACT_FORMAT, "version": ARTIFACT_VERSION, "provenance": provenance or {}}
    with open(path, "wb") as fh:
        pickle.dump(header, fh)
        pickle.dump(obj, fh)


def load_artifact(path):
    with open(path, "rb") as fh:
        header = pickle.load(fh)
        if not isinstance(header, dict) or header.get("format") != ARTIFACT_FORMAT:
            raise ForecastError(f"{path}: not a model artifact")
        if header.get("version") != ARTIFACT_VERSION:
            raise ForecastError(f"{path}: unsupported artifact version {header.get('version')}")
        return pickle.load(fh)
