"""Per-feature detection pipelines: distances, polytypic flags, thresholds and tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .featurize import TargetFeatureSeries, static_fraction
from .forecast import (
    GRID_PROFILES, ClassMisassignmentError, ForecastError, Forecaster, ScalerParams, expand_grid, fit_constant,
    fit_tree_ensemble, fit_window_regressor,
)

logger = logging.getLogger(__name__)

FULL, REDUCED = "full", "reduced"


class TuningError(RuntimeError):
    """One or more features could not be tuned.

    ``failures`` maps feature ids to reasons; ``pipelines`` holds the ones
    that did succeed so callers can still use them.
    """

    def __init__(self, failures: Dict[str, str], pipelines: Optional[list] = None):
        names = ", ".join(sorted(failures))
        super().__init__(f"tuning failed for {len(failures)} feature(s): {names}")
        self.failures = failures
        self.pipelines = pipelines or []


# --------------------------------------------------------------------------
# distance and decision
# --------------------------------------------------------------------------


def nan_distance(pred) -> np.ndarray:
    return np.maximum(1.0, np.abs(pred))


def averaged_distance(truth, preds) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if truth.shape != preds.shape:
        raise ValueError(f"window length mismatch: {truth.shape} vs {preds.shape}")
    if truth.size == 0:
        raise ValueError("empty window")
    d = np.where(np.isnan(truth), nan_distance(preds), np.abs(truth - preds))
    return float(d.mean())


def disrupted(window, mode: str) -> bool:
    w = np.asarray(window, dtype=np.float64)
    if np.isnan(w).any():
        return True
    if mode == FULL and len(w) > 1:
        return bool(np.any(w[1:] == w[:-1]))
    return False


def decide_flag(eps: float, tau: float, x_t: float, xhat_t: float, window, mode: str = FULL) -> int:
    """Five-valued flag: 0 normal, +-1 deviation, +-2 deviation with disrupted data."""
    if not eps > tau:
        return 0
    sign = 1 if x_t > xhat_t else -1
    return sign * (2 if disrupted(window, mode) else 1)


def _rolling_mean(d: np.ndarray, l: int) -> np.ndarray:
    """Mean over the trailing l values; NaN while any of them is undefined."""
    out = np.full(len(d), np.nan)
    if len(d) >= l:
        bad = np.isnan(d)
        c = np.cumsum(np.insert(np.where(bad, 0.0, d), 0, 0.0))
        nb = np.cumsum(np.insert(bad.astype(np.int64), 0, 0))
        sums = (c[l:] - c[:-l]) / l
        out[l - 1:] = np.where(nb[l:] - nb[:-l] == 0, sums, np.nan)
    return out


def _window_flags(x: np.ndarray, l: int, mode: str) -> np.ndarray:
    """Disruption predicate of the l-window ending at each index."""
    n = len(x)
    bad = np.isnan(x).astype(np.int64)
    if mode == FULL:
        eq = np.zeros(n, dtype=np.int64)
        eq[1:] = x[1:] == x[:-1]
        # pairs fully inside the window ending at t: (t-l+1, t-l+2) ... (t-1, t)
        eq_c = np.cumsum(np.insert(eq, 0, 0))
    c = np.cumsum(np.insert(bad, 0, 0))
    out = np.zeros(n, dtype=bool)
    t = np.arange(l - 1, n)
    out[t] = (c[t + 1] - c[t + 1 - l]) > 0
    if mode == FULL and l > 1:
        out[t] |= (eq_c[t + 1] - eq_c[t + 2 - l]) > 0
    return out


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


@dataclass
class DetectionPipeline:
    feature_id: str
    property_class: str
    forecaster: Forecaster
    scaler: ScalerParams
    w: int
    l: int = 10
    f: float = 1.5
    max_test_distance: float = 0.0
    decision_mode: str = FULL
    recovery_substitution: bool = False
    d_c: Optional[float] = None
    hp: dict = field(default_factory=dict)
    cv_score: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.l < 1 or self.w < 1:
            raise ValueError("l and w must be at least 1")
        if not self.f > 1:
            raise ValueError("threshold factor must exceed 1")
        if self.decision_mode not in (FULL, REDUCED):
            raise ValueError(f"unknown decision mode {self.decision_mode}")

    @property
    def tau(self) -> float:
        return self.f * self.max_test_distance

    @property
    def warmup(self) -> int:
        return self.w + self.l

    def summary(self) -> dict:
        return {"feature_id": self.feature_id, "class": self.property_class, "model": self.forecaster.kind,
                "hp": self.hp, "w": self.w, "l": self.l, "f": self.f, "max_test_distance": self.max_test_distance,
                "tau": self.tau, "decision_mode": self.decision_mode,
                "scaler": [self.scaler.train_min, self.scaler.train_max], "cv_score": self.cv_score,
                "notes": list(self.notes)}


@dataclass
class PipelineOutput:
    truth: np.ndarray  # scaled observations
    preds: np.ndarray  # scaled one-step forecasts (NaN in the first w seconds)
    eps: np.ndarray  # averaged distance (NaN before it is defined)
    flags: np.ndarray  # int8, 0 inside warm-up
    warmup: np.ndarray  # bool


def _covariate_matrix(series: TargetFeatureSeries) -> Optional[np.ndarray]:
    if not series.covariates:
        return None
    return np.column_stack([c.values for c in series.covariates])


def _predict_all(p: DetectionPipeline, xs: np.ndarray, covs: Optional[np.ndarray]):
    """One-step forecasts with NaN lags replaced by earlier forecasts."""
    n, w = len(xs), p.w
    preds = np.full(n, np.nan)
    filled = xs.copy()
    if n <= w:
        return preds, filled
    lags = np.lib.stride_tricks.sliding_window_view(xs, w)[:-1]
    clean = np.isfinite(lags).all(axis=1)
    idx = np.flatnonzero(clean) + w
    if len(idx):
        preds[idx] = p.forecaster.predict_batch(lags[clean], covs[idx] if covs is not None else None)
    nan_at = np.isnan(xs) & np.isfinite(preds)
    filled[nan_at] = preds[nan_at]
    for t in np.flatnonzero(~clean) + w:
        preds[t] = p.forecaster.predict_batch(filled[None, t - w:t], covs[None, t] if covs is not None else None)[0]
        if np.isnan(xs[t]):
            filled[t] = preds[t]
    return preds, filled


def run_pipeline(p: DetectionPipeline, series: TargetFeatureSeries) -> PipelineOutput:
    x = np.asarray(series.values, dtype=np.float64)
    covs = _covariate_matrix(series)
    xs = p.scaler.scale(x)
    n = len(xs)
    preds, filled = _predict_all(p, xs, covs)
    dist = np.where(np.isnan(xs), nan_distance(preds), np.abs(xs - preds))
    eps = _rolling_mean(dist, p.l)
    flags = _flags_from(p, xs, preds, eps)
    if p.recovery_substitution:
        nz = np.flatnonzero(flags)
        if len(nz):
            preds, eps, flags = _recover_from(p, xs, covs, preds, dist, eps, flags, int(nz[0]))
    warm = np.zeros(n, dtype=bool)
    warm[:min(p.warmup, n)] = True
    flags[warm] = 0
    return PipelineOutput(xs, preds, eps, flags, warm)


def _flags_from(p: DetectionPipeline, xs, preds, eps) -> np.ndarray:
    n = len(xs)
    flags = np.zeros(n, dtype=np.int8)
    valid = np.isfinite(eps)
    hit = valid & (np.where(valid, eps, 0.0) > p.tau)
    sign = np.where(xs > preds, 1, -1)
    mag = np.where(_window_flags(xs, p.l, p.decision_mode), 2, 1)
    flags[hit] = (sign * mag)[hit]
    flags[:min(p.warmup, n)] = 0
    return flags


def _recover_from(p, xs, covs, preds, dist, eps, flags, t0):
    """Sequential pass where flagged observations are replaced by forecasts in later lag windows."""
    n, w, l = len(xs), p.w, p.l
    preds, dist, eps, flags = preds.copy(), dist.copy(), eps.copy(), flags.copy()
    filled = np.where(np.isnan(xs), preds, xs)
    filled[:t0][np.isnan(filled[:t0])] = 0.0
    for t in range(t0, n):
        if t >= w:
            preds[t] = p.forecaster.predict_batch(filled[None, t - w:t], covs[None, t] if covs is not None else None)[0]
        dist[t] = nan_distance(preds[t]) if np.isnan(xs[t]) else abs(xs[t] - preds[t])
        if t >= l - 1:
            eps[t] = dist[t - l + 1:t + 1].mean()
        if t >= p.warmup:
            flags[t] = decide_flag(eps[t], p.tau, xs[t], preds[t], xs[t - l + 1:t + 1], p.decision_mode)
        else:
            flags[t] = 0
        filled[t] = preds[t] if (flags[t] != 0 or np.isnan(xs[t])) else xs[t]
    return preds, eps, flags


# --------------------------------------------------------------------------
# flag matrix
# --------------------------------------------------------------------------


@dataclass
class FlagMatrix:
    feature_ids: List[str]
    flags: np.ndarray  # (seconds, features) int8
    warmup: np.ndarray  # (seconds, features) bool
    eps: Optional[np.ndarray] = None
    preds: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_seconds(self) -> int:
        return self.flags.shape[0]

    def column(self, feature_id: str) -> np.ndarray:
        return self.flags[:, self.feature_ids.index(feature_id)]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.flags, columns=self.feature_ids)
        df.insert(0, "timestamp", np.arange(self.n_seconds))
        return df

    def write_csv(self, path, header_comment: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            self.to_frame().to_csv(fh, index=False)

    @classmethod
    def read_csv(cls, path) -> "FlagMatrix":
        df = pd.read_csv(path, comment="#")
        ids = [c for c in df.columns if c != "timestamp"]
        flags = df[ids].to_numpy(dtype=np.int8)
        bad = ~np.isin(flags, (-2, -1, 0, 1, 2))
        if bad.any():
            raise ValueError(f"{path}: flag values outside -2..2")
        return cls(ids, flags, np.zeros_like(flags, dtype=bool))

    @classmethod
    def zeros(cls, feature_ids: Sequence[str], n: int) -> "FlagMatrix":
        return cls(list(feature_ids), np.zeros((n, len(feature_ids)), np.int8), np.zeros((n, len(feature_ids)), bool))


def run_online(pipelines: Sequence[DetectionPipeline], features: Sequence[TargetFeatureSeries]) -> FlagMatrix:
    by_id = {f.feature_id: f for f in features}
    missing = [p.feature_id for p in pipelines if p.feature_id not in by_id]
    if missing:
        raise KeyError(f"no stream for pipelines {missing}")
    n = len(features[0].values) if features else 0
    ids = [p.feature_id for p in pipelines]
    flags = np.zeros((n, len(ids)), np.int8)
    warm = np.zeros((n, len(ids)), bool)
    eps = np.full((n, len(ids)), np.nan)
    preds = np.full((n, len(ids)), np.nan)
    truth = np.full((n, len(ids)), np.nan)
    for j, p in enumerate(pipelines):
        series = by_id[p.feature_id]
        if p.d_c is not None and not series.covariates:
            from .featurize import attach_covariates
            attach_covariates([series], p.d_c)
        out = run_pipeline(p, series)
        flags[:, j], warm[:, j], eps[:, j], preds[:, j], truth[:, j] = (
            out.flags, out.warmup, out.eps, out.preds, out.truth)
    return FlagMatrix(ids, flags, warm, eps, preds, truth)


# --------------------------------------------------------------------------
# tuning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TuneConfig:
    l: int = 10
    f: float = 1.5
    w_physical: int = 10
    w_network: int = 300
    w_constant: int = 1
    train_fraction: float = 0.75
    folds: int = 3
    accuracy_gate: float = 0.5
    static_fraction: float = 0.1
    recovery: bool = False
    seed: int = 0
    grid_profile: str = "fast"

    def grids(self) -> dict:
        return GRID_PROFILES[self.grid_profile]

    def w_for(self, cls: str) -> int:
        return {"A": self.w_constant, "B": self.w_physical, "C": self.w_physical, "D": self.w_network}[cls]


def _fit(cls: str, train: np.ndarray, covs: Optional[np.ndarray], w: int, hp: dict, seed: int) -> Forecaster:
    if cls == "A":
        return fit_constant(train, w, 0)
    if cls in ("B", "C"):
        return fit_tree_ensemble(train, covs, w, hp, seed=seed)
    if cls == "D":
        return fit_window_regressor(train, w, hp, seed=seed)
    raise ValueError(f"unknown property class {cls}")


def _eps_on(model: Forecaster, scaler: ScalerParams, x: np.ndarray, covs: Optional[np.ndarray], w: int, l: int,
            start: int, end: int) -> np.ndarray:
    """Averaged distances for t in [start, end), using context before ``start``."""
    p = DetectionPipeline("tmp", "B", model, scaler, w, l, 1.5)
    xs = scaler.scale(x[:end])
    preds, _ = _predict_all(p, xs, covs[:end] if covs is not None else None)
    dist = np.where(np.isnan(xs), nan_distance(preds), np.abs(xs - preds))
    eps = _rolling_mean(dist, l)
    return eps[max(start, w + l - 1):end]


def _cv_score(cls, x, covs, w, l, hp, cfg: TuneConfig) -> Tuple[float, float]:
    """Mean validation MAE and worst averaged distance over expanding folds."""
    n = len(x)
    maes, worst = [], 0.0
    for k in range(1, cfg.folds + 1):
        end = int(round(n * k / cfg.folds))
        cut = int(round(end * cfg.train_fraction))
        if cut <= w + 1 or end - cut < l:
            raise ForecastError(f"fold {k} too short for w={w}, l={l}")
        scaler = ScalerParams.fit(x[:cut])
        model = _fit(cls, scaler.scale(x[:cut]), covs[:cut] if covs is not None else None, w, hp, cfg.seed)
        xs = scaler.scale(x[:end])
        p = DetectionPipeline("cv", cls, model, scaler, w, l, 1.5)
        preds, _ = _predict_all(p, xs, covs[:end] if covs is not None else None)
        val = slice(cut, end)
        ok = np.isfinite(xs[val])
        maes.append(float(np.mean(np.abs(xs[val][ok] - preds[val][ok]))))
        dist = np.where(np.isnan(xs), nan_distance(preds), np.abs(xs - preds))
        eps = _rolling_mean(dist, l)[cut:end]
        worst = max(worst, float(np.nanmax(eps)))
    return float(np.mean(maes)), worst


def decision_mode_for(series_cls: str, train: np.ndarray, cfg: TuneConfig) -> str:
    if series_cls == "A" or static_fraction(train) > cfg.static_fraction:
        return REDUCED
    return FULL


def grid_search(series: TargetFeatureSeries, grid: Dict[str, Sequence], cfg: TuneConfig = TuneConfig()
                ) -> List[Tuple[dict, float]]:
    """Grid points passing the accuracy gate on every fold, best first (ties keep grid order)."""
    cls = series.property_class
    x = np.asarray(series.values, dtype=np.float64)
    split = int(np.floor(len(x) * cfg.train_fraction))
    covs = _covariate_matrix(series)
    w = cfg.w_for(cls)
    points = expand_grid(grid)
    if len(points) == 1:
        return [(points[0], float("nan"))]
    scored = []
    for i, hp in enumerate(points):
        try:
            mae, worst = _cv_score(cls, x[:split], covs[:split] if covs is not None else None, w, cfg.l, hp, cfg)
        except ForecastError as exc:
            logger.info("%s: grid point %s failed: %s", series.feature_id, hp, exc)
            continue
        if not worst < cfg.accuracy_gate:
            logger.info("%s: grid point %s rejected by accuracy gate (%.3f)", series.feature_id, hp, worst)
            continue
        scored.append((mae, i, hp))
    if not scored:
        raise TuningError({series.feature_id: "no grid point passed the accuracy gate"})
    scored.sort(key=lambda s: (s[0], s[1]))
    return [(hp, mae) for mae, _, hp in scored]


def tune_feature(series: TargetFeatureSeries, cfg: TuneConfig = TuneConfig(), d_c: Optional[float] = None
                 ) -> DetectionPipeline:
    """Select a model, fit the threshold on the held-out tail, then refit on everything."""
    cls = series.property_class
    x = np.asarray(series.values, dtype=np.float64)
    n = len(x)
    split = int(np.floor(n * cfg.train_fraction))
    if n - split < cfg.l:
        raise TuningError({series.feature_id: "test partition shorter than the averaging window"})
    covs = _covariate_matrix(series)
    w = cfg.w_for(cls)
    mode = decision_mode_for(cls, x[:split], cfg)
    if cls == "A":
        candidates = [({}, float("nan"))]
    else:
        grid = cfg.grids()["tree" if cls in ("B", "C") else "window"]
        candidates = grid_search(series, grid, cfg)

    scaler = ScalerParams.fit(x[:split])
    reasons = []
    for hp, score in candidates:
        try:
            model = _fit(cls, scaler.scale(x[:split]), covs[:split] if covs is not None else None, w, hp, cfg.seed)
        except ClassMisassignmentError as exc:
            raise TuningError({series.feature_id: f"class {cls} misassigned: {exc}"}) from None
        except ForecastError as exc:
            reasons.append(str(exc))
            continue
        e_test = _eps_on(model, scaler, x, covs, w, cfg.l, split, n)
        if len(e_test) == 0:
            raise TuningError({series.feature_id: "empty test partition"})
        worst = float(np.max(e_test))
        if not worst < cfg.accuracy_gate:
            reasons.append(f"hp {hp}: test distance {worst:.3f} fails the accuracy gate")
            continue
        pipe = DetectionPipeline(series.feature_id, cls, model, scaler, w, cfg.l, cfg.f, worst, mode,
                                 cfg.recovery, d_c if covs is not None else None, dict(hp),
                                 None if np.isnan(score) else score)
        # final model sees all event-free data; the train/val scaler is kept so tau stays valid
        try:
            final = _fit(cls, scaler.scale(x), covs, w, hp, cfg.seed)
        except ClassMisassignmentError as exc:
            raise TuningError({series.feature_id: f"class {cls} misassigned: {exc}"}) from None
        candidate = DetectionPipeline(**{**pipe.__dict__, "forecaster": final, "notes": []})
        replay = run_pipeline(candidate, series).flags[split:]
        if np.any(replay != 0):
            pipe.notes.append("refit on all data raised test-partition flags; kept the train/val model")
            logger.info("%s: keeping train/val model", series.feature_id)
            return pipe
        return candidate
    raise TuningError({series.feature_id: "; ".join(reasons) or "no usable candidate"})


def tune_all(features: Sequence[TargetFeatureSeries], cfg: TuneConfig = TuneConfig(), d_c: Optional[float] = None
             ) -> List[DetectionPipeline]:
    pipelines, failures = [], {}
    for series in features:
        try:
            pipelines.append(tune_feature(series, cfg, d_c))
            logger.debug("tuned %s", series.feature_id)
        except TuningError as exc:
            failures.update(exc.failures)
    if failures:
        raise TuningError(failures, pipelines)
    return pipelines
