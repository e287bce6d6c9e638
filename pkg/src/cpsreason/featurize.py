"""Raw logs to 1 Hz target features, plus cycle-progress covariates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core import PacketLog, Protocol, TANKS, Topology

logger = logging.getLogger(__name__)

NETWORK_KINDS = ("s_packet", "n_packet", "n_ipmac", "n_tcp", "mu_tcp", "n_ports")
CLASS_A_KINDS = ("n_ipmac", "n_tcp")
PHYSICAL_COLUMNS = tuple(f"H_{t}" for t in TANKS)


class FeatureError(ValueError):
    pass


class CycleEstimationError(FeatureError):
    """No clear periodicity; pass the cycle duration explicitly instead."""


@dataclass
class CovariateSeries:
    covariate_id: str
    values: np.ndarray
    cyclical: bool
    source: str  # "progress", "sin" or "cos"


@dataclass
class TargetFeatureSeries:
    feature_id: str
    values: np.ndarray
    property_class: str
    constant_value: Optional[float] = None
    covariates: List[CovariateSeries] = field(default_factory=list)

    @property
    def is_physical(self) -> bool:
        return self.feature_id.startswith("H_")

    @property
    def device(self) -> Optional[str]:
        return None if self.is_physical else self.feature_id.split(".", 1)[0]

    @property
    def kind(self) -> str:
        return "level" if self.is_physical else self.feature_id.split(".", 1)[1]


def network_feature_ids(devices: Sequence[str]) -> List[str]:
    return [f"{d}.{k}" for d in devices for k in NETWORK_KINDS]


# --------------------------------------------------------------------------
# covariates
# --------------------------------------------------------------------------


def build_cycle_covariates(d_c: float, length: int, offset: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cycle progress P in [0, d_c) and its sine/cosine transforms."""
    if d_c <= 0:
        raise ValueError(f"cycle duration must be positive, got {d_c}")
    t = np.arange(offset, offset + length, dtype=np.float64)
    p = np.mod(t, d_c)
    ang = 2.0 * np.pi * p / d_c
    return p, np.sin(ang), np.cos(ang)


def covariate_series(d_c: float, length: int) -> List[CovariateSeries]:
    p, s, c = build_cycle_covariates(d_c, length)
    return [CovariateSeries("P", p, True, "progress"), CovariateSeries("P_sin", s, True, "sin"),
            CovariateSeries("P_cos", c, True, "cos")]


def estimate_cycle_duration(values, band: Tuple[int, int] = (30, 1200), threshold: float = 0.5) -> int:
    """Lag of the autocorrelation maximum inside ``band``."""
    x = np.asarray(getattr(values, "values", values), dtype=np.float64)
    x = x[np.isfinite(x)]
    lo, hi = band
    hi = min(hi, len(x) // 3)
    if hi <= lo:
        raise CycleEstimationError(f"series of {len(x)} samples is too short for lags {band}")
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom <= 0:
        raise CycleEstimationError("constant series has no autocorrelation peak")
    nfft = 1 << int(np.ceil(np.log2(2 * len(x))))
    spec = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(spec * np.conj(spec), nfft)[: hi + 1] / denom
    lag = lo + int(np.argmax(acf[lo: hi + 1]))
    if acf[lag] < threshold:
        raise CycleEstimationError(f"autocorrelation peak {acf[lag]:.2f} at lag {lag} is below {threshold}")
    return lag


# --------------------------------------------------------------------------
# physical features
# --------------------------------------------------------------------------


def extract_physical(process: pd.DataFrame) -> List[TargetFeatureSeries]:
    if len(process) == 0:
        return []
    missing = [c for c in PHYSICAL_COLUMNS if c not in process.columns]
    if missing:
        raise FeatureError(f"process log lacks columns {missing}")
    return [TargetFeatureSeries(c, process[c].to_numpy(dtype=np.float64), "B") for c in PHYSICAL_COLUMNS]


def static_fraction(values: np.ndarray) -> float:
    """Share of consecutive pairs that repeat exactly."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.mean(v[1:] == v[:-1]))


# --------------------------------------------------------------------------
# network features
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceBaseline:
    known_ips: FrozenSet[str]
    known_macs: FrozenSet[str]
    known_tcp_flag_combos: FrozenSet[int]


@dataclass(frozen=True)
class TrafficBaseline:
    devices: Dict[str, DeviceBaseline]

    def to_dict(self) -> dict:
        return {d: {"known_ips": sorted(b.known_ips), "known_macs": sorted(b.known_macs),
                    "known_tcp_flag_combos": sorted(b.known_tcp_flag_combos)} for d, b in self.devices.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrafficBaseline":
        return cls({k: DeviceBaseline(frozenset(v["known_ips"]), frozenset(v["known_macs"]),
                                      frozenset(int(x) for x in v["known_tcp_flag_combos"])) for k, v in d.items()})


def _device_index(log: PacketLog, topology: Topology) -> np.ndarray:
    """Per-packet index of the destination device (by MAC), -1 if not monitored."""
    mac_to_dev = {d.mac: i for i, d in enumerate(topology.devices)}
    lut = np.array([mac_to_dev.get(m, -1) for m in log.macs] or [-1], dtype=np.int64)
    return lut[log.dst_mac]


def _is_tcp(log: PacketLog) -> np.ndarray:
    return (log.protocol == Protocol.TCP) | (log.protocol == Protocol.MODBUS)


def build_baseline(log: PacketLog, topology: Topology, until: Optional[float] = None) -> TrafficBaseline:
    """Addresses and flag combinations seen per device before ``until``."""
    mask = np.ones(len(log), dtype=bool) if until is None else log.timestamp < until
    dev = _device_index(log, topology)
    tcp = _is_tcp(log)
    out = {}
    for i, d in enumerate(topology.devices):
        m = mask & (dev == i)
        out[d.id] = DeviceBaseline(
            frozenset(log.ips[c] for c in np.unique(log.src_ip[m])),
            frozenset(log.macs[c] for c in np.unique(log.src_mac[m])),
            frozenset(int(f) for f in np.unique(log.tcp_flags[m & tcp])),
        )
    return TrafficBaseline(out)


def extract_network(log: PacketLog, topology: Topology, baseline: TrafficBaseline,
                    duration: Optional[int] = None) -> List[TargetFeatureSeries]:
    """Six per-second statistics for every monitored device, keyed on destination MAC."""
    devices = [d.id for d in topology.devices]
    if duration is None:
        duration = int(np.floor(log.timestamp.max())) + 1 if len(log) else 0
    n_dev = len(devices)
    dev = _device_index(log, topology)
    unknown_dst = dev < 0
    if unknown_dst.any():
        logger.debug("ignoring %d packets to unmonitored destinations", int(unknown_dst.sum()))
    sec = np.floor(log.timestamp).astype(np.int64)
    keep = (dev >= 0) & (sec >= 0) & (sec < duration)
    dev, sec = dev[keep], sec[keep]
    src_ip, src_mac = log.src_ip[keep], log.src_mac[keep]
    flags, size, sport = log.tcp_flags[keep].astype(np.int64), log.size[keep], log.src_port[keep]
    tcp = _is_tcp(log)[keep]

    known_ip = np.zeros((n_dev, max(len(log.ips), 1)), dtype=bool)
    known_mac = np.zeros((n_dev, max(len(log.macs), 1)), dtype=bool)
    known_flag = np.zeros((n_dev, 256), dtype=bool)
    for i, d in enumerate(devices):
        b = baseline.devices.get(d)
        if b is None:
            raise FeatureError(f"baseline has no entry for device {d}")
        known_ip[i] = [a in b.known_ips for a in log.ips] if log.ips else False
        known_mac[i] = [a in b.known_macs for a in log.macs] if log.macs else False
        known_flag[i, list(b.known_tcp_flag_combos)] = True

    size_bins = n_dev * duration
    key = dev * duration + sec
    count = np.bincount(key, minlength=size_bins).astype(np.float64)
    size_sum = np.bincount(key, weights=size, minlength=size_bins)
    unknown = ~(known_ip[dev, src_ip] & known_mac[dev, src_mac])
    n_ipmac = np.bincount(key[unknown], minlength=size_bins).astype(np.float64)
    new_flag = tcp & ~known_flag[dev, flags]
    n_tcp = np.bincount(key[new_flag], minlength=size_bins).astype(np.float64)
    tcp_count = np.bincount(key[tcp], minlength=size_bins).astype(np.float64)
    tcp_sum = np.bincount(key[tcp], weights=flags[tcp], minlength=size_bins)
    pairs = np.unique(key * 65536 + sport.astype(np.int64))
    n_ports = np.bincount(pairs // 65536, minlength=size_bins).astype(np.float64)

    with np.errstate(invalid="ignore", divide="ignore"):
        s_packet = np.where(count > 0, size_sum / np.maximum(count, 1), 0.0)
        mu_tcp = np.where(tcp_count > 0, tcp_sum / np.maximum(tcp_count, 1), 0.0)
    stats = {"s_packet": s_packet, "n_packet": count, "n_ipmac": n_ipmac, "n_tcp": n_tcp, "mu_tcp": mu_tcp,
             "n_ports": n_ports}
    out = []
    for i, d in enumerate(devices):
        sl = slice(i * duration, (i + 1) * duration)
        for k in NETWORK_KINDS:
            cls = "A" if k in CLASS_A_KINDS else "D"
            out.append(TargetFeatureSeries(f"{d}.{k}", stats[k][sl].copy(), cls,
                                           0.0 if cls == "A" else None))
    return out


# --------------------------------------------------------------------------
# feature matrix
# --------------------------------------------------------------------------


def attach_covariates(features: Sequence[TargetFeatureSeries], d_c: float) -> None:
    """Give every class B/C feature the cycle covariates; A and D go without."""
    for f in features:
        f.covariates = covariate_series(d_c, len(f.values)) if f.property_class in ("B", "C") else []


def feature_frame(features: Sequence[TargetFeatureSeries], d_c: Optional[float] = None) -> pd.DataFrame:
    if not features:
        return pd.DataFrame({"timestamp": np.zeros(0, dtype=np.int64)})
    n = len(features[0].values)
    data = {"timestamp": np.arange(n, dtype=np.int64)}
    for f in features:
        if len(f.values) != n:
            raise FeatureError(f"{f.feature_id} has {len(f.values)} samples, expected {n}")
        data[f.feature_id] = f.values
    if d_c is not None:
        for cov in covariate_series(d_c, n):
            data[cov.covariate_id] = cov.values
    return pd.DataFrame(data)


def features_from_frame(df: pd.DataFrame, d_c: Optional[float] = None) -> List[TargetFeatureSeries]:
    out = []
    for col in df.columns:
        if col in ("timestamp", "P", "P_sin", "P_cos"):
            continue
        kind = col.split(".", 1)[1] if "." in col else "level"
        if kind in CLASS_A_KINDS:
            cls = "A"
        elif kind == "level":
            cls = "B"
        else:
            cls = "D"
        out.append(TargetFeatureSeries(col, df[col].to_numpy(np.float64), cls, 0.0 if cls == "A" else None))
    if d_c is not None:
        attach_covariates(out, d_c)
    return out


def featurize(process: pd.DataFrame, log: PacketLog, topology: Topology, baseline: TrafficBaseline,
              d_c: Optional[float] = None) -> List[TargetFeatureSeries]:
    """All 50 target features of a scenario on the process log's 1 Hz grid."""
    phys = extract_physical(process)
    net = extract_network(log, topology, baseline, duration=len(process))
    feats = phys + net
    if d_c is not None:
        attach_covariates(feats, d_c)
    return feats
