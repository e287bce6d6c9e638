"""Deterministic 1 Hz simulator of the eight-tank plant and its MODBUS/TCP traffic.

The process is timer driven: every transfer has a fixed slot inside the
cycle and runs until a level condition holds. Controllers that depend on a
tank outside their zone read it over the network, which is where MITM and
DoS attacks gain physical leverage.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core import (
    FLOW_SENSORS, PUMPS, TANKS, VALVES, ComponentKind, DeviceRole, PacketLog, Protocol, TcpFlag,
    Topology, concat_packet_logs,
)

logger = logging.getLogger(__name__)

EVENT_KINDS = ("MITM", "DoS", "Scan", "Leak", "Breakdown")
SIGNATURE_IDS = ("A", "B", "C", "D", "D2", "E", "E2", "unknown")


class ScriptError(ValueError):
    """Scenario script is malformed or does not fit the topology."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Transfer:
    actuator: str
    src: str
    dst: str
    start: float  # slot bounds as a fraction of the cycle
    end: float
    rate: float  # volume per second at the default 300 s period
    mode: str  # "fill": until dst >= target, "drain": until src <= low
    target: float = 0.0
    controller: str = "PLC1"
    remote: Optional[str] = None  # device that serves the controlling level


@dataclass(frozen=True)
class PollLink:
    client: str
    server: str
    rate: float  # polls per second
    registers: Tuple[str, ...]  # process columns served by the server


DEFAULT_TRANSFERS = (
    Transfer("P2", "Reservoir", "T1", 0 / 300, 60 / 300, 2.0, "fill", 80.0),
    Transfer("P1", "Reservoir", "T2", 0 / 300, 60 / 300, 1.5, "fill", 60.0),
    Transfer("P4", "T1", "T5", 60 / 300, 110 / 300, 1.5, "fill", 50.0),
    Transfer("V17", "T2", "T3", 60 / 300, 110 / 300, 1.5, "drain"),
    Transfer("V18", "T1", "T4", 110 / 300, 160 / 300, 1.6, "drain"),
    Transfer("V10", "T3", "Reservoir", 110 / 300, 170 / 300, 1.2, "drain"),
    Transfer("V20", "T5", "T6", 160 / 300, 210 / 300, 1.6, "drain", controller="PLC2", remote="PLC1"),
    Transfer("V13", "T4", "Reservoir", 170 / 300, 220 / 300, 1.6, "drain"),
    Transfer("P5", "T6", "T7", 210 / 300, 250 / 300, 2.6, "drain", controller="PLC3", remote="PLC2"),
    Transfer("P6", "T7", "T8", 250 / 300, 290 / 300, 2.6, "drain", controller="PLC4", remote="PLC3"),
    Transfer("V22", "T8", "Reservoir", 0 / 300, 45 / 300, 2.4, "drain", controller="PLC4"),
)

DEFAULT_POLLS = (
    PollLink("HMI", "PLC1", 80, ("H_T1", "H_T2", "H_T3", "H_T4", "H_T5")),
    PollLink("HMI", "PLC2", 80, ("H_T6",)),
    PollLink("HMI", "PLC3", 80, ("H_T7", "F_FS1")),
    PollLink("HMI", "PLC4", 80, ("H_T8", "F_FS2", "F_FS4")),
    PollLink("PLC2", "PLC1", 50, ("H_T5",)),
    PollLink("PLC3", "PLC2", 50, ("H_T6",)),
    PollLink("PLC4", "PLC3", 50, ("H_T7",)),
    PollLink("PLC3", "FS1", 48, ("F_FS1",)),
    PollLink("PLC4", "FS2", 48, ("F_FS2",)),
)

# flow sensor -> actuator whose flow it measures
FLOW_SENSOR_OF = {"FS1": "P5", "FS2": "P6", "FS3": "P2", "FS4": "V22"}
# tanks whose level sensor reports without noise (static while idle)
NOISELESS_TANKS = ("T7", "T8")
MODBUS_PORT = 502
UNUSUAL_SCAN_FLAGS = (int(TcpFlag.SYN | TcpFlag.FIN), int(TcpFlag.FIN | TcpFlag.PSH | TcpFlag.URG), 0,
                      int(TcpFlag.FIN))


@dataclass(frozen=True)
class SimConfig:
    period: int = 300
    low: float = 1.0
    capacity: float = 100.0
    reservoir: float = 2000.0
    initial_levels: Tuple[Tuple[str, float], ...] = (("T8", 50.0),)
    rate_jitter: float = 0.03
    level_noise: float = 0.05
    stale_after: float = 2.0
    count_jitter: float = 0.03  # relative sd of polls per second, truncated at 2.5 sd
    port_pool: int = 6
    port_active_prob: float = 0.5
    keepalive_rate: float = 1.0  # UDP keepalives per second from the HMI
    transfers: Tuple[Transfer, ...] = DEFAULT_TRANSFERS
    polls: Tuple[PollLink, ...] = DEFAULT_POLLS

    def slot(self, actuator: str) -> Tuple[int, int]:
        for tr in self.transfers:
            if tr.actuator == actuator:
                return int(round(tr.start * self.period)), int(round(tr.end * self.period))
        raise KeyError(actuator)

    def dependent_actuators(self, device: str) -> List[str]:
        """Actuators that stop when ``device`` stops talking."""
        return [tr.actuator for tr in self.transfers
                if tr.remote is not None and device in (tr.controller, tr.remote)]

    def consumer_actuators(self, a: str, b: str) -> List[str]:
        """Actuators controlled through data exchanged between ``a`` and ``b``."""
        return [tr.actuator for tr in self.transfers
                if tr.remote is not None and {tr.controller, tr.remote} == {a, b}]

    def nominal_packet_rate(self) -> float:
        return 4 * sum(p.rate for p in self.polls) + self.keepalive_rate


# --------------------------------------------------------------------------
# scripts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EventSpec:
    kind: str
    start: int
    end: int
    targets: Tuple[str, ...]
    params: Mapping[str, object] = field(default_factory=dict)

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    duration: int
    seed: int
    events: Tuple[EventSpec, ...] = ()
    attacker_ip: str = "10.13.37.66"
    attacker_mac: str = "de:ad:be:ef:13:37"


@dataclass(frozen=True)
class GroundTruthEvent:
    kind: str
    start: int
    end: int
    targets: Tuple[str, ...]
    expected_signature_id: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": self.start, "end": self.end, "targets": list(self.targets),
                "expected_signature_id": self.expected_signature_id}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthEvent":
        return cls(d["kind"], int(d["start"]), int(d["end"]), tuple(d["targets"]), d["expected_signature_id"])


def _fmt_value(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def format_script(script: ScenarioScript) -> str:
    lines = [f"scenario {script.name}", f"duration {script.duration}", f"seed {script.seed}",
             f"attacker ip={script.attacker_ip} mac={script.attacker_mac}"]
    for ev in script.events:
        extra = "".join(f" {k}={_fmt_value(v)}" for k, v in ev.params.items())
        lines.append(f"event {ev.kind} start={ev.start} end={ev.end} targets={','.join(ev.targets)}{extra}")
    return "\n".join(lines) + "\n"


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def parse_script(text: str) -> ScenarioScript:
    name, duration, seed = None, None, None
    attacker = {}
    events: List[EventSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "scenario":
                name = rest[0]
            elif head == "duration":
                duration = int(rest[0])
            elif head == "seed":
                seed = int(rest[0])
            elif head == "attacker":
                attacker = dict(tok.split("=", 1) for tok in rest)
            elif head == "event":
                kind = rest[0]
                kv = dict(tok.split("=", 1) for tok in rest[1:])
                start, end = int(kv.pop("start")), int(kv.pop("end"))
                targets = tuple(t for t in kv.pop("targets").split(",") if t)
                events.append(EventSpec(kind, start, end, targets, {k: _coerce(v) for k, v in kv.items()}))
            else:
                raise ScriptError(f"line {lineno}: unknown statement '{head}'")
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, ScriptError):
                raise
            raise ScriptError(f"line {lineno}: malformed '{head}' statement ({exc})") from None
    if name is None or duration is None or seed is None:
        raise ScriptError("script needs 'scenario', 'duration' and 'seed' statements")
    return ScenarioScript(name, duration, seed, tuple(events),
                          attacker.get("ip", ScenarioScript.attacker_ip),
                          attacker.get("mac", ScenarioScript.attacker_mac).lower())


def load_script(path) -> ScenarioScript:
    return parse_script(Path(path).read_text())


def validate_script(script: ScenarioScript, topology: Topology) -> None:
    if script.duration <= 0:
        raise ScriptError("duration must be positive")
    for col in TANKS + PUMPS + VALVES + ("FS3", "FS4"):
        if not topology.has_component(col):
            raise ScriptError(f"topology lacks plant component {col} required by the simulator")
    ips = {d.ip for d in topology.devices}
    macs = {d.mac for d in topology.devices}
    if script.attacker_ip in ips or script.attacker_mac in macs:
        raise ScriptError("attacker addresses must not belong to a topology device")
    for ev in script.events:
        where = f"{ev.kind} event at {ev.start}"
        if ev.kind not in EVENT_KINDS:
            raise ScriptError(f"{where}: unknown kind")
        if not (0 <= ev.start < ev.end <= script.duration):
            raise ScriptError(f"{where}: window [{ev.start},{ev.end}) outside [0,{script.duration})")
        if ev.kind == "MITM":
            if len(ev.targets) != 2 or not topology.comm_linked(*ev.targets):
                raise ScriptError(f"{where}: MITM victims must be two comm-linked devices")
        elif ev.kind in ("DoS", "Scan"):
            if len(ev.targets) != 1 or not topology.has_device(ev.targets[0]):
                raise ScriptError(f"{where}: victim must be one network device")
        else:
            if len(ev.targets) != 1 or not topology.has_component(ev.targets[0]):
                raise ScriptError(f"{where}: target must be one physical component")
            kind = topology.component(ev.targets[0]).kind
            allowed = {"Leak": (ComponentKind.TANK, ComponentKind.PUMP, ComponentKind.VALVE),
                       "Breakdown": (ComponentKind.TANK, ComponentKind.PUMP)}[ev.kind]
            if kind not in allowed:
                raise ScriptError(f"{where}: cannot target a {kind.value}")


def _overlaps_slot(ev: EventSpec, slot: Tuple[int, int], period: int) -> bool:
    first = ev.start // period
    for c in range(first - 1, ev.end // period + 1):
        a, b = c * period + slot[0], c * period + slot[1]
        if ev.start < b and a < ev.end:
            return True
    return False


def expected_signature(ev: EventSpec, topology: Topology, config: SimConfig = SimConfig()) -> str:
    """Signature the reasoner should produce for a single isolated event."""
    if ev.kind == "Scan":
        return "C"
    if ev.kind == "MITM":
        manipulates = float(ev.params.get("level_offset", 0.0)) != 0.0
        slots = [config.slot(a) for a in config.consumer_actuators(*ev.targets)]
        if manipulates and any(_overlaps_slot(ev, s, config.period) for s in slots):
            return "D2"
        return "D"
    if ev.kind == "DoS":
        slots = [config.slot(a) for a in config.dependent_actuators(ev.targets[0])]
        return "E2" if any(_overlaps_slot(ev, s, config.period) for s in slots) else "E"
    kind = topology.component(ev.targets[0]).kind
    if kind is ComponentKind.TANK:
        return "A"
    return "B"


def ground_truth(script: ScenarioScript, topology: Topology, config: SimConfig = SimConfig()) -> List[GroundTruthEvent]:
    out = []
    for ev in script.events:
        targets = ev.targets
        if ev.kind in ("Leak", "Breakdown") and topology.component(ev.targets[0]).kind is not ComponentKind.TANK:
            src, act, dst = topology.link_of_actuator(ev.targets[0])
            targets = (src, act, dst)
        out.append(GroundTruthEvent(ev.kind, ev.start, ev.end, targets, expected_signature(ev, topology, config)))
    return out


def _mitm(start, end, a, b, offset=0):
    return EventSpec("MITM", start, end, (a, b), {"level_offset": float(offset)})


def scenario_suite() -> List[ScenarioScript]:
    """S0 (event-free) and S1-S3 with the event mix of the demonstration case."""
    s0 = ScenarioScript("S0", 3429, 1000)
    s1 = ScenarioScript("S1", 4500, 1001, (
        _mitm(700, 860, "PLC1", "PLC2", -20),
        EventSpec("Leak", 1260, 1370, ("T3",), {"rate": 0.4}),
        _mitm(1520, 1650, "HMI", "PLC2"),
        _mitm(1950, 2060, "PLC2", "PLC3", -20),
        EventSpec("Breakdown", 2440, 2530, ("P4",)),
        _mitm(3200, 3300, "PLC3", "PLC4", -20),
        _mitm(3620, 3750, "PLC3", "FS1"),
        EventSpec("Breakdown", 4000, 4130, ("T4",)),
    ))
    s2 = ScenarioScript("S2", 4800, 1002, (
        EventSpec("DoS", 740, 860, ("PLC2",), {"intensity": 1500}),
        EventSpec("Leak", 1210, 1310, ("V18",), {"rate": 0.3}),
        EventSpec("Breakdown", 1870, 1950, ("T3",)),
        EventSpec("Breakdown", 2590, 2670, ("P5",)),
        _mitm(3020, 3150, "PLC3", "PLC4"),
        EventSpec("DoS", 3320, 3450, ("PLC4",), {"intensity": 1500}),
        _mitm(3700, 3860, "PLC1", "PLC2", -20),
        EventSpec("Leak", 4430, 4530, ("T8",), {"rate": 0.3}),
    ))
    s3 = ScenarioScript("S3", 4800, 1003, (
        EventSpec("Scan", 420, 520, ("HMI",), {"rate": 40, "port_low": 1, "port_high": 1024}),
        EventSpec("DoS", 740, 830, ("PLC1",), {"intensity": 1500}),
        EventSpec("Breakdown", 1440, 1500, ("P6",)),
        EventSpec("Scan", 1560, 1660, ("PLC1",), {"rate": 40, "port_low": 1, "port_high": 1024}),
        EventSpec("DoS", 1820, 1920, ("HMI",), {"intensity": 1500}),
        EventSpec("Scan", 2020, 2090, ("PLC2",), {"rate": 40, "port_low": 1, "port_high": 1024}),
        EventSpec("Scan", 2140, 2210, ("PLC3",), {"rate": 40, "port_low": 1, "port_high": 1024}),
        EventSpec("Scan", 2260, 2330, ("PLC4",), {"rate": 40, "port_low": 1, "port_high": 1024}),
        _mitm(2550, 2660, "PLC2", "PLC3", -20),
        EventSpec("DoS", 3190, 3270, ("PLC3",), {"intensity": 1500}),
        EventSpec("Breakdown", 3840, 3930, ("T8",)),
        EventSpec("Scan", 4230, 4330, ("FS1",), {"rate": 40, "port_low": 1, "port_high": 1024}),
        EventSpec("Scan", 4530, 4630, ("FS2",), {"rate": 40, "port_low": 1, "port_high": 1024}),
    ))
    return [s0, s1, s2, s3]


# --------------------------------------------------------------------------
# process simulation
# --------------------------------------------------------------------------


@dataclass
class SimulationResult:
    process: pd.DataFrame
    packets: PacketLog
    ground_truth: List[GroundTruthEvent]
    reported: Dict[str, np.ndarray]  # per-second values served over MODBUS
    true_levels: np.ndarray  # (duration, 8) physical levels
    water_total: np.ndarray  # tanks + reservoir + lost, per second


class _Plant:
    def __init__(self, script: ScenarioScript, topology: Topology, config: SimConfig):
        self.script, self.topology, self.config = script, topology, config
        self.levels = {t: config.low for t in TANKS}
        self.levels.update(dict(config.initial_levels))
        self.reservoir = config.reservoir
        self.lost = 0.0
        self.scale = 300.0 / config.period
        self.last_rx: Dict[Tuple[str, str], Tuple[float, float]] = {}

    def _events(self, kind: str, t: int):
        return [ev for ev in self.script.events if ev.kind == kind and ev.active(t)]

    def _dos_victims(self, t: int) -> set:
        return {ev.targets[0] for ev in self._events("DoS", t)}

    def _mitm_offset(self, a: str, b: str, t: int) -> float:
        off = 0.0
        for ev in self._events("MITM", t):
            if set(ev.targets) == {a, b}:
                off += float(ev.params.get("level_offset", 0.0))
        return off

    def _get(self, name: str) -> float:
        return self.reservoir if name == "Reservoir" else self.levels[name]

    def _add(self, name: str, amount: float) -> None:
        if name == "Reservoir":
            self.reservoir += amount
        else:
            self.levels[name] += amount

    def step(self, t: int, rng: np.random.Generator, frozen: Dict[str, float]) -> Dict[str, float]:
        cfg = self.config
        phase = (t % cfg.period) / cfg.period
        dos = self._dos_victims(t)
        broken_pumps = {ev.targets[0] for ev in self._events("Breakdown", t)
                        if self.topology.component(ev.targets[0]).kind is ComponentKind.PUMP}
        # frozen level sensors: controller and historian see the value at fault onset
        for ev in self.script.events:
            if ev.kind == "Breakdown" and ev.targets[0] in TANKS:
                if ev.active(t):
                    frozen.setdefault(ev.targets[0], self.levels[ev.targets[0]])
                else:
                    frozen.pop(ev.targets[0], None)

        def sensed(tank: str) -> float:
            return frozen.get(tank, self.levels[tank])

        amounts: Dict[str, float] = {}
        jitter = rng.uniform(1 - cfg.rate_jitter, 1 + cfg.rate_jitter, len(cfg.transfers))
        for tr, j in zip(cfg.transfers, jitter):
            amounts[tr.actuator] = 0.0
            if not (tr.start <= phase < tr.end) or tr.actuator in broken_pumps:
                continue
            watched = tr.dst if tr.mode == "fill" else tr.src
            view = sensed(watched)
            if tr.remote is not None:
                key = (tr.controller, tr.remote)
                if tr.controller in dos or tr.remote in dos:
                    last = self.last_rx.get(key)
                    if last is None or t - last[0] > cfg.stale_after:
                        continue  # stale remote data: fail safe
                    view = last[1]
                else:
                    view = view + self._mitm_offset(tr.controller, tr.remote, t)
                    self.last_rx[key] = (t, view)
            rate = tr.rate * self.scale * j
            src_avail = self._get(tr.src)
            if tr.mode == "fill":
                amount = min(rate, max(0.0, tr.target - view), src_avail)
            else:
                amount = min(rate, max(0.0, view - cfg.low), src_avail)
            if amount <= 0:
                continue
            self._add(tr.src, -amount)
            self._add(tr.dst, amount)
            amounts[tr.actuator] = amount
        # leaks
        for ev in self._events("Leak", t):
            rate = float(ev.params.get("rate", 0.3)) * self.scale
            target = ev.targets[0]
            if target in TANKS:
                amount = min(rate, self.levels[target])
                self.levels[target] -= amount
                self.lost += amount
            else:
                src, act, dst = self.topology.link_of_actuator(target)
                if amounts.get(act, 0.0) > 0:
                    continue  # actuator open anyway
                amount = min(rate, self._get(src))
                self._add(src, -amount)
                self._add(dst, amount)
        # overflow spills back to the reservoir
        for tank in TANKS:
            excess = self.levels[tank] - cfg.capacity
            if excess > 0:
                self.levels[tank] = cfg.capacity
                self.reservoir += excess
        return amounts


def simulate_process(script: ScenarioScript, topology: Topology, config: SimConfig = SimConfig()):
    """Step the plant; returns (process frame, reported values, true levels, water totals)."""
    rng = np.random.default_rng(np.random.SeedSequence([script.seed, 1]))
    plant = _Plant(script, topology, config)
    n = script.duration
    true = np.empty((n, len(TANKS)))
    sensed_out = np.empty((n, len(TANKS)))
    acts = {a: np.zeros(n, dtype=np.int8) for a in PUMPS + VALVES}
    flows = {f: np.zeros(n) for f in FLOW_SENSORS}
    totals = np.empty(n)
    frozen: Dict[str, float] = {}
    for t in range(n):
        amounts = plant.step(t, rng, frozen)
        for a, amt in amounts.items():
            if a in acts:
                acts[a][t] = amt > 0
        for fs, act in FLOW_SENSOR_OF.items():
            flows[fs][t] = amounts.get(act, 0.0)
        for i, tank in enumerate(TANKS):
            true[t, i] = plant.levels[tank]
            sensed_out[t, i] = frozen.get(tank, plant.levels[tank])
        totals[t] = sum(plant.levels.values()) + plant.reservoir + plant.lost

    noise = rng.uniform(-config.level_noise, config.level_noise, size=(n, len(TANKS)))
    reported = {}
    for i, tank in enumerate(TANKS):
        if tank in NOISELESS_TANKS:
            vals = sensed_out[:, i].copy()
        else:
            vals = sensed_out[:, i] + noise[:, i]
            # a frozen sensor repeats its last reading exactly
            for ev in script.events:
                if ev.kind == "Breakdown" and ev.targets[0] == tank:
                    s, e = ev.start, min(ev.end, n)
                    vals[s:e] = vals[s]
        reported[f"H_{tank}"] = np.round(vals, 4)
    for fs in FLOW_SENSORS:
        reported[f"F_{fs}"] = np.round(flows[fs], 4)

    df = pd.DataFrame({"timestamp": np.arange(n, dtype=np.int64)})
    for tank in TANKS:
        df[f"H_{tank}"] = reported[f"H_{tank}"].copy()
    for a in PUMPS:
        df[f"S_{a}"] = acts[a]
    for a in VALVES:
        df[f"S_{a}"] = acts[a]
    for fs in FLOW_SENSORS:
        df[f"F_{fs}"] = reported[f"F_{fs}"].copy()
    # historian gaps: data relayed by a flooded device never arrives
    for ev in script.events:
        if ev.kind != "DoS":
            continue
        victim = ev.targets[0]
        rows = slice(ev.start, ev.end)
        dev = topology.device(victim)
        if dev.role is DeviceRole.HMI:
            cols = [c for c in df.columns if c.startswith(("H_", "F_"))]
        else:
            zone = topology.zone_of(victim)
            members = topology.zones[zone]
            cols = [f"H_{t}" for t in TANKS if t in members]
            cols += [f"F_{f}" for f in FLOW_SENSORS if f in members]
        df.loc[rows, cols] = np.nan
    return df, reported, true, totals


# --------------------------------------------------------------------------
# traffic synthesis
# --------------------------------------------------------------------------


class _Columns:
    """Accumulates packet columns from vectorised chunks."""

    names = ("timestamp", "src_ip", "dst_ip", "src_mac", "dst_mac", "src_port", "dst_port", "protocol",
             "tcp_flags", "size", "modbus_function", "modbus_value")

    def __init__(self):
        self.parts: Dict[str, List[np.ndarray]] = {k: [] for k in self.names}

    def add(self, n: int, **cols) -> None:
        if n == 0:
            return
        defaults = {"modbus_function": -1, "modbus_value": np.nan, "src_port": 0, "dst_port": 0, "tcp_flags": 0}
        for k in self.names:
            v = cols.get(k, defaults.get(k))
            if v is None:
                raise KeyError(k)
            arr = np.asarray(v)
            if arr.ndim == 0:
                arr = np.full(n, arr)
            self.parts[k].append(arr)

    def build(self, ips: Sequence[str], macs: Sequence[str]) -> PacketLog:
        dtypes = {"timestamp": np.float64, "src_ip": np.int32, "dst_ip": np.int32, "src_mac": np.int32,
                  "dst_mac": np.int32, "src_port": np.int32, "dst_port": np.int32, "protocol": np.int8,
                  "tcp_flags": np.uint8, "size": np.int32, "modbus_function": np.int16,
                  "modbus_value": np.float64}
        cols = {k: (np.concatenate(self.parts[k]).astype(dtypes[k]) if self.parts[k] else np.empty(0, dtypes[k]))
                for k in self.names}
        cols["timestamp"] = np.round(cols["timestamp"], 6)
        order = np.lexsort((np.arange(len(cols["timestamp"])), cols["timestamp"]))
        cols = {k: v[order] for k, v in cols.items()}
        return PacketLog(**cols, ips=tuple(ips), macs=tuple(macs))


def _spread(rng, counts: np.ndarray):
    """Per-item (second, slot-in-second) for integer counts per second."""
    sec = np.repeat(np.arange(len(counts)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(counts.sum()) - starts
    return sec, k


def _in_windows(t: np.ndarray, windows: Sequence[Tuple[int, int]]) -> np.ndarray:
    mask = np.zeros(t.shape, dtype=bool)
    for s, e in windows:
        mask |= (t >= s) & (t < e)
    return mask


def simulate_traffic(script: ScenarioScript, topology: Topology, reported: Mapping[str, np.ndarray],
                     config: SimConfig = SimConfig()) -> PacketLog:
    n = script.duration
    rng = np.random.default_rng(np.random.SeedSequence([script.seed, 2]))
    ips = [d.ip for d in topology.devices] + [script.attacker_ip]
    macs = [d.mac for d in topology.devices] + [script.attacker_mac]
    ip_of = {d.id: i for i, d in enumerate(topology.devices)}
    att = len(ips) - 1
    cols = _Columns()
    ack, pshack = int(TcpFlag.ACK), int(TcpFlag.PSH | TcpFlag.ACK)

    def windows(kind, pred):
        return [(ev.start, ev.end) for ev in script.events if ev.kind == kind and pred(ev)]

    for li, link in enumerate(config.polls):
        c, s = ip_of[link.client], ip_of[link.server]
        jit = np.clip(rng.normal(0.0, config.count_jitter, n), -2.5 * config.count_jitter, 2.5 * config.count_jitter)
        counts = np.rint(link.rate * (1 + jit)).astype(np.int64)
        sec, k = _spread(rng, counts)
        m = len(sec)
        tau = sec + (k + rng.uniform(0.0, 0.5, m)) / counts[sec]
        # ephemeral client ports: a random subset of the pool is in use each second
        active = rng.random((n, config.port_pool)) < config.port_active_prob
        active[~active.any(axis=1), 0] = True
        order = np.argsort(~active, axis=1, kind="stable")
        pick = (rng.random(m) * active.sum(axis=1)[sec]).astype(np.int64)
        cport = 49152 + 16 * li + order[sec, pick]
        req_size = rng.choice(np.array([66, 68]), size=m, p=[0.8, 0.2])
        resp_size = 63 + 2 * len(link.registers) + rng.choice(np.array([0, 2]), size=m, p=[0.7, 0.3])
        reg = k % len(link.registers)
        vals = np.stack([reported[r] for r in link.registers])[reg, sec]

        dos_client = _in_windows(tau, windows("DoS", lambda ev: ev.targets[0] == link.client))
        dos_server = _in_windows(tau, windows("DoS", lambda ev: ev.targets[0] == link.server))
        keep_req = ~dos_client
        keep_rest = ~dos_client & ~dos_server
        mitm_evs = [ev for ev in script.events if ev.kind == "MITM" and set(ev.targets) == {link.client, link.server}]
        relayed = _in_windows(tau, [(ev.start, ev.end) for ev in mitm_evs])
        offset = np.zeros(m)
        for ev in mitm_evs:
            offset[_in_windows(tau, [(ev.start, ev.end)])] += float(ev.params.get("level_offset", 0.0))
        # a relay by the attacker rewrites the source MAC of the delivered leg
        src_mac_c = np.where(relayed, att, c)
        src_mac_s = np.where(relayed, att, s)

        def emit(mask, t, src, dst, smac, dmac, sport, dport, proto, flags, size, fn=-1, val=np.nan):
            idx = np.flatnonzero(mask)
            pick_ = (lambda v: v[idx] if np.ndim(v) else v)
            cols.add(len(idx), timestamp=t[idx], src_ip=src, dst_ip=dst, src_mac=pick_(smac),
                     dst_mac=pick_(dmac), src_port=pick_(sport), dst_port=pick_(dport), protocol=proto,
                     tcp_flags=flags, size=pick_(size), modbus_function=fn, modbus_value=pick_(val))

        mb, tcp = int(Protocol.MODBUS), int(Protocol.TCP)
        legs = [
            # (mask, dt, src, dst, sport, dport, proto, flags, size, fn, value, client->server)
            (keep_req, 0.0, c, s, cport, MODBUS_PORT, mb, pshack, req_size, 3, reg.astype(float), True),
            (keep_rest, 0.0004, s, c, MODBUS_PORT, cport, tcp, ack, 60, -1, np.nan, False),
            (keep_rest, 0.0021, s, c, MODBUS_PORT, cport, mb, pshack, resp_size, 3, vals + offset, False),
            (keep_rest, 0.0025, c, s, cport, MODBUS_PORT, tcp, ack, 60, -1, np.nan, True),
        ]
        for mask, dt, src, dst, sport, dport, proto, flags, size, fn, val, fwd in legs:
            smac = src_mac_c if fwd else src_mac_s
            emit(mask, tau + dt, src, dst, smac, dst, sport, dport, proto, flags, size, fn, val)
            # first leg of a relayed packet goes to the attacker, carrying the original value
            orig = vals if (proto == mb and not fwd) else val
            emit(mask & relayed, tau + dt - 0.0001, src, dst, src, att, sport, dport, proto, flags, size, fn,
                 orig)

    # UDP keepalives from the HMI to each PLC
    plcs = [d.id for d in topology.devices if d.role is DeviceRole.PLC]
    if plcs and config.keepalive_rate > 0:
        counts = rng.poisson(config.keepalive_rate, n)
        sec, k = _spread(rng, counts)
        hmi_dev = [d.id for d in topology.devices if d.role is DeviceRole.HMI]
        if hmi_dev:
            tau = sec + rng.uniform(0.5, 0.99, len(sec))
            hmi = ip_of[hmi_dev[0]]
            dst = np.array([ip_of[p] for p in plcs])[rng.integers(0, len(plcs), len(sec))]
            dos = _in_windows(tau, windows("DoS", lambda ev: ev.targets[0] == hmi_dev[0]))
            idx = np.flatnonzero(~dos)
            cols.add(len(idx), timestamp=tau[idx], src_ip=hmi, dst_ip=dst[idx], src_mac=hmi, dst_mac=dst[idx],
                     src_port=123, dst_port=123, protocol=int(Protocol.UDP), size=90)

    for ev in script.events:
        if ev.kind == "DoS":
            v = ip_of[ev.targets[0]]
            dur = ev.end - ev.start
            inten = float(ev.params.get("intensity", 1500))
            counts = rng.poisson(inten, dur)
            sec, _ = _spread(rng, counts)
            tau = ev.start + sec + rng.random(len(sec)) * 0.999
            cols.add(len(sec), timestamp=tau, src_ip=att, dst_ip=v, src_mac=att, dst_mac=v,
                     src_port=rng.integers(1024, 65536, len(sec)), dst_port=MODBUS_PORT,
                     protocol=int(Protocol.TCP), tcp_flags=int(TcpFlag.SYN), size=60)
        elif ev.kind == "Scan":
            v = ip_of[ev.targets[0]]
            dur = ev.end - ev.start
            counts = rng.poisson(float(ev.params.get("rate", 40)), dur)
            sec, _ = _spread(rng, counts)
            m = len(sec)
            tau = ev.start + sec + rng.random(m) * 0.998
            tau.sort()
            lo, hi = int(ev.params.get("port_low", 1)), int(ev.params.get("port_high", 1024))
            dports = lo + np.arange(m) % (hi - lo + 1)
            sports = rng.integers(1024, 65536, m)
            flags = np.array(UNUSUAL_SCAN_FLAGS)[rng.integers(0, len(UNUSUAL_SCAN_FLAGS), m)]
            cols.add(m, timestamp=tau, src_ip=att, dst_ip=v, src_mac=att, dst_mac=v, src_port=sports,
                     dst_port=dports, protocol=int(Protocol.TCP), tcp_flags=flags, size=60)
            cols.add(m, timestamp=tau + 0.0005, src_ip=v, dst_ip=att, src_mac=v, dst_mac=att, src_port=dports,
                     dst_port=sports, protocol=int(Protocol.TCP), tcp_flags=int(TcpFlag.RST | TcpFlag.ACK),
                     size=60)
        elif ev.kind == "MITM":
            a, b = (ip_of[x] for x in ev.targets)
            dur = ev.end - ev.start
            # gratuitous ARP replies poisoning both caches, two per second each
            tau = ev.start + np.repeat(np.arange(dur), 2) + np.tile([0.1, 0.6], dur)
            for victim, claimed in ((a, b), (b, a)):
                cols.add(len(tau), timestamp=tau, src_ip=claimed, dst_ip=victim, src_mac=att, dst_mac=victim,
                         protocol=int(Protocol.ARP), size=42)
    return cols.build(ips, macs)


def simulate(topology: Topology, script: ScenarioScript, config: SimConfig = SimConfig()) -> SimulationResult:
    validate_script(script, topology)
    process, reported, true, totals = simulate_process(script, topology, config)
    packets = simulate_traffic(script, topology, reported, config)
    return SimulationResult(process, packets, ground_truth(script, topology, config), reported, true, totals)


def write_ground_truth(events: Sequence[GroundTruthEvent], path, provenance: Optional[dict] = None) -> None:
    payload = {"provenance": provenance or {}, "events": [e.to_dict() for e in events]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_ground_truth(path) -> List[GroundTruthEvent]:
    payload = json.loads(Path(path).read_text())
    return [GroundTruthEvent.from_dict(d) for d in payload["events"]]
