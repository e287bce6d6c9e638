"""Domain types shared by every stage: topology, packet log, process log."""

from __future__ import annotations

import enum
import gzip
import io
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLAG_VALUES = (-2, -1, 0, 1, 2)


class DeviceRole(str, enum.Enum):
    PLC = "PLC"
    FLOW_SENSOR_IP = "FlowSensorIP"
    HMI = "HMI"
    EXTERNAL = "External"


class ComponentKind(str, enum.Enum):
    TANK = "Tank"
    PUMP = "Pump"
    VALVE = "Valve"
    FLOW_SENSOR_WIRED = "FlowSensorWired"
    RESERVOIR = "Reservoir"


class Protocol(enum.IntEnum):
    TCP = 0
    MODBUS = 1
    ARP = 2
    UDP = 3


class TcpFlag(enum.IntFlag):
    """TCP flag bits; a combination read as an integer is its encoding."""

    FIN = 1
    SYN = 2
    RST = 4
    PSH = 8
    ACK = 16
    URG = 32


_FLAG_ORDER = (TcpFlag.FIN, TcpFlag.SYN, TcpFlag.RST, TcpFlag.PSH, TcpFlag.ACK, TcpFlag.URG)


def flags_to_text(value: int) -> str:
    return "|".join(f.name for f in _FLAG_ORDER if value & f)


def flags_from_text(text: str) -> int:
    text = text.strip()
    if not text:
        return 0
    out = 0
    for part in text.split("|"):
        out |= TcpFlag[part.strip()]
    return int(out)


# --------------------------------------------------------------------------
# Topology
# --------------------------------------------------------------------------


class TopologyError(ValueError):
    """Topology file could not be parsed."""


class TopologyInvariantError(TopologyError):
    """Topology parsed but violates a structural rule; ``rule`` names it."""

    def __init__(self, rule: str, detail: str):
        super().__init__(f"invariant '{rule}' violated: {detail}")
        self.rule = rule


@dataclass(frozen=True)
class NetworkDevice:
    id: str
    role: DeviceRole
    ip: str
    mac: str


@dataclass(frozen=True)
class PhysicalComponent:
    id: str
    kind: ComponentKind


@dataclass(frozen=True)
class Topology:
    devices: Tuple[NetworkDevice, ...]
    components: Tuple[PhysicalComponent, ...]
    zones: Dict[str, FrozenSet[str]]
    comm_links: FrozenSet[FrozenSet[str]]
    phys_links: FrozenSet[Tuple[str, str, str]]

    def __post_init__(self):
        validate_topology(self)

    # lookups -----------------------------------------------------------
    @property
    def device_ids(self) -> List[str]:
        return [d.id for d in self.devices]

    @property
    def tank_ids(self) -> List[str]:
        return [c.id for c in self.components if c.kind is ComponentKind.TANK]

    def device(self, device_id: str) -> NetworkDevice:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)

    def component(self, component_id: str) -> PhysicalComponent:
        for c in self.components:
            if c.id == component_id:
                return c
        raise KeyError(component_id)

    def has_device(self, device_id: str) -> bool:
        return any(d.id == device_id for d in self.devices)

    def has_component(self, component_id: str) -> bool:
        return any(c.id == component_id for c in self.components)

    def zone_of(self, member: str) -> str:
        for zone_id, members in self.zones.items():
            if member in members:
                return zone_id
        raise KeyError(member)

    def comm_neighbors(self, device_id: str) -> List[str]:
        out = []
        for link in self.comm_links:
            if device_id in link:
                (other,) = link - {device_id}
                out.append(other)
        return sorted(out, key=self.device_ids.index)

    def comm_linked(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.comm_links

    def zone_tanks(self, zone_id: str) -> List[str]:
        return [t for t in self.tank_ids if t in self.zones[zone_id]]

    def controller_tanks(self, device_id: str) -> List[str]:
        """Tanks in the zone of a device (the data it reports upstream)."""
        return self.zone_tanks(self.zone_of(device_id))

    def zone_controller(self, zone_id: str) -> Optional[str]:
        for d in self.devices:
            if d.role is DeviceRole.PLC and d.id in self.zones[zone_id]:
                return d.id
        return None

    def tank_links(self) -> List[Tuple[str, str, str]]:
        """Physical links whose both ends are tanks, in a stable order."""
        tanks = set(self.tank_ids)
        links = [p for p in self.phys_links if p[0] in tanks and p[2] in tanks]
        return sorted(links, key=lambda p: (self.tank_ids.index(p[0]), self.tank_ids.index(p[2])))

    def link_of_actuator(self, actuator: str) -> Tuple[str, str, str]:
        for link in self.phys_links:
            if link[1] == actuator:
                return link
        raise KeyError(actuator)

    def tank_neighbors(self, tank: str) -> List[str]:
        tanks = set(self.tank_ids)
        out = set()
        for a, _, b in self.phys_links:
            if a == tank and b in tanks:
                out.add(b)
            if b == tank and a in tanks:
                out.add(a)
        return sorted(out, key=self.tank_ids.index)

    def downstream_tanks(self, tank: str) -> List[str]:
        tanks = set(self.tank_ids)
        seen: List[str] = []
        stack = [tank]
        while stack:
            cur = stack.pop()
            for a, _, b in self.phys_links:
                if a == cur and b in tanks and b not in seen:
                    seen.append(b)
                    stack.append(b)
        return seen


def validate_topology(t: Topology) -> None:
    ids_dev = [d.id for d in t.devices]
    ids_comp = [c.id for c in t.components]
    all_ids = ids_dev + ids_comp
    if len(set(all_ids)) != len(all_ids):
        dup = sorted({i for i in all_ids if all_ids.count(i) > 1})
        raise TopologyInvariantError("unique-ids", f"duplicate identifiers {dup}")
    for attr in ("ip", "mac"):
        vals = [getattr(d, attr) for d in t.devices]
        if len(set(vals)) != len(vals):
            dup = sorted({v for v in vals if vals.count(v) > 1})
            raise TopologyInvariantError(f"unique-{attr}", f"duplicate {attr} addresses {dup}")
    if not t.zones:
        raise TopologyInvariantError("zone-partition", "no zones declared")
    seen: Dict[str, str] = {}
    for zone_id, members in t.zones.items():
        for m in members:
            if m not in all_ids:
                raise TopologyInvariantError("zone-partition", f"zone {zone_id} lists undeclared member {m}")
            if m in seen:
                raise TopologyInvariantError("zone-partition", f"{m} is in zones {seen[m]} and {zone_id}")
            seen[m] = zone_id
    missing = [i for i in all_ids if i not in seen]
    if missing:
        raise TopologyInvariantError("zone-partition", f"not assigned to any zone: {missing}")
    for link in t.comm_links:
        if len(link) != 2:
            raise TopologyInvariantError("comm-endpoints", f"degenerate link {sorted(link)}")
        for end in link:
            if end not in ids_dev:
                raise TopologyInvariantError("comm-endpoints", f"link endpoint {end} is not a declared device")
    kinds = {c.id: c.kind for c in t.components}
    for src, act, dst in t.phys_links:
        for end in (src, dst):
            if end not in kinds:
                raise TopologyInvariantError("phys-endpoints", f"undeclared component {end}")
        if kinds.get(act) not in (ComponentKind.PUMP, ComponentKind.VALVE):
            raise TopologyInvariantError("phys-actuator", f"actuator {act} of link {src}->{dst} is not a Pump or Valve")


def _parse_kv(tokens: Sequence[str], lineno: int) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise TopologyError(f"line {lineno}: expected key=value, got '{tok}'")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _require(kv: Dict[str, str], key: str, lineno: int, stmt: str) -> str:
    if key not in kv or not kv[key]:
        raise TopologyError(f"line {lineno}: {stmt} is missing field '{key}'")
    return kv[key]


def parse_topology(text: str) -> Topology:
    devices: List[NetworkDevice] = []
    components: List[PhysicalComponent] = []
    zones: Dict[str, FrozenSet[str]] = {}
    comm: List[FrozenSet[str]] = []
    phys: List[Tuple[str, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "device":
            if not rest:
                raise TopologyError(f"line {lineno}: device needs an id")
            kv = _parse_kv(rest[1:], lineno)
            role_txt = _require(kv, "role", lineno, "device")
            try:
                role = DeviceRole(role_txt)
            except ValueError:
                raise TopologyError(f"line {lineno}: field 'role' has unknown value '{role_txt}'") from None
            devices.append(NetworkDevice(rest[0], role, _require(kv, "ip", lineno, "device"),
                                         _require(kv, "mac", lineno, "device").lower()))
        elif head == "component":
            if not rest:
                raise TopologyError(f"line {lineno}: component needs an id")
            kv = _parse_kv(rest[1:], lineno)
            kind_txt = _require(kv, "kind", lineno, "component")
            try:
                kind = ComponentKind(kind_txt)
            except ValueError:
                raise TopologyError(f"line {lineno}: field 'kind' has unknown value '{kind_txt}'") from None
            components.append(PhysicalComponent(rest[0], kind))
        elif head == "zone":
            if not rest:
                raise TopologyError(f"line {lineno}: zone needs an id")
            kv = _parse_kv(rest[1:], lineno)
            members = [m for m in _require(kv, "members", lineno, "zone").split(",") if m]
            if rest[0] in zones:
                raise TopologyError(f"line {lineno}: zone {rest[0]} declared twice")
            zones[rest[0]] = frozenset(members)
        elif head == "comm":
            if len(rest) != 2:
                raise TopologyError(f"line {lineno}: comm takes exactly two device ids")
            comm.append(frozenset(rest))
        elif head == "phys":
            if len(rest) != 3:
                raise TopologyError(f"line {lineno}: phys takes <from> <actuator> <to>")
            phys.append((rest[0], rest[1], rest[2]))
        else:
            raise TopologyError(f"line {lineno}: unknown statement '{head}'")
    return Topology(tuple(devices), tuple(components), zones, frozenset(comm), frozenset(phys))


def load_topology(path) -> Topology:
    text = Path(path).read_text()
    return parse_topology(text)


def serialize_topology(t: Topology) -> str:
    lines = []
    for d in t.devices:
        lines.append(f"device {d.id} role={d.role.value} ip={d.ip} mac={d.mac}")
    for c in t.components:
        lines.append(f"component {c.id} kind={c.kind.value}")
    order = {i: n for n, i in enumerate([d.id for d in t.devices] + [c.id for c in t.components])}
    for zone_id, members in t.zones.items():
        lines.append(f"zone {zone_id} members={','.join(sorted(members, key=order.__getitem__))}")
    for link in sorted(t.comm_links, key=lambda s: sorted(order[x] for x in s)):
        a, b = sorted(link, key=order.__getitem__)
        lines.append(f"comm {a} {b}")
    for src, act, dst in sorted(t.phys_links, key=lambda p: (order[p[0]], order[p[1]])):
        lines.append(f"phys {src} {act} {dst}")
    return "\n".join(lines) + "\n"


def demo_topology_text() -> str:
    return resources.files("cpsreason").joinpath("data/demo_topology.txt").read_text()


def demo_topology() -> Topology:
    return parse_topology(demo_topology_text())


# --------------------------------------------------------------------------
# Packet log
# --------------------------------------------------------------------------

PACKET_FIELDS = ("timestamp", "src_ip", "dst_ip", "src_mac", "dst_mac", "src_port", "dst_port",
                 "protocol", "tcp_flags", "size", "modbus_function", "modbus_value")


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_mac: str
    dst_mac: str
    src_port: int
    dst_port: int
    protocol: Protocol
    tcp_flags: int
    size: int
    modbus_function: Optional[int] = None
    modbus_value: Optional[float] = None


class PacketLogError(ValueError):
    pass


@dataclass
class PacketLog:
    """Columnar packet log; address columns are codes into ``ips``/``macs``."""

    timestamp: np.ndarray
    src_ip: np.ndarray
    dst_ip: np.ndarray
    src_mac: np.ndarray
    dst_mac: np.ndarray
    src_port: np.ndarray
    dst_port: np.ndarray
    protocol: np.ndarray
    tcp_flags: np.ndarray
    size: np.ndarray
    modbus_function: np.ndarray  # -1 when absent
    modbus_value: np.ndarray  # NaN when absent
    ips: Tuple[str, ...] = ()
    macs: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return int(self.timestamp.shape[0])

    @classmethod
    def empty(cls) -> "PacketLog":
        return cls.from_records([])

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord]) -> "PacketLog":
        records = list(records)
        ips: Dict[str, int] = {}
        macs: Dict[str, int] = {}

        def code(table, key):
            return table.setdefault(key, len(table))

        n = len(records)
        cols = {
            "timestamp": np.empty(n, np.float64),
            "src_ip": np.empty(n, np.int32), "dst_ip": np.empty(n, np.int32),
            "src_mac": np.empty(n, np.int32), "dst_mac": np.empty(n, np.int32),
            "src_port": np.empty(n, np.int32), "dst_port": np.empty(n, np.int32),
            "protocol": np.empty(n, np.int8), "tcp_flags": np.empty(n, np.uint8),
            "size": np.empty(n, np.int32), "modbus_function": np.empty(n, np.int16),
            "modbus_value": np.empty(n, np.float64),
        }
        for i, r in enumerate(records):
            cols["timestamp"][i] = r.timestamp
            cols["src_ip"][i] = code(ips, r.src_ip)
            cols["dst_ip"][i] = code(ips, r.dst_ip)
            cols["src_mac"][i] = code(macs, r.src_mac.lower())
            cols["dst_mac"][i] = code(macs, r.dst_mac.lower())
            cols["src_port"][i] = r.src_port
            cols["dst_port"][i] = r.dst_port
            cols["protocol"][i] = int(r.protocol)
            cols["tcp_flags"][i] = r.tcp_flags
            cols["size"][i] = r.size
            cols["modbus_function"][i] = -1 if r.modbus_function is None else r.modbus_function
            cols["modbus_value"][i] = np.nan if r.modbus_value is None else r.modbus_value
        log = cls(**cols, ips=tuple(ips), macs=tuple(macs))
        log.validate()
        return log

    def records(self) -> Iterator[PacketRecord]:
        for i in range(len(self)):
            fn = int(self.modbus_function[i])
            val = float(self.modbus_value[i])
            yield PacketRecord(
                float(self.timestamp[i]), self.ips[self.src_ip[i]], self.ips[self.dst_ip[i]],
                self.macs[self.src_mac[i]], self.macs[self.dst_mac[i]],
                int(self.src_port[i]), int(self.dst_port[i]), Protocol(int(self.protocol[i])),
                int(self.tcp_flags[i]), int(self.size[i]),
                None if fn < 0 else fn, None if np.isnan(val) else val,
            )

    def validate(self) -> None:
        if len(self) and np.any(np.diff(self.timestamp) < 0):
            raise PacketLogError("timestamps must be non-decreasing")
        is_mb = self.protocol == Protocol.MODBUS
        has_fn = self.modbus_function >= 0
        has_val = ~np.isnan(self.modbus_value)
        if np.any(is_mb != has_fn) or np.any(is_mb != has_val):
            raise PacketLogError("modbus fields must be present iff protocol is MODBUS")

    def select(self, mask: np.ndarray) -> "PacketLog":
        kw = {name: getattr(self, name)[mask] for name in PACKET_FIELDS}
        return PacketLog(**kw, ips=self.ips, macs=self.macs)

    # serialization -------------------------------------------------------
    def to_frame(self) -> pd.DataFrame:
        flag_names = [flags_to_text(v) for v in range(64)]
        proto_names = [p.name for p in Protocol]
        fn = pd.array(self.modbus_function, dtype="Int16")
        fn[self.modbus_function < 0] = pd.NA
        return pd.DataFrame({
            "timestamp": self.timestamp,
            "src_ip": pd.Categorical.from_codes(self.src_ip, categories=list(self.ips)),
            "dst_ip": pd.Categorical.from_codes(self.dst_ip, categories=list(self.ips)),
            "src_mac": pd.Categorical.from_codes(self.src_mac, categories=list(self.macs)),
            "dst_mac": pd.Categorical.from_codes(self.dst_mac, categories=list(self.macs)),
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "protocol": pd.Categorical.from_codes(self.protocol.astype(np.int16), categories=proto_names),
            "tcp_flags": pd.Categorical.from_codes(self.tcp_flags.astype(np.int16), categories=flag_names),
            "size": self.size,
            "modbus_function": fn,
            "modbus_value": self.modbus_value,
        })

    def write_text(self, path, header_comment: Optional[str] = None) -> None:
        """One comma-separated record per line; absent MODBUS fields are empty."""
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        kwargs = {"compresslevel": 1} if path.suffix == ".gz" else {}
        with opener(path, "wt", newline="", **kwargs) as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            self.to_frame().to_csv(fh, index=False, float_format="%.6f", na_rep="")

    @classmethod
    def read_text(cls, path) -> "PacketLog":
        path = Path(path)
        df = pd.read_csv(path, comment="#", keep_default_na=False, na_values={"modbus_function": [""], "modbus_value": [""]},
                         dtype={"src_ip": "category", "dst_ip": "category", "src_mac": "category",
                                "dst_mac": "category", "protocol": str, "tcp_flags": "category"})
        missing = [f for f in PACKET_FIELDS if f not in df.columns]
        if missing:
            raise PacketLogError(f"{path}: missing columns {missing}")
        ips = sorted(set(df["src_ip"].cat.categories) | set(df["dst_ip"].cat.categories))
        macs = sorted(set(df["src_mac"].cat.categories) | set(df["dst_mac"].cat.categories))
        ip_code = {a: i for i, a in enumerate(ips)}
        mac_code = {a: i for i, a in enumerate(macs)}

        def recode(col, table):
            cats = df[col].cat.categories
            lut = np.array([table[c] for c in cats], dtype=np.int32)
            return lut[df[col].cat.codes.to_numpy()] if len(cats) else np.zeros(len(df), np.int32)

        flag_cats = df["tcp_flags"].cat.categories
        flag_lut = np.array([flags_from_text(str(c)) for c in flag_cats], dtype=np.uint8)
        try:
            protocol = df["protocol"].map({p.name: int(p) for p in Protocol}).to_numpy()
            if np.isnan(protocol.astype(float)).any():
                raise KeyError
        except KeyError:
            raise PacketLogError(f"{path}: unknown protocol name") from None
        log = cls(
            timestamp=df["timestamp"].to_numpy(np.float64),
            src_ip=recode("src_ip", ip_code), dst_ip=recode("dst_ip", ip_code),
            src_mac=recode("src_mac", mac_code), dst_mac=recode("dst_mac", mac_code),
            src_port=df["src_port"].to_numpy(np.int32), dst_port=df["dst_port"].to_numpy(np.int32),
            protocol=protocol.astype(np.int8),
            tcp_flags=flag_lut[df["tcp_flags"].cat.codes.to_numpy()] if len(flag_cats) else np.zeros(len(df), np.uint8),
            size=df["size"].to_numpy(np.int32),
            modbus_function=df["modbus_function"].fillna(-1).to_numpy(np.int16),
            modbus_value=df["modbus_value"].to_numpy(np.float64),
            ips=tuple(ips), macs=tuple(macs),
        )
        log.validate()
        return log

    def save_npz(self, path, provenance: Optional[dict] = None) -> None:
        arrays = {name: getattr(self, name) for name in PACKET_FIELDS}
        meta = {"format": "packet-log", "version": 1, "ips": list(self.ips), "macs": list(self.macs),
                "provenance": provenance or {}}
        import json
        with open(path, "wb") as fh:
            np.savez_compressed(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load_npz(cls, path) -> "PacketLog":
        import json
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != "packet-log":
                raise PacketLogError(f"{path}: not a packet log archive")
            kw = {name: z[name] for name in PACKET_FIELDS}
        return cls(**kw, ips=tuple(meta["ips"]), macs=tuple(meta["macs"]))

    @classmethod
    def load(cls, path) -> "PacketLog":
        path = Path(path)
        if path.suffix == ".npz":
            return cls.load_npz(path)
        return cls.read_text(path)


def concat_packet_logs(logs: Sequence[PacketLog]) -> PacketLog:
    """Merge logs (re-coding address tables) and sort by timestamp (stable)."""
    ips = sorted({a for log in logs for a in log.ips})
    macs = sorted({a for log in logs for a in log.macs})
    ip_code = {a: i for i, a in enumerate(ips)}
    mac_code = {a: i for i, a in enumerate(macs)}
    parts: Dict[str, List[np.ndarray]] = {name: [] for name in PACKET_FIELDS}
    for log in logs:
        ip_lut = np.array([ip_code[a] for a in log.ips] or [0], dtype=np.int32)
        mac_lut = np.array([mac_code[a] for a in log.macs] or [0], dtype=np.int32)
        for name in PACKET_FIELDS:
            col = getattr(log, name)
            if name in ("src_ip", "dst_ip"):
                col = ip_lut[col]
            elif name in ("src_mac", "dst_mac"):
                col = mac_lut[col]
            parts[name].append(col)
    cols = {name: np.concatenate(parts[name]) if parts[name] else np.empty(0) for name in PACKET_FIELDS}
    order = np.argsort(cols["timestamp"], kind="stable")
    cols = {name: c[order] for name, c in cols.items()}
    return PacketLog(**cols, ips=tuple(ips), macs=tuple(macs))


# --------------------------------------------------------------------------
# Process log
# --------------------------------------------------------------------------

TANKS = tuple(f"T{i}" for i in range(1, 9))
PUMPS = tuple(f"P{i}" for i in range(1, 7))
VALVES = ("V10", "V13", "V17", "V18", "V20", "V22")
FLOW_SENSORS = ("FS1", "FS2", "FS3", "FS4")

PROCESS_COLUMNS = (("timestamp",) + tuple(f"H_{t}" for t in TANKS) + tuple(f"S_{p}" for p in PUMPS)
                   + tuple(f"S_{v}" for v in VALVES) + tuple(f"F_{f}" for f in FLOW_SENSORS))


@dataclass(frozen=True)
class ProcessRecord:
    timestamp: int
    levels: Tuple[float, ...]
    pump_states: Tuple[int, ...]
    valve_states: Tuple[int, ...]
    flows: Tuple[float, ...]


class ProcessLogError(ValueError):
    pass


def validate_process_log(df: pd.DataFrame) -> None:
    if "timestamp" not in df.columns:
        raise ProcessLogError("process log lacks a timestamp column")
    ts = df["timestamp"].to_numpy()
    if len(ts) and not np.array_equal(ts, np.arange(ts[0], ts[0] + len(ts))):
        raise ProcessLogError("process log must hold exactly one record per second")


def write_process_log(df: pd.DataFrame, path, header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        df.to_csv(fh, index=False, na_rep="nan", float_format="%.6f")


def read_process_log(path) -> pd.DataFrame:
    df = pd.read_csv(path, comment="#", na_values=["nan"])
    validate_process_log(df)
    return df


def process_records(df: pd.DataFrame) -> Iterator[ProcessRecord]:
    h = [c for c in df.columns if c.startswith("H_")]
    p = [c for c in df.columns if c.startswith("S_P")]
    v = [c for c in df.columns if c.startswith("S_V")]
    f = [c for c in df.columns if c.startswith("F_")]
    for row in df.itertuples(index=False):
        d = row._asdict()
        yield ProcessRecord(int(d["timestamp"]), tuple(d[c] for c in h), tuple(int(d[c]) for c in p),
                            tuple(int(d[c]) for c in v), tuple(d[c] for c in f))


def read_text_buffer(text: str) -> io.StringIO:
    return io.StringIO(text)
