"""Stage 2: group network flags, cut anomalous episodes and match event signatures."""

from __future__ import annotations

import json
import logging
import shlex
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .core import DeviceRole, Topology
from .featurize import NETWORK_KINDS
from .pipeline import FlagMatrix

logger = logging.getLogger(__name__)

EVENT_CLASSES = ("PhysicalFailure", "CyberAttack", "CyberPhysicalAttack", "NetworkFailure", "Unknown")
COARSE_RULES = ("2", "3", "4", "5", "6")
COARSE_CLASS = {"2": "PhysicalFailure", "3": "CyberAttack", "4": "NetworkFailure", "5": "CyberPhysicalAttack",
                "6": "NetworkFailure"}
MARKER_KINDS = ("n_ipmac", "n_tcp")


class SignatureDBError(ValueError):
    pass


# --------------------------------------------------------------------------
# grouping
# --------------------------------------------------------------------------


def group_device_flags(flags) -> Tuple[int, bool]:
    """Grouped flag and malicious marker from one device's six flags at one second.

    ``flags`` is a mapping kind -> flag or a sequence in the canonical kind order.
    """
    if not isinstance(flags, dict):
        flags = dict(zip(NETWORK_KINDS, flags))
    grouped = int(any(int(v) != 0 for v in flags.values()))
    marker = any(int(flags.get(k, 0)) == 1 for k in MARKER_KINDS)
    return grouped, marker


@dataclass
class GroupedFlags:
    devices: List[str]
    grouped: np.ndarray  # (seconds, devices) int8 in {0, 1}
    marker: np.ndarray  # (seconds, devices) bool
    external: np.ndarray  # (seconds, devices) bool, unknown address seen


def group_flags(fm: FlagMatrix, topology: Topology) -> GroupedFlags:
    devices = [d for d in topology.device_ids if f"{d}.n_packet" in fm.feature_ids]
    n = fm.n_seconds
    grouped = np.zeros((n, len(devices)), np.int8)
    marker = np.zeros((n, len(devices)), bool)
    external = np.zeros((n, len(devices)), bool)
    for j, d in enumerate(devices):
        cols = [fm.feature_ids.index(f"{d}.{k}") for k in NETWORK_KINDS if f"{d}.{k}" in fm.feature_ids]
        grouped[:, j] = (fm.flags[:, cols] != 0).any(axis=1)
        ipmac = fm.column(f"{d}.n_ipmac") == 1 if f"{d}.n_ipmac" in fm.feature_ids else np.zeros(n, bool)
        tcp = fm.column(f"{d}.n_tcp") == 1 if f"{d}.n_tcp" in fm.feature_ids else np.zeros(n, bool)
        marker[:, j] = ipmac | tcp
        external[:, j] = ipmac
    return GroupedFlags(devices, grouped, marker, external)


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Span:
    entity: str
    start: int
    end: int  # exclusive
    disrupted: bool = False  # some +-2 flag inside


def _spans(flags: np.ndarray, entity: str, gap: int) -> List[Span]:
    idx = np.flatnonzero(flags != 0)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > gap + 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]]) + 1
    return [Span(entity, int(s), int(e), bool(np.any(np.abs(flags[s:e]) == 2))) for s, e in zip(starts, ends)]


def related(a: str, b: str, topology: Topology, disrupted: bool = False) -> bool:
    """Entities (device ids or tank ids) that can share an event.

    A tank relates to the devices of its zone. A disrupted tank span also
    relates to every device its data travels through.
    """
    dev = set(topology.device_ids)
    if a == b:
        return True
    if a in dev and b in dev:
        return topology.comm_linked(a, b) or topology.zone_of(a) == topology.zone_of(b)
    if a in dev or b in dev:
        d, t = (a, b) if a in dev else (b, a)
        return t in topology.zones[topology.zone_of(d)] or (disrupted and t in reported_tanks(d, topology))
    return b in topology.tank_neighbors(a)


@dataclass
class Episode:
    start: int
    end: int
    spans: List[Span]

    @property
    def entities(self) -> List[str]:
        seen = []
        for s in self.spans:
            if s.entity not in seen:
                seen.append(s.entity)
        return seen


def segment_episodes(fm: FlagMatrix, topology: Topology, gap: int = 20, horizon: int = 300,
                     grouped: Optional[GroupedFlags] = None) -> List[Episode]:
    """Connected components of flag spans linked by time proximity and topology.

    Two spans link when their entities are related, the later one starts no
    more than ``gap`` seconds after the earlier one ends, and their onsets
    lie within ``horizon`` seconds. The horizon keeps a long aftereffect from
    absorbing an unrelated event that happens to start while it lingers. A
    tank span never links to a device span that starts after it: a physical
    consequence cannot precede its network cause.
    """
    grouped = grouped or group_flags(fm, topology)
    spans: List[Span] = []
    for j, d in enumerate(grouped.devices):
        spans += _spans(grouped.grouped[:, j], d, gap)
    for t in topology.tank_ids:
        fid = f"H_{t}"
        if fid in fm.feature_ids:
            spans += _spans(fm.column(fid), t, gap)
    spans.sort(key=lambda s: (s.start, s.entity))
    parent = list(range(len(spans)))
    devices = set(grouped.devices)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    rel_cache: Dict[Tuple[str, str, bool], bool] = {}
    for i, a in enumerate(spans):
        for j in range(i + 1, len(spans)):
            b = spans[j]
            if b.start > a.start + horizon:
                break
            if b.start > a.end + gap:
                continue
            if b.start > a.start and a.entity not in devices and b.entity in devices:
                continue
            key = (a.entity, b.entity, a.disrupted or b.disrupted)
            if key not in rel_cache:
                rel_cache[key] = related(a.entity, b.entity, topology, key[2])
            if rel_cache[key]:
                parent[find(j)] = find(i)
    groups: Dict[int, List[Span]] = {}
    for i, s in enumerate(spans):
        groups.setdefault(find(i), []).append(s)
    episodes = [Episode(min(s.start for s in g), max(s.end for s in g), g) for g in groups.values()]
    episodes.sort(key=lambda e: (e.start, e.end, e.entities))
    return episodes


# --------------------------------------------------------------------------
# facts and rules
# --------------------------------------------------------------------------


@dataclass
class EpisodeFacts:
    start: int
    end: int
    net: FrozenSet[str]
    malicious: FrozenSet[str]
    external: FrozenSet[str]
    tanks: FrozenSet[str]  # any nonzero flag
    disrupted: FrozenSet[str]  # some +-2 flag and no +-1 after the last one
    disrupted_window: FrozenSet[str]  # +-2 anywhere in [start, end), episode member or not
    onset_sign: Dict[str, int]
    onset_time: Dict[str, int]
    impact_sign: Dict[str, int] = field(default_factory=dict)

    @property
    def impact(self) -> FrozenSet[str]:
        """Flagged tanks deviating while their data is intact: genuine physical deviation."""
        return self.tanks - self.disrupted


def episode_facts(ep: Episode, fm: FlagMatrix, grouped: GroupedFlags, topology: Topology) -> EpisodeFacts:
    sl = slice(ep.start, ep.end)
    entities = set(ep.entities)
    net, mal, ext = set(), set(), set()
    onset_time: Dict[str, int] = {}
    for j, d in enumerate(grouped.devices):
        if d not in entities:
            continue
        g = grouped.grouped[sl, j]
        if g.any():
            net.add(d)
            onset_time[d] = ep.start + int(np.argmax(g != 0))
        if grouped.marker[sl, j].any():
            mal.add(d)
        if grouped.external[sl, j].any():
            ext.add(d)
    tanks, disrupted, window_disrupted, onset_sign, impact_sign = set(), set(), set(), {}, {}
    for t in topology.tank_ids:
        if f"H_{t}" not in fm.feature_ids:
            continue
        col = fm.column(f"H_{t}")[sl]
        if np.any(np.abs(col) == 2):
            window_disrupted.add(t)
        if t not in entities:
            continue
        nz = np.flatnonzero(col)
        if len(nz):
            tanks.add(t)
            onset_sign[t] = int(np.sign(col[nz[0]]))
            onset_time[t] = ep.start + int(nz[0])
            # a deviation still present once reporting resumes counts as impact
            two = np.flatnonzero(np.abs(col) == 2)
            after = nz[nz > two[-1]] if len(two) else nz
            if len(after):
                impact_sign[t] = int(np.sign(col[after[0]]))
            else:
                disrupted.add(t)
    return EpisodeFacts(ep.start, ep.end, frozenset(net), frozenset(mal), frozenset(ext), frozenset(tanks),
                        frozenset(disrupted), frozenset(window_disrupted), onset_sign, onset_time, impact_sign)


def reported_tanks(device: str, topology: Topology) -> List[str]:
    """Tanks whose historian values travel through ``device``."""
    if topology.device(device).role is DeviceRole.HMI:
        return list(topology.tank_ids)
    return topology.controller_tanks(device)


def _connected(nodes: FrozenSet[str], topology: Topology) -> bool:
    if not nodes:
        return False
    start = next(iter(sorted(nodes)))
    seen, stack = {start}, [start]
    while stack:
        cur = stack.pop()
        for nb in topology.tank_neighbors(cur):
            if nb in nodes and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen == set(nodes)


Predicate = Callable[[EpisodeFacts, Tuple[str, ...], Topology], bool]


def _r8(f: EpisodeFacts, slot, topo) -> bool:
    a, _, b = slot
    return (len(f.tanks) >= 2 and a in f.tanks and b in f.tanks
            and f.onset_sign[a] == -f.onset_sign[b] and _connected(f.tanks, topo))


def _r10(f: EpisodeFacts, slot, topo) -> bool:
    return f.net == frozenset(slot) and len(slot) == 2 and topo.comm_linked(*slot)


def _r11(f: EpisodeFacts, slot, topo) -> bool:
    (x,) = slot
    tanks = reported_tanks(x, topo)
    if tanks:
        return all(t in f.disrupted_window for t in tanks)
    # a device without process data of its own: every peer lost contact
    nbrs = topo.comm_neighbors(x)
    return bool(nbrs) and all(n in f.net for n in nbrs)


def _r12(f: EpisodeFacts, slot, topo) -> bool:
    (x,) = slot
    nbrs = set(topo.comm_neighbors(x))
    flagged_nbrs = f.net & nbrs
    return (x in f.net and f.net <= nbrs | {x} and bool(flagged_nbrs)
            and not (flagged_nbrs & f.malicious))


def _in_victim_zones(f: EpisodeFacts, slot, topo) -> FrozenSet[str]:
    zones = {topo.zone_of(d) for d in slot}
    return frozenset(t for t in f.impact if topo.zone_of(t) in zones)


PREDICATES: Dict[str, Predicate] = {
    "any_flag": lambda f, s, t: bool(f.net or f.tanks),
    "physical_only": lambda f, s, t: bool(f.tanks) and not f.net,
    "network_malicious_no_impact": lambda f, s, t: bool(f.net) and bool(f.malicious) and not f.impact,
    "network_benign_no_impact": lambda f, s, t: bool(f.net) and not f.malicious and not f.impact,
    "network_malicious_impact": lambda f, s, t: bool(f.net) and bool(f.malicious) and bool(f.impact),
    "network_benign_impact": lambda f, s, t: bool(f.net) and not f.malicious and bool(f.impact),
    "single_tank": lambda f, s, t: not f.net and f.tanks == frozenset(s),
    "coherent_link": lambda f, s, t: not f.net and _r8(f, s, t),
    "single_device": lambda f, s, t: f.net == frozenset(s) and not f.tanks,
    "device_malicious": lambda f, s, t: all(d in f.malicious for d in s),
    "device_pair": _r10,
    "impact_in_victim_zones": lambda f, s, t: bool(_in_victim_zones(f, s, t)),
    "reported_data_disrupted": _r11,
    "true_impact": lambda f, s, t: bool(f.impact),
    "isolated_with_peers": _r12,
}


@dataclass(frozen=True)
class SignatureRule:
    rule_id: str
    parent: Optional[str]
    predicate: str
    slot: str  # "none", "tank", "link", "device" or "pair"
    description: str = ""


@dataclass(frozen=True)
class EventSignature:
    signature_id: str
    rules: Tuple[str, ...]
    slot: str
    event_class: str
    template: str


@dataclass
class SignatureDB:
    rules: Dict[str, SignatureRule]
    signatures: Dict[str, EventSignature]
    instances: List[Tuple[str, Tuple[str, ...]]]  # (signature id, slot values), db order

    def validate(self) -> None:
        for r in self.rules.values():
            if r.parent is not None and r.parent not in self.rules:
                raise SignatureDBError(f"rule {r.rule_id} refers to unknown parent {r.parent}")
            if r.predicate not in PREDICATES:
                raise SignatureDBError(f"rule {r.rule_id} uses unknown predicate {r.predicate}")
        for s in self.signatures.values():
            for rid in s.rules:
                if rid not in self.rules:
                    raise SignatureDBError(f"signature {s.signature_id} refers to unknown rule {rid}")
            if s.event_class not in EVENT_CLASSES:
                raise SignatureDBError(f"signature {s.signature_id} has unknown class {s.event_class}")
        for sid, _ in self.instances:
            if sid not in self.signatures:
                raise SignatureDBError(f"instance of unknown signature {sid}")

    def closure(self, rule_ids: Sequence[str]) -> List[str]:
        out: List[str] = []
        for rid in rule_ids:
            chain = []
            cur: Optional[str] = rid
            while cur is not None:
                chain.append(cur)
                cur = self.rules[cur].parent
            for c in reversed(chain):
                if c not in out:
                    out.append(c)
        return out

    def specificity(self, signature_id: str) -> int:
        return len(self.closure(self.signatures[signature_id].rules))


DEFAULT_RULES = (
    SignatureRule("1", None, "any_flag", "none", "flags localize the affected components"),
    SignatureRule("2", None, "physical_only", "none", "physical flags only: physical failure"),
    SignatureRule("3", None, "network_malicious_no_impact", "none", "network flags with malicious activity: cyber attack"),
    SignatureRule("4", None, "network_benign_no_impact", "none", "network flags without malicious activity: network failure"),
    SignatureRule("5", None, "network_malicious_impact", "none", "network and physical flags with malicious activity: cyber-physical attack"),
    SignatureRule("6", None, "network_benign_impact", "none", "network and physical flags without malicious activity: network failure with physical impact"),
    SignatureRule("7", None, "single_tank", "tank", "physical flags of one component only: local failure"),
    SignatureRule("8", None, "coherent_link", "link", "coherent opposite flags on linked components: connection problem"),
    SignatureRule("9", None, "single_device", "device", "network flags of one device only: local device problem"),
    SignatureRule("9.1", "9", "device_malicious", "device", "with malicious activity: reconnaissance"),
    SignatureRule("10", None, "device_pair", "pair", "network flags of exactly two linked devices: bilateral communication problem"),
    SignatureRule("10.1", "10", "device_malicious", "pair", "with malicious activity on both: man in the middle"),
    SignatureRule("10.2", "10.1", "impact_in_victim_zones", "pair", "with physical flags in the victims' zones: data manipulation"),
    SignatureRule("11", None, "reported_data_disrupted", "device", "disrupted data sent by a device: disconnection"),
    SignatureRule("11.1", "11", "device_malicious", "device", "with malicious activity: denial of service"),
    SignatureRule("11.2", "11.1", "true_impact", "device", "with true physical impact"),
    SignatureRule("12", None, "isolated_with_peers", "device", "flags on a device and its peers only: disconnection"),
    SignatureRule("12.1", "12", "device_malicious", "device", "with malicious activity: denial of service"),
    SignatureRule("12.2", "12.1", "true_impact", "device", "with true physical impact"),
)

DEFAULT_SIGNATURES = (
    EventSignature("A", ("1", "2", "7"), "tank", "PhysicalFailure", "failure of tank {0}: leak, in- or outflow failure"),
    EventSignature("B", ("1", "2", "8"), "link", "PhysicalFailure", "leak or actuator failure between {0} and {2} ({1})"),
    EventSignature("C", ("1", "3", "9.1"), "device", "CyberAttack", "scan of {0}"),
    EventSignature("D", ("1", "3", "10.1"), "pair", "CyberAttack", "MITM attack between {0} and {1}"),
    EventSignature("D2", ("1", "5", "10.2"), "pair", "CyberPhysicalAttack",
                   "MITM attack between {0} and {1} manipulating process data"),
    EventSignature("E", ("1", "3", "11.1", "12.1"), "device", "CyberAttack", "DoS attack against {0}"),
    EventSignature("E2", ("1", "5", "11.2", "12.2"), "device", "CyberPhysicalAttack",
                   "DoS attack against {0} interrupting process data"),
)


def build_default_db(topology: Topology) -> SignatureDB:
    rules = {r.rule_id: r for r in DEFAULT_RULES}
    sigs = {s.signature_id: s for s in DEFAULT_SIGNATURES}
    instances: List[Tuple[str, Tuple[str, ...]]] = []
    for t in topology.tank_ids:
        instances.append(("A", (t,)))
    for link in topology.tank_links():
        instances.append(("B", link))
    for d in topology.device_ids:
        instances.append(("C", (d,)))
    order = topology.device_ids
    pairs = sorted((tuple(sorted(l, key=order.index)) for l in topology.comm_links),
                   key=lambda p: (order.index(p[0]), order.index(p[1])))
    for p in pairs:
        instances.append(("D", p))
    for p in pairs:
        instances.append(("D2", p))
    for d in topology.device_ids:
        instances.append(("E", (d,)))
    for d in topology.device_ids:
        instances.append(("E2", (d,)))
    db = SignatureDB(rules, sigs, instances)
    db.validate()
    return db


def format_db(db: SignatureDB) -> str:
    lines = ["# rule <id> parent=<id|-> predicate=<name> slot=<none|tank|link|device|pair> text=<shell-quoted>",
             "# signature <id> rules=<id,...> slot=<slot> class=<event class> text=<shell-quoted>",
             "# instance <signature id> <slot values, comma separated>"]
    for r in db.rules.values():
        lines.append(f"rule {r.rule_id} parent={r.parent or '-'} predicate={r.predicate} slot={r.slot} "
                     f"text={shlex.quote(r.description)}")
    for s in db.signatures.values():
        lines.append(f"signature {s.signature_id} rules={','.join(s.rules)} slot={s.slot} class={s.event_class} "
                     f"text={shlex.quote(s.template)}")
    for sid, slot in db.instances:
        lines.append(f"instance {sid} {','.join(slot)}")
    return "\n".join(lines) + "\n"


def parse_db(text: str) -> SignatureDB:
    rules: Dict[str, SignatureRule] = {}
    sigs: Dict[str, EventSignature] = {}
    instances: List[Tuple[str, Tuple[str, ...]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            toks = shlex.split(line)
        except ValueError as exc:
            raise SignatureDBError(f"line {lineno}: {exc}") from None
        head = toks[0]
        try:
            if head == "rule":
                kv = dict(t.split("=", 1) for t in toks[2:])
                rid = toks[1]
                if rid in rules:
                    raise SignatureDBError(f"line {lineno}: duplicate rule id {rid}")
                parent = None if kv.get("parent", "-") == "-" else kv["parent"]
                rules[rid] = SignatureRule(rid, parent, kv["predicate"], kv.get("slot", "none"), kv.get("text", ""))
            elif head == "signature":
                kv = dict(t.split("=", 1) for t in toks[2:])
                sigs[toks[1]] = EventSignature(toks[1], tuple(kv["rules"].split(",")), kv["slot"], kv["class"],
                                               kv.get("text", toks[1]))
            elif head == "instance":
                instances.append((toks[1], tuple(toks[2].split(","))))
            else:
                raise SignatureDBError(f"line {lineno}: unknown statement '{head}'")
        except (KeyError, IndexError, ValueError) as exc:
            if isinstance(exc, SignatureDBError):
                raise
            raise SignatureDBError(f"line {lineno}: malformed '{head}' ({exc})") from None
    db = SignatureDB(rules, sigs, instances)
    db.validate()
    return db


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------


@dataclass
class EventHypothesis:
    start: int
    end: int
    signature_id: str
    event_class: str
    description: str
    victims: Tuple[str, ...]
    affected: Tuple[str, ...]
    attacker_locus: str
    impact: Tuple[str, ...]
    matched_rules: Tuple[str, ...]
    specificity: int

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("victims", "affected", "impact", "matched_rules"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EventHypothesis":
        kw = dict(d)
        for k in ("victims", "affected", "impact", "matched_rules"):
            kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class MatchConfig:
    gap: int = 20  # seconds of silence that still join flag bursts (2 l)
    horizon: int = 300  # max onset distance of directly linked spans (one cycle)


def _rule_holds(db: SignatureDB, rid: str, facts: EpisodeFacts, slot: Tuple[str, ...], topo: Topology,
                cache: Dict) -> bool:
    rule = db.rules[rid]
    key = (rid, slot if rule.slot != "none" else ())
    if key in cache:
        return cache[key]
    ok = True
    if rule.parent is not None:
        ok = _rule_holds(db, rule.parent, facts, slot, topo, cache)
    ok = ok and PREDICATES[rule.predicate](facts, slot, topo)
    cache[key] = ok
    return ok


def _impact_text(tanks, facts: EpisodeFacts, topo: Topology) -> Tuple[str, ...]:
    ordered = [t for t in topo.tank_ids if t in tanks]
    sign = {**facts.onset_sign, **facts.impact_sign}
    return tuple(f"{'overfill' if sign[t] > 0 else 'underfill'} {t}" for t in ordered)


def _affected(facts: EpisodeFacts, victims: Sequence[str], topo: Topology) -> Tuple[str, ...]:
    names = set(facts.net) | set(facts.tanks) | set(victims)
    order = topo.device_ids + [c.id for c in topo.components]
    return tuple(x for x in order if x in names)


def hypothesis_for(facts: EpisodeFacts, db: SignatureDB, topo: Topology) -> EventHypothesis:
    cache: Dict = {}
    best = None
    for pos, (sid, slot) in enumerate(db.instances):
        sig = db.signatures[sid]
        if all(_rule_holds(db, rid, facts, slot, topo, cache) for rid in sig.rules):
            spec = db.specificity(sid)
            onset = min((facts.onset_time.get(x, facts.end) for x in slot), default=facts.start)
            if sig.slot == "link":
                onset = max(facts.onset_time[slot[0]], facts.onset_time[slot[2]])
            key = (-spec, onset, pos)
            if best is None or key < best[0]:
                best = (key, sid, slot)
    if best is None:
        coarse = [r for r in COARSE_RULES if r in db.rules and _rule_holds(db, r, facts, (), topo, cache)]
        matched = (["1"] if "1" in db.rules and _rule_holds(db, "1", facts, (), topo, cache) else []) + coarse
        event_class = COARSE_CLASS[coarse[0]] if coarse else "Unknown"
        victims: Tuple[str, ...] = ()
        locus = "n/a"
        if facts.malicious:
            locus = "external" if facts.external else "internal"
        return EventHypothesis(facts.start, facts.end, "unknown", event_class,
                               f"unknown event ({event_class})", victims, _affected(facts, victims, topo), locus,
                               _impact_text(facts.impact, facts, topo), tuple(matched), len(matched))
    _, sid, slot = best
    sig = db.signatures[sid]
    matched = tuple(db.closure(sig.rules))
    victims = tuple(slot)
    if sig.event_class in ("CyberAttack", "CyberPhysicalAttack"):
        devs = [d for d in slot if d in topo.device_ids]
        locus = "external" if any(d in facts.external for d in devs) else "internal"
    else:
        locus = "n/a"
    if sid == "D2":
        impact = _impact_text(_in_victim_zones(facts, slot, topo), facts, topo)
    else:
        impact = _impact_text(facts.impact, facts, topo)
    return EventHypothesis(facts.start, facts.end, sid, sig.event_class, sig.template.format(*slot), victims,
                           _affected(facts, victims, topo), locus, impact, matched, db.specificity(sid))


def match(fm: FlagMatrix, topology: Topology, db: Optional[SignatureDB] = None,
          config: MatchConfig = MatchConfig()) -> List[EventHypothesis]:
    db = db or build_default_db(topology)
    grouped = group_flags(fm, topology)
    out = []
    for ep in segment_episodes(fm, topology, config.gap, config.horizon, grouped):
        facts = episode_facts(ep, fm, grouped, topology)
        out.append(hypothesis_for(facts, db, topology))
    return out


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------


def heatmap_rows(topology: Topology, fm: FlagMatrix) -> List[str]:
    """Zone-ordered rows: each controller followed by its tanks, then the other devices."""
    rows: List[str] = []
    placed = set()
    for d in topology.devices:
        if d.role is DeviceRole.PLC:
            rows.append(d.id)
            placed.add(d.id)
            rows += [f"H_{t}" for t in topology.controller_tanks(d.id) if f"H_{t}" in fm.feature_ids]
    rows += [d.id for d in topology.devices if d.id not in placed]
    return rows


def write_report(hypotheses: Sequence[EventHypothesis], path, provenance: Optional[dict] = None) -> None:
    payload = {"provenance": provenance or {}, "count": len(hypotheses),
               "hypotheses": [h.to_dict() for h in hypotheses]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_report(path) -> List[EventHypothesis]:
    payload = json.loads(Path(path).read_text())
    return [EventHypothesis.from_dict(d) for d in payload["hypotheses"]]


def write_grouped(fm: FlagMatrix, topology: Topology, path, header_comment: Optional[str] = None) -> None:
    import pandas as pd
    g = group_flags(fm, topology)
    df = pd.DataFrame({"timestamp": np.arange(fm.n_seconds)})
    for j, d in enumerate(g.devices):
        df[d] = g.grouped[:, j]
        df[f"{d}.malicious"] = g.marker[:, j].astype(np.int8)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        df.to_csv(fh, index=False)


def render_heatmap(fm: FlagMatrix, topology: Topology, path, title: str = "") -> List[str]:
    """Zone-ordered flag heatmap as SVG; returns the row order used."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import BoundaryNorm, ListedColormap
    from matplotlib.patches import Patch

    rows = heatmap_rows(topology, fm)
    g = group_flags(fm, topology)
    data = np.zeros((len(rows), fm.n_seconds), dtype=np.int8)
    for i, r in enumerate(rows):
        if r in g.devices:
            data[i] = g.grouped[:, g.devices.index(r)]
        else:
            data[i] = fm.column(r)
    colors = ["#08306b", "#6baed6", "#f7f7f7", "#fc9272", "#a50f15"]
    labels = ["-2 negative disrupted", "-1 negative", "0 normal", "1 positive / device anomaly",
              "2 positive disrupted"]
    cmap = ListedColormap(colors)
    norm = BoundaryNorm(np.arange(-2.5, 3.0, 1.0), cmap.N)
    with plt.rc_context({"svg.hashsalt": "cpsreason", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(12, 0.35 * len(rows) + 1.5))
        ax.imshow(data, aspect="auto", interpolation="nearest", cmap=cmap, norm=norm)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(rows)
        ax.set_xlabel("time [s]")
        if title:
            ax.set_title(title)
        ax.legend(handles=[Patch(color=c, label=l) for c, l in zip(colors, labels)], loc="upper center",
                  bbox_to_anchor=(0.5, -0.18), ncol=5, fontsize=7, frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "cpsreason"})
        plt.close(fig)
    return rows


# --------------------------------------------------------------------------
# scoring against simulator ground truth
# --------------------------------------------------------------------------


def _overlap(h: EventHypothesis, start: int, end: int) -> int:
    return max(0, min(h.end, end) - max(h.start, start))


def score(hypotheses: Sequence[EventHypothesis], ground_truth, topology: Topology) -> dict:
    """Per-event overlap, signature and victim agreement.

    Each event is paired with the overlapping hypothesis whose affected set
    meets the event targets, preferring the largest time overlap.
    """
    rows = []
    used = set()
    for ev in ground_truth:
        best, best_key = None, None
        for i, h in enumerate(hypotheses):
            ov = _overlap(h, ev.start, ev.end)
            if ov == 0:
                continue
            hits = bool(set(h.affected) & set(ev.targets))
            key = (hits, ov, -i)
            if best_key is None or key > best_key:
                best, best_key = i, key
        row = {"kind": ev.kind, "start": ev.start, "end": ev.end, "targets": list(ev.targets),
               "expected": ev.expected_signature_id, "overlapped": best is not None, "predicted": None,
               "correct_signature": False, "correct_victims": False, "hypothesis": best}
        if best is not None:
            used.add(best)
            h = hypotheses[best]
            row["predicted"] = h.signature_id
            row["correct_signature"] = h.signature_id == ev.expected_signature_id
            row["correct_victims"] = set(h.victims) == set(ev.targets)
        rows.append(row)
    n = len(rows)
    return {
        "events": n,
        "overlapped": sum(r["overlapped"] for r in rows),
        "correct_signature": sum(r["correct_signature"] for r in rows),
        "correct_victims": sum(r["correct_signature"] and r["correct_victims"] for r in rows),
        "hypotheses": len(hypotheses),
        "unmatched_hypotheses": len(hypotheses) - len(used),
        "per_event": rows,
    }
