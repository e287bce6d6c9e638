import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpsreason.core import demo_topology
from cpsreason.featurize import NETWORK_KINDS, network_feature_ids
from cpsreason.pipeline import FlagMatrix
from cpsreason.reason import (
    EventHypothesis, SignatureDBError, build_default_db, format_db, group_device_flags, group_flags, heatmap_rows,
    match, parse_db, read_report, render_heatmap, segment_episodes, write_grouped, write_report,
)

TOPO = demo_topology()
IDS = [f"H_{t}" for t in TOPO.tank_ids] + network_feature_ids(TOPO.device_ids)
N = 600


def matrix(n=N):
    return FlagMatrix.zeros(IDS, n)


def put(fm, fid, start, end, value):
    fm.flags[start:end, fm.feature_ids.index(fid)] = value


def attack_on(fm, device, start, end, external=True):
    put(fm, f"{device}.n_packet", start, end, 1)
    put(fm, f"{device}.n_ipmac" if external else f"{device}.n_tcp", start, end, 1)


def only(hyps):
    assert len(hyps) == 1, hyps
    return hyps[0]


# ----- grouping -------------------------------------------------------------


def test_group_device_flags_examples():
    assert group_device_flags([0] * 6) == (0, False)
    assert group_device_flags([0, 0, 0, 0, -1, 0]) == (1, False)
    flags = dict.fromkeys(NETWORK_KINDS, 0)
    flags["n_ipmac"] = 1
    assert group_device_flags(flags) == (1, True)
    assert group_device_flags({**flags, "n_ipmac": 2})[1] is False  # only +1 marks malicious activity


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_grouped_flag_is_or_of_device_flags(seed):
    rng = np.random.default_rng(seed)
    fm = matrix(40)
    fm.flags[:] = rng.choice([-2, -1, 0, 0, 0, 0, 1, 2], size=fm.flags.shape)
    g = group_flags(fm, TOPO)
    for j, d in enumerate(g.devices):
        cols = [fm.column(f"{d}.{k}") for k in NETWORK_KINDS]
        for t in range(40):
            v, m = group_device_flags([c[t] for c in cols])
            assert g.grouped[t, j] == v == int(any(c[t] != 0 for c in cols))
            assert g.marker[t, j] == m


# ----- signatures -----------------------------------------------------------


def test_zero_matrix_has_no_hypotheses():
    assert match(matrix(), TOPO) == []


def test_mitm_with_manipulation_is_d2():
    fm = matrix()
    attack_on(fm, "PLC3", 100, 160)
    attack_on(fm, "PLC4", 100, 160)
    put(fm, "H_T7", 120, 170, 1)
    put(fm, "H_T8", 125, 170, -1)
    h = only(match(fm, TOPO))
    assert h.signature_id == "D2" and h.event_class == "CyberPhysicalAttack"
    assert h.victims == ("PLC3", "PLC4") and h.attacker_locus == "external"
    assert h.impact == ("overfill T7", "underfill T8")
    assert h.matched_rules == ("1", "5", "10", "10.1", "10.2")


def test_mitm_without_physical_flags_is_d():
    fm = matrix()
    attack_on(fm, "PLC1", 100, 160, external=False)
    attack_on(fm, "PLC2", 100, 160, external=False)
    h = only(match(fm, TOPO))
    assert h.signature_id == "D" and h.attacker_locus == "internal" and h.impact == ()


def test_opposite_flags_on_linked_tanks_is_b():
    fm = matrix()
    put(fm, "H_T1", 200, 260, -1)
    put(fm, "H_T4", 200, 260, 1)
    h = only(match(fm, TOPO))
    assert h.signature_id == "B" and h.victims == ("T1", "V18", "T4")
    assert h.event_class == "PhysicalFailure" and h.attacker_locus == "n/a"


def test_single_tank_is_a():
    fm = matrix()
    put(fm, "H_T3", 200, 240, -1)
    h = only(match(fm, TOPO))
    assert (h.signature_id, h.victims, h.impact) == ("A", ("T3",), ("underfill T3",))


def test_scan_is_c():
    fm = matrix()
    put(fm, "FS2.n_tcp", 300, 350, 1)
    put(fm, "FS2.n_ports", 300, 350, 1)
    h = only(match(fm, TOPO))
    assert (h.signature_id, h.victims, h.attacker_locus) == ("C", ("FS2",), "internal")


def dos_plc4(fm, recover_sign=0):
    attack_on(fm, "PLC4", 100, 200)
    put(fm, "PLC3.n_packet", 100, 200, -1)
    put(fm, "H_T8", 100, 200, -2)
    if recover_sign:
        put(fm, "H_T8", 200, 240, recover_sign)


def test_dos_with_disrupted_data_is_e():
    fm = matrix()
    dos_plc4(fm)
    h = only(match(fm, TOPO))
    assert h.signature_id == "E" and h.victims == ("PLC4",) and h.impact == ()


def test_dos_with_deviation_after_reporting_resumes_is_e2():
    fm = matrix()
    dos_plc4(fm, recover_sign=1)
    h = only(match(fm, TOPO))
    assert h.signature_id == "E2" and h.impact == ("overfill T8",)


def test_benign_network_flags_fall_back_to_rule_4():
    fm = matrix()
    put(fm, "PLC1.n_packet", 100, 150, -1)
    put(fm, "PLC2.s_packet", 100, 150, 1)
    h = only(match(fm, TOPO))
    assert h.signature_id == "unknown" and h.event_class == "NetworkFailure"
    assert h.matched_rules == ("1", "4")
    assert h.affected == ("PLC1", "PLC2")


def test_concurrent_events_in_disjoint_zones_stay_separate():
    fm = matrix()
    put(fm, "H_T1", 100, 160, -1)
    put(fm, "FS2.n_tcp", 110, 150, 1)
    sigs = sorted(h.signature_id for h in match(fm, TOPO))
    assert sigs == ["A", "C"]


def test_episode_gap_tolerance():
    fm = matrix()
    put(fm, "H_T3", 100, 110, -1)
    put(fm, "H_T3", 130, 140, -1)  # 20 s of silence: same episode
    put(fm, "H_T3", 300, 310, -1)  # 160 s of silence: new episode
    eps = segment_episodes(fm, TOPO, gap=20)
    assert [(e.start, e.end) for e in eps] == [(100, 140), (300, 310)]


def test_tank_flags_before_network_onset_stay_separate():
    fm = matrix()
    put(fm, "H_T8", 80, 130, 1)
    attack_on(fm, "PLC4", 100, 130, external=False)
    put(fm, "PLC4.n_tcp", 100, 130, 1)
    hyps = match(fm, TOPO)
    assert sorted(h.signature_id for h in hyps) == ["A", "C"]


def test_match_is_deterministic():
    fm = matrix()
    dos_plc4(fm, 1)
    put(fm, "H_T1", 400, 430, -1)
    assert match(fm, TOPO) == match(fm, TOPO)


# ----- dominance and locality ----------------------------------------------


def random_d2(rng):
    fm = matrix(300)
    a, b = sorted(sorted(l) for l in TOPO.comm_links)[rng.integers(len(TOPO.comm_links))]
    s = int(rng.integers(20, 100))
    e = s + int(rng.integers(10, 80))
    for d in (a, b):
        attack_on(fm, d, s, e, external=bool(rng.integers(2)))
    zone_tanks = [t for d in (a, b) for t in TOPO.zones[TOPO.zone_of(d)] if t in TOPO.tank_ids]
    if not zone_tanks:
        return None
    t = zone_tanks[rng.integers(len(zone_tanks))]
    put(fm, f"H_{t}", s + int(rng.integers(0, 10)), e, int(rng.choice([-1, 1])))
    return fm


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_d2_dominates_d(seed):
    fm = random_d2(np.random.default_rng(seed))
    if fm is None:
        return
    assert all(h.signature_id != "D" for h in match(fm, TOPO))
    assert any(h.signature_id == "D2" for h in match(fm, TOPO))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_affected_components_are_flagged_or_victims(seed):
    rng = np.random.default_rng(seed)
    fm = matrix(200)
    for _ in range(rng.integers(1, 6)):
        fid = IDS[rng.integers(len(IDS))]
        s = int(rng.integers(0, 180))
        put(fm, fid, s, s + int(rng.integers(1, 20)), int(rng.choice([-2, -1, 1, 2])))
    for h in match(fm, TOPO):
        window = fm.flags[h.start:h.end]
        flagged = {fid.split(".")[0].removeprefix("H_") for j, fid in enumerate(IDS) if window[:, j].any()}
        for x in h.affected:
            assert x in flagged or x in h.victims


# ----- database -------------------------------------------------------------


def test_default_db_instances():
    db = build_default_db(TOPO)
    by_sig = {}
    for sid, slot in db.instances:
        by_sig.setdefault(sid, []).append(slot)
    assert len(by_sig["A"]) == 8
    assert len(by_sig["D"]) == len(TOPO.comm_links) == len(by_sig["D2"])
    assert {tuple(sorted(p)) for p in by_sig["D"]} == {tuple(sorted(l)) for l in TOPO.comm_links}
    for sid in ("C", "E", "E2"):
        assert [s[0] for s in by_sig[sid]] == TOPO.device_ids
    assert db.signatures["E"].rules == ("1", "3", "11.1", "12.1")
    assert db.rules["11.1"].predicate == "device_malicious" and db.rules["11.1"].parent == "11"
    assert db.signatures["C"].rules == ("1", "3", "9.1")


def test_db_text_round_trip():
    db = build_default_db(TOPO)
    text = format_db(db)
    again = parse_db(text)
    assert again == db
    assert format_db(again) == text


@pytest.mark.parametrize("text, message", [
    ("rule 1 parent=- predicate=any_flag slot=none\nrule 1 parent=- predicate=any_flag slot=none\n", "duplicate"),
    ("rule 2 parent=9 predicate=any_flag slot=none\n", "unknown parent"),
    ("rule 1 parent=- predicate=telepathy slot=none\n", "unknown predicate"),
    ("signature Z rules=1 slot=none class=PhysicalFailure\n", "unknown rule"),
    ("bogus line\n", "unknown statement"),
    ("rule 1 parent=- slot=none\n", "malformed"),
])
def test_db_parse_errors(text, message):
    with pytest.raises(SignatureDBError, match=message):
        parse_db(text)


def test_edited_db_changes_matching():
    # dropping the scan signature leaves a reconnaissance episode to the fallback
    text = "\n".join(l for l in format_db(build_default_db(TOPO)).splitlines()
                     if not l.startswith(("instance C ", "signature C ")))
    fm = matrix()
    put(fm, "FS2.n_tcp", 300, 350, 1)
    h = only(match(fm, TOPO, parse_db(text)))
    assert h.signature_id == "unknown" and h.matched_rules == ("1", "3")


# ----- reporting ------------------------------------------------------------


def test_heatmap_row_order():
    assert heatmap_rows(TOPO, matrix(5)) == ["PLC1", "H_T1", "H_T2", "H_T3", "H_T4", "H_T5", "PLC2", "H_T6", "PLC3",
                                             "H_T7", "PLC4", "H_T8", "FS1", "FS2", "HMI"]


def test_reports_and_heatmap(tmp_path):
    write_report([], tmp_path / "empty.json")
    assert json.loads((tmp_path / "empty.json").read_text())["count"] == 0
    fm = matrix()
    dos_plc4(fm, 1)
    hyps = match(fm, TOPO)
    write_report(hyps, tmp_path / "r.json", {"seed": 1})
    assert read_report(tmp_path / "r.json") == hyps
    assert all(h["matched_rules"] for h in json.loads((tmp_path / "r.json").read_text())["hypotheses"])
    rows = render_heatmap(fm, TOPO, tmp_path / "h.svg", "test")
    svg = (tmp_path / "h.svg").read_text()
    assert svg.startswith("<?xml") and "PLC4" in svg and "2 positive disrupted" in svg
    assert rows[0] == "PLC1"
    render_heatmap(fm, TOPO, tmp_path / "h2.svg", "test")
    assert (tmp_path / "h2.svg").read_bytes() == (tmp_path / "h.svg").read_bytes()
    write_grouped(fm, TOPO, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0].startswith("timestamp,PLC1,PLC1.malicious")


def test_hypothesis_dict_round_trip():
    h = EventHypothesis(1, 5, "A", "PhysicalFailure", "x", ("T1",), ("T1",), "n/a", ("underfill T1",), ("1",), 3)
    assert EventHypothesis.from_dict(json.loads(json.dumps(h.to_dict()))) == h


def test_hmi_relates_to_tanks_through_disrupted_data_only():
    fm = matrix()
    attack_on(fm, "HMI", 100, 200)
    put(fm, "PLC2.n_packet", 100, 200, -1)
    for t in TOPO.tank_ids:
        put(fm, f"H_{t}", 101, 200, -2)
    put(fm, "H_T2", 200, 230, 1)
    h = only(match(fm, TOPO))
    assert (h.signature_id, h.victims, h.impact) == ("E2", ("HMI",), ("overfill T2",))

    # an ordinary deviation outside the zones of the flagged devices stays apart
    fm = matrix()
    attack_on(fm, "HMI", 100, 200)
    attack_on(fm, "PLC2", 100, 200)
    put(fm, "H_T3", 150, 160, -1)
    assert sorted(h.signature_id for h in match(fm, TOPO)) == ["A", "D"]
