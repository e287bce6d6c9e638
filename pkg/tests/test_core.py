import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from cpsreason.core import (
    ComponentKind, DeviceRole, PacketLog, PacketLogError, PacketRecord, Protocol, ProcessLogError, TcpFlag,
    TopologyError, TopologyInvariantError, concat_packet_logs, demo_topology, demo_topology_text, flags_from_text,
    flags_to_text, load_topology, parse_topology, read_process_log, serialize_topology, validate_process_log,
    write_process_log,
)


def test_demo_topology_has_seven_network_devices():
    topo = demo_topology()
    assert topo.device_ids == ["PLC1", "PLC2", "PLC3", "PLC4", "FS1", "FS2", "HMI"]
    assert [topo.device(d).role for d in ("PLC1", "FS1", "HMI")] == [DeviceRole.PLC, DeviceRole.FLOW_SENSOR_IP,
                                                                     DeviceRole.HMI]
    assert topo.tank_ids == [f"T{i}" for i in range(1, 9)]


def test_zone_partition_covers_everything_once():
    topo = demo_topology()
    members = [m for z in topo.zones.values() for m in z]
    everything = topo.device_ids + [c.id for c in topo.components]
    assert sorted(members) == sorted(everything)


def test_demo_topology_relations():
    topo = demo_topology()
    assert topo.comm_linked("PLC3", "PLC4") and not topo.comm_linked("PLC1", "PLC3")
    assert sorted(topo.comm_neighbors("PLC3")) == ["FS1", "HMI", "PLC2", "PLC4"]
    assert topo.controller_tanks("PLC1") == ["T1", "T2", "T3", "T4", "T5"]
    assert topo.controller_tanks("PLC4") == ["T8"]
    assert topo.link_of_actuator("V18") == ("T1", "V18", "T4")
    assert "T5" in topo.tank_neighbors("T1") and "T4" in topo.tank_neighbors("T1")
    assert topo.zone_of("HMI") == "SCADA"


def test_round_trip_serialization():
    topo = demo_topology()
    again = parse_topology(serialize_topology(topo))
    assert again == topo
    assert serialize_topology(again) == serialize_topology(topo)


def test_load_topology_from_file(tmp_path):
    p = tmp_path / "topo.txt"
    p.write_text(demo_topology_text())
    assert load_topology(p) == demo_topology()


def _mutate(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


def test_empty_zones_violate_partition():
    text = "\n".join(l for l in demo_topology_text().splitlines() if not l.startswith("zone"))
    with pytest.raises(TopologyInvariantError) as exc:
        parse_topology(text)
    assert exc.value.rule == "zone-partition"


def test_duplicate_mac_names_uniqueness_rule():
    text = demo_topology_text()
    mac1 = demo_topology().device("PLC1").mac
    mac2 = demo_topology().device("PLC2").mac
    with pytest.raises(TopologyInvariantError) as exc:
        parse_topology(_mutate(text, mac2, mac1))
    assert exc.value.rule == "unique-mac"


def test_phys_link_actuator_must_be_pump_or_valve():
    text = demo_topology_text() + "\nphys T1 T2 T3\n"
    with pytest.raises(TopologyInvariantError) as exc:
        parse_topology(text)
    assert exc.value.rule == "phys-actuator"


def test_comm_link_endpoints_must_be_devices():
    with pytest.raises(TopologyInvariantError) as exc:
        parse_topology(demo_topology_text() + "\ncomm PLC1 T1\n")
    assert exc.value.rule == "comm-endpoints"


def test_parse_error_reports_line():
    with pytest.raises(TopologyError, match="line 2"):
        parse_topology("device PLC1 role=PLC ip=1.1.1.1 mac=aa\nbogus X\n")
    with pytest.raises(TopologyError, match="role"):
        parse_topology("device PLC1 role=Toaster ip=1.1.1.1 mac=aa\n")


def test_tcp_flag_text_round_trip():
    assert flags_to_text(int(TcpFlag.PSH | TcpFlag.ACK)) == "PSH|ACK"
    assert flags_from_text("PSH|ACK") == 24
    assert flags_from_text("") == 0
    for v in range(64):
        assert flags_from_text(flags_to_text(v)) == v


def _records():
    return [
        PacketRecord(0.10, "192.168.1.2", "192.168.1.11", "aa:00:00:00:00:02", "aa:00:00:00:00:11", 40000, 502,
                     Protocol.MODBUS, 24, 66, 3, 1.0),
        PacketRecord(0.20, "192.168.1.11", "192.168.1.2", "aa:00:00:00:00:11", "aa:00:00:00:00:02", 502, 40000,
                     Protocol.TCP, 16, 60, None, None),
        PacketRecord(1.50, "192.168.1.2", "192.168.1.11", "aa:00:00:00:00:02", "aa:00:00:00:00:11", 40001, 502,
                     Protocol.MODBUS, 24, 71, 3, 42.5),
    ]


def test_packet_log_text_round_trip(tmp_path):
    log = PacketLog.from_records(_records())
    p = tmp_path / "packets.csv"
    log.write_text(p, header_comment="provenance")
    back = PacketLog.read_text(p)
    assert list(back.records()) == list(log.records())
    # missing MODBUS fields are written as empty cells
    line = p.read_text().splitlines()[3]
    assert line.endswith(",,")


def test_packet_log_npz_round_trip(tmp_path):
    log = PacketLog.from_records(_records())
    log.save_npz(tmp_path / "p.npz")
    back = PacketLog.load(tmp_path / "p.npz")
    assert list(back.records()) == list(log.records())


def test_packet_log_rejects_decreasing_timestamps():
    recs = _records()
    with pytest.raises(PacketLogError):
        PacketLog.from_records([recs[2], recs[0]])


def test_packet_log_rejects_modbus_field_mismatch():
    bad = _records()[1]
    bad = PacketRecord(*(list(bad.__dict__.values())[:10] + [3, 1.0]))
    with pytest.raises(PacketLogError):
        PacketLog.from_records([bad])


def test_concat_sorts_and_recodes():
    a, b = _records()[:2], _records()[2:]
    merged = concat_packet_logs([PacketLog.from_records(b), PacketLog.from_records(a)])
    assert list(merged.records()) == _records()


def test_process_log_round_trip_keeps_nan(tmp_path):
    df = pd.DataFrame({"timestamp": [0, 1, 2], "H_T1": [1.0, np.nan, 3.0]})
    p = tmp_path / "process.csv"
    write_process_log(df, p)
    assert "nan" in p.read_text()
    back = read_process_log(p)
    assert np.isnan(back["H_T1"][1]) and back["H_T1"][2] == 3.0


def test_process_log_requires_one_row_per_second():
    with pytest.raises(ProcessLogError):
        validate_process_log(pd.DataFrame({"timestamp": [0, 2], "H_T1": [1.0, 2.0]}))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100, allow_nan=False), st.integers(40, 1500), st.integers(0, 63)),
                min_size=1, max_size=30))
def test_packet_log_round_trip_property(tmp_path_factory, rows):
    rows = sorted(rows)
    recs = [PacketRecord(round(t, 6), "10.0.0.1", "10.0.0.2", "aa:aa:aa:aa:aa:01", "aa:aa:aa:aa:aa:02", 1024 + i, 502,
                         Protocol.TCP, f, s, None, None) for i, (t, s, f) in enumerate(rows)]
    log = PacketLog.from_records(recs)
    p = tmp_path_factory.mktemp("pl") / "p.csv"
    log.write_text(p)
    assert list(PacketLog.read_text(p).records()) == recs


def test_component_kinds_present():
    topo = demo_topology()
    kinds = {c.kind for c in topo.components}
    assert {ComponentKind.TANK, ComponentKind.PUMP, ComponentKind.VALVE} <= kinds
