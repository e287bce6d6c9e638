import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from cpsreason.core import PacketLog, PacketRecord, Protocol, demo_topology
from cpsreason.featurize import (
    CycleEstimationError, FeatureError, NETWORK_KINDS, TrafficBaseline, attach_covariates, build_baseline,
    build_cycle_covariates, estimate_cycle_duration, extract_network, extract_physical, feature_frame,
    features_from_frame,
)
from cpsreason.simulator import SimConfig, scenario_suite, simulate

TOPO = demo_topology()
PLC1 = TOPO.device("PLC1")
HMI = TOPO.device("HMI")


def pkt(t, size=60, src=HMI, flags=16, sport=40000, proto=Protocol.TCP, dst=PLC1, src_ip=None, src_mac=None):
    return PacketRecord(t, src_ip or src.ip, dst.ip, src_mac or src.mac, dst.mac, sport, 502, proto, flags, size,
                        3 if proto == Protocol.MODBUS else None, 1.0 if proto == Protocol.MODBUS else None)


def baseline_for(log):
    return build_baseline(log, TOPO)


def series(feats, fid):
    return next(f for f in feats if f.feature_id == fid).values


def test_covariate_symmetry_points():
    p, s, c = build_cycle_covariates(300, 300)
    assert (s[0], c[0]) == pytest.approx((0.0, 1.0))
    assert (s[75], c[75]) == pytest.approx((1.0, 0.0), abs=1e-12)
    assert (s[150], c[150]) == pytest.approx((0.0, -1.0), abs=1e-12)
    assert p.min() == 0 and p.max() < 300


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 5000.0), st.integers(1, 3000), st.integers(0, 10_000))
def test_sin_cos_identity_and_continuity(d_c, n, offset):
    p, s, c = build_cycle_covariates(d_c, n, offset)
    assert np.all(np.abs(s ** 2 + c ** 2 - 1) <= 1e-9)
    assert np.all((p >= 0) & (p <= d_c))
    assert np.all(np.abs(np.diff(s)) < 2 * np.pi / d_c + 1e-9)
    assert np.all(np.abs(np.diff(c)) < 2 * np.pi / d_c + 1e-9)


def test_covariates_reject_nonpositive_period():
    with pytest.raises(ValueError):
        build_cycle_covariates(0, 10)


def test_cycle_estimate_on_sine():
    t = np.arange(3000)
    assert abs(estimate_cycle_duration(np.sin(2 * np.pi * t / 300)) - 300) <= 1


def test_cycle_estimate_rejects_constant():
    with pytest.raises(CycleEstimationError):
        estimate_cycle_duration(np.full(3000, 4.0))


def test_cycle_estimate_on_simulator():
    r = simulate(TOPO, scenario_suite()[0])
    d = SimConfig().period
    for col in ("H_T1", "H_T5", "H_T6"):
        assert abs(estimate_cycle_duration(r.process[col].to_numpy()) - d) <= 2


def test_extract_physical():
    df = pd.DataFrame({"timestamp": [0, 1, 2], **{f"H_T{i}": [1.0, np.nan, 2.0] for i in range(1, 9)}})
    feats = extract_physical(df)
    assert [f.feature_id for f in feats] == [f"H_T{i}" for i in range(1, 9)]
    assert all(f.property_class == "B" for f in feats)
    assert np.isnan(feats[0].values[1])
    assert extract_physical(df.iloc[:0]) == []
    with pytest.raises(FeatureError):
        extract_physical(df.drop(columns=["H_T3"]))


def test_mean_size_and_count():
    log = PacketLog.from_records([pkt(0.1, 60), pkt(0.5, 100), pkt(2.2, 70)])
    feats = extract_network(log, TOPO, baseline_for(log), duration=3)
    assert len(feats) == 42
    assert list(series(feats, "PLC1.s_packet")) == [80.0, 0.0, 70.0]
    assert list(series(feats, "PLC1.n_packet")) == [2, 0, 1]
    # empty second convention: all zeros
    assert [series(feats, f"PLC1.{k}")[1] for k in NETWORK_KINDS] == [0, 0, 0, 0, 0, 0]


def test_new_address_and_flag_counts():
    train = PacketLog.from_records([pkt(0.1), pkt(0.2, flags=24, proto=Protocol.MODBUS)])
    base = baseline_for(train)
    test = PacketLog.from_records([
        pkt(0.1, src_ip="10.9.9.9"),  # unknown ip
        pkt(0.2, src_mac="de:ad:be:ef:00:01"),  # unknown mac
        pkt(0.3, flags=3),  # SYN|FIN never seen
        pkt(0.4, flags=16),
    ])
    feats = extract_network(test, TOPO, base, duration=1)
    assert series(feats, "PLC1.n_ipmac")[0] == 2
    assert series(feats, "PLC1.n_tcp")[0] == 1
    assert series(feats, "PLC1.mu_tcp")[0] == pytest.approx((16 + 16 + 3 + 16) / 4)


def test_distinct_ports():
    log = PacketLog.from_records([pkt(0.1, sport=1), pkt(0.2, sport=1), pkt(0.3, sport=2), pkt(1.1, sport=1)])
    feats = extract_network(log, TOPO, baseline_for(log), duration=2)
    assert list(series(feats, "PLC1.n_ports")) == [2, 1]


def test_unknown_destinations_ignored():
    other = TOPO.device("PLC2")
    rec = PacketRecord(0.1, HMI.ip, "10.1.1.1", HMI.mac, "00:00:00:00:00:99", 1, 502, Protocol.TCP, 16, 60, None,
                       None)
    log = PacketLog.from_records([rec, pkt(0.2, dst=other)])
    feats = extract_network(log, TOPO, baseline_for(log), duration=1)
    assert sum(series(feats, f"{d}.n_packet")[0] for d in TOPO.device_ids) == 1


def test_training_traffic_has_no_new_addresses_or_flags():
    r = simulate(TOPO, scenario_suite()[0])
    base = build_baseline(r.packets, TOPO)
    feats = extract_network(r.packets, TOPO, base, duration=len(r.process))
    for d in TOPO.device_ids:
        assert not series(feats, f"{d}.n_ipmac").any()
        assert not series(feats, f"{d}.n_tcp").any()


def test_baseline_round_trip():
    log = PacketLog.from_records([pkt(0.1), pkt(0.2, flags=24, proto=Protocol.MODBUS)])
    base = baseline_for(log)
    assert TrafficBaseline.from_dict(base.to_dict()) == base


packet_st = st.tuples(st.floats(0, 4.99, allow_nan=False), st.integers(40, 1500), st.integers(0, 63),
                      st.integers(1, 60000))


@settings(max_examples=60, deadline=None)
@given(st.lists(packet_st, min_size=1, max_size=40), st.lists(packet_st, min_size=0, max_size=40),
       st.randoms(use_true_random=False))
def test_network_features_permutation_invariant_and_additive(a, b, rnd):
    def to_log(rows):
        return PacketLog.from_records([pkt(t, size=s, flags=f, sport=p) for t, s, f, p in sorted(rows)])

    log_a, log_ab = to_log(a), to_log(a + b)
    base = baseline_for(to_log(a + b))
    shuffled = list(a)
    rnd.shuffle(shuffled)
    # packets inside a second are re-timed in shuffled order: statistics must not change
    sec_sorted = sorted(shuffled, key=lambda r: int(r[0]))
    log_perm = PacketLog.from_records([pkt(int(t) + (i + 1) * 1e-4, size=s, flags=f, sport=p)
                                       for i, (t, s, f, p) in enumerate(sec_sorted)])
    fa = extract_network(log_a, TOPO, base, duration=5)
    fp = extract_network(log_perm, TOPO, base, duration=5)
    for k in NETWORK_KINDS:
        assert np.allclose(series(fa, f"PLC1.{k}"), series(fp, f"PLC1.{k}"))
    fb = extract_network(to_log(b), TOPO, base, duration=5) if b else None
    fab = extract_network(log_ab, TOPO, base, duration=5)
    nb = series(fb, "PLC1.n_packet") if fb else 0
    assert np.array_equal(series(fab, "PLC1.n_packet"), series(fa, "PLC1.n_packet") + nb)
    ports = [set() for _ in range(5)]
    for t, _, _, p in a + b:
        ports[int(t)].add(p)
    assert list(series(fab, "PLC1.n_ports")) == [len(s) for s in ports]


def test_feature_frame_round_trip():
    log = PacketLog.from_records([pkt(0.1), pkt(1.5)])
    df = pd.DataFrame({"timestamp": [0, 1], **{f"H_T{i}": [1.0, 2.0] for i in range(1, 9)}})
    feats = extract_physical(df) + extract_network(log, TOPO, baseline_for(log), duration=2)
    attach_covariates(feats, 300)
    frame = feature_frame(feats, 300)
    assert list(frame.columns[-3:]) == ["P", "P_sin", "P_cos"]
    back = features_from_frame(frame, 300)
    assert [f.feature_id for f in back] == [f.feature_id for f in feats]
    assert [f.property_class for f in back] == [f.property_class for f in feats]
    assert len(back[0].covariates) == 3 and back[8].covariates == []
