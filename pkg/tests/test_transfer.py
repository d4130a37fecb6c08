import math

import pytest

from servesim.simkernel import Simulator
from servesim.transfer import (
    DEFAULT_LINKS,
    LinkKind,
    LinkSpec,
    NotInGroup,
    TransferNetwork,
    UnknownEndpoint,
    broadcast_duration_us,
)
from oracles import ref_two_flow_finish

GIB = 2**30


def make_net(cross_host=LinkKind.ROCE):
    sim = Simulator()
    net = TransferNetwork(sim, cross_host=cross_host)
    for host in ("h0", "h1"):
        for i in range(4):
            net.register_endpoint(f"{host}.npu{i}", host)
        net.register_endpoint(f"{host}.dram", host, kind="dram")
    return sim, net


def test_peer_group_idempotent_and_validated():
    _, net = make_net()
    g1 = net.peer_group(["h0.npu0", "h0.npu1"])
    g2 = net.peer_group(["h0.npu1", "h0.npu0"])
    assert g1.group_id == g2.group_id
    assert len(g1.members) == 2
    with pytest.raises(UnknownEndpoint):
        net.peer_group(["h0.npu0", "h9.npu0"])


def test_transfer_requires_membership():
    _, net = make_net()
    g = net.peer_group(["h0.npu0", "h0.npu1"])
    with pytest.raises(NotInGroup):
        net.transfer(g, "h0.npu0", "h0.npu2", 100)


def test_solo_transfer_duration_hccs():
    sim, net = make_net()
    g = net.peer_group(["h0.npu0", "h0.npu1"])
    t = net.transfer(g, "h0.npu0", "h0.npu1", 16 * GIB)
    sim.run_until_idle()
    # 16 GiB over a 200 GB/s link: ~85.9 ms of payload plus setup latency.
    expected = 10 + 16 * GIB / 200e9 * 1e6
    assert t.status == "done"
    assert t.completes_at == pytest.approx(expected, abs=2)
    assert t.completes_at >= t.started_at + 10


def test_roce_is_8x_slower_than_hccs():
    simh, neth = make_net(cross_host=LinkKind.HCCS)
    gh = neth.peer_group(["h0.npu0", "h1.npu0"])
    th = neth.transfer(gh, "h0.npu0", "h1.npu0", 16 * GIB)
    simh.run_until_idle()

    simr, netr = make_net(cross_host=LinkKind.ROCE)
    gr = netr.peer_group(["h0.npu0", "h1.npu0"])
    tr = netr.transfer(gr, "h0.npu0", "h1.npu0", 16 * GIB)
    simr.run_until_idle()

    payload_h = th.completes_at - 10
    payload_r = tr.completes_at - 10
    assert payload_r / payload_h == pytest.approx(8.0, rel=1e-3)


def test_two_equal_flows_each_take_double():
    sim, net = make_net()
    g = net.peer_group(["h0.npu0", "h0.npu1", "h0.npu2", "h0.npu3"])
    nbytes = GIB
    t1 = net.transfer(g, "h0.npu0", "h0.npu1", nbytes)
    t2 = net.transfer(g, "h0.npu2", "h0.npu3", nbytes)
    sim.run_until_idle()
    expected = ref_two_flow_finish(nbytes, DEFAULT_LINKS[LinkKind.HCCS].bandwidth_bps, 10)
    assert t1.completes_at == pytest.approx(expected, abs=3)
    assert t2.completes_at == pytest.approx(expected, abs=3)


def test_late_joiner_delays_first_flow_monotonically():
    nbytes = GIB
    sim, net = make_net()
    g = net.peer_group(["h0.npu0", "h0.npu1", "h0.npu2", "h0.npu3"])
    solo = net.transfer(g, "h0.npu0", "h0.npu1", nbytes)
    sim.run_until_idle()
    solo_done = solo.completes_at

    sim2, net2 = make_net()
    g2 = net2.peer_group(["h0.npu0", "h0.npu1", "h0.npu2", "h0.npu3"])
    first = net2.transfer(g2, "h0.npu0", "h0.npu1", nbytes)
    sim2.run_until(first.started_at + 2000)
    net2.transfer(g2, "h0.npu2", "h0.npu3", nbytes)
    sim2.run_until_idle()
    assert first.completes_at > solo_done


def test_work_conservation_under_random_contention():
    import numpy as np

    rng = np.random.default_rng(1)
    sim, net = make_net()
    eps = [f"h0.npu{i}" for i in range(4)]
    g = net.peer_group(eps)
    tickets = []
    t = 0
    for _ in range(40):
        t += int(rng.integers(0, 2000))
        nbytes = int(rng.integers(1, 64 * 2**20))
        src, dst = rng.choice(4, size=2, replace=False)
        sim.run_until(t)
        tickets.append((nbytes, net.transfer(g, eps[src], eps[dst], nbytes)))
    sim.run_until_idle()
    for nbytes, ticket in tickets:
        assert ticket.status == "done"
        # Duration can never beat the uncontended bound.
        floor = 10 + nbytes / 200e9 * 1e6
        assert ticket.completes_at - ticket.started_at >= math.floor(floor) - 1


def test_broadcast_degenerate_equals_transfer():
    sim, net = make_net()
    g = net.peer_group(["h0.npu0", "h0.npu1"])
    b = net.broadcast(g, "h0.npu0", ["h0.npu1"], 16 * GIB)
    t = net.transfer(g, "h0.npu0", "h0.npu1", 16 * GIB)
    sim.run_until_idle()
    assert b.completes_at - b.started_at == t.completes_at - t.started_at


def test_broadcast_payload_independent_of_fanout():
    spec = DEFAULT_LINKS[LinkKind.HCCS]
    nbytes = 16 * GIB
    d1 = broadcast_duration_us(spec, 1, nbytes)
    d32 = broadcast_duration_us(spec, 32, nbytes)
    # Only the log-depth setup grows: ceil(log2(33)) = 6 rounds vs 1.
    assert d32 - d1 == spec.base_latency_us * (6 - 1)


def test_broadcast_mixed_links_bound_by_slowest():
    sim, net = make_net()
    g = net.peer_group(["h0.npu0", "h0.npu1", "h1.npu0"])
    b = net.broadcast(g, "h0.npu0", ["h0.npu1", "h1.npu0"], 16 * GIB)
    sim.run_until_idle()
    expected = broadcast_duration_us(
        LinkSpec(LinkKind.ROCE, DEFAULT_LINKS[LinkKind.ROCE].bandwidth_bps, 10), 2, 16 * GIB
    )
    assert b.completes_at - b.started_at == expected


def test_broadcast_duration_monotone_in_fanout_and_linear_in_bytes():
    spec = DEFAULT_LINKS[LinkKind.ROCE]
    durations = [broadcast_duration_us(spec, k, GIB) for k in range(1, 40)]
    assert durations == sorted(durations)
    d1 = broadcast_duration_us(spec, 4, GIB) - spec.base_latency_us * 3
    d2 = broadcast_duration_us(spec, 4, 2 * GIB) - spec.base_latency_us * 3
    assert d2 == pytest.approx(2 * d1, abs=2)


def test_pcie_is_per_host_shared_domain():
    sim, net = make_net()
    g = net.peer_group(["h0.dram", "h0.npu0", "h0.npu1"])
    key0, spec0 = net.link_between("h0.dram", "h0.npu0")
    key1, spec1 = net.link_between("h0.dram", "h0.npu1")
    assert key0 == key1
    assert spec0.kind == LinkKind.PCIE
