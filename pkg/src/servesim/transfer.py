"""Tensor-transfer cost model: peer groups, point-to-point transfers with
progress-fair bandwidth sharing per physical link, and tree broadcasts.

Point-to-point flows sharing a physical link split its bandwidth equally;
rates are piecewise constant and recomputed whenever a flow starts or
finishes.  Broadcast is modeled closed-form: a log-depth setup term plus a
payload term bound by the slowest involved link, so payload time does not
grow with fan-out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

from .simkernel import EventKind, Simulator


class UnknownEndpoint(Exception):
    pass


class NotInGroup(Exception):
    pass


class LinkKind(Enum):
    HCCS = "hccs"
    ROCE = "roce"
    PCIE = "pcie"


@dataclass(frozen=True)
class LinkSpec:
    kind: LinkKind
    bandwidth_bps: float  # unidirectional bytes/second
    base_latency_us: int = 10

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")


# Hardware-flavored defaults: a ~200 GB/s unidirectional scale-up fabric, a
# 200 Gbps scale-out network, and a host PCIe bus shared by local devices.
DEFAULT_LINKS: Dict[LinkKind, LinkSpec] = {
    LinkKind.HCCS: LinkSpec(LinkKind.HCCS, 200e9, 10),
    LinkKind.ROCE: LinkSpec(LinkKind.ROCE, 25e9, 10),
    LinkKind.PCIE: LinkSpec(LinkKind.PCIE, float(32 * 2**30), 10),
}


def broadcast_duration_us(spec: LinkSpec, n_dests: int, nbytes: int) -> int:
    """Closed-form tree broadcast: log-depth setup, bandwidth-bound payload."""
    if n_dests < 1:
        raise ValueError("broadcast needs at least one destination")
    setup = spec.base_latency_us * math.ceil(math.log2(n_dests + 1))
    payload = nbytes / spec.bandwidth_bps * 1e6
    return int(math.ceil(setup + payload))


@dataclass
class Endpoint:
    id: str
    host: str
    kind: str = "npu"  # npu | dram


@dataclass
class ChannelGroup:
    group_id: int
    members: FrozenSet[str]


@dataclass
class TransferTicket:
    ticket_id: int
    bytes: int
    src: str
    dst: str
    started_at: int
    completes_at: int  # current projection; final once status == "done"
    status: str = "pending"  # pending | done
    on_done: List[Callable[["TransferTicket"], None]] = field(default_factory=list)


@dataclass
class _Flow:
    ticket: TransferTicket
    link_key: tuple
    remaining: float  # bytes
    rate: float = 0.0  # bytes per microsecond
    last_update: int = 0
    started: bool = False
    generation: int = 0


class TransferNetwork:
    """Typed links between registered endpoints, driven by simulator events."""

    def __init__(
        self,
        sim: Simulator,
        links: Optional[Dict[LinkKind, LinkSpec]] = None,
        cross_host: LinkKind = LinkKind.ROCE,
        pair_overrides: Optional[Dict[FrozenSet[str], LinkKind]] = None,
    ):
        self.sim = sim
        self.links = dict(DEFAULT_LINKS)
        if links:
            self.links.update(links)
        self.cross_host = cross_host
        self.pair_overrides = pair_overrides or {}
        self._endpoints: Dict[str, Endpoint] = {}
        self._groups: Dict[FrozenSet[str], ChannelGroup] = {}
        self._next_group = 0
        self._next_ticket = 0
        self._link_flows: Dict[tuple, List[_Flow]] = {}

    # -- topology ---------------------------------------------------------

    def register_endpoint(self, endpoint_id: str, host: str, kind: str = "npu") -> Endpoint:
        ep = Endpoint(endpoint_id, host, kind)
        self._endpoints[endpoint_id] = ep
        return ep

    def peer_group(self, endpoints) -> ChannelGroup:
        members = frozenset(endpoints)
        if len(members) < 2:
            raise ValueError("a peer group needs at least two endpoints")
        for e in members:
            if e not in self._endpoints:
                raise UnknownEndpoint(e)
        if members in self._groups:
            return self._groups[members]
        group = ChannelGroup(self._next_group, members)
        self._next_group += 1
        self._groups[members] = group
        return group

    def link_between(self, src: str, dst: str) -> Tuple[tuple, LinkSpec]:
        """Resolve the physical link (contention domain) for a pair."""
        a, b = self._endpoints[src], self._endpoints[dst]
        if a.host == b.host:
            if "dram" in (a.kind, b.kind):
                kind = LinkKind.PCIE
                key = (kind.value, a.host)
            else:
                kind = LinkKind.HCCS
                key = (kind.value, a.host)
        else:
            kind = self.pair_overrides.get(frozenset((a.host, b.host)), self.cross_host)
            key = (kind.value, frozenset((a.host, b.host)))
        return key, self.links[kind]

    # -- point-to-point ---------------------------------------------------

    def transfer(self, group: ChannelGroup, src: str, dst: str, nbytes: int) -> TransferTicket:
        if src not in group.members or dst not in group.members:
            raise NotInGroup(f"{src}->{dst} not in group {group.group_id}")
        if nbytes <= 0:
            raise ValueError("transfer size must be positive")
        key, spec = self.link_between(src, dst)
        now = self.sim.now
        ticket = TransferTicket(
            ticket_id=self._next_ticket,
            bytes=nbytes,
            src=src,
            dst=dst,
            started_at=now,
            completes_at=now + spec.base_latency_us + int(math.ceil(nbytes / spec.bandwidth_bps * 1e6)),
        )
        self._next_ticket += 1
        flow = _Flow(ticket=ticket, link_key=key, remaining=float(nbytes))
        # The base-latency setup phase does not contend for bandwidth.
        self.sim.schedule_in(
            spec.base_latency_us,
            EventKind.TRANSFER_COMPLETE,
            lambda: self._start_payload(flow, spec),
        )
        return ticket

    def _start_payload(self, flow: _Flow, spec: LinkSpec) -> None:
        flow.started = True
        flow.last_update = self.sim.now
        self._link_flows.setdefault(flow.link_key, []).append(flow)
        self._rebalance(flow.link_key, spec)

    def _rebalance(self, key: tuple, spec: LinkSpec) -> None:
        flows = self._link_flows.get(key, [])
        if not flows:
            return
        now = self.sim.now
        for fl in flows:
            elapsed = now - fl.last_update
            if elapsed > 0 and fl.rate > 0:
                fl.remaining = max(0.0, fl.remaining - fl.rate * elapsed)
            fl.last_update = now
        share = spec.bandwidth_bps / 1e6 / len(flows)  # bytes per microsecond
        for fl in flows:
            fl.rate = share
            fl.generation += 1
            eta = int(math.ceil(fl.remaining / share)) if fl.remaining > 0 else 0
            fl.ticket.completes_at = now + eta
            gen = fl.generation
            self.sim.schedule_in(
                eta,
                EventKind.TRANSFER_COMPLETE,
                lambda fl=fl, gen=gen, spec=spec: self._maybe_finish(fl, gen, spec),
            )

    def _maybe_finish(self, flow: _Flow, generation: int, spec: LinkSpec) -> None:
        if flow.generation != generation or flow.ticket.status == "done":
            return  # superseded by a later rebalance
        now = self.sim.now
        elapsed = now - flow.last_update
        flow.remaining = max(0.0, flow.remaining - flow.rate * elapsed)
        flow.last_update = now
        flows = self._link_flows.get(flow.link_key, [])
        flows.remove(flow)
        flow.ticket.status = "done"
        flow.ticket.completes_at = now
        for cb in flow.ticket.on_done:
            cb(flow.ticket)
        self._rebalance(flow.link_key, spec)

    # -- broadcast ----------------------------------------------------------

    def broadcast(self, group: ChannelGroup, src: str, dsts, nbytes: int) -> TransferTicket:
        dsts = list(dsts)
        if not dsts:
            raise ValueError("broadcast needs at least one destination")
        if src not in group.members:
            raise NotInGroup(src)
        for d in dsts:
            if d not in group.members:
                raise NotInGroup(d)
        specs = [self.link_between(src, d)[1] for d in dsts]
        slowest = min(specs, key=lambda s: s.bandwidth_bps)
        latency = max(s.base_latency_us for s in specs)
        shaped = LinkSpec(slowest.kind, slowest.bandwidth_bps, latency)
        duration = broadcast_duration_us(shaped, len(dsts), nbytes)
        now = self.sim.now
        ticket = TransferTicket(
            ticket_id=self._next_ticket,
            bytes=nbytes,
            src=src,
            dst=",".join(dsts),
            started_at=now,
            completes_at=now + duration,
        )
        self._next_ticket += 1

        def finish():
            ticket.status = "done"
            for cb in ticket.on_done:
                cb(ticket)

        self.sim.schedule(ticket.completes_at, EventKind.TRANSFER_COMPLETE, finish)
        return ticket
