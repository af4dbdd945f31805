"""Multi-operator network: devices, links and hop-by-hop packet forwarding."""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple

from .recording import EDGE, PacketEvent, PacketProcessor


class NetworkError(Exception):
    pass


class DuplicateNode(NetworkError):
    pass


class DanglingLink(NetworkError):
    pass


class NoActiveSla(NetworkError):
    pass


class CapacityExceeded(NetworkError):
    pass


class NotOwner(NetworkError):
    pass


class BadPath(NetworkError):
    pass


@dataclass
class Device:
    node: int
    name: str
    owner: str
    vendor: str
    capacity: int
    tamper_protected: bool = False
    neighbors: Set[int] = field(default_factory=set)
    active_flows: int = 0


@dataclass(frozen=True)
class Link:
    a: int
    b: int
    delay: int = 0
    loss_prob: float = 0.0

    @property
    def endpoints(self) -> frozenset:
        return frozenset((self.a, self.b))


@dataclass
class Flow:
    flow_id: str
    sla_id: str
    tenant: str
    src_ip: int
    dst_ip: int
    assigned_path: Tuple[int, ...]
    packet_count: int
    start_at: int
    packet_gap: int = 1
    actual_path: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.packet_count < 1:
            raise ValueError("packet_count must be >= 1")
        self.assigned_path = tuple(self.assigned_path)
        self.actual_path = tuple(self.actual_path) or self.assigned_path

    @property
    def src(self) -> int:
        return self.assigned_path[0]

    @property
    def dst(self) -> int:
        return self.assigned_path[-1]


@dataclass
class FlowHandle:
    """Completion future for an injected flow."""
    flow: Flow
    delivered: int = 0
    dropped: int = 0
    completed_at: Optional[int] = None
    callbacks: List[Callable[["FlowHandle"], None]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.delivered + self.dropped == self.flow.packet_count

    def add_done_callback(self, fn):
        if self.done:
            fn(self)
        else:
            self.callbacks.append(fn)


@dataclass(frozen=True)
class HonestForwarding:
    pass


@dataclass(frozen=True)
class PathSwap:
    """Serve the agreed route over ``cheap_path`` instead."""
    agreed: Tuple[int, ...]
    cheap_path: Tuple[int, ...]


@dataclass(frozen=True)
class ProofReplication:
    """Path swap plus forged proofs on the agreed route's devices (``copy_to``)."""
    copy_to: Tuple[int, ...]
    cheap_path: Tuple[int, ...]


@dataclass
class HopRecord:
    flow_id: str
    packet_index: int
    node: int
    prev_hop: int
    next_hop: int
    arrived_at: int
    tr: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


class Network:
    def __init__(self):
        self.devices: Dict[int, Device] = {}
        self.links: Dict[frozenset, Link] = {}
        self.by_name: Dict[str, int] = {}
        self.sim = None
        self.processors: Dict[int, PacketProcessor] = {}
        self.sla_check: Optional[Callable[[Flow, int], bool]] = None
        self.strategies: Dict[str, Tuple[str, object]] = {}
        self.flows: Dict[str, FlowHandle] = {}
        self.hops: List[HopRecord] = []
        self.occupancy_log: List[Tuple[int, int, int]] = []
        self.forged: List[Tuple[str, int, object]] = []

    # -- structure ----------------------------------------------------------

    def add_device(self, device: Device):
        if device.node in self.devices or device.node == EDGE:
            raise DuplicateNode(device.node)
        if device.name in self.by_name:
            raise DuplicateNode(device.name)
        if device.capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.devices[device.node] = device
        self.by_name[device.name] = device.node

    def add_link(self, link: Link):
        for end in (link.a, link.b):
            if end not in self.devices:
                raise DanglingLink(end)
        if link.a == link.b:
            raise DanglingLink("self loop")
        if link.delay < 0 or not 0 <= link.loss_prob <= 1:
            raise ValueError("bad link parameters")
        if link.endpoints in self.links:
            raise NetworkError(f"duplicate link {link.a}-{link.b}")
        self.links[link.endpoints] = link
        self.devices[link.a].neighbors.add(link.b)
        self.devices[link.b].neighbors.add(link.a)

    def link(self, a: int, b: int) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise BadPath(f"no link {a}-{b}") from None

    def node_id(self, name_or_id) -> int:
        if isinstance(name_or_id, int):
            return name_or_id
        return self.by_name[name_or_id]

    def name(self, node: int) -> str:
        return self.devices[node].name

    def neighbors(self, node: int) -> Set[int]:
        return self.devices[node].neighbors

    def check_path(self, path: Sequence[int]):
        if not path:
            raise BadPath("empty path")
        for n in path:
            if n not in self.devices:
                raise BadPath(f"unknown device {n}")
        if len(set(path)) != len(path):
            raise BadPath("path revisits a device")
        for a, b in zip(path, path[1:]):
            self.link(a, b)

    def path_delay(self, path: Sequence[int]) -> int:
        return sum(self.link(a, b).delay for a, b in zip(path, path[1:]))

    def simple_paths(self, src: int, dst: int, max_hops: int = 8) -> Iterator[Tuple[int, ...]]:
        """All loop-free paths, in lexicographic node-id order."""
        stack = [(src, (src,))]
        found = []
        while stack:
            node, path = stack.pop()
            if node == dst:
                found.append(path)
                continue
            if len(path) > max_hops:
                continue
            for nxt in sorted(self.devices[node].neighbors, reverse=True):
                if nxt not in path:
                    stack.append((nxt, path + (nxt,)))
        return iter(sorted(found))

    # -- simulation -----------------------------------------------------------

    def attach(self, sim, processors: Dict[int, PacketProcessor],
               sla_check: Optional[Callable[[Flow, int], bool]] = None):
        self.sim = sim
        self.processors = processors
        self.sla_check = sla_check

    def apply_adversary(self, adversary: str, victim: str, strategy) -> None:
        if isinstance(strategy, HonestForwarding):
            self.strategies.pop(victim, None)
            return
        if isinstance(strategy, PathSwap):
            agreed, cheap = tuple(strategy.agreed), tuple(strategy.cheap_path)
        elif isinstance(strategy, ProofReplication):
            agreed, cheap = tuple(strategy.copy_to), tuple(strategy.cheap_path)
        else:
            raise TypeError(f"unknown strategy {strategy!r}")
        self.check_path(agreed)
        self.check_path(cheap)
        if (agreed[0], agreed[-1]) != (cheap[0], cheap[-1]):
            raise BadPath("swapped path must keep the flow endpoints")
        touched = set(agreed[1:-1]) ^ set(cheap[1:-1])
        for n in sorted(touched):
            if self.devices[n].owner != adversary:
                raise NotOwner(f"{adversary} does not own {self.name(n)}")
        self.strategies[victim] = (adversary, strategy)

    def _route(self, flow: Flow) -> Tuple[Tuple[int, ...], Optional[ProofReplication]]:
        entry = self.strategies.get(flow.tenant)
        if entry is None:
            return flow.assigned_path, None
        _, strategy = entry
        agreed = strategy.agreed if isinstance(strategy, PathSwap) else strategy.copy_to
        if tuple(agreed) != flow.assigned_path:
            return flow.assigned_path, None
        if isinstance(strategy, ProofReplication):
            return tuple(strategy.cheap_path), strategy
        return tuple(strategy.cheap_path), None

    def inject_flow(self, flow: Flow) -> FlowHandle:
        now = self.sim.now
        if flow.start_at < now:
            raise ValueError("flow starts in the past")
        if flow.flow_id in self.flows:
            raise NetworkError(f"duplicate flow id {flow.flow_id}")
        self.check_path(flow.assigned_path)
        if self.sla_check is not None and not self.sla_check(flow, now):
            raise NoActiveSla(flow.sla_id)
        flow.actual_path, replication = self._route(flow)
        for n in flow.actual_path:
            dev = self.devices[n]
            if dev.active_flows >= dev.capacity:
                raise CapacityExceeded(dev.name)
        for n in flow.actual_path:
            self.devices[n].active_flows += 1
            self.occupancy_log.append((now, n, +1))
        handle = FlowHandle(flow)
        self.flows[flow.flow_id] = handle
        for i in range(flow.packet_count):
            self.sim.schedule(flow.start_at + i * flow.packet_gap, "packet",
                              self._on_arrival, target=flow.flow_id, data=(handle, i, 0, replication))
        return handle

    def _on_arrival(self, ev):
        handle, index, hop, replication = ev.data
        flow = handle.flow
        path = flow.actual_path
        node = path[hop]
        now = self.sim.now
        prev_hop = path[hop - 1] if hop > 0 else EDGE
        next_hop = path[hop + 1] if hop + 1 < len(path) else EDGE
        pkt = PacketEvent(flow.flow_id, index, node, prev_hop, next_hop, now)
        proc = self.processors.get(node)
        tr = now
        if proc is not None:
            proof = proc.on_packet(pkt, flow, now)
            tr = proof.tr
            if replication is not None:
                self._forge(flow, replication, hop, proof)
        self.hops.append(HopRecord(flow.flow_id, index, node, prev_hop, next_hop, now, tr))
        if next_hop == EDGE:
            handle.delivered += 1
            self._maybe_complete(handle)
            return
        link = self.link(node, next_hop)
        if link.loss_prob > 0 and self.sim.rng(f"link:{min(node, next_hop)}-{max(node, next_hop)}").random() < link.loss_prob:
            handle.dropped += 1
            self._maybe_complete(handle)
            return
        self.sim.schedule(now + link.delay, "packet", self._on_arrival, target=flow.flow_id,
                          data=(handle, index, hop + 1, replication))

    def _forge(self, flow: Flow, strategy: ProofReplication, hop: int, proof):
        """Copy a cheap-path interior proof onto the agreed route's devices.

        The forged proof names the agreed route neighbours and reuses the
        timestamp of the cheap-path device sitting at the proportional position.
        """
        cheap_inner = list(flow.actual_path[1:-1])
        agreed = list(strategy.copy_to)
        agreed_inner = agreed[1:-1]
        if not (0 < hop < len(flow.actual_path) - 1):
            return
        pos = hop - 1
        for i, target in enumerate(agreed_inner):
            if target in cheap_inner:
                continue
            if (i * len(cheap_inner)) // len(agreed_inner) != pos:
                continue
            k = i + 1
            fake = type(proof)(tr=proof.tr, src_id=agreed[k - 1], dst_id=agreed[k + 1], node=target)
            proc = self.processors.get(target)
            if proc is not None and proc.install_forged(fake, self.sim.now):
                self.forged.append((flow.flow_id, target, fake))

    def _maybe_complete(self, handle: FlowHandle):
        if not handle.done:
            return
        now = self.sim.now
        handle.completed_at = now
        for n in handle.flow.actual_path:
            self.devices[n].active_flows -= 1
            self.occupancy_log.append((now, n, -1))
        for fn in handle.callbacks:
            fn(handle)

    # -- invariants -------------------------------------------------------------

    def conservation(self) -> Tuple[int, int, int]:
        injected = sum(h.flow.packet_count for h in self.flows.values())
        delivered = sum(h.delivered for h in self.flows.values())
        dropped = sum(h.dropped for h in self.flows.values())
        return injected, delivered, dropped

    def capacity_violations(self) -> int:
        load: Dict[int, int] = {}
        bad = 0
        for _, node, delta in self.occupancy_log:
            load[node] = load.get(node, 0) + delta
            if load[node] > self.devices[node].capacity:
                bad += 1
        return bad


def build_topology(layout: dict, assign_id: Optional[Callable[[dict], int]] = None) -> Network:
    """Build a network from a topology description.

    ``layout`` holds ``devices`` (name, owner, vendor, capacity, optional node_id
    and tamper_protected) and ``links`` (a, b by name, delay, loss_prob). When
    a device has no explicit node_id, ``assign_id`` (or a counter from 1) does.
    """
    net = Network()
    counter = iter(range(1, 2**63))
    for d in layout.get("devices", []):
        if "node_id" in d:
            node = int(d["node_id"])
        elif assign_id is not None:
            node = assign_id(d)
        else:
            node = next(counter)
        net.add_device(Device(node=node, name=d["name"], owner=d["owner"],
                              vendor=d.get("vendor", "generic"), capacity=int(d.get("capacity", 1)),
                              tamper_protected=bool(d.get("tamper_protected", False))))
    for ln in layout.get("links", []):
        try:
            a, b = net.node_id(ln["a"]), net.node_id(ln["b"])
        except KeyError as exc:
            raise DanglingLink(str(exc)) from None
        net.add_link(Link(a, b, int(ln.get("delay", 0)), float(ln.get("loss_prob", 0.0))))
    return net
