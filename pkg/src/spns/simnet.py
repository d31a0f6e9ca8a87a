"""Deterministic in-process simulated network.

Virtual time is a float in seconds. Each directed endpoint pair owns a
serialization queue: a cell occupies the link for size/bandwidth seconds,
then propagates for the link's delay, so back-to-back sends pipeline the
way a real full-duplex link would. Delivery is reliable, in order, and
loss-free; identical seeds give byte-identical event traces.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .errors import LivelockDetected, UnknownEndpoint


@dataclass(frozen=True)
class Endpoint:
    node_id: bytes
    address: str


@dataclass
class LinkModel:
    bandwidth_bps: float = 10_000_000.0
    propagation_delay_s: float = 0.0
    jitter_seed: int | None = None

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if self.propagation_delay_s < 0:
            raise ValueError("delay cannot be negative")


@dataclass
class TraceEvent:
    time: float
    src: str
    dst: str
    size: int


class SimNetwork:
    """Event-driven network: register sans-io nodes, send cells, run to idle."""

    def __init__(
        self,
        default_link: LinkModel | None = None,
        seed: int = 0,
        record_trace: bool = True,
        event_cap: int = 20_000_000,
    ):
        self.default_link = default_link or LinkModel()
        self.record_trace = record_trace
        self.event_cap = event_cap
        self.now = 0.0
        self.endpoints: dict[str, Endpoint] = {}
        self._nodes: dict[str, object] = {}
        self._links: dict[tuple[str, str], LinkModel] = {}
        self._jitter: dict[tuple[str, str], random.Random] = {}
        # per directed pair: [link_free_time, last_arrival, seconds_per_byte, delay, model]
        self._pair_state: dict[tuple[str, str], list] = {}
        self._queue: list = []
        self._seq = 0
        self._events_processed = 0
        self.trace: list[TraceEvent] = []

    def register(self, address: str, node) -> Endpoint:
        if address in self._nodes:
            raise ValueError(f"address {address!r} already registered")
        self._nodes[address] = node
        keyset = getattr(node, "keyset", None)
        node_id = keyset.fingerprint if keyset is not None else b"\x00" * 8
        endpoint = Endpoint(node_id, address)
        self.endpoints[address] = endpoint
        return endpoint

    def set_link(self, src: str, dst: str, model: LinkModel) -> None:
        self._links[(src, dst)] = model

    def _model(self, src: str, dst: str) -> LinkModel:
        return self._links.get((src, dst), self.default_link)

    def send(self, src: str, dst: str, data: bytes) -> float:
        """Schedule a cell; returns its delivery time."""
        pair = (src, dst)
        state = self._pair_state.get(pair)
        if state is None:
            if dst not in self._nodes:
                raise UnknownEndpoint(f"no node at {dst!r}")
            if src not in self._nodes:
                raise UnknownEndpoint(f"no node at {src!r}")
            model = self._model(src, dst)
            state = [0.0, 0.0, 8.0 / model.bandwidth_bps, model.propagation_delay_s, model]
            self._pair_state[pair] = state
        now = self.now
        start = state[0] if state[0] > now else now
        end = start + len(data) * state[2]
        state[0] = end
        delay = state[3]
        model = state[4]
        if model.jitter_seed is not None:
            rng = self._jitter.setdefault(pair, random.Random(model.jitter_seed))
            delay += rng.uniform(0.0, model.propagation_delay_s * 0.1)
        arrival = end + delay
        # FIFO per directed pair even under jitter
        if arrival < state[1]:
            arrival = state[1]
        state[1] = arrival
        self._seq += 1
        heapq.heappush(self._queue, (arrival, self._seq, src, dst, data))
        return arrival

    def run_until_idle(self) -> list[TraceEvent]:
        """Drain the event queue in strict time order; returns the trace of
        this run (empty when tracing is disabled). Raises LivelockDetected
        past the event cap."""
        start_index = len(self.trace)
        queue = self._queue
        nodes = self._nodes
        pop = heapq.heappop
        cap = self.event_cap
        send = self.send
        record = self.record_trace
        processed = self._events_processed
        while queue:
            processed += 1
            if processed > cap:
                self._events_processed = processed
                raise LivelockDetected(f"exceeded {cap} events")
            arrival, _, src, dst, data = pop(queue)
            if arrival > self.now:
                self.now = arrival
            if record:
                self.trace.append(TraceEvent(self.now, src, dst, len(data)))
            node = nodes.get(dst)
            if node is None:
                continue
            for out_dst, out_data in node.handle_cell(src, data):
                send(dst, out_dst, out_data)
        self._events_processed = processed
        return self.trace[start_index:]

    def clock(self) -> float:
        return self.now
