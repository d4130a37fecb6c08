"""Deterministic discrete-event core: virtual clock, event queue, metrics.

Time is integer microseconds throughout.  Events with equal fire time are
processed in schedule order (a monotone sequence number breaks ties), so a
run is a pure function of the seed and configuration.
"""

from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional


class PastEvent(Exception):
    """An event was scheduled before the current simulation time."""


class EventKind(Enum):
    REQUEST_ARRIVAL = "request_arrival"
    ENGINE_STEP = "engine_step"
    TRANSFER_COMPLETE = "transfer_complete"
    POPULATE_COMPLETE = "populate_complete"
    SCALE_STEP_COMPLETE = "scale_step_complete"
    TE_READY = "te_ready"
    TE_FAILURE = "te_failure"


@dataclass
class Event:
    fire_at: int
    kind: EventKind
    fn: Callable[[], None]
    seq: int = -1  # assigned by the simulator at schedule time
    cancelled: bool = False


class Simulator:
    """Single-context event loop with a monotone virtual clock."""

    def __init__(self, trace_events: bool = False):
        self.now: int = 0
        self.metrics = MetricsStore()
        self._heap: List[tuple] = []
        self._seq = 0
        self._trace: Optional[List[tuple]] = [] if trace_events else None

    def schedule(self, fire_at: int, kind: EventKind, fn: Callable[[], None]) -> Event:
        fire_at = int(fire_at)
        if fire_at < self.now:
            raise PastEvent(f"fire_at={fire_at} is before now={self.now}")
        ev = Event(fire_at=fire_at, kind=kind, fn=fn, seq=self._seq)
        self._seq += 1
        heapq.heappush(self._heap, (ev.fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay_us: int, kind: EventKind, fn: Callable[[], None]) -> Event:
        return self.schedule(self.now + int(delay_us), kind, fn)

    def _dispatch(self, ev: Event) -> None:
        assert ev.fire_at >= self.now, "event popped out of order"
        self.now = ev.fire_at
        if ev.cancelled:
            return
        if self._trace is not None:
            self._trace.append((ev.fire_at, ev.seq, ev.kind.value))
        ev.fn()

    def run_until(self, t_end: int) -> "MetricsStore":
        """Process every event with fire_at <= t_end, then set now = t_end."""
        t_end = int(t_end)
        if t_end < self.now:
            raise PastEvent(f"t_end={t_end} is before now={self.now}")
        while self._heap and self._heap[0][0] <= t_end:
            _, _, ev = heapq.heappop(self._heap)
            self._dispatch(ev)
        self.now = t_end
        return self.metrics

    def run_until_idle(self) -> "MetricsStore":
        """Process events until the queue drains; now stays at the last event."""
        while self._heap:
            _, _, ev = heapq.heappop(self._heap)
            self._dispatch(ev)
        return self.metrics

    @property
    def pending_events(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    @property
    def event_trace(self) -> List[tuple]:
        return list(self._trace or [])


# Request lifecycle states tracked for the conservation audit.
ST_QUEUED = "queued"
ST_IN_FLIGHT = "in_flight"
ST_COMPLETED = "completed"
ST_REJECTED = "rejected"


@dataclass
class RequestRecord:
    request_id: str
    arrival_us: int
    te_id: str = ""
    te_kind: str = ""
    cached_prefix_tokens: int = 0
    token_times_us: List[int] = field(default_factory=list)
    completion_us: Optional[int] = None
    state: str = ST_QUEUED

    @property
    def ttft_us(self) -> Optional[int]:
        if not self.token_times_us:
            return None
        return self.token_times_us[0] - self.arrival_us

    @property
    def tpot_us(self) -> Optional[float]:
        # Mean inter-token interval after the first token; needs >= 2 tokens.
        if len(self.token_times_us) < 2:
            return None
        span = self.token_times_us[-1] - self.token_times_us[0]
        return span / (len(self.token_times_us) - 1)

    @property
    def jct_us(self) -> Optional[int]:
        if self.completion_us is None:
            return None
        return self.completion_us - self.arrival_us


def nearest_rank(values: List[float], pct: float) -> Optional[float]:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not values:
        return None
    ordered = sorted(values)
    n = len(ordered)
    k = max(1, -(-int(pct * n) // 100))  # ceil(pct*n/100)
    return ordered[k - 1]


class MetricsStore:
    """Per-request timing records plus throughput counters."""

    def __init__(self):
        self.records: Dict[str, RequestRecord] = {}
        self.tokens_emitted = 0

    # -- recording hooks -------------------------------------------------

    def on_arrival(self, request_id: str, arrival_us: int) -> RequestRecord:
        rec = RequestRecord(request_id=request_id, arrival_us=arrival_us)
        self.records[request_id] = rec
        return rec

    def on_dispatch(self, request_id: str, te_id: str, te_kind: str) -> None:
        rec = self.records[request_id]
        rec.te_id = te_id
        rec.te_kind = te_kind

    def on_running(self, request_id: str) -> None:
        rec = self.records[request_id]
        if rec.state == ST_QUEUED:
            rec.state = ST_IN_FLIGHT

    def on_cached_prefix(self, request_id: str, tokens: int) -> None:
        self.records[request_id].cached_prefix_tokens = tokens

    def on_token(self, request_id: str, t_us: int) -> None:
        rec = self.records[request_id]
        if rec.token_times_us:
            assert t_us > rec.token_times_us[-1], "token times must increase"
        rec.token_times_us.append(t_us)
        self.tokens_emitted += 1

    def on_completion(self, request_id: str, t_us: int) -> None:
        rec = self.records[request_id]
        rec.completion_us = t_us
        rec.state = ST_COMPLETED
        ttft = rec.ttft_us
        if ttft is not None:
            assert ttft <= rec.jct_us, "TTFT must not exceed JCT"

    def on_rejected(self, request_id: str) -> None:
        self.records[request_id].state = ST_REJECTED

    # -- queries ----------------------------------------------------------

    def completed(self) -> List[RequestRecord]:
        return [r for r in self._ordered() if r.state == ST_COMPLETED]

    def _ordered(self) -> List[RequestRecord]:
        return sorted(self.records.values(), key=lambda r: (r.arrival_us, r.request_id))

    def conservation_counts(self) -> Dict[str, int]:
        counts = {ST_QUEUED: 0, ST_IN_FLIGHT: 0, ST_COMPLETED: 0, ST_REJECTED: 0}
        for rec in self.records.values():
            counts[rec.state] += 1
        return counts

    def check_conservation(self) -> None:
        counts = self.conservation_counts()
        assert sum(counts.values()) == len(self.records)

    def summary(
        self,
        slo_ttft_us: Optional[float] = None,
        slo_tpot_us: Optional[float] = None,
        horizon_us: Optional[int] = None,
    ) -> dict:
        done = self.completed()
        ttfts = [float(r.ttft_us) for r in done if r.ttft_us is not None]
        tpots = [float(r.tpot_us) for r in done if r.tpot_us is not None]
        jcts = [float(r.jct_us) for r in done]

        def stats(vals):
            if not vals:
                return {"mean": None, "p50": None, "p90": None, "p99": None}
            return {
                "mean": sum(vals) / len(vals),
                "p50": nearest_rank(vals, 50),
                "p90": nearest_rank(vals, 90),
                "p99": nearest_rank(vals, 99),
            }

        violations = 0
        if slo_ttft_us is not None or slo_tpot_us is not None:
            for r in done:
                bad = False
                if slo_ttft_us is not None and r.ttft_us is not None:
                    bad = bad or r.ttft_us > slo_ttft_us
                if slo_tpot_us is not None and r.tpot_us is not None:
                    bad = bad or r.tpot_us > slo_tpot_us
                violations += int(bad)

        if horizon_us is None:
            horizon_us = max((r.completion_us or r.arrival_us) for r in self.records.values()) if self.records else 0
        secs = horizon_us / 1e6 if horizon_us else 0.0
        out = {
            "requests_arrived": len(self.records),
            "requests_completed": len(done),
            "requests_rejected": self.conservation_counts()[ST_REJECTED],
            "tokens_emitted": self.tokens_emitted,
            "throughput_rps": (len(done) / secs) if secs else 0.0,
            "throughput_tokens_per_s": (self.tokens_emitted / secs) if secs else 0.0,
            "ttft_us": stats(ttfts),
            "tpot_us": stats(tpots),
            "jct_us": stats(jcts),
            "slo_violation_rate": (violations / len(done)) if done else 0.0,
            "cache_hit_tokens": sum(r.cached_prefix_tokens for r in done),
        }
        return out

    # -- export -----------------------------------------------------------

    CSV_FIELDS = [
        "request_id",
        "arrival_us",
        "ttft_us",
        "tpot_us",
        "jct_us",
        "te_id",
        "te_kind",
        "cached_prefix_tokens",
    ]

    def rows(self) -> List[dict]:
        rows = []
        for r in self._ordered():
            tpot = r.tpot_us
            rows.append(
                {
                    "request_id": r.request_id,
                    "arrival_us": r.arrival_us,
                    "ttft_us": "" if r.ttft_us is None else r.ttft_us,
                    "tpot_us": "" if tpot is None else f"{tpot:.3f}",
                    "jct_us": "" if r.jct_us is None else r.jct_us,
                    "te_id": r.te_id,
                    "te_kind": r.te_kind,
                    "cached_prefix_tokens": r.cached_prefix_tokens,
                }
            )
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow(row)

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.rows(), f, sort_keys=True, indent=2)
            f.write("\n")

    def serialize(self) -> bytes:
        """Canonical byte form, used to assert run-to-run determinism."""
        return json.dumps(self.rows(), sort_keys=True).encode()
