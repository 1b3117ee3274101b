"""Edge to cloud store-and-forward.

The edge captures every applied change that matches a registration into a
bounded FIFO and forwards it to the cloud broker as a plain upsert. Records
leave the buffer only once the cloud acknowledges them, so delivery is
at-least-once; duplicates are harmless because the cloud merge treats an
equal ``observedAt`` as an idempotent overwrite.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

from cogplant.broker import InternalEndpoint, Subscription, backoff_delays
from cogplant.model import (
    Attribute,
    Entity,
    EntitySelector,
    Patch,
    canonical_serialize,
    dumps_canonical,
    match_selector,
    patch_to_dict,
)

log = logging.getLogger(__name__)


class LinkDown(Exception):
    pass


@dataclass(frozen=True)
class ChangeRecord:
    entity_id: str
    entity_type: str
    attribute_name: str
    attribute: Attribute
    enqueue_seq: int

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.entity_id, self.attribute_name, self.attribute.observed_at)

    def to_patch(self) -> Patch:
        return Patch(self.entity_id, self.entity_type, {self.attribute_name: self.attribute})


class ForwardBuffer:
    """Bounded FIFO; on overflow the oldest record is dropped and counted."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._q: deque[ChangeRecord] = deque()
        self._lock = threading.Lock()
        self.lost = 0

    def push(self, rec: ChangeRecord) -> None:
        with self._lock:
            if len(self._q) >= self.capacity:
                self._q.popleft()
                self.lost += 1
            self._q.append(rec)

    def front(self) -> ChangeRecord | None:
        with self._lock:
            return self._q[0] if self._q else None

    def pop_front(self) -> ChangeRecord:
        with self._lock:
            return self._q.popleft()

    def ack(self, rec: ChangeRecord) -> bool:
        """Remove ``rec`` if it is still at the front (overflow may have dropped it)."""
        with self._lock:
            if self._q and self._q[0] is rec:
                self._q.popleft()
                return True
            return False

    def __len__(self) -> int:
        return len(self._q)

    def __iter__(self):
        return iter(list(self._q))


class Link(Protocol):
    def send(self, patch: Patch) -> None: ...


class BrokerLink:
    """In-memory link straight into a cloud broker; ``up`` scripts partitions."""

    def __init__(self, broker: Any) -> None:
        self.broker = broker
        self.up = True
        self.acked: list[Patch] = []
        self.fail_after: int | None = None

    def send(self, patch: Patch) -> None:
        if not self.up:
            raise LinkDown("link is down")
        if self.fail_after is not None:
            if self.fail_after <= 0:
                self.up = False
                self.fail_after = None
                raise LinkDown("link dropped")
            self.fail_after -= 1
        clock = max(a.observed_at for a in patch.changes.values())
        self.broker.upsert(patch, clock)
        self.acked.append(patch)


class HttpLink:
    """Forwards to a peer's ``POST /entities``; any 2xx is an acknowledgment."""

    def __init__(self, base_url: str, auth: Callable[[], str] | None = None,
                 post: Callable[..., int] | None = None) -> None:
        from cogplant.broker import http_post

        self.url = base_url.rstrip("/") + "/entities"
        self.auth = auth
        self.post = post or http_post

    def send(self, patch: Patch) -> None:
        headers = {"Authorization": f"Bearer {self.auth()}"} if self.auth else {}
        try:
            status = self.post(self.url, dumps_canonical(patch_to_dict(patch)).encode("utf-8"), headers)
        except Exception as exc:
            raise LinkDown(str(exc)) from exc
        if not 200 <= int(status) < 300:
            raise LinkDown(f"HTTP {status}")


@dataclass
class EdgeSync:
    broker: Any
    capacity: int = 100_000
    channel: str = "edge-sync"
    buffer: ForwardBuffer = field(init=False)
    next_seq: int = 1
    failures: int = 0
    retry_at: int | None = None

    def __post_init__(self) -> None:
        self.buffer = ForwardBuffer(self.capacity)
        self.delays = backoff_delays()

    @property
    def lost(self) -> int:
        return self.buffer.lost

    def attach(self) -> None:
        """Subscribe to every change on the edge broker; registrations filter at capture."""
        self.broker.channel(self.channel, self.capture)
        self.broker.subscribe(
            Subscription(self.channel, EntitySelector(id_pattern="*"), InternalEndpoint(self.channel))
        )

    def capture(self, n: Any) -> int:
        regs = list(self.broker.registrations.values())
        count = 0
        for name in sorted(n.changed):
            if not any(match_selector(r.selector, n.entity, (name,)) for r in regs):
                continue
            attr = n.entity.attrs[name]
            self.buffer.push(ChangeRecord(n.entity.id, n.entity.type, name, attr, self.next_seq))
            self.next_seq += 1
            count += 1
        return count

    def drain(self, link: Link, now: int | None = None, limit: int | None = None) -> tuple[int, int]:
        """Send buffered records front-first; stop at the first failure."""
        if now is not None and self.retry_at is not None and now < self.retry_at:
            return 0, len(self.buffer)
        sent = 0
        while len(self.buffer) and (limit is None or sent < limit):
            rec = self.buffer.front()
            try:
                link.send(rec.to_patch())
            except LinkDown as exc:
                self.failures += 1
                if now is not None:
                    self.retry_at = now + self.delays[min(self.failures, len(self.delays)) - 1]
                log.info("sync link down after %d sends: %s", sent, exc)
                return sent, len(self.buffer)
            self.buffer.ack(rec)
            sent += 1
        self.failures = 0
        self.retry_at = None
        return sent, len(self.buffer)


@dataclass(frozen=True)
class ReconcileReport:
    status: dict[str, str]

    @property
    def all_equal(self) -> bool:
        return all(s == "equal" for s in self.status.values())

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.status.values():
            out[s] = out.get(s, 0) + 1
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"allEqual": self.all_equal, "counts": self.counts(), "entities": dict(sorted(self.status.items()))}


def reconcile_entities(edge: Iterable[Entity], cloud: Iterable[Entity]) -> ReconcileReport:
    cloud_bytes = {e.id: canonical_serialize(e) for e in cloud}
    status = {}
    for e in edge:
        other = cloud_bytes.pop(e.id, None)
        if other is None:
            status[e.id] = "missing"
        else:
            status[e.id] = "equal" if other == canonical_serialize(e) else "differs"
    for eid in cloud_bytes:
        status[eid] = "extra"
    return ReconcileReport(status)


def reconcile(edge: Any, cloud: Any, selector: EntitySelector) -> ReconcileReport:
    """Compare canonical bytes of matching entities on both sides."""
    return reconcile_entities(edge.query(selector), cloud.query(selector))


def report_json(report: ReconcileReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True)
