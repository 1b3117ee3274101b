"""Context broker: entity store, subscriptions, registrations and delivery."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Union

from cogplant.errors import BrokerError
from cogplant.model import (
    Entity,
    EntitySelector,
    Patch,
    dumps_canonical,
    entity_from_patch,
    entity_to_dict,
    match_selector,
    merge_patch,
    validate_entity,
    validate_patch,
)

log = logging.getLogger(__name__)

QUERY_CAP = 10_000
_PROVIDER_RE = re.compile(r"^[A-Za-z][A-Za-z0-9+.-]*:\S+$")


@dataclass(frozen=True)
class InternalEndpoint:
    channel: str


@dataclass(frozen=True)
class HttpEndpoint:
    url: str


Endpoint = Union[InternalEndpoint, HttpEndpoint]


@dataclass
class Subscription:
    id: str
    selector: EntitySelector
    endpoint: Endpoint
    throttle_ms: int = 0
    last_fired: dict[str, int] = field(default_factory=dict)
    sequence: int = 0


@dataclass(frozen=True)
class Notification:
    subscription_id: str
    entity: Entity
    changed: frozenset[str]
    fired_at: int
    sequence: int

    def body(self) -> bytes:
        # field order is part of the wire format
        return (
            '{"subscriptionId":' + json.dumps(self.subscription_id, ensure_ascii=False)
            + ',"sequence":' + str(self.sequence)
            + ',"changed":' + dumps_canonical(sorted(self.changed))
            + ',"entity":' + dumps_canonical(entity_to_dict(self.entity))
            + "}"
        ).encode("utf-8")


@dataclass(frozen=True)
class Registration:
    id: str
    selector: EntitySelector
    provider: str
    mode: str = "ForwardChanges"


@dataclass(frozen=True)
class UpsertResult:
    notifications: list[Notification]
    created: bool
    applied: frozenset[str]


class Channel:
    """In-process endpoint. With a handler, delivery calls it; otherwise it queues."""

    def __init__(self, name: str, handler: Callable[[Notification], None] | None = None) -> None:
        self.name = name
        self.handler = handler
        self.queue: deque[Notification] = deque()

    def put(self, n: Notification) -> None:
        if self.handler is not None:
            self.handler(n)
        else:
            self.queue.append(n)

    def drain(self) -> list[Notification]:
        out = list(self.queue)
        self.queue.clear()
        return out


@dataclass(frozen=True)
class DeliveryResult:
    delivered: bool
    attempts: int
    error: str | None = None


@dataclass(frozen=True)
class DeadLetter:
    notification: Notification
    endpoint: Endpoint
    attempts: int
    error: str


def backoff_delays(base_ms: int = 100, factor: int = 2, max_attempts: int = 5) -> list[int]:
    """Waits between consecutive attempts: 100, 200, 400, 800 ms by default."""
    return [base_ms * factor**i for i in range(max_attempts - 1)]


def http_post(url: str, body: bytes, headers: dict[str, str] | None = None, timeout: float = 5.0) -> int:
    req = urllib.request.Request(url, data=body, method="POST")
    req.add_header("Content-Type", "application/json")
    for k, v in (headers or {}).items():
        req.add_header(k, v)
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.status


class Deliverer:
    """At-least-once delivery with exponential backoff and a dead-letter log."""

    def __init__(
        self,
        channels: dict[str, Channel] | None = None,
        http: Callable[[str, bytes], object] = http_post,
        sleep: Callable[[float], None] | None = None,
        base_ms: int = 100,
        factor: int = 2,
        max_attempts: int = 5,
    ) -> None:
        self.channels = channels if channels is not None else {}
        self.http = http
        self.sleep = sleep or (lambda _s: None)
        self.delays = backoff_delays(base_ms, factor, max_attempts)
        self.max_attempts = max_attempts
        self.dead_letters: list[DeadLetter] = []

    def _attempt(self, n: Notification, endpoint: Endpoint) -> None:
        if isinstance(endpoint, InternalEndpoint):
            channel = self.channels.get(endpoint.channel)
            if channel is None:
                channel = self.channels[endpoint.channel] = Channel(endpoint.channel)
            channel.put(n)
        else:
            self.http(endpoint.url, n.body())

    def deliver(self, n: Notification, endpoint: Endpoint) -> DeliveryResult:
        error = ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                self._attempt(n, endpoint)
                return DeliveryResult(True, attempt)
            except Exception as exc:  # any endpoint failure is retryable
                error = f"{type(exc).__name__}: {exc}"
                if attempt < self.max_attempts:
                    self.sleep(self.delays[attempt - 1] / 1000.0)
        self.dead_letters.append(DeadLetter(n, endpoint, self.max_attempts, error))
        log.warning("dead-letter sub=%s seq=%d error=%s payload=%s",
                    n.subscription_id, n.sequence, error, n.body().decode("utf-8"))
        return DeliveryResult(False, self.max_attempts, error)


class Broker:
    """Entity store with subscription fan-out.

    ``upsert`` only enqueues notifications; ``pump`` delivers them in
    generation order. Internal handlers may upsert back into the broker.
    """

    def __init__(self, deliverer: Deliverer | None = None) -> None:
        self.entities: dict[str, Entity] = {}
        self.subscriptions: dict[str, Subscription] = {}
        self.registrations: dict[str, Registration] = {}
        self.deliverer = deliverer or Deliverer()
        self.outbox: deque[tuple[Notification, Endpoint]] = deque()
        self._lock = threading.RLock()
        self._pumping = False
        self._pending = threading.Condition(self._lock)

    @property
    def channels(self) -> dict[str, Channel]:
        return self.deliverer.channels

    def channel(self, name: str, handler: Callable[[Notification], None] | None = None) -> Channel:
        ch = self.channels.get(name)
        if ch is None:
            ch = self.channels[name] = Channel(name, handler)
        elif handler is not None:
            ch.handler = handler
        return ch

    def upsert(self, patch: Patch, clock: int) -> UpsertResult:
        violations = validate_patch(patch)
        if violations:
            raise BrokerError("invalid-patch", ", ".join(f"{v.code}@{v.where}" for v in violations))
        changes = {
            name: a if a.observed_at is not None else a.stamped(clock)
            for name, a in patch.changes.items()
        }
        patch = Patch(patch.entity_id, patch.entity_type, changes)
        with self._lock:
            current = self.entities.get(patch.entity_id)
            if current is None:
                entity, applied, created = entity_from_patch(patch), frozenset(changes), True
            else:
                if current.type != patch.entity_type:
                    raise BrokerError("type-mismatch", f"{patch.entity_id} is a {current.type}")
                entity, applied = merge_patch(current, patch)
                created = False
            if validate_entity(entity):
                raise BrokerError("invalid-patch", "merged entity is invalid")
            self.entities[entity.id] = entity
            notes: list[Notification] = []
            if applied:
                for sub in self.subscriptions.values():
                    if not match_selector(sub.selector, entity, applied):
                        continue
                    last = sub.last_fired.get(entity.id)
                    if last is not None and clock - last < sub.throttle_ms:
                        continue
                    sub.last_fired[entity.id] = clock
                    sub.sequence += 1
                    n = Notification(sub.id, entity, applied, clock, sub.sequence)
                    notes.append(n)
                    self.outbox.append((n, sub.endpoint))
                if notes:
                    self._pending.notify_all()
            return UpsertResult(notes, created, applied)

    def get(self, entity_id: str) -> Entity | None:
        return self.entities.get(entity_id)

    def query(self, selector: EntitySelector) -> list[Entity]:
        # watched attributes never restrict a query
        plain = EntitySelector(selector.entity_type, selector.id_pattern)
        with self._lock:
            hits = [e for e in self.entities.values() if match_selector(plain, e, ())]
        hits.sort(key=lambda e: e.id)
        return hits[:QUERY_CAP]

    def delete_entity(self, entity_id: str) -> bool:
        with self._lock:
            return self.entities.pop(entity_id, None) is not None

    def subscribe(self, sub: Subscription) -> str:
        if sub.throttle_ms < 0:
            raise BrokerError("bad-throttle", "throttle must be >= 0")
        with self._lock:
            if sub.id in self.subscriptions:
                raise BrokerError("duplicate-subscription", sub.id)
            self.subscriptions[sub.id] = sub
        return sub.id

    def unsubscribe(self, sub_id: str) -> bool:
        with self._lock:
            return self.subscriptions.pop(sub_id, None) is not None

    def register_source(self, reg: Registration) -> str:
        if not reg.provider or not _PROVIDER_RE.match(reg.provider):
            raise BrokerError("bad-provider", f"provider address {reg.provider!r}")
        with self._lock:
            if reg.id in self.registrations:
                raise BrokerError("duplicate-registration", reg.id)
            self.registrations[reg.id] = reg
        return reg.id

    def pump(self) -> int:
        """Deliver queued notifications until the outbox is empty. Returns delivered count."""
        with self._lock:
            if self._pumping:
                return 0
            self._pumping = True
        delivered = 0
        try:
            while True:
                with self._lock:
                    if not self.outbox:
                        break
                    n, endpoint = self.outbox.popleft()
                if self.deliverer.deliver(n, endpoint).delivered:
                    delivered += 1
        finally:
            with self._lock:
                self._pumping = False
        return delivered

    def quiesce(self, timeout: float = 30.0) -> bool:
        """Pump until nothing is queued or in flight, even if another thread is pumping."""
        deadline = time.monotonic() + timeout
        while True:
            self.pump()
            with self._lock:
                if not self.outbox and not self._pumping:
                    return True
            if time.monotonic() > deadline:
                return False
            time.sleep(0.001)

    def wait_pending(self, timeout: float) -> bool:
        with self._lock:
            if not self.outbox:
                self._pending.wait(timeout)
            return bool(self.outbox)
