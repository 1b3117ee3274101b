"""Contract-mediated data egress with enforced usage terms.

Terms are ``NotAfter`` (deny at and after the instant), ``MaxCount`` (number
of permitted transfers) and ``Purpose`` (exact tag match). Every decision is
appended to the usage log exactly once.
"""

from __future__ import annotations

import hashlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Union

from cogplant.errors import UsageError
from cogplant.history import SeriesQuery, points_to_json
from cogplant.model import (
    EntitySelector,
    dumps_canonical,
    entity_to_dict,
    format_ts,
    glob_match,
    match_selector,
    parse_ts,
)

PROPOSED = "Proposed"
AGREED = "Agreed"
EXHAUSTED = "Exhausted"
EXPIRED = "Expired"


@dataclass(frozen=True)
class NotAfter:
    at: int


@dataclass(frozen=True)
class MaxCount:
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise UsageError("bad-term", "MaxCount needs n >= 1")


@dataclass(frozen=True)
class Purpose:
    tag: str


Term = Union[NotAfter, MaxCount, Purpose]


def _by_kind(terms: Iterable[Term]) -> dict[type, Term]:
    out: dict[type, Term] = {}
    for t in terms:
        if type(t) in out:
            raise UsageError("duplicate-term", f"more than one {type(t).__name__}")
        out[type(t)] = t
    return out


def satisfies(proposed: Term, required: Term) -> bool:
    """A proposed term meets a minimum when it is at least as strict."""
    if isinstance(required, NotAfter):
        return proposed.at <= required.at
    if isinstance(required, MaxCount):
        return proposed.n <= required.n
    return proposed.tag == required.tag


@dataclass(frozen=True)
class DataOffer:
    id: str
    selector: EntitySelector
    description: str = ""
    provider_id: str = "provider"
    minimum_terms: tuple[Term, ...] = ()


@dataclass
class Contract:
    id: str
    offer_id: str
    consumer_id: str
    terms: tuple[Term, ...]
    state: str = PROPOSED
    permits: int = 0
    counter_terms: tuple[Term, ...] = ()

    def term(self, kind: type) -> Any:
        return next((t for t in self.terms if isinstance(t, kind)), None)


@dataclass(frozen=True)
class LogEntry:
    contract_id: str
    at: int
    resource: str
    decision: str
    reason: str = ""
    digest: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = {"contractId": self.contract_id, "at": format_ts(self.at), "resource": self.resource,
             "decision": self.decision}
        if self.reason:
            d["reason"] = self.reason
        if self.digest:
            d["digest"] = self.digest
        return d


@dataclass(frozen=True)
class Decision:
    permit: bool
    reason: str = ""


@dataclass(frozen=True)
class TransferResult:
    contract_id: str
    decision: Decision
    digest: str = ""
    data: list[Any] = field(default_factory=list)

    def payload(self) -> dict[str, Any]:
        return {"contractId": self.contract_id, "digest": self.digest, "data": self.data}


def payload_bytes(data: list[Any]) -> bytes:
    return dumps_canonical(data).encode("utf-8")


def term_to_dict(t: Term) -> dict[str, Any]:
    if isinstance(t, NotAfter):
        return {"kind": "NotAfter", "at": format_ts(t.at)}
    if isinstance(t, MaxCount):
        return {"kind": "MaxCount", "n": t.n}
    return {"kind": "Purpose", "tag": t.tag}


def term_from_dict(d: Mapping[str, Any]) -> Term:
    kind = d.get("kind")
    if kind == "NotAfter":
        at = d["at"]
        return NotAfter(parse_ts(at) if isinstance(at, str) else int(at))
    if kind == "MaxCount":
        return MaxCount(int(d["n"]))
    if kind == "Purpose":
        return Purpose(str(d["tag"]))
    raise UsageError("bad-term", f"unknown term kind {kind!r}")


class Connector:
    """Provider-side connector: offers, contracts, enforcement and the usage log."""

    def __init__(self, broker: Any = None, history: Any = None) -> None:
        self.broker = broker
        self.history = history
        self.offers: dict[str, DataOffer] = {}
        self.contracts: dict[str, Contract] = {}
        self.log: list[LogEntry] = []
        self._locks: dict[str, threading.Lock] = {}
        self._log_lock = threading.Lock()
        self._ids = itertools.count(1)

    def add_offer(self, offer: DataOffer) -> None:
        _by_kind(offer.minimum_terms)
        self.offers[offer.id] = offer

    def negotiate(self, offer_id: str, consumer_id: str, proposed: Iterable[Term]) -> Contract:
        offer = self.offers.get(offer_id)
        if offer is None:
            raise UsageError("no-such-offer", offer_id)
        proposed_by_kind = _by_kind(proposed)
        counter = dict(proposed_by_kind)
        ok = True
        for req in offer.minimum_terms:
            have = proposed_by_kind.get(type(req))
            if have is None or not satisfies(have, req):
                ok = False
                counter[type(req)] = req
        cid = f"contract-{next(self._ids)}"
        terms = tuple(proposed_by_kind.values())
        if ok and terms:
            contract = Contract(cid, offer_id, consumer_id, terms, AGREED)
        else:
            contract = Contract(cid, offer_id, consumer_id, terms, PROPOSED,
                                counter_terms=tuple(counter.values()) or offer.minimum_terms)
        self.contracts[cid] = contract
        self._locks[cid] = threading.Lock()
        return contract

    def _append(self, entry: LogEntry) -> None:
        with self._log_lock:
            self.log.append(entry)

    def _decide(self, c: Contract, now: int, purpose: str | None) -> Decision:
        # caller holds the contract lock
        if c.state == EXPIRED:
            return Decision(False, "expired")
        if c.state == EXHAUSTED:
            return Decision(False, "exhausted")
        if c.state != AGREED:
            return Decision(False, "not-agreed")
        na = c.term(NotAfter)
        if na is not None and now >= na.at:
            c.state = EXPIRED
            return Decision(False, "expired")
        mc = c.term(MaxCount)
        if mc is not None and c.permits >= mc.n:
            c.state = EXHAUSTED
            return Decision(False, "exhausted")
        pu = c.term(Purpose)
        if pu is not None and purpose != pu.tag:
            return Decision(False, "wrong-purpose")
        c.permits += 1
        if mc is not None and c.permits >= mc.n:
            c.state = EXHAUSTED
        return Decision(True)

    def _contract(self, contract_id: str) -> Contract:
        c = self.contracts.get(contract_id)
        if c is None:
            raise UsageError("no-such-contract", contract_id)
        return c

    def authorize_transfer(self, contract_id: str, now: int, purpose: str | None, resource: str = "") -> Decision:
        c = self._contract(contract_id)
        with self._locks[contract_id]:
            d = self._decide(c, now, purpose)
            self._append(LogEntry(contract_id, now, resource, "Permit" if d.permit else "Deny", d.reason))
        return d

    def _in_scope(self, offer: DataOffer, query: SeriesQuery | EntitySelector) -> bool:
        sel = offer.selector
        if isinstance(query, EntitySelector):
            if sel.entity_type and query.entity_type != sel.entity_type:
                return False
            if sel.id_pattern and not glob_match(sel.id_pattern, query.id_pattern or "*"):
                return False
            return True
        entity = self.broker.get(query.entity_id) if self.broker is not None else None
        if entity is None:
            return False
        return match_selector(sel, entity, (query.attribute,))

    def _fetch(self, offer: DataOffer, query: SeriesQuery | EntitySelector) -> list[Any]:
        if isinstance(query, EntitySelector):
            plain = EntitySelector(offer.selector.entity_type, offer.selector.id_pattern)
            return [entity_to_dict(e) for e in self.broker.query(query)
                    if match_selector(plain, e, ())]
        return points_to_json(self.history.query_series(query))

    def transfer(self, contract_id: str, now: int, purpose: str | None,
                 query: SeriesQuery | EntitySelector) -> TransferResult:
        c = self._contract(contract_id)
        offer = self.offers[c.offer_id]
        resource = _describe(query)
        with self._locks[contract_id]:
            if not self._in_scope(offer, query):
                d = Decision(False, "out-of-scope")
                self._append(LogEntry(contract_id, now, resource, "Deny", d.reason))
                return TransferResult(contract_id, d)
            d = self._decide(c, now, purpose)
            if not d.permit:
                self._append(LogEntry(contract_id, now, resource, "Deny", d.reason))
                return TransferResult(contract_id, d)
            data = self._fetch(offer, query)
            digest = hashlib.sha256(payload_bytes(data)).hexdigest()
            self._append(LogEntry(contract_id, now, resource, "Permit", "", digest))
        return TransferResult(contract_id, d, digest, data)

    def contract_log(self, contract_id: str) -> list[LogEntry]:
        return [e for e in self.log if e.contract_id == contract_id]


def _describe(query: SeriesQuery | EntitySelector) -> str:
    if isinstance(query, EntitySelector):
        return f"entities type={query.entity_type or '*'} idPattern={query.id_pattern or '*'}"
    return f"series {query.entity_id}/{query.attribute} [{format_ts(query.start)},{format_ts(query.end)}) {query.agg}"
