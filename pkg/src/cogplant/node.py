"""A platform node (edge or cloud): component wiring plus the guarded HTTP API."""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Mapping

from cogplant.agents import DeviceRegistry, IoTAgent, provision_from_dict, provision_to_dict
from cogplant.broker import (
    Broker,
    Deliverer,
    HttpEndpoint,
    InternalEndpoint,
    Registration,
    Subscription,
)
from cogplant.errors import CogplantError
from cogplant.history import HistoryStore, SeriesQuery, points_to_json
from cogplant.model import (
    EntitySelector,
    dumps_canonical,
    entity_to_dict,
    parse_ts,
    patch_from_dict,
    selector_from_dict,
    selector_to_dict,
)
from cogplant.pipeline import PipelineHost, fit_from_history, parse_spec
from cogplant.security import (
    Policy,
    PolicyStore,
    TokenIssuer,
    bearer,
    pep_enforce,
    policy_from_dict,
    policy_to_dict,
)
from cogplant.sync import EdgeSync, HttpLink
from cogplant.usage import Connector, DataOffer, term_from_dict, term_to_dict

log = logging.getLogger(__name__)

ALL = EntitySelector(id_pattern="*")


@dataclass
class NodeConfig:
    role: str = "cloud"
    listen: str = "127.0.0.1:0"
    peer: str | None = None
    issuer_key: str = "change-me-issuer-key"
    clients: list[dict[str, Any]] = field(default_factory=list)
    peer_credentials: dict[str, str] | None = None
    policies: list[dict[str, Any]] = field(default_factory=list)
    pipelines: list[dict[str, Any]] = field(default_factory=list)
    provisions: list[dict[str, Any]] = field(default_factory=list)
    registrations: list[dict[str, Any]] = field(default_factory=list)
    offers: list[dict[str, Any]] = field(default_factory=list)
    buffer_capacity: int = 100_000
    history: bool = True
    history_log: str | None = None
    sync_interval: float = 0.2

    def __post_init__(self) -> None:
        if self.role not in ("edge", "cloud"):
            raise ValueError(f"role must be edge or cloud, not {self.role!r}")
        if self.role == "edge" and not self.peer:
            raise ValueError("an edge node needs a peer address")

    @classmethod
    def load(cls, path: str | Path) -> NodeConfig:
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))

        def listy(key: str) -> list[Any]:
            # entries may be inline objects or paths relative to the config file
            out: list[Any] = []
            value = doc.get(key, [])
            for item in [value] if isinstance(value, str) else value:
                if isinstance(item, str):
                    loaded = json.loads((path.parent / item).read_text(encoding="utf-8"))
                    out.extend(loaded if isinstance(loaded, list) else [loaded])
                else:
                    out.append(item)
            return out

        return cls(
            role=doc.get("role", "cloud"),
            listen=doc.get("listen", "127.0.0.1:0"),
            peer=doc.get("peer"),
            issuer_key=doc.get("issuerKey", "change-me-issuer-key"),
            clients=doc.get("clients", []),
            peer_credentials=doc.get("peerCredentials"),
            policies=listy("policies"),
            pipelines=listy("pipelines"),
            provisions=listy("provisions"),
            registrations=doc.get("registrations", []),
            offers=doc.get("offers", []),
            buffer_capacity=int(doc.get("bufferCapacity", 100_000)),
            history=bool(doc.get("history", True)),
            history_log=doc.get("historyLog"),
            sync_interval=float(doc.get("syncInterval", 0.2)),
        )


def offer_from_dict(d: Mapping[str, Any]) -> DataOffer:
    return DataOffer(
        d["id"], selector_from_dict(d["selector"]), d.get("description", ""), d.get("providerId", "provider"),
        tuple(term_from_dict(t) for t in d.get("minimumTerms", ())),
    )


def offer_to_dict(o: DataOffer) -> dict[str, Any]:
    return {"id": o.id, "selector": selector_to_dict(o.selector), "description": o.description,
            "providerId": o.provider_id, "minimumTerms": [term_to_dict(t) for t in o.minimum_terms]}


def contract_to_dict(c: Any) -> dict[str, Any]:
    d = {"id": c.id, "offerId": c.offer_id, "consumerId": c.consumer_id, "state": c.state,
         "terms": [term_to_dict(t) for t in c.terms], "permits": c.permits}
    if c.counter_terms:
        d["counterTerms"] = [term_to_dict(t) for t in c.counter_terms]
    return d


class Node:
    def __init__(self, cfg: NodeConfig, deliverer: Deliverer | None = None) -> None:
        self.cfg = cfg
        self.broker = Broker(deliverer or Deliverer())
        self.history = HistoryStore(cfg.history_log) if cfg.history else None
        if self.history is not None:
            self.broker.channel("history", self.history.ingest)
            self.broker.subscribe(Subscription("history", ALL, InternalEndpoint("history")))
        self.registry = DeviceRegistry()
        self.agent = IoTAgent(self.registry, self.broker)
        self.pipelines = PipelineHost(self.broker)
        self.issuer = TokenIssuer(cfg.issuer_key)
        for c in cfg.clients:
            self.issuer.register(c["clientId"], c["secret"], c.get("roles", ()))
        self.policies = PolicyStore(policy_from_dict(p) for p in cfg.policies)
        self.connector = Connector(self.broker, self.history)
        for o in cfg.offers:
            self.connector.add_offer(offer_from_dict(o))
        for p in cfg.provisions:
            self.registry.provision(provision_from_dict(p))
        for spec in cfg.pipelines:
            self.pipelines.add(parse_spec(spec))
        for r in cfg.registrations:
            self.broker.register_source(Registration(r["id"], selector_from_dict(r["selector"]), r["provider"]))
        self.sync = None
        if cfg.role == "edge":
            self.sync = EdgeSync(self.broker, cfg.buffer_capacity)
            self.sync.attach()


def _json(status: int, obj: Any) -> tuple[int, bytes]:
    return status, json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def _error(status: int, code: str, message: str = "") -> tuple[int, bytes]:
    return _json(status, {"error": code, "message": message or code})


class NodeApp:
    """Transport-free request handler; ``NodeServer`` adapts it to HTTP."""

    def __init__(self, node: Node, now: Callable[[], float] = time.time) -> None:
        self.node = node
        self.now = now
        self.routes: list[tuple[str, tuple[str, ...], str, Callable[..., tuple[int, bytes]]]] = [
            ("GET", ("entities",), "read", self.get_entities),
            ("POST", ("entities",), "write", self.post_entities),
            ("DELETE", ("entities", "*"), "write", self.delete_entity),
            ("POST", ("subscriptions",), "write", self.post_subscription),
            ("DELETE", ("subscriptions", "*"), "write", self.delete_subscription),
            ("GET", ("registrations",), "read", self.get_registrations),
            ("POST", ("registrations",), "write", self.post_registration),
            ("GET", ("devices",), "read", self.get_devices),
            ("POST", ("devices",), "write", self.post_device),
            ("POST", ("ingest",), "write", self.post_ingest),
            ("GET", ("temporal", "*", "*"), "read", self.get_temporal),
            ("POST", ("kpi",), "read", self.post_kpi),
            ("POST", ("fit",), "read", self.post_fit),
            ("GET", ("alerts",), "read", self.get_alerts),
            ("GET", ("status",), "read", self.get_status),
            ("POST", ("policies",), "admin", self.post_policy),
            ("GET", ("offers",), "read", self.get_offers),
            ("POST", ("contracts",), "write", self.post_contract),
            ("POST", ("transfer",), "read", self.post_transfer),
            ("GET", ("contracts", "*", "log"), "admin", self.get_contract_log),
        ]

    def _clock_ms(self) -> int:
        return int(self.now() * 1000)

    def handle(self, method: str, target: str, headers: Mapping[str, str], body: bytes = b"") -> tuple[int, bytes]:
        url = urllib.parse.urlsplit(target)
        path = url.path
        query = dict(urllib.parse.parse_qsl(url.query))
        parts = tuple(urllib.parse.unquote(p) for p in path.strip("/").split("/")) if path.strip("/") else ()
        if method == "POST" and parts == ("token",):
            return self.post_token(body)
        for m, shape, action, fn in self.routes:
            if m != method or len(shape) != len(parts):
                continue
            if not all(s == "*" or s == p for s, p in zip(shape, parts)):
                continue
            args = [p for s, p in zip(shape, parts) if s == "*"]
            status, result = pep_enforce(
                path, action, bearer(headers), self.node.issuer, self.node.policies.snapshot(),
                int(self.now()), lambda claims: None,
            )
            if status != 200:
                return _error(status, result)
            try:
                return fn(*args, query=query, body=body)
            except CogplantError as exc:
                return _error(422 if exc.code in ("undefined-kpi", "degenerate-design") else 400, exc.code, str(exc))
            except (ValueError, KeyError, TypeError) as exc:
                return _error(400, "bad-request", str(exc))
        return _error(404, "not-found", path)

    @staticmethod
    def _body(body: bytes) -> Any:
        return json.loads(body.decode("utf-8")) if body else {}

    def _quiesce(self) -> None:
        self.node.broker.quiesce()

    def post_token(self, body: bytes) -> tuple[int, bytes]:
        try:
            d = self._body(body)
            token = self.node.issuer.issue_token(d["clientId"], d["secret"], int(d.get("ttl", 3600)), int(self.now()))
        except CogplantError as exc:
            return _error(401, exc.code)
        except (ValueError, KeyError, TypeError):
            return _error(400, "bad-request")
        return _json(200, {"token": token})

    def get_entities(self, query: dict, body: bytes) -> tuple[int, bytes]:
        self._quiesce()
        selector = EntitySelector(query.get("type"), query.get("idPattern") or (None if query.get("type") else "*"))
        ents = self.node.broker.query(selector)
        return 200, ("[" + ",".join(dumps_canonical(entity_to_dict(e)) for e in ents) + "]").encode("utf-8")

    def post_entities(self, query: dict, body: bytes) -> tuple[int, bytes]:
        patch = patch_from_dict(self._body(body))
        result = self.node.broker.upsert(patch, self._clock_ms())
        self._quiesce()
        return (201 if result.created else 204), b""

    def delete_entity(self, entity_id: str, query: dict, body: bytes) -> tuple[int, bytes]:
        return (204, b"") if self.node.broker.delete_entity(entity_id) else _error(404, "not-found", entity_id)

    def post_subscription(self, query: dict, body: bytes) -> tuple[int, bytes]:
        d = self._body(body)
        ep = d.get("endpoint", {})
        endpoint = HttpEndpoint(ep["url"]) if ep.get("kind", "Http") == "Http" else InternalEndpoint(ep["channel"])
        sub = Subscription(d["id"], selector_from_dict(d["selector"]), endpoint, int(d.get("throttle", 0)))
        try:
            self.node.broker.subscribe(sub)
        except CogplantError as exc:
            return _error(409 if exc.code == "duplicate-subscription" else 400, exc.code)
        return _json(201, {"id": sub.id})

    def delete_subscription(self, sub_id: str, query: dict, body: bytes) -> tuple[int, bytes]:
        return (204, b"") if self.node.broker.unsubscribe(sub_id) else _error(404, "not-found", sub_id)

    def get_registrations(self, query: dict, body: bytes) -> tuple[int, bytes]:
        regs = sorted(self.node.broker.registrations.values(), key=lambda r: r.id)
        return _json(200, [{"id": r.id, "selector": selector_to_dict(r.selector), "provider": r.provider,
                            "mode": r.mode} for r in regs])

    def post_registration(self, query: dict, body: bytes) -> tuple[int, bytes]:
        d = self._body(body)
        try:
            rid = self.node.broker.register_source(
                Registration(d["id"], selector_from_dict(d["selector"]), d.get("provider", "")))
        except CogplantError as exc:
            return _error(409 if exc.code == "duplicate-registration" else 400, exc.code)
        return _json(201, {"id": rid})

    def get_devices(self, query: dict, body: bytes) -> tuple[int, bytes]:
        return _json(200, [provision_to_dict(p) for p in self.node.registry.list()])

    def post_device(self, query: dict, body: bytes) -> tuple[int, bytes]:
        try:
            self.node.registry.provision(provision_from_dict(self._body(body)))
        except CogplantError as exc:
            return _error(409 if exc.code == "duplicate-device" else 400, exc.code)
        return 201, b""

    def post_ingest(self, query: dict, body: bytes) -> tuple[int, bytes]:
        topic = query.get("topic", "")
        before = sum(self.node.agent.rejected.values())
        patch = self.node.agent.handle(topic, body, self._clock_ms())
        self._quiesce()
        if patch is None:
            code = "rejected"
            if sum(self.node.agent.rejected.values()) > before:
                code = self.node.agent.rejected.most_common(1)[0][0]
            return _error(400, code)
        return 202, b""

    def get_temporal(self, entity_id: str, attr: str, query: dict, body: bytes) -> tuple[int, bytes]:
        self._quiesce()
        if self.node.history is None:
            return _error(404, "no-history")
        bucket = query.get("bucket")
        q = SeriesQuery(entity_id, attr, parse_ts(query["from"]), parse_ts(query["to"]),
                        query.get("agg", "raw"), int(bucket) if bucket else None)
        return _json(200, points_to_json(self.node.history.query_series(q)))

    def post_kpi(self, query: dict, body: bytes) -> tuple[int, bytes]:
        self._quiesce()
        d = self._body(body)
        bindings = {}
        for role, b in d["bindings"].items():
            bindings[role] = (b["entityId"], b["attribute"]) if isinstance(b, dict) else (b[0], b[1])
        report = self.node.history.compute_kpi(d["name"], parse_ts(d["from"]), parse_ts(d["to"]), bindings)
        return _json(200, report.to_dict())

    def post_fit(self, query: dict, body: bytes) -> tuple[int, bytes]:
        self._quiesce()
        d = self._body(body)
        model = fit_from_history(self.node.history, d["entityId"], d["target"], list(d["inputs"]),
                                 parse_ts(d["from"]), parse_ts(d["to"]), self._clock_ms())
        return _json(200, model.to_dict())

    def get_alerts(self, query: dict, body: bytes) -> tuple[int, bytes]:
        self._quiesce()
        return _json(200, [a.to_dict() for a in self.node.pipelines.alerts])

    def get_status(self, query: dict, body: bytes) -> tuple[int, bytes]:
        node = self.node
        status = {
            "role": node.cfg.role,
            "entities": len(node.broker.entities),
            "deadLetters": len(node.broker.deliverer.dead_letters),
            "agentUpserts": node.agent.upserts,
            "historyPoints": len(node.history.log) if node.history else 0,
        }
        if node.sync is not None:
            status.update(buffered=len(node.sync.buffer), lost=node.sync.lost)
        return _json(200, status)

    def post_policy(self, query: dict, body: bytes) -> tuple[int, bytes]:
        p = policy_from_dict(self._body(body))
        self.node.policies.add(p)
        return _json(201, policy_to_dict(p))

    def get_offers(self, query: dict, body: bytes) -> tuple[int, bytes]:
        return _json(200, [offer_to_dict(o) for o in self.node.connector.offers.values()])

    def post_contract(self, query: dict, body: bytes) -> tuple[int, bytes]:
        d = self._body(body)
        try:
            c = self.node.connector.negotiate(d["offerId"], d["consumerId"],
                                              [term_from_dict(t) for t in d.get("terms", ())])
        except CogplantError as exc:
            return _error(404 if exc.code == "no-such-offer" else 400, exc.code)
        return _json(201, contract_to_dict(c))

    def post_transfer(self, query: dict, body: bytes) -> tuple[int, bytes]:
        self._quiesce()
        d = self._body(body)
        q = d.get("query", {})
        if "entityId" in q:
            bucket = q.get("bucket")
            sq: Any = SeriesQuery(q["entityId"], q["attribute"], parse_ts(q["from"]), parse_ts(q["to"]),
                                  q.get("agg", "raw"), int(bucket) if bucket else None)
        else:
            sq = selector_from_dict(q)
        try:
            result = self.node.connector.transfer(d["contractId"], self._clock_ms(), d.get("purpose"), sq)
        except CogplantError as exc:
            return _error(404, exc.code)
        if not result.decision.permit:
            return _json(403, {"decision": "Deny", "reason": result.decision.reason})
        return _json(200, result.payload())

    def get_contract_log(self, contract_id: str, query: dict, body: bytes) -> tuple[int, bytes]:
        if contract_id not in self.node.connector.contracts:
            return _error(404, "no-such-contract", contract_id)
        return _json(200, [e.to_dict() for e in self.node.connector.contract_log(contract_id)])


class _Handler(BaseHTTPRequestHandler):
    app: NodeApp
    protocol_version = "HTTP/1.1"

    def _serve(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        try:
            status, payload = self.app.handle(self.command, self.path, dict(self.headers.items()), body)
        except Exception:  # keep the server alive on handler bugs
            log.exception("request failed")
            status, payload = _error(500, "internal-error")
        self.send_response(status)
        if payload:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        if payload:
            self.wfile.write(payload)

    do_GET = do_POST = do_DELETE = _serve

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("%s " + fmt, self.address_string(), *args)


class NodeServer:
    """Serves a node over HTTP; on the edge, also drains the sync buffer to the peer."""

    def __init__(self, node: Node, listen: str | None = None) -> None:
        self.node = node
        self.app = NodeApp(node)
        host, _, port = (listen or node.cfg.listen).rpartition(":")
        handler = type("Handler", (_Handler,), {"app": self.app})
        self.httpd = ThreadingHTTPServer((host or "127.0.0.1", int(port or 0)), handler)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.link: HttpLink | None = None
        self._peer_token: tuple[str, float] | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _token(self) -> str:
        if self._peer_token is None or self._peer_token[1] < time.time() + 60:
            creds = self.node.cfg.peer_credentials or {}
            token = request_token(self.node.cfg.peer, creds.get("clientId", ""), creds.get("secret", ""))
            self._peer_token = (token, time.time() + 3000)
        return self._peer_token[0]

    def _sync_loop(self) -> None:
        while not self._stop.wait(self.node.cfg.sync_interval):
            try:
                self.node.sync.drain(self.link, int(time.time() * 1000))
            except Exception:
                log.exception("sync drain failed")

    def _dispatch_loop(self) -> None:
        while not self._stop.is_set():
            if self.node.broker.wait_pending(0.2):
                self.node.broker.pump()

    def start(self) -> NodeServer:
        self._threads.append(threading.Thread(target=self.httpd.serve_forever, daemon=True))
        self._threads.append(threading.Thread(target=self._dispatch_loop, daemon=True))
        if self.node.sync is not None:
            self.link = HttpLink(self.node.cfg.peer, self._token)
            self._threads.append(threading.Thread(target=self._sync_loop, daemon=True))
        for t in self._threads:
            t.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        if self.node.history is not None:
            self.node.history.close()


def http_call(method: str, url: str, body: Any = None, token: str | None = None,
              timeout: float = 10.0) -> tuple[int, Any]:
    import urllib.error
    import urllib.request

    data = None if body is None else (body if isinstance(body, bytes) else json.dumps(body).encode("utf-8"))
    req = urllib.request.Request(url, data=data, method=method)
    req.add_header("Content-Type", "application/json")
    if token:
        req.add_header("Authorization", f"Bearer {token}")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw, status = resp.read(), resp.status
    except urllib.error.HTTPError as exc:
        raw, status = exc.read(), exc.code
    return status, (json.loads(raw) if raw else None)


def request_token(base_url: str, client_id: str, secret: str, ttl: int = 3600) -> str:
    status, doc = http_call("POST", base_url.rstrip("/") + "/token",
                            {"clientId": client_id, "secret": secret, "ttl": ttl})
    if status != 200:
        raise CogplantError("invalid-client", f"token request failed with HTTP {status}")
    return doc["token"]
