"""End-to-end pilot runs: simulator -> edge node -> cloud node.

The edge runs the IoT agent, broker, pipelines and the forwarding buffer; the
cloud runs a broker with the history store. In-process runs share one
simulated clock (one tick is one second of plant time). HTTP runs start the
cloud as a child process and forward over authenticated ``POST /entities``.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, TextIO

from cogplant.broker import Registration
from cogplant.errors import CogplantError
from cogplant.model import EntitySelector, canonical_parse, dumps_canonical, format_ts
from cogplant.node import Node, NodeConfig, http_call, request_token
from cogplant.pipeline import Alert
from cogplant.sim import (
    DOMAINS,
    EPOCH_MS,
    SIM_STEP_MS,
    Prng,
    ScenarioConfig,
    encode_payload,
    generate_tick,
    telemetry_lines,
    tick_time,
)
from cogplant.sync import BrokerLink, HttpLink, LinkDown, reconcile, reconcile_entities

log = logging.getLogger(__name__)

SYNC_SELECTOR = EntitySelector(id_pattern="urn:cap:*")
SYNC_CLIENT = ("edge-sync", "edge-sync-secret-0001")
ADMIN_CLIENT = ("scenario-admin", "scenario-admin-secret-01")


class GatedLink:
    """Wraps a link; while ``up`` is False every send fails as a partition would."""

    def __init__(self, inner: Any) -> None:
        self.inner = inner
        self.up = True

    def send(self, patch: Any) -> None:
        if not self.up:
            raise LinkDown("partitioned")
        self.inner.send(patch)


@dataclass
class ScenarioReport:
    domain: str
    seed: int
    duration_ticks: int
    anomaly_at_tick: int | None
    alerts: list[dict[str, Any]] = field(default_factory=list)
    kpis: dict[str, float | None] = field(default_factory=dict)
    reconcile: dict[str, int] = field(default_factory=dict)
    reconciled: bool = False
    lost: int = 0
    rejected_frames: int = 0
    expected_alert: bool | None = None
    partition: tuple[int, int] | None = None

    @property
    def exit_code(self) -> int:
        return 0 if self.reconciled and self.expected_alert is not False else 1

    def alert_ticks(self) -> list[int]:
        return [a["tick"] for a in self.alerts]

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "seed": self.seed,
            "durationTicks": self.duration_ticks,
            "anomalyAtTick": self.anomaly_at_tick,
            "partition": list(self.partition) if self.partition else None,
            "alerts": self.alerts,
            "expectedAlert": self.expected_alert,
            "kpis": self.kpis,
            "reconcile": self.reconcile,
            "reconciled": self.reconciled,
            "lost": self.lost,
            "rejectedFrames": self.rejected_frames,
            "exitCode": self.exit_code,
        }


def parse_partition(text: str | None) -> tuple[int, int] | None:
    if not text:
        return None
    a, sep, b = text.partition(":")
    if not sep:
        raise ValueError("partition must look like from:to")
    lo, hi = int(a), int(b)
    if lo < 0 or hi < lo:
        raise ValueError("partition needs 0 <= from <= to")
    return lo, hi


def detection_window(domain: str) -> int:
    """Window length of the domain's z-score detector, in ticks."""
    for spec in DOMAINS[domain].pipelines:
        for proc in spec["processors"]:
            if proc["kind"] == "ZScoreDetector":
                return int(proc["n"])
    raise ValueError(f"{domain} has no detector")


def edge_config(cfg: ScenarioConfig, peer: str) -> NodeConfig:
    domain = DOMAINS[cfg.domain]
    return NodeConfig(
        role="edge",
        peer=peer,
        history=False,
        provisions=[d.provision_dict() for d in domain.devices],
        pipelines=list(domain.pipelines),
        registrations=[{"id": "cloud", "selector": {"idPattern": SYNC_SELECTOR.id_pattern}, "provider": peer}],
    )


def cloud_config(listen: str = "127.0.0.1:0", history_log: str | None = None) -> NodeConfig:
    return NodeConfig(
        role="cloud",
        listen=listen,
        issuer_key="scenario-issuer-key-0123456789",
        history_log=history_log,
        clients=[
            {"clientId": SYNC_CLIENT[0], "secret": SYNC_CLIENT[1], "roles": ["sync"]},
            {"clientId": ADMIN_CLIENT[0], "secret": ADMIN_CLIENT[1], "roles": ["admin"]},
        ],
        policies=[
            {"id": "sync-write", "effect": "Permit", "subjectRole": "sync", "resourcePattern": "/entities",
             "action": "write"},
            {"id": "admin-all", "effect": "Permit", "subjectRole": "admin", "resourcePattern": "*", "action": "*"},
        ],
    )


def _alert_row(a: Alert) -> dict[str, Any]:
    return {
        "tick": (a.observed_at - EPOCH_MS) // SIM_STEP_MS,
        "at": format_ts(a.observed_at),
        "alertType": a.alert_type,
        "pipeline": a.pipeline_id,
        "entityId": a.entity_id,
        "attribute": a.attribute,
        "score": a.score,
    }


class _CloudProcess:
    """A cloud node in a child process, reachable over HTTP."""

    def __init__(self, workdir: Path) -> None:
        cfg = cloud_config()
        path = workdir / "cloud.json"
        path.write_text(json.dumps({
            "role": cfg.role, "listen": cfg.listen, "issuerKey": cfg.issuer_key,
            "clients": cfg.clients, "policies": cfg.policies,
        }), encoding="utf-8")
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parent.parent)
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "cogplant", "node", "--role", "cloud", "--config", str(path)],
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True, env=env,
        )
        line = self.proc.stdout.readline().strip()
        if not line.startswith("listening "):
            self.close()
            raise RuntimeError(f"cloud node failed to start: {line!r}")
        self.url = line.split(" ", 1)[1]
        self.token = request_token(self.url, *ADMIN_CLIENT)

    def entities(self) -> list[Any]:
        status, docs = http_call("GET", self.url + "/entities?idPattern=urn:cap:*", token=self.token)
        if status != 200:
            raise RuntimeError(f"cloud query failed with HTTP {status}")
        return [canonical_parse(dumps_canonical(d).encode("utf-8")) for d in docs]

    def kpi(self, name: str, start: int, end: int, bindings: dict[str, tuple[str, str]]) -> float | None:
        body = {"name": name, "from": format_ts(start), "to": format_ts(end),
                "bindings": {r: {"entityId": e, "attribute": a} for r, (e, a) in bindings.items()}}
        status, doc = http_call("POST", self.url + "/kpi", body, token=self.token)
        return doc["value"] if status == 200 else None

    def close(self) -> None:
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


def run_scenario(
    cfg: ScenarioConfig,
    partition: tuple[int, int] | None = None,
    telemetry: TextIO | None = None,
    inproc: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> ScenarioReport:
    domain = DOMAINS[cfg.domain]
    report = ScenarioReport(cfg.domain, cfg.seed, cfg.duration_ticks, cfg.anomaly_at_tick, partition=partition)
    cloud_proc: _CloudProcess | None = None
    tmp: tempfile.TemporaryDirectory | None = None
    cloud: Node | None = None
    try:
        if inproc:
            cloud = Node(cloud_config())
            edge = Node(edge_config(cfg, "inproc:cloud"))
            link = GatedLink(BrokerLink(cloud.broker))
        else:
            tmp = tempfile.TemporaryDirectory(prefix="cogplant-")
            cloud_proc = _CloudProcess(Path(tmp.name))
            edge = Node(edge_config(cfg, cloud_proc.url))
            sync_token = request_token(cloud_proc.url, *SYNC_CLIENT)
            link = GatedLink(HttpLink(cloud_proc.url, lambda: sync_token))

        prng = Prng(cfg.seed)
        for tick in range(cfg.duration_ticks):
            for device in domain.devices:
                m = generate_tick(cfg, device, tick, prng)
                if telemetry is not None:
                    telemetry.writelines(telemetry_lines(tick, m))
                edge.agent.handle(device.topic(), encode_payload(device, m), m.received_at)
            edge.broker.pump()
            link.up = partition is None or not partition[0] <= tick < partition[1]
            edge.sync.drain(link, tick_time(tick))
            if cloud is not None:
                cloud.broker.pump()
            if cfg.tick_millis:
                sleep(cfg.tick_millis / 1000.0)

        # heal the link and flush whatever is still buffered
        link.up = True
        edge.sync.drain(link)
        if cloud is not None:
            cloud.broker.pump()

        start, end = EPOCH_MS, tick_time(cfg.duration_ticks)
        if cloud is not None:
            rec = reconcile(edge.broker, cloud.broker, SYNC_SELECTOR)
        else:
            rec = reconcile_entities(edge.broker.query(SYNC_SELECTOR), cloud_proc.entities())
        report.reconcile = rec.counts()
        report.reconciled = rec.all_equal
        for name in sorted(domain.kpis):
            bindings = domain.kpi_bindings(name)
            if cloud is not None:
                try:
                    report.kpis[name] = cloud.history.compute_kpi(name, start, end, bindings).value
                except CogplantError:
                    report.kpis[name] = None
            else:
                report.kpis[name] = cloud_proc.kpi(name, start, end, bindings)
        report.alerts = [_alert_row(a) for a in edge.pipelines.alerts]
        report.lost = edge.sync.lost
        report.rejected_frames = sum(edge.agent.rejected.values())
        if cfg.anomaly_at_tick is not None:
            lo = cfg.anomaly_at_tick
            hi = lo + detection_window(cfg.domain)
            report.expected_alert = any(
                a["alertType"] == domain.alert_type and lo <= a["tick"] < hi for a in report.alerts
            )
        return report
    finally:
        if cloud_proc is not None:
            cloud_proc.close()
        if tmp is not None:
            tmp.cleanup()
