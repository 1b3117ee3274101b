"""Deterministic plant simulators for the asphalt, steel and pharma pilots.

Every signal is ``baseline + amplitude*sin(2*pi*tick/period) + N(0, noise)``
with the noise drawn from a splitmix64 stream via Box-Muller. An optional step
of ``magnitude * noise`` is added to one designated signal from the anomaly
tick onward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator

from cogplant import _kernels
from cogplant.agents import JSON, LINE, Measure, encode_line
from cogplant.model import format_number

EPOCH_MS = 1_704_067_200_000  # 2024-01-01T00:00:00.000Z
SIM_STEP_MS = 1_000
API_KEY = "cap"


class Prng:
    """splitmix64 stream."""

    def __init__(self, seed: int) -> None:
        self.state = seed & _kernels._pykernels.MASK64

    def next_u64(self) -> int:
        self.state, out = _kernels.splitmix64(self.state)
        return out

    def uniform(self) -> float:
        return _kernels.to_unit(self.next_u64())

    def gaussian(self) -> float:
        self.state, g = _kernels.gaussian(self.state)
        return g


def prng_next(state: int) -> tuple[int, int]:
    return _kernels.splitmix64(state)


@dataclass(frozen=True)
class Signal:
    short: str
    attribute: str
    unit: str
    baseline: float
    amplitude: float = 0.0
    period: float = 1.0
    noise_sigma: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noiseSigma must be >= 0")
        if self.period <= 0:
            raise ValueError("period must be > 0")


@dataclass(frozen=True)
class SimDevice:
    device_id: str
    entity_id: str
    entity_type: str
    protocol: str
    signals: tuple[Signal, ...]

    def topic(self) -> str:
        prefix = "ul" if self.protocol == LINE else "json"
        return f"/{prefix}/{API_KEY}/{self.device_id}/attrs"

    def provision_dict(self) -> dict[str, Any]:
        return {
            "apiKey": API_KEY,
            "deviceId": self.device_id,
            "entityId": self.entity_id,
            "entityType": self.entity_type,
            "attributeMap": {
                s.short: {"name": s.attribute, "unit": s.unit, "valueType": "number"} for s in self.signals
            },
            "transforms": {s.short: {"scale": s.scale, "offset": 0.0} for s in self.signals if s.scale != 1.0},
        }


@dataclass(frozen=True)
class Domain:
    name: str
    devices: tuple[SimDevice, ...]
    anomaly: tuple[str, str]
    alert_type: str
    pipelines: tuple[dict[str, Any], ...]
    kpis: dict[str, dict[str, tuple[str, str]]] = field(default_factory=dict)

    def device(self, device_id: str) -> SimDevice:
        return next(d for d in self.devices if d.device_id == device_id)

    def signal(self, device_id: str, short: str) -> Signal:
        return next(s for s in self.device(device_id).signals if s.short == short)

    def kpi_bindings(self, name: str) -> dict[str, tuple[str, str]]:
        """Role -> (entityId, attributeName) as stored by the broker."""
        out = {}
        for role, (dev, short) in self.kpis[name].items():
            d = self.device(dev)
            out[role] = (d.entity_id, self.signal(dev, short).attribute)
        return out


def _zscore_pipeline(pid: str, entity_type: str, attribute: str, alert_type: str) -> dict[str, Any]:
    return {
        "id": pid,
        "source": {"entityType": entity_type, "attribute": attribute},
        "processors": [{"kind": "ZScoreDetector", "n": 30, "k": 3.0, "epsilon": 1e-6}],
        "sink": {"kind": "EmitAlert", "alertType": alert_type},
    }


ASPHALT = Domain(
    "asphalt",
    (
        SimDevice("dryer01", "urn:cap:DryerDrum:dryer01", "DryerDrum", LINE, (
            Signal("t", "temperature", "CEL", 180.0, 1.5, 900.0, 1.0),
            Signal("fuel", "fuelRate", "E32", 4200.0, 150.0, 600.0, 40.0, scale=0.1),
        )),
        SimDevice("feeder01", "urn:cap:AggregateFeeder:feeder01", "AggregateFeeder", JSON, (
            Signal("moist", "moisture", "P1", 4.5, 0.4, 400.0, 0.1),
        )),
        SimDevice("meter01", "urn:cap:ProductionMeter:asphalt01", "ProductionMeter", JSON, (
            Signal("out", "output", "TNE", 2.5, 0.2, 150.0, 0.05),
            Signal("kwh", "energy", "KWH", 45.0, 4.0, 150.0, 1.0),
            Signal("rej", "waste", "TNE", 0.08, 0.01, 90.0, 0.005),
        )),
    ),
    ("dryer01", "t"),
    "temp-anomaly",
    (
        _zscore_pipeline("dryer-temp-zscore", "DryerDrum", "temperature", "temp-anomaly"),
        {
            "id": "energy-ewma",
            "source": {"entityType": "ProductionMeter", "attribute": "energy"},
            "processors": [{"kind": "Ewma", "alpha": 0.3}],
            "sink": {"kind": "WriteAttribute", "attribute": "energySmoothed"},
        },
    ),
    {
        "energy_per_unit": {"energy": ("meter01", "kwh"), "output": ("meter01", "out")},
        "waste_percentage": {"waste": ("meter01", "rej"), "total": ("meter01", "out")},
    },
)

STEEL = Domain(
    "steel",
    (
        SimDevice("eaf01", "urn:cap:ArcFurnace:eaf01", "ArcFurnace", JSON, (
            Signal("kwh", "energy", "KWH", 520.0, 30.0, 240.0, 8.0),
        )),
        SimDevice("ccm01", "urn:cap:BilletCaster:ccm01", "BilletCaster", LINE, (
            Signal("spd", "castingSpeed", "2X", 2.8, 0.05, 900.0, 0.03),
            Signal("st", "surfaceTemperature", "CEL", 1050.0, 4.0, 900.0, 3.0),
        )),
        SimDevice("qs01", "urn:cap:QualityStation:qs01", "QualityStation", JSON, (
            Signal("def", "defects", "C62", 2.0, 0.5, 120.0, 0.3),
            Signal("out", "output", "TNE", 12.0, 1.0, 240.0, 0.2),
            Signal("scrap", "waste", "TNE", 0.35, 0.05, 100.0, 0.02),
        )),
    ),
    ("ccm01", "st"),
    "surface-temp-anomaly",
    (
        _zscore_pipeline("billet-temp-zscore", "BilletCaster", "surfaceTemperature", "surface-temp-anomaly"),
        {
            "id": "shell-soft-sensor",
            "source": {"entityType": "BilletCaster"},
            "processors": [{"kind": "SoftSensor", "coefficients": [-4.0, -0.8, 0.006],
                            "inputs": ["castingSpeed", "surfaceTemperature"]}],
            "sink": {"kind": "WriteAttribute", "attribute": "shellThicknessEstimate"},
        },
    ),
    {
        "energy_per_unit": {"energy": ("eaf01", "kwh"), "output": ("qs01", "out")},
        "waste_percentage": {"waste": ("qs01", "scrap"), "total": ("qs01", "out")},
    },
)

PHARMA = Domain(
    "pharma",
    (
        SimDevice("gran01", "urn:cap:Granulator:twinscrew01", "Granulator", LINE, (
            Signal("lf", "liquidFeedRate", "E93", 1.2, 0.05, 200.0, 0.01),
            Signal("kwh", "energy", "KWH", 3.2, 0.2, 150.0, 0.05),
        )),
        SimDevice("fbd01", "urn:cap:FluidBedDryer:fbd01", "FluidBedDryer", JSON, (
            Signal("air", "airTemperature", "CEL", 60.0, 1.0, 300.0, 0.3),
        )),
        SimDevice("ga01", "urn:cap:GranuleAnalyzer:ga01", "GranuleAnalyzer", LINE, (
            Signal("gs", "granuleSize", "4H", 250.0, 2.0, 900.0, 2.0),
        )),
        SimDevice("tp01", "urn:cap:TabletPress:tp01", "TabletPress", JSON, (
            Signal("tw", "tabletWeight", "MGM", 500.0, 2.0, 120.0, 1.0),
            Signal("out", "output", "KGM", 40.0, 2.0, 240.0, 0.5),
            Signal("waste", "waste", "KGM", 0.9, 0.1, 90.0, 0.05),
        )),
    ),
    ("ga01", "gs"),
    "granule-size-anomaly",
    (
        _zscore_pipeline("granule-size-zscore", "GranuleAnalyzer", "granuleSize", "granule-size-anomaly"),
        {
            "id": "tablet-weight-ewma",
            "source": {"entityType": "TabletPress", "attribute": "tabletWeight"},
            "processors": [{"kind": "Ewma", "alpha": 0.2}],
            "sink": {"kind": "WriteAttribute", "attribute": "tabletWeightSmoothed"},
        },
    ),
    {
        "energy_per_unit": {"energy": ("gran01", "kwh"), "output": ("tp01", "out")},
        "waste_percentage": {"waste": ("tp01", "waste"), "total": ("tp01", "out")},
    },
)

DOMAINS = {d.name: d for d in (ASPHALT, STEEL, PHARMA)}


@dataclass(frozen=True)
class ScenarioConfig:
    domain: str
    seed: int = 42
    duration_ticks: int = 600
    tick_millis: int = 0
    anomaly_at_tick: int | None = None
    anomaly_magnitude_sigma: float = 6.0

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.duration_ticks < 1:
            raise ValueError("durationTicks must be >= 1")
        if self.anomaly_at_tick is not None and not 0 <= self.anomaly_at_tick < self.duration_ticks:
            raise ValueError("anomalyAtTick must lie inside the run")


def tick_time(tick: int) -> int:
    return EPOCH_MS + tick * SIM_STEP_MS


def signal_value(sig: Signal, tick: int, noise: float, step: float = 0.0) -> float:
    return sig.baseline + sig.amplitude * math.sin(2.0 * math.pi * tick / sig.period) + sig.noise_sigma * noise + step


def generate_tick(cfg: ScenarioConfig, device: SimDevice, tick: int, prng: Prng) -> Measure:
    """One measure per device per tick; one Gaussian draw per signal."""
    domain = DOMAINS[cfg.domain]
    readings = {}
    for sig in device.signals:
        step = 0.0
        if (cfg.anomaly_at_tick is not None and tick >= cfg.anomaly_at_tick
                and (device.device_id, sig.short) == domain.anomaly):
            step = cfg.anomaly_magnitude_sigma * sig.noise_sigma
        readings[sig.short] = signal_value(sig, tick, prng.gaussian(), step)
    return Measure(device.device_id, readings, tick_time(tick))


def encode_payload(device: SimDevice, m: Measure) -> bytes:
    if device.protocol == LINE:
        return encode_line({k: format_number(v) for k, v in m.readings.items()}).encode("utf-8")
    return json.dumps(m.readings, separators=(",", ":")).encode("utf-8")


def telemetry_lines(tick: int, m: Measure) -> list[str]:
    return [f"{tick}\t{m.device_id}\t{k}\t{format_number(v)}\n" for k, v in m.readings.items()]


def generate(cfg: ScenarioConfig) -> Iterator[tuple[int, SimDevice, Measure]]:
    prng = Prng(cfg.seed)
    domain = DOMAINS[cfg.domain]
    for tick in range(cfg.duration_ticks):
        for device in domain.devices:
            yield tick, device, generate_tick(cfg, device, tick, prng)


def parse_telemetry(text: str) -> list[tuple[int, str, str, float]]:
    out = []
    for line in text.splitlines():
        if line:
            tick, dev, short, value = line.split("\t")
            out.append((int(tick), dev, short, float(value)))
    return out
