"""Simulated SPS30 / SCD30 / SHT31 drivers: power states, warmup, trace sampling."""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .simcore import RandomStream, SimTime

CH_PM25 = "pm25_ugm3"
CH_CO2 = "co2_ppm"
CH_TEMP = "temp_C"
CH_RH = "rh_pct"

CHANNELS = (CH_PM25, CH_CO2, CH_TEMP, CH_RH)

# physical limits used to clamp measurements
CHANNEL_RANGE = {
    CH_PM25: (0.0, math.inf),
    CH_CO2: (0.0, 40_000.0),
    CH_TEMP: (-40.0, 125.0),
    CH_RH: (0.0, 100.0),
}


class SensorState(Enum):
    OFF = "off"
    SLEEP = "sleep"
    WARMING = "warming"
    SAMPLING = "sampling"
    IDLE = "idle"


class SensorNotReady(RuntimeError):
    pass


class OutOfTraceError(ValueError):
    pass


@dataclass
class Measurement:
    channel: str
    value: float
    taken_at: SimTime


class EnvironmentTrace:
    """Ground-truth channel values, linearly interpolated between points.

    Queries before the first point or after the last raise OutOfTraceError
    rather than extrapolating.
    """

    def __init__(self, channel: str, samples: list[tuple[int, float]]):
        if channel not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        times = [t for t, _ in samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trace times must be strictly increasing")
        lo, hi = CHANNEL_RANGE[channel]
        for _, v in samples:
            if not lo <= v <= hi:
                raise ValueError(f"{channel} value {v} outside [{lo}, {hi}]")
        self.channel = channel
        self.samples = list(samples)
        self._times = times

    @classmethod
    def from_csv(cls, channel: str, path: str | Path) -> "EnvironmentTrace":
        samples = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                samples.append((int(row["time_ms"]), float(row["value"])))
        return cls(channel, samples)

    @property
    def span(self) -> tuple[int, int]:
        return self._times[0], self._times[-1]

    def value_at(self, at: SimTime) -> float:
        if not self._times or at < self._times[0] or at > self._times[-1]:
            raise OutOfTraceError(f"t={at} outside trace span for {self.channel}")
        idx = bisect.bisect_left(self._times, at)
        if self._times[idx] == at:
            return self.samples[idx][1]
        t0, v0 = self.samples[idx - 1]
        t1, v1 = self.samples[idx]
        return v0 + (v1 - v0) * (at - t0) / (t1 - t0)


@dataclass
class SensorModel:
    """One sensor's electrical and sampling behaviour."""

    kind: str
    channels: tuple[str, ...]
    warmup_ms: int
    sample_interval_ms: int
    active_ma: float
    sleep_ma: float
    peak_ma: float
    noise_sd: float = 0.0
    peak_ms: int = 200
    state: SensorState = SensorState.OFF
    ready_at: SimTime = 0
    misuse_count: int = field(default=0, repr=False)

    def __post_init__(self):
        if not self.sleep_ma < self.active_ma <= self.peak_ma:
            raise ValueError(
                f"{self.kind}: need sleep_ma < active_ma <= peak_ma, "
                f"got {self.sleep_ma}/{self.active_ma}/{self.peak_ma}"
            )

    def _resolve(self, at: SimTime) -> None:
        if self.state is SensorState.WARMING and at >= self.ready_at:
            self.state = SensorState.IDLE

    def wake(self, at: SimTime) -> SensorState:
        """Start the sensor; it reaches idle after warmup_ms."""
        self._resolve(at)
        if self.state is SensorState.SAMPLING:
            self.misuse_count += 1
            return self.state
        if self.state in (SensorState.IDLE, SensorState.WARMING):
            return self.state
        self.state = SensorState.WARMING
        self.ready_at = at + self.warmup_ms
        self._resolve(at)  # zero-warmup sensors are ready immediately
        return self.state

    def sample(
        self, trace: EnvironmentTrace, at: SimTime, rng: RandomStream | None = None
    ) -> Measurement:
        """Read the trace at `at`, add Gaussian noise, clamp to the channel range."""
        self._resolve(at)
        if self.state is not SensorState.IDLE:
            raise SensorNotReady(f"{self.kind} is {self.state.value} at t={at}")
        if trace.channel not in self.channels:
            raise ValueError(f"{self.kind} does not measure {trace.channel}")
        value = trace.value_at(at)  # may raise before the state flips
        self.state = SensorState.SAMPLING
        if self.noise_sd > 0 and rng is not None:
            value += rng.normal(0.0, self.noise_sd)
        lo, hi = CHANNEL_RANGE[trace.channel]
        value = min(hi, max(lo, value))
        self.state = SensorState.IDLE
        return Measurement(trace.channel, value, at)

    def sleep(self) -> SensorState:
        """Enter sleep mode. Also legal straight from power-up (OFF) or mid
        warmup: the low-battery path commands sleep without measuring first."""
        if self.state is not SensorState.SLEEP:
            self.state = SensorState.SLEEP
        return self.state


# Electrical defaults are datasheet-class values; every field is overridable
# through the scenario file.
SENSOR_DEFAULTS = {
    "sps30": dict(
        channels=(CH_PM25,),
        warmup_ms=8_000,
        sample_interval_ms=1_000,
        active_ma=60.0,
        sleep_ma=0.05,
        peak_ma=60.0,
    ),
    "scd30": dict(
        channels=(CH_CO2,),
        warmup_ms=2_000,
        sample_interval_ms=2_000,
        active_ma=19.0,
        sleep_ma=0.5,
        peak_ma=75.0,
    ),
    "sht31": dict(
        channels=(CH_TEMP, CH_RH),
        warmup_ms=15,
        sample_interval_ms=1_000,
        active_ma=0.8,
        sleep_ma=0.002,
        peak_ma=0.8,
    ),
}


def make_sensor(kind: str, noise_sd: float = 0.0, **overrides) -> SensorModel:
    if kind not in SENSOR_DEFAULTS:
        raise ValueError(f"unknown sensor kind {kind!r}")
    params = dict(SENSOR_DEFAULTS[kind])
    params.update(overrides)
    return SensorModel(kind=kind, noise_sd=noise_sd, **params)
