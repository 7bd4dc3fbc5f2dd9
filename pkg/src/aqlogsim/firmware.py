"""Datalogger firmware state machine: battery gate, sampling loop, storage, uplink, sleep."""

from __future__ import annotations

import math
import statistics
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from . import lorawan, sensors
from .power import PowerManager, RAIL_BATTERY, divider_code
from .simcore import Event, SimTime, Simulator


class Phase(Enum):
    BOOT = "boot"
    BATTERY_CHECK = "battery_check"
    INIT = "init"
    SAMPLING = "sampling"
    STORING = "storing"
    UPLINKING = "uplinking"
    SLEEPING = "sleeping"
    LOW_BATTERY_HOLD = "low_battery_hold"


# The only transitions a healthy or low-battery device may take. A brownout
# reset starts a new episode at BOOT instead of transitioning.
LEGAL_TRANSITIONS = frozenset(
    {
        (Phase.BOOT, Phase.BATTERY_CHECK),
        (Phase.BATTERY_CHECK, Phase.INIT),
        (Phase.BATTERY_CHECK, Phase.LOW_BATTERY_HOLD),
        (Phase.INIT, Phase.SAMPLING),
        (Phase.SAMPLING, Phase.STORING),
        (Phase.STORING, Phase.UPLINKING),
        (Phase.UPLINKING, Phase.SLEEPING),
        (Phase.SLEEPING, Phase.BATTERY_CHECK),
        (Phase.LOW_BATTERY_HOLD, Phase.BATTERY_CHECK),
    }
)

EV_WAKE = "wake"
EV_SAMPLE = "sample"
EV_PEAK_END = "peak_end"
EV_STORE = "store"
EV_UPLINK = "uplink"
EV_SLEEP = "sleep"
EV_POLL = "poll"
EV_RESET = "reset"

TRANSPORTS = ("wifi_https", "lorawan", "offline")

RETRY_QUEUE_DEPTH = 16


@dataclass
class DeviceProfile:
    """Per-device firmware parameters.

    active_ma and sleep_ma are the whole-board supply envelopes as a power
    profiler would measure them at the battery; the simulated MCU baseline is
    the envelope minus the attached sensors' nominal draws, so modeled sensor
    transients ride inside the measured envelope.
    """

    name: str
    transport: str = "offline"
    sensors: tuple[str, ...] = ("scd30", "sht31")
    sample_count: int = 3
    sample_gap_ms: int = 2_000
    sleep_ms: int = 240_000
    cadence_ms: Optional[int] = None  # fixed wake-to-wake period; overrides sleep_ms
    active_window_ms: int = 25_000
    active_ma: float = 60.0
    sleep_ma: float = 7.0
    adc_bits: int = 12
    adc_vref_v: float = 3.3
    cutoff_code: Optional[int] = None  # defaults to the 2.6 V equivalent
    wifi_latency_ms: int = 1_500
    wifi_success_prob: float = 1.0
    wifi_energy_mas: float = 0.0
    display_energy_mas: float = 0.0
    rtc_drift_ppm: float = 0.0
    hold_poll_ms: int = 60_000
    sensor_noise_sd: float = 0.0
    label: Optional[str] = None

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.sample_gap_ms < 0:
            raise ValueError("sample_gap_ms must be >= 0")

    @property
    def cycle_ms(self) -> int:
        if self.cadence_ms is not None:
            return self.cadence_ms
        return self.active_window_ms + self.sleep_ms


@dataclass
class LogRecord:
    seq: int
    timestamp_ms: SimTime
    values: dict[str, float]
    battery_code: int


class Storage:
    """Append-only record log, mirrored to a CSV file when a path is given."""

    HEADER = "seq,timestamp_ms,channel,value,battery_code"

    def __init__(self, channels: list[str], path: str | Path | None = None):
        self.channels = channels
        self.rows: list[tuple] = []
        self.records: list[LogRecord] = []
        self.degraded = False
        self.drop_count = 0
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="\n")
            self._fh.write(self.HEADER + "\n")
            self._fh.flush()

    def write(self, record: LogRecord) -> bool:
        if self.degraded:
            self.drop_count += 1
            return False
        self.records.append(record)
        for ch in self.channels:
            row = (record.seq, record.timestamp_ms, ch, record.values[ch], record.battery_code)
            self.rows.append(row)
            if self._fh is not None:
                self._fh.write(
                    f"{record.seq},{record.timestamp_ms},{ch},"
                    f"{record.values[ch]:.2f},{record.battery_code}\n"
                )
                self._fh.flush()
        return True

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Datalogger:
    """One device: a state machine advanced purely by simulator events."""

    def __init__(
        self,
        sim: Simulator,
        profile: DeviceProfile,
        power: PowerManager,
        traces: dict[str, sensors.EnvironmentTrace],
        endpoint: lorawan.LoraEndpoint | None = None,
        storage_path: str | Path | None = None,
        fail_storage: bool = False,
        display_hook: Callable[[LogRecord], None] | None = None,
        reset_at_ms: tuple[int, ...] = (),
    ):
        self.sim = sim
        self.profile = profile
        self.power = power
        self.traces = traces
        self.endpoint = endpoint
        self.display_hook = display_hook
        if profile.transport == "lorawan" and endpoint is None:
            raise ValueError(f"{profile.name}: lorawan transport requires an endpoint")

        self.sensors: dict[str, sensors.SensorModel] = {}
        self.channel_map: dict[str, sensors.SensorModel] = {}
        for kind in profile.sensors:
            sensor = sensors.make_sensor(kind, noise_sd=profile.sensor_noise_sd)
            self.sensors[kind] = sensor
            for ch in sensor.channels:
                self.channel_map[ch] = sensor
        self.channels = list(self.channel_map)
        missing = [ch for ch in self.channels if ch not in traces]
        if missing:
            raise ValueError(f"{profile.name}: no trace bound for channels {missing}")

        self.cutoff_code = (
            profile.cutoff_code
            if profile.cutoff_code is not None
            else divider_code(2.6, profile.adc_bits, profile.adc_vref_v, power.divider_ratio)
        )
        self.storage = Storage(self.channels, storage_path)
        if fail_storage:
            self.storage.degraded = True

        self.phase = Phase.BOOT
        self.episode = 0
        self.transitions: list[tuple[int, Phase, Phase, SimTime]] = []
        self.seq = 0  # persists across resets, like a file on the SD card
        self.retry_queue: deque[LogRecord] = deque()
        self.retry_dropped = 0
        self.wake_count = 0
        self.sample_times: list[SimTime] = []
        self.radio_times: list[SimTime] = []
        self.uplink_attempts = 0
        self.delivered_count = 0
        self.gap_records = 0
        self.wifi_delivered: list[tuple[LogRecord, SimTime]] = []

        self._cycle_start: SimTime = 0
        self._sample_index = 0
        self._sample_values: dict[str, list[float]] = {}
        self._sample_retry_used = False
        self._current_record: LogRecord | None = None

        sim.register(profile.name, self._on_event)
        # scheduled resets live on their own target so a reset (which cancels
        # the device's pending cycle events) cannot swallow a later one
        sim.register(f"{profile.name}:resets", self._on_event)
        power.on_cutoff = self._on_cutoff
        for t in reset_at_ms:
            sim.schedule_at(t, f"{profile.name}:resets", EV_RESET)

    # -- bookkeeping ---------------------------------------------------------

    def _transition(self, to: Phase, at: SimTime) -> None:
        self.transitions.append((self.episode, self.phase, to, at))
        self.phase = to

    def illegal_transitions(self) -> list[tuple[int, Phase, Phase, SimTime]]:
        return [t for t in self.transitions if (t[1], t[2]) not in LEGAL_TRANSITIONS]

    def _rtc(self, at: SimTime) -> SimTime:
        if self.profile.rtc_drift_ppm:
            return round(at * (1.0 + self.profile.rtc_drift_ppm * 1e-6))
        return at

    def _consumer(self, suffix: str) -> str:
        return f"{self.profile.name}:{suffix}"

    # -- draw management -------------------------------------------------------

    def _apply_active_draws(self, at: SimTime) -> None:
        sensor_total = 0.0
        for kind, sensor in self.sensors.items():
            self.power.set_draw(self._consumer(kind), RAIL_BATTERY, sensor.active_ma, at)
            sensor_total += sensor.active_ma
        mcu = max(0.0, self.profile.active_ma - sensor_total)
        self.power.set_draw(self._consumer("mcu"), RAIL_BATTERY, mcu, at)

    def _apply_sleep_draws(self, at: SimTime) -> None:
        sensor_total = 0.0
        for kind, sensor in self.sensors.items():
            sensor.sleep()
            self.power.set_draw(self._consumer(kind), RAIL_BATTERY, sensor.sleep_ma, at)
            sensor_total += sensor.sleep_ma
        mcu = max(0.0, self.profile.sleep_ma - sensor_total)
        self.power.set_draw(self._consumer("mcu"), RAIL_BATTERY, mcu, at)

    # -- lifecycle ---------------------------------------------------------------

    def start(self, at: SimTime = 0) -> None:
        self.sim.schedule_at(at, self.profile.name, EV_WAKE)

    def _on_cutoff(self, at: SimTime) -> None:
        if self.phase is Phase.LOW_BATTERY_HOLD:
            return
        # supply collapse is a hardware reset, not a firmware transition
        self.sim.schedule_at(max(self.sim.now, at), self.profile.name, EV_RESET)

    def _on_event(self, sim: Simulator, event: Event) -> None:
        at = sim.now
        if event.kind == EV_WAKE:
            self._handle_wake(at)
        elif event.kind == EV_SAMPLE:
            self._handle_sample(at)
        elif event.kind == EV_PEAK_END:
            kind = event.payload.decode()
            sensor = self.sensors[kind]
            self.power.set_draw(self._consumer(kind), RAIL_BATTERY, sensor.active_ma, at)
        elif event.kind == EV_STORE:
            self._handle_store(at)
        elif event.kind == EV_UPLINK:
            self._handle_uplink(at)
        elif event.kind == EV_SLEEP:
            self._handle_sleep(at)
        elif event.kind == EV_POLL:
            self._transition(Phase.BATTERY_CHECK, at)
            self._battery_check(at)
        elif event.kind == EV_RESET:
            self._handle_reset(at)

    # -- handlers -------------------------------------------------------------------

    def _handle_wake(self, at: SimTime) -> None:
        self.wake_count += 1
        self._transition(Phase.BATTERY_CHECK, at)
        self._battery_check(at)

    def boot_cycle(self, at: SimTime = 0) -> Phase:
        """Run the power-up battery gate immediately; returns the resulting phase."""
        self._handle_wake(at)
        return self.phase

    def _battery_check(self, at: SimTime) -> None:
        code = self.power.read_divider(self.profile.adc_bits, self.profile.adc_vref_v, at=at)
        if code > self.cutoff_code and not self.power.in_cutoff:
            self._enter_init(at)
        else:
            self._enter_hold(at)

    def _enter_init(self, at: SimTime) -> None:
        self._transition(Phase.INIT, at)
        self._cycle_start = at
        warmup = 0
        for sensor in self.sensors.values():
            sensor.wake(at)
            warmup = max(warmup, sensor.warmup_ms)
        self._apply_active_draws(at)
        if self.endpoint is not None:
            self.endpoint.ensure_session(at)
        self._sample_index = 0
        self._sample_values = {ch: [] for ch in self.channels}
        self._sample_retry_used = False
        self.sim.schedule_at(at + warmup, self.profile.name, EV_SAMPLE)
        self.sim.schedule_at(at + self.profile.active_window_ms, self.profile.name, EV_SLEEP)

    def _enter_hold(self, at: SimTime) -> None:
        self._transition(Phase.LOW_BATTERY_HOLD, at)
        self._apply_sleep_draws(at)
        if self.endpoint is not None:
            self.endpoint.cancel_retries()
        self.sim.schedule_at(at + self.profile.hold_poll_ms, self.profile.name, EV_POLL)

    def _handle_sample(self, at: SimTime) -> None:
        if self.phase is Phase.INIT:
            self._transition(Phase.SAMPLING, at)
        not_ready_until = 0
        peaked: set[str] = set()
        for ch in self.channels:
            if len(self._sample_values[ch]) > self._sample_index:
                continue  # already captured this round (a retry fills the stragglers)
            sensor = self.channel_map[ch]
            try:
                rng = None
                if sensor.noise_sd > 0:
                    rng = self.sim.stream(f"noise:{self.profile.name}:{sensor.kind}")
                m = sensor.sample(self.traces[ch], at, rng)
            except sensors.SensorNotReady:
                not_ready_until = max(not_ready_until, sensor.ready_at)
                continue
            except sensors.OutOfTraceError:
                continue
            self._sample_values[ch].append(m.value)
            self.sample_times.append(at)
            if sensor.peak_ma > sensor.active_ma and sensor.kind not in peaked:
                peaked.add(sensor.kind)
                self.power.set_draw(self._consumer(sensor.kind), RAIL_BATTERY, sensor.peak_ma, at)
                self.sim.schedule_at(
                    at + sensor.peak_ms, self.profile.name, EV_PEAK_END, sensor.kind.encode()
                )
        if not_ready_until > at and not self._sample_retry_used:
            # one retry once the slowest sensor has finished warming up
            self._sample_retry_used = True
            self.sim.schedule_at(not_ready_until, self.profile.name, EV_SAMPLE)
            return
        self._sample_index += 1
        if self._sample_index < self.profile.sample_count:
            self.sim.schedule_at(at + self.profile.sample_gap_ms, self.profile.name, EV_SAMPLE)
        else:
            self.sim.schedule_at(at, self.profile.name, EV_STORE)

    def _handle_store(self, at: SimTime) -> None:
        self._transition(Phase.STORING, at)
        values = {}
        for ch in self.channels:
            collected = self._sample_values.get(ch, [])
            if collected:
                values[ch] = float(statistics.median(collected))
            else:
                values[ch] = float("nan")
                self.gap_records += 1
        code = self.power.read_divider(self.profile.adc_bits, self.profile.adc_vref_v, at=at)
        self.seq += 1
        record = LogRecord(self.seq, self._rtc(at), values, code)
        self._current_record = record
        self.storage.write(record)
        if self.display_hook is not None:
            self.display_hook(record)
        if self.profile.display_energy_mas:
            self.power.consume_pulse(self._consumer("display"), self.profile.display_energy_mas, at)
        self.sim.schedule_at(at, self.profile.name, EV_UPLINK)

    def _handle_uplink(self, at: SimTime) -> None:
        self._transition(Phase.UPLINKING, at)
        batch = list(self.retry_queue)
        self.retry_queue.clear()
        if self._current_record is not None:
            batch.append(self._current_record)
            self._current_record = None
        for record in batch:
            if any(math.isnan(v) for v in record.values.values()):
                continue  # gap records stay on local storage only
            self.uplink_attempts += 1
            if self._send(record, at):
                self.delivered_count += 1
            else:
                if len(self.retry_queue) >= RETRY_QUEUE_DEPTH:
                    self.retry_queue.popleft()
                    self.retry_dropped += 1
                self.retry_queue.append(record)

    def _send(self, record: LogRecord, at: SimTime) -> bool:
        transport = self.profile.transport
        if transport == "offline":
            return True
        if transport == "wifi_https":
            self.radio_times.append(at)
            if self.profile.wifi_energy_mas:
                self.power.consume_pulse(self._consumer("wifi"), self.profile.wifi_energy_mas, at)
            ok = self.sim.stream(f"wifi:{self.profile.name}").bernoulli(
                self.profile.wifi_success_prob
            )
            if ok:
                self.wifi_delivered.append((record, at + self.profile.wifi_latency_ms))
            return ok
        # lorawan
        self.radio_times.append(at)
        payload = lorawan.encode_payload(record.values, self.channels)
        return self.endpoint.send(payload, at) == "delivered"

    def _handle_sleep(self, at: SimTime) -> None:
        self._transition(Phase.SLEEPING, at)
        self._apply_sleep_draws(at)
        if self.profile.cadence_ms is not None:
            next_wake = self._cycle_start + self.profile.cadence_ms
        else:
            next_wake = at + self.profile.sleep_ms
        self.sim.schedule_at(max(next_wake, at), self.profile.name, EV_WAKE)

    def _handle_reset(self, at: SimTime) -> None:
        """Brownout or scheduled reset: RAM is lost, a new episode starts at BOOT."""
        self.sim.cancel_target(self.profile.name)
        if self.endpoint is not None:
            self.endpoint.reset(at)
        for kind, sensor in self.sensors.items():
            sensor.state = sensors.SensorState.OFF
            self.power.set_draw(self._consumer(kind), RAIL_BATTERY, 0.0, at)
        self.power.set_draw(self._consumer("mcu"), RAIL_BATTERY, 0.0, at)
        self.retry_queue.clear()
        self._current_record = None
        self.episode += 1
        self.phase = Phase.BOOT
        self._handle_wake(at)
