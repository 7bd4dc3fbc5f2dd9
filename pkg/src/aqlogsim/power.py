"""Battery, solar charger, converter chain, and voltage-divider ADC models."""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .simcore import RandomStream, SimTime, Simulator

MS_PER_HOUR = 3_600_000.0

RAIL_BATTERY = "battery"
RAIL_5V = "rail_5v"
RAIL_3V3 = "rail_3v3"

# Open-circuit voltage vs state of charge. Standard Li-ion shape anchored so
# the 3.7 V nominal point sits at mid charge.
OCV_SOC = np.array([0.0, 0.05, 0.50, 0.90, 1.00])
OCV_V = np.array([2.50, 3.00, 3.70, 4.05, 4.20])


def ocv_voltage(soc: float) -> float:
    return float(np.interp(soc, OCV_SOC, OCV_V))


def soc_at_voltage(voltage_v: float) -> float:
    return float(np.interp(voltage_v, OCV_V, OCV_SOC))


def divider_code(
    voltage_v: float, adc_bits: int = 12, vref_v: float = 3.3, ratio: float = 0.5
) -> int:
    """Quantize the divided battery voltage like a truncating SAR ADC."""
    if not 8 <= adc_bits <= 16:
        raise ValueError(f"adc_bits must be in [8, 16], got {adc_bits}")
    full_scale = (1 << adc_bits) - 1
    code = int(voltage_v * ratio / vref_v * full_scale)
    return max(0, min(full_scale, code))


class BatteryPhase(Enum):
    DISCHARGING = "discharging"
    CC_CHARGING = "cc_charging"
    CV_CHARGING = "cv_charging"
    FULL = "full"
    CUTOFF = "cutoff"


@dataclass
class PowerRail:
    name: str
    efficiency: float
    dropout_v: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"rail efficiency must be in (0, 1], got {self.efficiency}")


@dataclass
class CurrentDraw:
    consumer: str
    rail: str
    current_ma: float
    since: SimTime


@dataclass
class ChargerConfig:
    """CC/CV charger envelope: constant current up to the CV threshold, then an
    exponentially tapering current until it falls below done_ma."""

    cc_limit_ma: float = 300.0
    cv_threshold_v: float = 4.2
    cv_tau_ms: float = 1_800_000.0  # 30 min taper constant
    done_ma: float = 30.0


@dataclass
class BatteryState:
    capacity_mah: float
    charge_mah: float
    terminal_voltage_v: float
    phase: BatteryPhase


class SolarProfile:
    """Sample-and-hold available charge current; zero before the first sample."""

    def __init__(self, samples: list[tuple[int, float]]):
        times = [t for t, _ in samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("solar profile times must be strictly increasing")
        if any(ma < 0 for _, ma in samples):
            raise ValueError("solar profile currents must be non-negative")
        self.samples = list(samples)
        self._times = times

    @classmethod
    def from_csv(cls, path: str | Path) -> "SolarProfile":
        samples = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                row = {k.lower(): v for k, v in row.items()}
                samples.append((int(row["time_ms"]), float(row["current_ma"])))
        return cls(samples)

    def current_at(self, t: float) -> float:
        idx = bisect.bisect_right(self._times, t) - 1
        if idx < 0:
            return 0.0
        return self.samples[idx][1]

    def next_change_after(self, t: float) -> Optional[int]:
        idx = bisect.bisect_right(self._times, t)
        if idx >= len(self._times):
            return None
        return self._times[idx]


class PowerManager:
    """Coulomb-counting battery model fed by consumer draws and a charger.

    Integration is piecewise exact: within any span of constant flows the
    charge trajectory is linear, so threshold crossings (low-voltage cutoff,
    re-arm, full) are solved in closed form rather than stepped on a grid.
    The consumed/charged ledgers therefore satisfy

        charge == initial_charge - consumed_mah + charged_mah

    as a float identity, which is what the conservation checks assert.

    Crossing below the cutoff voltage latches the battery: all draws except
    the divider monitor's quiescent current are forced to zero, one cutoff
    notification is emitted, and the latch holds until the voltage recovers
    above the re-arm threshold.
    """

    def __init__(
        self,
        capacity_mah: float = 3300.0,
        initial_soc: float = 1.0,
        charger: ChargerConfig | None = None,
        solar: SolarProfile | None = None,
        boost_efficiency: float = 0.90,
        ldo_efficiency: float = 3.3 / 5.0,
        cutoff_voltage_v: float | None = 2.6,
        rearm_voltage_v: float = 3.0,
        divider_ratio: float = 0.5,
        quiescent_monitor_ma: float = 0.0,
        internal_resistance_mohm: float = 0.0,
        adc_noise_lsb: int = 0,
        noise_stream: RandomStream | None = None,
        on_cutoff: Callable[[SimTime], None] | None = None,
    ):
        self.capacity_mah = capacity_mah
        self.initial_charge_mah = capacity_mah * initial_soc
        self.charge_mah = self.initial_charge_mah
        self.charger = charger if charger is not None else ChargerConfig()
        self.solar = solar
        self.rails = {
            RAIL_BATTERY: PowerRail(RAIL_BATTERY, 1.0),
            RAIL_5V: PowerRail(RAIL_5V, boost_efficiency),
            RAIL_3V3: PowerRail(RAIL_3V3, boost_efficiency * ldo_efficiency, dropout_v=1.7),
        }
        self.cutoff_voltage_v = cutoff_voltage_v
        self.rearm_voltage_v = rearm_voltage_v
        self.divider_ratio = divider_ratio
        self.quiescent_monitor_ma = quiescent_monitor_ma
        self.internal_resistance_mohm = internal_resistance_mohm
        self.adc_noise_lsb = adc_noise_lsb
        self.noise_stream = noise_stream
        self.on_cutoff = on_cutoff

        self._cutoff_charge = (
            capacity_mah * soc_at_voltage(cutoff_voltage_v)
            if cutoff_voltage_v is not None
            else None
        )
        self._rearm_charge = capacity_mah * soc_at_voltage(rearm_voltage_v)
        self._draws: dict[str, CurrentDraw] = {}
        self._time: SimTime = 0
        self._latched = False
        self._cv_start: float | None = None
        self.consumed_mah = 0.0
        self.charged_mah = 0.0
        self.cutoff_events: list[SimTime] = []
        self.draw_log: list[tuple[float, float, float]] = []
        self._pending_pulse_mas = 0.0
        self._sim: Simulator | None = None
        self._check_handle: int | None = None
        self._check_entity = ""

    # -- proactive crossing checks -------------------------------------------

    def attach_sim(self, sim: Simulator, entity: str) -> None:
        """Let the manager schedule its own integration at projected cutoff
        crossings and solar-profile steps, so notifications fire on time even
        when no consumer touches the battery for a long stretch."""
        self._sim = sim
        self._check_entity = entity
        sim.register(entity, self._on_check_event)
        self._reschedule_check()

    def _on_check_event(self, sim: Simulator, event) -> None:
        self._check_handle = None
        self.integrate(sim.now)
        self._reschedule_check()

    def _reschedule_check(self) -> None:
        if self._sim is None:
            return
        if self._check_handle is not None:
            self._sim.cancel(self._check_handle)
            self._check_handle = None
        t = float(self._time)
        next_solar = self.solar.next_change_after(t) if self.solar is not None else None
        target = None
        if self._cutoff_charge is not None and not self._latched:
            out_ma = self._effective_out_ma()
            avail = self.solar.current_at(t) if self.solar is not None else 0.0
            _, stored_ma, _, _ = self._charger_current(avail, t, self._cv_start, out_ma)
            net = stored_ma - out_ma
            if net < 0 and self.charge_mah > self._cutoff_charge:
                target = t + (self.charge_mah - self._cutoff_charge) / (-net) * MS_PER_HOUR
        if target is not None and (next_solar is None or target <= next_solar):
            fire_at = int(math.ceil(target))
        elif next_solar is not None:
            fire_at = next_solar
        else:
            return
        self._check_handle = self._sim.schedule_at(
            max(fire_at, self._sim.now), self._check_entity, "power_check"
        )

    # -- draws --------------------------------------------------------------

    def set_draw(self, consumer: str, rail: str, current_ma: float, at: SimTime) -> None:
        """Commit consumption up to `at`, then switch `consumer` to the new draw."""
        if rail not in self.rails:
            raise KeyError(f"unknown rail {rail!r}")
        if current_ma < 0:
            raise ValueError("draw current must be non-negative")
        self.integrate(at)
        self._draws[consumer] = CurrentDraw(consumer, rail, current_ma, at)
        self._reschedule_check()

    def clear_draws(self, at: SimTime) -> None:
        self.integrate(at)
        self._draws.clear()
        self._reschedule_check()

    def consume_pulse(self, consumer: str, charge_mas: float, at: SimTime) -> bool:
        """Instantaneous charge withdrawal in mA*s (radio bursts, display refresh).

        Ignored while the cutoff latch holds. Returns True when applied.
        """
        self.integrate(at)
        if self._latched or charge_mas <= 0:
            return False
        mah = min(charge_mas / 3600.0, self.charge_mah)
        self._apply_flows(mah, 0.0)
        self._pending_pulse_mas += mah * 3600.0
        self._reschedule_check()
        return True

    def _effective_out_ma(self) -> float:
        if self.charge_mah <= 0.0:
            return 0.0
        if self._latched:
            return self.quiescent_monitor_ma
        total = self.quiescent_monitor_ma
        for draw in self._draws.values():
            total += draw.current_ma / self.rails[draw.rail].efficiency
        return total

    # -- charger --------------------------------------------------------------

    def _charger_current(
        self, available_ma: float, t: float, cv_start: float | None, out_ma: float
    ) -> tuple[float, float, float | None, BatteryPhase]:
        """Returns (ic_output_ma, stored_ma, new_cv_start, phase hint).

        Below the CV threshold the charger stores min(available, CC limit).
        At the threshold the cell is at capacity, so the IC floats it: active
        draws are supplied directly (stored offsets them, the cell neither
        gains nor loses while input covers the load) and the reported output
        follows an exponential taper until it falls under done_ma.
        """
        cfg = self.charger
        if available_ma <= 0.0:
            return 0.0, 0.0, None, BatteryPhase.DISCHARGING
        if self.terminal_voltage() >= cfg.cv_threshold_v - 1e-12:
            float_ma = min(available_ma, out_ma)
            taper = 0.0
            if cv_start is not None:
                taper = cfg.cc_limit_ma * math.exp(-(t - cv_start) / cfg.cv_tau_ms)
                taper = min(available_ma, taper)
                if taper <= cfg.done_ma:
                    taper = 0.0
            phase = BatteryPhase.CV_CHARGING if taper > 0.0 else BatteryPhase.FULL
            return max(taper, float_ma), float_ma, cv_start, phase
        current = min(available_ma, cfg.cc_limit_ma)
        return current, current, None, BatteryPhase.CC_CHARGING

    def charger_step(self, available_ma: float, at: SimTime | None = None) -> float:
        """Charger output current for the given input, at the current battery state."""
        if at is not None:
            self.integrate(at)
        current, _, _, _ = self._charger_current(
            available_ma, float(self._time), self._cv_start, self._effective_out_ma()
        )
        return current

    # -- integration ------------------------------------------------------------

    def integrate(self, until: SimTime) -> BatteryState:
        if until < self._time:
            raise ValueError(f"integrate({until}) is before last integration ({self._time})")
        t = float(self._time)
        end = float(until)
        while t < end:
            seg_end = end
            if self.solar is not None:
                nxt = self.solar.next_change_after(t)
                if nxt is not None and nxt < seg_end:
                    seg_end = float(nxt)
            t = self._advance(t, seg_end)
        self._time = until
        return self.state()

    def _advance(self, t: float, seg_end: float) -> float:
        """Step through [t, seg_end] with closed-form boundary crossings."""
        guard = 0
        while t < seg_end:
            guard += 1
            if guard > 10_000:
                raise RuntimeError("power integration failed to converge")
            if self._latched and self.charge_mah >= self._rearm_charge:
                self._latched = False
            out_ma = self._effective_out_ma()
            avail = self.solar.current_at(t) if self.solar is not None else 0.0
            _, stored_ma, cv_start, _ = self._charger_current(avail, t, self._cv_start, out_ma)
            self._cv_start = cv_start
            net = stored_ma - out_ma

            step_end = seg_end
            boundary = None
            if net < 0:
                if (
                    self._cutoff_charge is not None
                    and not self._latched
                    and self.charge_mah > self._cutoff_charge
                ):
                    tc = t + (self.charge_mah - self._cutoff_charge) / (-net) * MS_PER_HOUR
                    if tc <= step_end:
                        step_end, boundary = tc, "cutoff"
                tz = t + self.charge_mah / (-net) * MS_PER_HOUR
                if tz <= step_end and boundary != "cutoff":
                    step_end, boundary = tz, "empty"
            elif net > 0:
                if self._latched and self.charge_mah < self._rearm_charge:
                    tr = t + (self._rearm_charge - self.charge_mah) / net * MS_PER_HOUR
                    if tr <= step_end:
                        step_end, boundary = tr, "rearm"
                if self.charge_mah < self.capacity_mah:
                    tf = t + (self.capacity_mah - self.charge_mah) / net * MS_PER_HOUR
                    if tf <= step_end and boundary != "rearm":
                        step_end, boundary = tf, "full"

            dt_ms = step_end - t
            if dt_ms > 0:
                dh = dt_ms / MS_PER_HOUR
                self._apply_flows(out_ma * dh, stored_ma * dh)
                self._commit_log(t, step_end, out_ma)

            if boundary == "cutoff":
                self._snap_charge(self._cutoff_charge, net)
                self._latched = True
                self.cutoff_events.append(int(math.ceil(step_end)))
                if self.on_cutoff is not None:
                    self.on_cutoff(int(math.ceil(step_end)))
            elif boundary == "empty":
                self._snap_charge(0.0, net)
            elif boundary == "rearm":
                self._snap_charge(self._rearm_charge, net)
                self._latched = False
            elif boundary == "full":
                self._snap_charge(self.capacity_mah, net)
                self._cv_start = step_end  # taper begins when capacity is reached
            t = step_end
        return t

    def _apply_flows(self, out_mah: float, in_mah: float) -> None:
        # charge is always derived from the ledgers, so the conservation
        # identity charge == initial - consumed + charged holds bit-exactly
        self.consumed_mah += out_mah
        self.charged_mah += in_mah
        self.charge_mah = self.initial_charge_mah - self.consumed_mah + self.charged_mah

    def _snap_charge(self, target: float, net: float) -> None:
        # pin the charge onto the boundary by folding the float residue of the
        # closed-form crossing into the matching ledger
        for _ in range(4):
            residue = target - self.charge_mah
            if residue == 0.0:
                return
            if net > 0:
                self.charged_mah += residue
            else:
                self.consumed_mah -= residue
            self.charge_mah = self.initial_charge_mah - self.consumed_mah + self.charged_mah

    def _commit_log(self, start: float, end: float, out_ma: float) -> None:
        avg = out_ma
        if self._pending_pulse_mas:
            avg += self._pending_pulse_mas * 1000.0 / (end - start)
            self._pending_pulse_mas = 0.0
        self.draw_log.append((start, end, avg))

    # -- observation ------------------------------------------------------------

    def terminal_voltage(self) -> float:
        v = ocv_voltage(self.charge_mah / self.capacity_mah)
        if self.internal_resistance_mohm:
            v -= self.internal_resistance_mohm / 1000.0 * self._effective_out_ma() / 1000.0
        return v

    def read_divider(
        self, adc_bits: int = 12, vref_v: float = 3.3, at: SimTime | None = None
    ) -> int:
        if at is not None:
            self.integrate(at)
        code = divider_code(self.terminal_voltage(), adc_bits, vref_v, self.divider_ratio)
        if self.adc_noise_lsb and self.noise_stream is not None:
            code += self.noise_stream.randint(-self.adc_noise_lsb, self.adc_noise_lsb)
            code = max(0, min((1 << adc_bits) - 1, code))
        return code

    def state(self) -> BatteryState:
        if self._latched:
            phase = BatteryPhase.CUTOFF
        else:
            avail = self.solar.current_at(float(self._time)) if self.solar is not None else 0.0
            _, _, _, phase = self._charger_current(
                avail, float(self._time), self._cv_start, self._effective_out_ma()
            )
        return BatteryState(self.capacity_mah, self.charge_mah, self.terminal_voltage(), phase)

    @property
    def in_cutoff(self) -> bool:
        return self._latched

    def conservation_error_mah(self) -> float:
        return abs(
            self.charge_mah - (self.initial_charge_mah - self.consumed_mah + self.charged_mah)
        )
