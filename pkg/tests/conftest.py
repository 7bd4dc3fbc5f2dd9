"""Shared builders for device-level test scenarios."""

from pathlib import Path

import pytest

from aqlogsim.firmware import Datalogger, DeviceProfile
from aqlogsim.power import PowerManager, SolarProfile
from aqlogsim.sensors import CH_CO2, CH_PM25, CH_RH, CH_TEMP, EnvironmentTrace
from aqlogsim.simcore import Simulator

REPO_ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = REPO_ROOT / "scenarios"

INDOOR_CYCLE_MS = 265_000  # 25 s active + 240 s sleep


def constant_trace(channel: str, value: float, duration_ms: int) -> EnvironmentTrace:
    return EnvironmentTrace(channel, [(0, value), (duration_ms, value)])


def build_indoor(duration_ms: int, seed: int = 11, transport: str = "offline", **profile_kwargs):
    """ESP32-class CO2 logger: 3 samples 2 s apart, 25 s at 60 mA, 4 min at 7 mA."""
    sim = Simulator(seed)
    power = PowerManager()
    power.attach_sim(sim, "power:indoor")
    traces = {
        CH_CO2: constant_trace(CH_CO2, 500.0, duration_ms),
        CH_TEMP: constant_trace(CH_TEMP, 25.0, duration_ms),
        CH_RH: constant_trace(CH_RH, 40.0, duration_ms),
    }
    profile = DeviceProfile(
        name="indoor",
        transport=transport,
        sensors=("scd30", "sht31"),
        sleep_ms=240_000,
        active_window_ms=25_000,
        active_ma=60.0,
        sleep_ma=7.0,
        **profile_kwargs,
    )
    device = Datalogger(sim, profile, power, traces)
    return sim, power, device


def build_outdoor(
    duration_ms: int,
    seed: int = 12,
    pm_value: float = 80.0,
    solar: SolarProfile | None = None,
    **profile_kwargs,
):
    """STM32WL-class PM2.5 logger on a 15 minute wake-to-wake cadence."""
    sim = Simulator(seed)
    power = PowerManager(solar=solar)
    power.attach_sim(sim, "power:outdoor")
    traces = {CH_PM25: constant_trace(CH_PM25, pm_value, duration_ms)}
    profile = DeviceProfile(
        name="outdoor",
        transport="offline",
        sensors=("sps30",),
        cadence_ms=900_000,
        active_window_ms=30_000,
        active_ma=70.0,
        sleep_ma=0.5,
        **profile_kwargs,
    )
    device = Datalogger(sim, profile, power, traces)
    return sim, power, device


@pytest.fixture
def tmp_trace_csv(tmp_path):
    def write(name: str, rows: list[tuple[int, float]]) -> Path:
        path = tmp_path / name
        lines = ["time_ms,value"] + [f"{t},{v}" for t, v in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    return write
