"""Boot gate, sampling cadence, storage, uplink retries, sleep cycles, resets."""

import math

import pytest

from aqlogsim.analysis import energy_report
from aqlogsim.firmware import (
    LEGAL_TRANSITIONS,
    Datalogger,
    DeviceProfile,
    LogRecord,
    Phase,
    Storage,
)
from aqlogsim.lorawan import DeviceIdentity, Gateway, GatewayLink, LoraEndpoint, NetworkServer, RadioParams
from aqlogsim.power import PowerManager
from aqlogsim.sensors import CH_CO2, CH_PM25, EnvironmentTrace
from aqlogsim.simcore import DAY_MS, Simulator

from conftest import INDOOR_CYCLE_MS, build_indoor, build_outdoor, constant_trace


class TestBootGate:
    def boot_at_soc(self, soc):
        sim = Simulator(seed=2)
        power = PowerManager(initial_soc=soc)
        traces = {CH_CO2: constant_trace(CH_CO2, 500.0, 10_000_000)}
        profile = DeviceProfile(name="d", sensors=("scd30",))
        device = Datalogger(sim, profile, power, traces)
        return device.boot_cycle(0)

    def test_healthy_battery_proceeds_to_init(self):
        # 50% charge sits at 3.70 V on the curve
        assert self.boot_at_soc(0.5) in (Phase.INIT, Phase.SAMPLING)

    def test_deep_discharge_holds(self):
        assert self.boot_at_soc(0.005) is Phase.LOW_BATTERY_HOLD  # ~2.55 V

    def test_exactly_cutoff_voltage_holds(self):
        # 2.6 V quantizes to the cutoff code itself; strictly-above is required
        assert self.boot_at_soc(0.01) is Phase.LOW_BATTERY_HOLD

    def test_sensors_slept_in_hold(self):
        sim = Simulator(seed=2)
        power = PowerManager(initial_soc=0.005)
        traces = {CH_CO2: constant_trace(CH_CO2, 500.0, 10_000_000)}
        device = Datalogger(sim, DeviceProfile(name="d", sensors=("scd30",)), power, traces)
        device.boot_cycle(0)
        from aqlogsim.sensors import SensorState

        assert device.sensors["scd30"].state is SensorState.SLEEP


class TestAcquire:
    def test_constant_trace_aggregates_to_value(self):
        sim, power, device = build_indoor(INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(30_000)
        assert device.storage.records[0].values[CH_CO2] == 500.0

    def test_three_samples_span_four_seconds(self):
        sim, power, device = build_indoor(INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(30_000)
        co2_times = device.sample_times[0::3]  # three channels sampled per instant
        assert co2_times[2] - co2_times[0] == 4000

    def test_median_rejects_transient_spike(self):
        # samples land at 8000/10000/12000 ms; the middle one rides a spike
        sim = Simulator(seed=4)
        power = PowerManager()
        trace = EnvironmentTrace(
            CH_PM25,
            [(0, 10.0), (9_999, 10.0), (10_000, 1000.0), (10_001, 12.0), (900_000, 12.0)],
        )
        profile = DeviceProfile(
            name="o", sensors=("sps30",), cadence_ms=900_000, active_window_ms=30_000,
            active_ma=70.0, sleep_ma=0.5,
        )
        device = Datalogger(sim, profile, power, {CH_PM25: trace})
        device.start(0)
        sim.run_until(30_000)
        values = device._sample_values[CH_PM25]
        assert len(values) == 3
        assert device.storage.records[0].values[CH_PM25] == sorted(values)[1]
        assert device.storage.records[0].values[CH_PM25] == 12.0


class TestStore:
    def test_first_record_has_seq_one(self):
        sim, power, device = build_indoor(INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(30_000)
        assert device.storage.records[0].seq == 1

    def test_csv_has_header_plus_row_per_channel(self, tmp_path):
        path = tmp_path / "log.csv"
        storage = Storage([CH_CO2], path)
        storage.write(LogRecord(1, 1000, {CH_CO2: 500.0}, 2295))
        storage.write(LogRecord(2, 2000, {CH_CO2: 501.0}, 2295))
        storage.close()
        lines = path.read_text().splitlines()
        assert lines[0] == "seq,timestamp_ms,channel,value,battery_code"
        assert len(lines) == 3
        assert lines[1] == "1,1000,co2_ppm,500.00,2295"

    def test_degraded_storage_drops_and_counts(self):
        storage = Storage([CH_CO2])
        storage.degraded = True
        ok = storage.write(LogRecord(1, 0, {CH_CO2: 1.0}, 0))
        assert not ok
        assert storage.drop_count == 1
        assert storage.rows == []

    def test_device_with_failed_storage_keeps_uplinking(self):
        sim, power, device = build_indoor(3 * INDOOR_CYCLE_MS, transport="offline")
        device.storage.degraded = True
        device.start(0)
        sim.run_until(3 * INDOOR_CYCLE_MS)
        assert device.storage.drop_count == 3
        assert device.delivered_count == 3  # offline transport still acks


class TestUplink:
    def test_offline_is_immediate_success(self):
        sim, power, device = build_indoor(INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(30_000)
        assert device.delivered_count == 1
        assert device.radio_times == []

    def test_wifi_success_delivers_with_latency(self):
        sim, power, device = build_indoor(INDOOR_CYCLE_MS, transport="wifi_https")
        device.start(0)
        sim.run_until(30_000)
        assert len(device.wifi_delivered) == 1
        record, at = device.wifi_delivered[0]
        assert at - device.storage.records[0].timestamp_ms == device.profile.wifi_latency_ms

    def test_wifi_total_failure_queues_for_retry(self):
        sim, power, device = build_indoor(
            2 * INDOOR_CYCLE_MS, transport="wifi_https", wifi_success_prob=0.0
        )
        device.start(0)
        sim.run_until(30_000)
        assert len(device.retry_queue) == 1
        sim.run_until(INDOOR_CYCLE_MS + 30_000)
        assert len(device.retry_queue) == 2  # retry failed again plus the new record

    def test_lorawan_total_loss_retries_next_cycle(self):
        sim = Simulator(seed=9)
        server = NetworkServer()
        gw = Gateway("gw", {"d": GatewayLink("d", loss_prob=1.0)})
        power = PowerManager()
        ident = DeviceIdentity(bytes.fromhex("00000000000000aa"), bytes(8), bytes(16))
        ep = LoraEndpoint(ident, RadioParams(), server, [gw], sim, "d", power=power)
        ep.session = server.join(ident, 0)  # skip the (lossy) join path
        trace = constant_trace(CH_PM25, 50.0, 4_000_000)
        profile = DeviceProfile(
            name="d", transport="lorawan", sensors=("sps30",), cadence_ms=900_000,
            active_window_ms=30_000, active_ma=70.0, sleep_ma=0.5,
        )
        device = Datalogger(sim, profile, power, {CH_PM25: trace}, endpoint=ep)
        device.start(0)
        sim.run_until(30_000)
        assert len(device.retry_queue) == 1
        assert device.delivered_count == 0

    def test_retry_queue_bounded_at_16_drop_oldest(self):
        sim, power, device = build_indoor(
            30 * INDOOR_CYCLE_MS, transport="wifi_https", wifi_success_prob=0.0
        )
        device.start(0)
        sim.run_until(30 * INDOOR_CYCLE_MS)
        assert len(device.retry_queue) == 16
        assert device.retry_dropped > 0
        oldest = device.retry_queue[0]
        assert oldest.seq == 30 - 16 + 1  # drop-oldest keeps the newest sixteen


class TestSleepCycle:
    def test_indoor_draw_profile_25s_active_240s_sleep(self):
        sim, power, device = build_indoor(INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(INDOOR_CYCLE_MS - 1)
        power.integrate(INDOOR_CYCLE_MS - 1)
        log = power.draw_log
        total = lambda a, b: sum(ma * (e - s) for s, e, ma in log if s >= a and e <= b)
        active_mams = total(0, 25_000)
        sleep_mams = total(25_000, 265_000)
        # envelope: 60 mA for 25 s (plus sampling peaks), 7 mA for 240 s
        assert active_mams == pytest.approx(60.0 * 25_000, rel=0.03)
        assert sleep_mams == pytest.approx(7.0 * 239_999, rel=1e-9)

    def test_outdoor_15_days_wakes_1440_times(self):
        sim, power, device = build_outdoor(15 * DAY_MS)
        device.start(0)
        sim.run_until(15 * DAY_MS - 1)
        assert device.wake_count == 1440

    def test_hold_polls_once_a_minute(self):
        sim = Simulator(seed=2)
        power = PowerManager(initial_soc=0.005)
        traces = {CH_CO2: constant_trace(CH_CO2, 500.0, 10_000_000)}
        device = Datalogger(sim, DeviceProfile(name="d", sensors=("scd30",)), power, traces)
        device.start(0)
        sim.run_until(600_000)
        checks = [at for ep, f, t, at in device.transitions if t is Phase.BATTERY_CHECK]
        assert checks == [0] + [60_000 * i for i in range(1, 11)]
        assert device.sample_times == []
        assert device.radio_times == []


class TestDutyCycleEnergy:
    def test_average_battery_current_is_12ma_within_2pct(self):
        cycles = 20
        sim, power, device = build_indoor(cycles * INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(cycles * INDOOR_CYCLE_MS - 1)
        power.integrate(cycles * INDOOR_CYCLE_MS - 1)
        avg, life = energy_report(power.draw_log, power.capacity_mah)
        assert avg == pytest.approx(12.0, rel=0.02)
        assert life == pytest.approx(275.0, rel=0.02)


class TestPhaseLegality:
    def test_all_transitions_in_legal_set(self):
        sim, power, device = build_indoor(5 * INDOOR_CYCLE_MS)
        device.start(0)
        sim.run_until(5 * INDOOR_CYCLE_MS)
        assert device.transitions  # the checker has material to work with
        assert device.illegal_transitions() == []
        for _, frm, to, _ in device.transitions:
            assert (frm, to) in LEGAL_TRANSITIONS

    def test_reset_starts_a_new_episode_at_boot(self):
        sim, power, device = build_indoor(3 * INDOOR_CYCLE_MS)
        device2_resets = (400_000,)
        sim2, power2, device2 = build_indoor(3 * INDOOR_CYCLE_MS)
        sim2.schedule_at(400_000, device2.profile.name, "reset")
        device2.start(0)
        sim2.run_until(3 * INDOOR_CYCLE_MS)
        assert device2.episode == 1
        assert device2.illegal_transitions() == []
        episodes = {ep for ep, _, _, _ in device2.transitions}
        assert episodes == {0, 1}


class TestStorageCompleteness:
    def test_lossless_run_stores_equals_uplinks_equals_wakes(self):
        cycles = 6
        sim, power, device = build_indoor(
            cycles * INDOOR_CYCLE_MS, transport="wifi_https", wifi_success_prob=1.0
        )
        device.start(0)
        sim.run_until(cycles * INDOOR_CYCLE_MS - 1)
        assert len(device.storage.records) == cycles
        assert device.delivered_count == cycles
        assert device.wake_count == cycles


class TestLowBatterySafety:
    def test_no_sampling_or_radio_during_hold_and_monotone_seq_after(self):
        from aqlogsim.power import SolarProfile

        sim = Simulator(seed=8)
        solar = SolarProfile([(7_200_000, 300.0)])
        power = PowerManager(capacity_mah=100.0, initial_soc=0.02, solar=solar)
        power.attach_sim(sim, "power:d")
        duration = 10_800_000
        traces = {CH_CO2: constant_trace(CH_CO2, 600.0, duration)}
        profile = DeviceProfile(name="d", transport="wifi_https", sensors=("scd30",))
        device = Datalogger(sim, profile, power, traces)
        device.start(0)
        sim.run_until(duration)
        power.integrate(duration)

        assert power.cutoff_events, "battery must actually cross the cutoff"
        t_cut = power.cutoff_events[0]
        recovery = min(at for ep, f, t, at in device.transitions
                       if at > t_cut and t is Phase.INIT)
        assert [t for t in device.sample_times if t_cut <= t < recovery] == []
        assert [t for t in device.radio_times if t_cut <= t < recovery] == []
        seqs = [r.seq for r in device.storage.records]
        assert seqs == sorted(seqs)
        assert len(set(seqs)) == len(seqs)
        assert any(r.timestamp_ms > recovery for r in device.storage.records)


def test_cutoff_code_default_matches_26v():
    sim, power, device = build_indoor(INDOOR_CYCLE_MS)
    assert device.cutoff_code == 1613


def test_rtc_drift_knob_defaults_to_exact_timestamps():
    sim, power, device = build_indoor(INDOOR_CYCLE_MS)
    device.start(0)
    sim.run_until(30_000)
    rec = device.storage.records[0]
    assert rec.timestamp_ms == 2000 + 2 * 2000  # warmup 2 s, samples at +0/2/4 s

    sim2, power2, device2 = build_indoor(INDOOR_CYCLE_MS, rtc_drift_ppm=1000.0)
    device2.start(0)
    sim2.run_until(30_000)
    assert device2.storage.records[0].timestamp_ms == round(6000 * 1.001)


def test_display_hook_and_energy_knob():
    sim, power, device = build_indoor(INDOOR_CYCLE_MS, display_energy_mas=36.0)
    shown = []
    device.display_hook = shown.append
    device.start(0)
    sim.run_until(30_000)
    assert len(shown) == 1 and shown[0].seq == 1
    # 36 mA*s = 0.01 mAh pulse charged at store time
    pulse = power.consumed_mah - sum(ma * (e - s) / 3_600_000 for s, e, ma in power.draw_log)
    assert pulse == pytest.approx(0.0, abs=1e-9)  # pulses are folded into the log
    sim2, power2, device2 = build_indoor(INDOOR_CYCLE_MS)
    device2.start(0)
    sim2.run_until(30_000)
    power.integrate(30_000)
    power2.integrate(30_000)
    assert power.consumed_mah - power2.consumed_mah == pytest.approx(0.01, abs=1e-12)


def test_wifi_energy_knob_charges_per_attempt():
    sim, power, device = build_indoor(
        2 * INDOOR_CYCLE_MS, transport="wifi_https", wifi_energy_mas=72.0
    )
    device.start(0)
    sim.run_until(2 * INDOOR_CYCLE_MS - 1)
    power.integrate(2 * INDOOR_CYCLE_MS - 1)
    sim2, power2, device2 = build_indoor(2 * INDOOR_CYCLE_MS, transport="offline")
    device2.start(0)
    sim2.run_until(2 * INDOOR_CYCLE_MS - 1)
    power2.integrate(2 * INDOOR_CYCLE_MS - 1)
    assert power.consumed_mah - power2.consumed_mah == pytest.approx(2 * 0.02, abs=1e-12)


def test_otaa_liveness_across_repeated_resets():
    # any finite burst of resets still converges back to delivering frames
    sim = Simulator(seed=21)
    server = NetworkServer()
    gw = Gateway("gw", {"d": GatewayLink("d", loss_prob=0.0, snr_mean_db=5.0)})
    power = PowerManager()
    power.attach_sim(sim, "power:d")
    ident = DeviceIdentity(bytes.fromhex("00000000000000cc"), bytes(8), bytes(16))
    ep = LoraEndpoint(ident, RadioParams(), server, [gw], sim, "d", power=power)
    duration = 40 * 900_000
    trace = constant_trace(CH_PM25, 30.0, duration)
    profile = DeviceProfile(
        name="d", transport="lorawan", sensors=("sps30",), cadence_ms=900_000,
        active_window_ms=30_000, active_ma=70.0, sleep_ma=0.5,
    )
    resets = (5 * 900_000 + 100_000, 12 * 900_000 + 100_000, 20 * 900_000 + 100_000)
    device = Datalogger(sim, profile, power, {CH_PM25: trace}, endpoint=ep, reset_at_ms=resets)
    device.start(0)
    sim.run_until(duration - 1)
    assert device.episode == 3  # every scheduled reset actually fired
    last_reset = resets[-1]
    delivered_after = [
        r for r in server.records_for(ident.eui_hex) if r.timestamp_ms > last_reset
    ]
    assert len(delivered_after) >= 15
    assert ep.session is not None
    assert ep.join_attempts == 4  # initial join plus one per reset, no retries needed


def test_trace_gap_produces_gap_record_not_crash():
    sim = Simulator(seed=15)
    power = PowerManager()
    # trace ends before the sampling instants of the first cycle
    trace = EnvironmentTrace(CH_PM25, [(0, 10.0), (1000, 10.0)])
    profile = DeviceProfile(
        name="g", sensors=("sps30",), cadence_ms=900_000, active_window_ms=30_000,
        active_ma=70.0, sleep_ma=0.5,
    )
    device = Datalogger(sim, profile, power, {CH_PM25: trace})
    device.start(0)
    sim.run_until(30_000)
    assert device.gap_records == 1
    assert math.isnan(device.storage.records[0].values[CH_PM25])


def test_sample_retry_fills_only_missing_channels():
    # force a partial round: sht31 ready instantly, scd30 still warming
    sim = Simulator(seed=18)
    power = PowerManager()
    duration = 265_000
    from aqlogsim.sensors import CH_RH, CH_TEMP
    from conftest import constant_trace as ct

    traces = {
        CH_CO2: ct(CH_CO2, 480.0, duration),
        CH_TEMP: ct(CH_TEMP, 21.0, duration),
        CH_RH: ct(CH_RH, 55.0, duration),
    }
    profile = DeviceProfile(name="r", sensors=("scd30", "sht31"))
    device = Datalogger(sim, profile, power, traces)
    device.start(0)
    sim.run_until(100)
    # move the first sampling round earlier than the scd30 warmup
    for handle, ev in list(sim._pending.items()):
        if ev.target == "r" and ev.kind == "sample":
            sim.cancel(handle)
    sim.schedule_at(500, "r", "sample")
    sim.run_until(30_000)
    rec = device.storage.records[0]
    assert device.gap_records == 0
    assert rec.values[CH_CO2] == 480.0
    assert rec.values[CH_TEMP] == 21.0
    # the retry only fills the channels the early round missed
    assert all(len(v) == 3 for v in device._sample_values.values())


def test_gap_record_is_not_uplinked():
    # a trace gap must not crash the codec or enter the retry queue
    sim = Simulator(seed=23)
    server = NetworkServer()
    gw = Gateway("gw", {"gx": GatewayLink("gx", loss_prob=0.0, snr_mean_db=5.0)})
    power = PowerManager()
    ident = DeviceIdentity(bytes.fromhex("00000000000000dd"), bytes(8), bytes(16))
    ep = LoraEndpoint(ident, RadioParams(), server, [gw], sim, "gx", power=power)
    trace = EnvironmentTrace(CH_PM25, [(0, 10.0), (1000, 10.0)])  # ends before sampling
    profile = DeviceProfile(
        name="gx", transport="lorawan", sensors=("sps30",), cadence_ms=900_000,
        active_window_ms=30_000, active_ma=70.0, sleep_ma=0.5,
    )
    device = Datalogger(sim, profile, power, {CH_PM25: trace}, endpoint=ep)
    device.start(0)
    sim.run_until(30_000)
    assert device.gap_records == 1
    assert len(device.storage.records) == 1
    assert device.uplink_attempts == 0
    assert len(device.retry_queue) == 0
