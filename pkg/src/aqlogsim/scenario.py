"""Scenario configs (TOML), validation diagnostics, and the end-to-end runner."""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import analysis, lorawan, sensors
from .firmware import Datalogger, DeviceProfile, TRANSPORTS
from .lorawan import DeviceIdentity, Gateway, GatewayLink, LoraEndpoint, NetworkServer, RadioParams
from .power import ChargerConfig, PowerManager, SolarProfile
from .simcore import Simulator

SCHEMA_VERSION = 1

PACKAGE_VERSION = "0.1.0"

# optional [devices.battery] knobs and where they land
CHARGER_KEYS = ("cc_limit_ma", "cv_threshold_v", "cv_tau_ms", "done_ma")
POWER_KEYS = (
    "boost_efficiency",
    "ldo_efficiency",
    "cutoff_voltage_v",
    "rearm_voltage_v",
    "divider_ratio",
    "quiescent_monitor_ma",
    "internal_resistance_mohm",
    "adc_noise_lsb",
)


class ConfigError(Exception):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


def _hex_bytes(value: str, nbytes: int) -> bytes:
    raw = bytes.fromhex(value)
    if len(raw) != nbytes:
        raise ValueError(f"expected {nbytes} bytes, got {len(raw)}")
    return raw


@dataclass
class ScenarioConfig:
    data: dict
    base_dir: Path
    raw_bytes: bytes

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    @property
    def duration_ms(self) -> int:
        return int(self.data.get("duration_ms", 0))

    @property
    def output_dir(self) -> str | None:
        return self.data.get("output_dir")

    @property
    def config_sha256(self) -> str:
        return hashlib.sha256(self.raw_bytes).hexdigest()

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel).resolve()


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Parse and validate a scenario file; raises ConfigError on any problem."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    config = ScenarioConfig(data, path.parent, raw)
    diagnostics = validate_config(config)
    if diagnostics:
        raise ConfigError(diagnostics)
    return config


def validate_config(config: ScenarioConfig) -> list[str]:
    """All schema and cross-reference checks, without running anything."""
    d = config.data
    diags: list[str] = []

    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        diags.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    if not isinstance(d.get("seed", 0), int):
        diags.append("seed: must be an integer")
    if not isinstance(d.get("duration_ms", 0), int) or d.get("duration_ms", 0) < 0:
        diags.append("duration_ms: must be a non-negative integer")

    names = set()
    euis = set()
    devices = d.get("devices", [])
    for i, dev in enumerate(devices):
        where = f"devices[{i}]"
        name = dev.get("name")
        if not name:
            diags.append(f"{where}.name: required")
            continue
        if name in names:
            diags.append(f"{where}.name: duplicate device name {name!r}")
        names.add(name)

        transport = dev.get("transport", "offline")
        if transport not in TRANSPORTS:
            diags.append(f"{where}.transport: {transport!r} not one of {TRANSPORTS}")

        kinds = dev.get("sensors", [])
        if not kinds:
            diags.append(f"{where}.sensors: at least one sensor required")
        channels = []
        for kind in kinds:
            if kind not in sensors.SENSOR_DEFAULTS:
                diags.append(f"{where}.sensors: unknown sensor kind {kind!r}")
            else:
                channels.extend(sensors.SENSOR_DEFAULTS[kind]["channels"])

        if dev.get("sample_count", 3) < 1:
            diags.append(f"{where}.sample_count: must be >= 1")
        if dev.get("sample_gap_ms", 2000) < 0:
            diags.append(f"{where}.sample_gap_ms: must be >= 0")
        window = dev.get("active_window_ms", 25_000)
        if window <= 0:
            diags.append(f"{where}.active_window_ms: must be positive")
        warmup = max(
            (sensors.SENSOR_DEFAULTS[k]["warmup_ms"] for k in kinds if k in sensors.SENSOR_DEFAULTS),
            default=0,
        )
        span = warmup + (dev.get("sample_count", 3) - 1) * dev.get("sample_gap_ms", 2000)
        if span >= window:
            diags.append(
                f"{where}.active_window_ms: sampling span {span} ms does not fit in {window} ms"
            )
        if dev.get("cadence_ms") is not None and dev["cadence_ms"] <= window:
            diags.append(f"{where}.cadence_ms: must exceed active_window_ms")

        if dev.get("battery_capacity_mah", 3300.0) <= 0:
            diags.append(f"{where}.battery_capacity_mah: must be positive")
        soc = dev.get("battery_initial_soc", 1.0)
        if not 0.0 <= soc <= 1.0:
            diags.append(f"{where}.battery_initial_soc: must be in [0, 1]")

        sf = dev.get("spreading_factor", 9)
        if not 7 <= sf <= 12:
            diags.append(f"{where}.spreading_factor: {sf} outside the valid range 7-12")
        txp = dev.get("tx_power_dbm", 14)
        if not lorawan.TX_POWER_MIN_DBM <= txp <= lorawan.TX_POWER_MAX_DBM:
            diags.append(
                f"{where}.tx_power_dbm: {txp} outside "
                f"{lorawan.TX_POWER_MIN_DBM}-{lorawan.TX_POWER_MAX_DBM}"
            )
        prob = dev.get("wifi_success_prob", 1.0)
        if not 0.0 <= prob <= 1.0:
            diags.append(f"{where}.wifi_success_prob: must be in [0, 1]")

        if transport == "lorawan":
            mode = dev.get("mode", "otaa")
            if mode not in ("otaa", "abp"):
                diags.append(f"{where}.mode: must be otaa or abp")
            for key, nbytes in (("dev_eui", 8), ("app_eui", 8), ("app_key", 16)):
                value = dev.get(key)
                if value is None:
                    diags.append(f"{where}.{key}: required for lorawan transport")
                    continue
                try:
                    _hex_bytes(value, nbytes)
                except ValueError as exc:
                    diags.append(f"{where}.{key}: {exc}")
            eui = dev.get("dev_eui")
            if eui is not None:
                if eui in euis:
                    diags.append(f"{where}.dev_eui: duplicate {eui!r}")
                euis.add(eui)
            if mode == "abp" and dev.get("abp_dev_addr") is None:
                diags.append(f"{where}.abp_dev_addr: required for abp mode")

        traces = dev.get("traces", {})
        for ch in channels:
            if ch not in traces:
                diags.append(f"{where}.traces.{ch}: no trace bound for this sensor channel")
        for ch, rel in traces.items():
            if ch not in sensors.CHANNELS:
                diags.append(f"{where}.traces: unknown channel {ch!r}")
            elif not config.resolve(rel).is_file():
                diags.append(f"{where}.traces.{ch}: file not found: {rel}")

        solar = dev.get("solar")
        if solar is not None and not config.resolve(solar).is_file():
            diags.append(f"{where}.solar: file not found: {solar}")

        batt = dev.get("battery", {})
        for key in batt:
            if key not in CHARGER_KEYS + POWER_KEYS:
                diags.append(f"{where}.battery.{key}: unknown setting")
        for key in ("boost_efficiency", "ldo_efficiency", "divider_ratio"):
            if key in batt and not 0.0 < batt[key] <= 1.0:
                diags.append(f"{where}.battery.{key}: must be in (0, 1]")
        if "cutoff_voltage_v" in batt and "rearm_voltage_v" in batt:
            if batt["rearm_voltage_v"] <= batt["cutoff_voltage_v"]:
                diags.append(f"{where}.battery.rearm_voltage_v: must exceed cutoff_voltage_v")

    for j, gw in enumerate(d.get("gateways", [])):
        where = f"gateways[{j}]"
        if not gw.get("name"):
            diags.append(f"{where}.name: required")
        for k, link in enumerate(gw.get("links", [])):
            lwhere = f"{where}.links[{k}]"
            if link.get("device") not in names:
                diags.append(f"{lwhere}.device: unknown device {link.get('device')!r}")
            p = link.get("loss_prob", 0.0)
            if not 0.0 <= p <= 1.0:
                diags.append(f"{lwhere}.loss_prob: must be in [0, 1]")
            drops = link.get("drop_slots_file")
            if drops is not None:
                if not config.resolve(drops).is_file():
                    diags.append(f"{lwhere}.drop_slots_file: file not found: {drops}")
                if not link.get("drop_cadence_ms"):
                    diags.append(f"{lwhere}.drop_cadence_ms: required with drop_slots_file")
    return diags


def _load_drop_slots(path: Path) -> frozenset[int]:
    slots = set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            slots.add(int(row["slot"]))
    return frozenset(slots)


class ScenarioRunner:
    """Builds the simulation from a config and produces the run artifacts."""

    def __init__(
        self,
        config: ScenarioConfig,
        out_dir: str | Path | None = None,
        seed: int | None = None,
        duration_ms: int | None = None,
    ):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.duration_ms = config.duration_ms if duration_ms is None else duration_ms
        out = out_dir if out_dir is not None else (config.output_dir or "run_output")
        self.out_dir = Path(out)
        self.sim = Simulator(self.seed)
        self.server = NetworkServer()
        self.devices: list[Datalogger] = []
        self.reports: list[analysis.DeploymentReport] = []
        self._trace_cache: dict[tuple[str, Path], sensors.EnvironmentTrace] = {}
        self._solar_cache: dict[Path, SolarProfile] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _trace(self, channel: str, path: Path) -> sensors.EnvironmentTrace:
        key = (channel, path)
        if key not in self._trace_cache:
            self._trace_cache[key] = sensors.EnvironmentTrace.from_csv(channel, path)
        return self._trace_cache[key]

    def _solar(self, path: Path) -> SolarProfile:
        if path not in self._solar_cache:
            self._solar_cache[path] = SolarProfile.from_csv(path)
        return self._solar_cache[path]

    def _build(self) -> None:
        cfg = self.config
        gateways_by_device: dict[str, list[Gateway]] = {}
        for gw_cfg in cfg.data.get("gateways", []):
            links = {}
            for link in gw_cfg.get("links", []):
                drop_slots = frozenset()
                drops_file = link.get("drop_slots_file")
                if drops_file:
                    drop_slots = _load_drop_slots(cfg.resolve(drops_file))
                links[link["device"]] = GatewayLink(
                    device=link["device"],
                    loss_prob=link.get("loss_prob", 0.0),
                    snr_mean_db=link.get("snr_mean_db", 0.0),
                    snr_sd_db=link.get("snr_sd_db", 2.0),
                    drop_slots=drop_slots,
                    drop_cadence_ms=link.get("drop_cadence_ms"),
                )
            gateway = Gateway(gw_cfg["name"], links)
            for device_name in links:
                gateways_by_device.setdefault(device_name, []).append(gateway)

        self.out_dir.mkdir(parents=True, exist_ok=True)

        profile_keys = (
            "transport sample_count sample_gap_ms sleep_ms cadence_ms active_window_ms "
            "active_ma sleep_ma adc_bits adc_vref_v cutoff_code wifi_latency_ms "
            "wifi_success_prob wifi_energy_mas display_energy_mas rtc_drift_ppm "
            "hold_poll_ms sensor_noise_sd label"
        ).split()
        for dev_cfg in cfg.data.get("devices", []):
            name = dev_cfg["name"]
            kwargs = {k: dev_cfg[k] for k in profile_keys if k in dev_cfg}
            profile = DeviceProfile(name=name, sensors=tuple(dev_cfg["sensors"]), **kwargs)

            solar = None
            if dev_cfg.get("solar"):
                solar = self._solar(cfg.resolve(dev_cfg["solar"]))
            batt = dev_cfg.get("battery", {})
            charger = ChargerConfig(
                **{k: batt[k] for k in CHARGER_KEYS if k in batt}
            )
            power = PowerManager(
                capacity_mah=dev_cfg.get("battery_capacity_mah", 3300.0),
                initial_soc=dev_cfg.get("battery_initial_soc", 1.0),
                charger=charger,
                solar=solar,
                **{k: batt[k] for k in POWER_KEYS if k in batt},
            )
            if power.adc_noise_lsb:
                power.noise_stream = self.sim.stream(f"adc:{name}")
            power.attach_sim(self.sim, f"power:{name}")

            traces = {}
            for ch, rel in dev_cfg.get("traces", {}).items():
                traces[ch] = self._trace(ch, cfg.resolve(rel))

            endpoint = None
            if profile.transport == "lorawan":
                identity = DeviceIdentity(
                    dev_eui=_hex_bytes(dev_cfg["dev_eui"], 8),
                    app_eui=_hex_bytes(dev_cfg["app_eui"], 8),
                    app_key=_hex_bytes(dev_cfg["app_key"], 16),
                    mode=dev_cfg.get("mode", "otaa"),
                    abp_dev_addr=dev_cfg.get("abp_dev_addr"),
                    abp_fcnt_persisted=dev_cfg.get("abp_fcnt_persisted", 0),
                )
                radio = RadioParams(
                    spreading_factor=dev_cfg.get("spreading_factor", 9),
                    tx_power_dbm=dev_cfg.get("tx_power_dbm", 14),
                )
                endpoint = LoraEndpoint(
                    identity,
                    radio,
                    self.server,
                    gateways_by_device.get(name, []),
                    self.sim,
                    name,
                    power=power,
                    adr_enabled=dev_cfg.get("adr", True),
                )

            device = Datalogger(
                self.sim,
                profile,
                power,
                traces,
                endpoint=endpoint,
                storage_path=self.out_dir / f"{name}_log.csv",
                fail_storage=dev_cfg.get("fail_storage", False),
                reset_at_ms=tuple(dev_cfg.get("reset_at_ms", [])),
            )
            self.devices.append(device)

    # -- execution -----------------------------------------------------------

    def run(self) -> list[analysis.DeploymentReport]:
        for device in self.devices:
            device.start(0)
        self.sim.run_until(self.duration_ms)
        for device in self.devices:
            device.power.integrate(self.duration_ms)
            device.storage.close()
        self.sim.drain()
        reports = (self._device_report(d) for d in self.devices)
        self.reports = [r for r in reports if r is not None]
        self._write_artifacts()
        return self.reports

    def _device_report(self, device: Datalogger) -> analysis.DeploymentReport | None:
        profile = device.profile
        if self.duration_ms <= 0 or profile.cycle_ms > self.duration_ms:
            return None
        received_times, channel_values = self._delivered_data(device)
        return analysis.build_report(
            profile.label or profile.name,
            profile.cycle_ms,
            (0, self.duration_ms),
            received_times,
            channel_values,
            device.power.draw_log,
            device.power.capacity_mah,
        )

    def _delivered_data(self, device: Datalogger):
        channel_values: dict[str, list[float]] = {ch: [] for ch in device.channels}
        times = []
        if device.profile.transport == "lorawan":
            eui = device.endpoint.identity.eui_hex
            for rec in self.server.records_for(eui):
                times.append(rec.timestamp_ms)
                for ch, v in lorawan.decode_payload(rec.payload, device.channels).items():
                    channel_values[ch].append(v)
        elif device.profile.transport == "wifi_https":
            for record, at in device.wifi_delivered:
                times.append(at)
                for ch, v in record.values.items():
                    channel_values[ch].append(v)
        else:
            for record in device.storage.records:
                times.append(record.timestamp_ms)
                for ch, v in record.values.items():
                    channel_values[ch].append(v)
        return times, channel_values

    # -- artifacts -------------------------------------------------------------

    def _write_artifacts(self) -> None:
        out = self.out_dir
        reports = self.reports

        with open(out / "delivered.csv", "w", newline="\n") as fh:
            fh.write("dev_eui,dev_addr,fcnt,timestamp_ms,payload_hex,sf,tx_power_dbm,snr_db\n")
            for rec in self.server.records:
                fh.write(
                    f"{rec.dev_eui_hex},{rec.dev_addr:08x},{rec.fcnt},{rec.timestamp_ms},"
                    f"{rec.payload.hex()},{rec.spreading_factor},{rec.tx_power_dbm},"
                    f"{rec.snr_db:.2f}\n"
                )

        for device in self.devices:
            with open(out / f"{device.profile.name}_power.csv", "w", newline="\n") as fh:
                fh.write("start_ms,end_ms,avg_ma\n")
                for start, end, ma in device.power.draw_log:
                    fh.write(f"{start!r},{end!r},{ma!r}\n")
            if device.profile.transport == "wifi_https":
                with open(out / f"{device.profile.name}_wifi_delivered.csv", "w", newline="\n") as fh:
                    fh.write("timestamp_ms,channel,value\n")
                    for record, at in device.wifi_delivered:
                        for ch in device.channels:
                            fh.write(f"{at},{ch},{record.values[ch]:.2f}\n")

        report_payload = {
            "schema_version": SCHEMA_VERSION,
            "devices": [analysis.report_to_dict(r) for r in reports],
        }
        (out / "report.json").write_text(
            json.dumps(report_payload, indent=2, sort_keys=True) + "\n"
        )
        (out / "report.txt").write_text(analysis.render_table(reports))

        manifest = {
            "schema_version": SCHEMA_VERSION,
            "package_version": PACKAGE_VERSION,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "config_sha256": self.config.config_sha256,
            "devices": [
                {
                    "name": d.profile.name,
                    "label": d.profile.label or d.profile.name,
                    "transport": d.profile.transport,
                    "dev_eui": d.endpoint.identity.eui_hex if d.endpoint else "",
                    "channels": d.channels,
                    "cadence_ms": d.profile.cycle_ms,
                    "capacity_mah": d.power.capacity_mah,
                }
                for d in self.devices
            ],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def rederive_reports(run_dir: str | Path) -> tuple[dict, list[analysis.DeploymentReport]]:
    """Rebuild report content from the artifacts of a previous run."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    duration = manifest["duration_ms"]

    delivered_by_eui: dict[str, list[dict]] = {}
    delivered_path = run_dir / "delivered.csv"
    if delivered_path.is_file():
        with open(delivered_path, newline="") as fh:
            for row in csv.DictReader(fh):
                delivered_by_eui.setdefault(row["dev_eui"], []).append(row)

    reports = []
    for dev in manifest["devices"]:
        cadence = dev["cadence_ms"]
        if duration <= 0 or cadence > duration:
            continue
        channels = dev["channels"]
        times: list[int] = []
        channel_values: dict[str, list[float]] = {ch: [] for ch in channels}
        if dev["transport"] == "lorawan":
            for row in delivered_by_eui.get(dev["dev_eui"], []):
                times.append(int(row["timestamp_ms"]))
                payload = bytes.fromhex(row["payload_hex"])
                for ch, v in lorawan.decode_payload(payload, channels).items():
                    channel_values[ch].append(v)
        elif dev["transport"] == "wifi_https":
            path = run_dir / f"{dev['name']}_wifi_delivered.csv"
            if path.is_file():
                with open(path, newline="") as fh:
                    for row in csv.DictReader(fh):
                        if row["channel"] == channels[0]:
                            times.append(int(row["timestamp_ms"]))
                        channel_values[row["channel"]].append(float(row["value"]))
        else:
            with open(run_dir / f"{dev['name']}_log.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    if row["channel"] == channels[0]:
                        times.append(int(row["timestamp_ms"]))
                    channel_values[row["channel"]].append(float(row["value"]))

        draw_log = []
        power_path = run_dir / f"{dev['name']}_power.csv"
        if power_path.is_file():
            with open(power_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    draw_log.append(
                        (float(row["start_ms"]), float(row["end_ms"]), float(row["avg_ma"]))
                    )

        reports.append(
            analysis.build_report(
                dev["label"],
                cadence,
                (0, duration),
                times,
                channel_values,
                draw_log,
                dev["capacity_mah"],
            )
        )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "devices": [analysis.report_to_dict(r) for r in reports],
    }
    return payload, reports
