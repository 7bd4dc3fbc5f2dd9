"""LoRaWAN-style uplink path: OTAA/ABP sessions, airtime, ADR, gateway, server.

Cryptography is a deterministic keyed derivation (blake2b), not AES-128: what
matters here is session and frame-counter semantics, not cipher strength.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .simcore import Event, SimTime, Simulator
from . import sensors

REQUIRED_SNR_DB = {7: -7.5, 8: -10.0, 9: -12.5, 10: -15.0, 11: -17.5, 12: -20.0}

# EU868-style maximum application payload per spreading factor
MAX_PAYLOAD_BYTES = {7: 222, 8: 222, 9: 115, 10: 51, 11: 51, 12: 51}

TX_POWER_MIN_DBM = 2
TX_POWER_MAX_DBM = 14

SNR_WINDOW = 20
INSTALLATION_MARGIN_DB = 10.0
ADR_STEP_DB = 3.0

JOIN_BACKOFF_BASE_MS = 10_000
JOIN_BACKOFF_FACTOR = 2
JOIN_BACKOFF_CAP_MS = 600_000
JOIN_REQUEST_BYTES = 23

EV_JOIN_RETRY = "join_retry"


def tx_current_ma(tx_power_dbm: float) -> float:
    """Radio TX supply current, linear between the 2 dBm and 14 dBm anchors."""
    p = min(TX_POWER_MAX_DBM, max(TX_POWER_MIN_DBM, tx_power_dbm))
    return 24.0 + (p - TX_POWER_MIN_DBM) * (44.0 - 24.0) / (TX_POWER_MAX_DBM - TX_POWER_MIN_DBM)


@dataclass
class RadioParams:
    spreading_factor: int = 9
    bandwidth_hz: int = 125_000
    coding_rate: str = "4/5"
    tx_power_dbm: int = 14
    preamble_symbols: int = 8

    def __post_init__(self):
        if not 7 <= self.spreading_factor <= 12:
            raise ValueError(f"spreading factor must be in [7, 12], got {self.spreading_factor}")
        if self.coding_rate not in ("4/5", "4/6", "4/7", "4/8"):
            raise ValueError(f"unsupported coding rate {self.coding_rate!r}")

    @property
    def cr_index(self) -> int:
        return int(self.coding_rate.split("/")[1]) - 4


def airtime_ms(radio: RadioParams, payload_len: int) -> float:
    """On-air duration of an uplink in milliseconds.

    Symbol time is 2^SF / BW; the frame is the preamble (n + 4.25 symbols)
    plus 8 payload symbols plus ceil((8*PL - 4*SF + 28 + 16) / (4*(SF - 2*DE)))
    coded groups of (CR + 4) symbols, with the low-data-rate optimization DE
    active at SF11/SF12 on 125 kHz. Explicit header, uplink CRC present.
    """
    if payload_len < 0:
        raise ValueError("payload length must be non-negative")
    sf = radio.spreading_factor
    bw = radio.bandwidth_hz
    de = 1 if sf >= 11 and bw == 125_000 else 0
    tsym_ms = (2.0**sf) / bw * 1000.0
    t_preamble = (radio.preamble_symbols + 4.25) * tsym_ms
    numerator = 8 * payload_len - 4 * sf + 28 + 16
    n_payload = 8 + max(math.ceil(numerator / (4 * (sf - 2 * de))) * (radio.cr_index + 4), 0)
    return t_preamble + n_payload * tsym_ms


# -- keyed derivation ---------------------------------------------------------


def derive_session_keys(app_key: bytes, join_nonce: int, dev_eui: bytes) -> tuple[bytes, bytes]:
    nonce = join_nonce.to_bytes(4, "little")
    nwk = hashlib.blake2b(b"nwk" + nonce + dev_eui, key=app_key, digest_size=16).digest()
    app = hashlib.blake2b(b"app" + nonce + dev_eui, key=app_key, digest_size=16).digest()
    return nwk, app


def compute_mic(nwk_skey: bytes, dev_addr: int, fcnt: int, payload: bytes) -> bytes:
    data = dev_addr.to_bytes(4, "little") + fcnt.to_bytes(4, "little") + payload
    return hashlib.blake2b(data, key=nwk_skey, digest_size=4).digest()


def validate_fcnt(watermark: int, fcnt: int) -> bool:
    """Replay guard: accept only counters strictly above the last accepted one."""
    return fcnt > watermark


# -- payload codec -------------------------------------------------------------

_CODEC = {
    sensors.CH_PM25: ("<H", 10.0, 0, 0xFFFF),
    sensors.CH_CO2: ("<H", 1.0, 0, 0xFFFF),
    sensors.CH_TEMP: ("<h", 100.0, -0x8000, 0x7FFF),
    sensors.CH_RH: ("<H", 100.0, 0, 0xFFFF),
}


def codec_channels(channels) -> list[str]:
    """Channels in canonical wire order, restricted to the configured set."""
    present = set(channels)
    return [ch for ch in sensors.CHANNELS if ch in present]


def encode_payload(values: dict[str, float], channels) -> bytes:
    out = b""
    for ch in codec_channels(channels):
        fmt, scale, lo, hi = _CODEC[ch]
        raw = int(round(values[ch] * scale))
        out += struct.pack(fmt, min(hi, max(lo, raw)))
    return out


def decode_payload(data: bytes, channels) -> dict[str, float]:
    values = {}
    offset = 0
    for ch in codec_channels(channels):
        fmt, scale, _, _ = _CODEC[ch]
        (raw,) = struct.unpack_from(fmt, data, offset)
        offset += struct.calcsize(fmt)
        values[ch] = raw / scale
    return values


# -- identities and sessions ---------------------------------------------------


@dataclass
class DeviceIdentity:
    dev_eui: bytes
    app_eui: bytes
    app_key: bytes
    mode: str = "otaa"  # otaa | abp
    abp_dev_addr: int | None = None
    abp_fcnt_persisted: int = 0

    def __post_init__(self):
        if len(self.dev_eui) != 8 or len(self.app_eui) != 8 or len(self.app_key) != 16:
            raise ValueError("dev_eui/app_eui must be 8 bytes, app_key 16 bytes")
        if self.mode not in ("otaa", "abp"):
            raise ValueError(f"mode must be otaa or abp, got {self.mode!r}")
        if self.mode == "abp" and self.abp_dev_addr is None:
            raise ValueError("abp mode requires abp_dev_addr")

    @property
    def eui_hex(self) -> str:
        return self.dev_eui.hex()


@dataclass
class Session:
    dev_addr: int
    nwk_skey: bytes
    app_skey: bytes
    fcnt_up: int
    join_nonce: int
    established_at: SimTime


@dataclass
class UplinkFrame:
    dev_addr: int
    fcnt: int
    payload: bytes
    spreading_factor: int
    tx_power_dbm: int
    mic: bytes
    sent_at: SimTime
    snr_db: float | None = None


class AdrState:
    """Ring of the most recent uplink SNRs feeding the rate-adaption decision."""

    def __init__(self, window: int = SNR_WINDOW):
        self.window = window
        self.recent_snrs: deque[float] = deque(maxlen=window)

    def add(self, snr_db: float) -> None:
        self.recent_snrs.append(snr_db)

    @property
    def ready(self) -> bool:
        return len(self.recent_snrs) >= self.window


def adr_step(
    state: AdrState,
    spreading_factor: int,
    tx_power_dbm: int,
    installation_margin_db: float = INSTALLATION_MARGIN_DB,
    required_snr_db: dict[int, float] = REQUIRED_SNR_DB,
) -> Optional[tuple[int, int]]:
    """Network-side data-rate decision over the recent-SNR window.

    margin = max(recent SNR) - required SNR at the current SF - installation
    margin; every 3 dB of margin is one step. Steps lower SF toward 7 first,
    then transmit power in 2 dBm decrements toward the floor. Returns the new
    (SF, power) only when something changes.
    """
    if not state.ready:
        return None
    margin = max(state.recent_snrs) - required_snr_db[spreading_factor] - installation_margin_db
    steps = math.floor(margin / ADR_STEP_DB)
    if steps <= 0:
        return None
    sf, power = spreading_factor, tx_power_dbm
    for _ in range(steps):
        if sf > 7:
            sf -= 1
        elif power > TX_POWER_MIN_DBM:
            power = max(TX_POWER_MIN_DBM, power - 2)
        else:
            break
    if (sf, power) == (spreading_factor, tx_power_dbm):
        return None
    return sf, power


# -- channel / gateway ----------------------------------------------------------


@dataclass
class GatewayLink:
    """Per-device reception behaviour at one gateway.

    Loss is a Bernoulli draw plus an optional deterministic drop schedule:
    any frame whose cadence slot index is listed in drop_slots is lost
    regardless of the random draw.
    """

    device: str
    loss_prob: float = 0.0
    snr_mean_db: float = 0.0
    snr_sd_db: float = 2.0
    drop_slots: frozenset[int] = frozenset()
    drop_cadence_ms: int | None = None


class Gateway:
    def __init__(self, name: str, links: dict[str, GatewayLink]):
        self.name = name
        self.links = links
        self.received_count = 0
        self.dropped_count = 0

    def receive(self, device: str, at: SimTime, sim: Simulator) -> tuple[bool, float]:
        """Apply the loss model for one offered frame; returns (received, snr)."""
        link = self.links.get(device)
        if link is None:
            return False, 0.0
        if link.drop_cadence_ms and (at // link.drop_cadence_ms) in link.drop_slots:
            self.dropped_count += 1
            return False, 0.0
        stream = sim.stream(f"link:{self.name}:{device}")
        lost = stream.bernoulli(link.loss_prob)
        snr = stream.normal(link.snr_mean_db, link.snr_sd_db)
        if lost:
            self.dropped_count += 1
            return False, 0.0
        self.received_count += 1
        return True, snr


# -- network server ---------------------------------------------------------------


@dataclass
class ServerSession:
    dev_eui_hex: str
    mode: str
    nwk_skey: bytes
    app_skey: bytes
    watermark: int = -1  # last accepted fcnt; OTAA resets this at join
    adr: AdrState = field(default_factory=AdrState)


@dataclass
class DeliveredRecord:
    dev_eui_hex: str
    dev_addr: int
    fcnt: int
    timestamp_ms: SimTime
    payload: bytes
    spreading_factor: int
    tx_power_dbm: int
    snr_db: float


class NetworkServer:
    """Join handling, MIC/frame-counter validation, dedup, storage, ADR."""

    def __init__(self, adr_enabled: bool = True):
        self.adr_enabled = adr_enabled
        self.sessions: dict[int, ServerSession] = {}
        self.abp_watermarks: dict[str, int] = {}
        self.records: list[DeliveredRecord] = []
        self.next_dev_addr = 1
        self.next_join_nonce = 1
        self._addr_by_eui: dict[str, int] = {}
        self._dedup_seen: set[tuple[int, int]] = set()
        self.accepted_count = 0
        self.dedup_discards = 0
        self.fcnt_discards = 0
        self.mic_discards = 0

    def join(self, identity: DeviceIdentity, at: SimTime) -> Session:
        """OTAA activation: fresh address, fresh keys, counters back to zero."""
        nonce = self.next_join_nonce
        self.next_join_nonce += 1
        dev_addr = self.next_dev_addr
        self.next_dev_addr += 1
        nwk, app = derive_session_keys(identity.app_key, nonce, identity.dev_eui)
        old_addr = self._addr_by_eui.get(identity.eui_hex)
        if old_addr is not None:
            self.sessions.pop(old_addr, None)
        self._addr_by_eui[identity.eui_hex] = dev_addr
        self.sessions[dev_addr] = ServerSession(identity.eui_hex, "otaa", nwk, app)
        return Session(dev_addr, nwk, app, 0, nonce, at)

    def provision_abp(self, identity: DeviceIdentity, at: SimTime = 0) -> Session:
        """Register an ABP device: fixed address, fixed keys, immortal watermark."""
        nwk, app = derive_session_keys(identity.app_key, 0, identity.dev_eui)
        dev_addr = identity.abp_dev_addr
        self.abp_watermarks.setdefault(identity.eui_hex, -1)
        self._addr_by_eui[identity.eui_hex] = dev_addr
        self.sessions[dev_addr] = ServerSession(identity.eui_hex, "abp", nwk, app)
        return Session(dev_addr, nwk, app, identity.abp_fcnt_persisted, 0, at)

    def _get_watermark(self, sess: ServerSession) -> int:
        if sess.mode == "abp":
            return self.abp_watermarks[sess.dev_eui_hex]
        return sess.watermark

    def _set_watermark(self, sess: ServerSession, fcnt: int) -> None:
        if sess.mode == "abp":
            self.abp_watermarks[sess.dev_eui_hex] = fcnt
        else:
            sess.watermark = fcnt

    def uplink(
        self,
        frame: UplinkFrame,
        receptions: list[tuple[str, float]],
        arrival: SimTime,
    ) -> tuple[str, Optional[tuple[int, int]]]:
        """Process one uplink with its per-gateway copies.

        Returns (outcome, adr_command). Outcomes: lost, unknown_device,
        mic_failed, duplicate, fcnt_discarded, accepted.
        """
        if not receptions:
            return "lost", None
        sess = self.sessions.get(frame.dev_addr)
        if sess is None:
            return "unknown_device", None
        if compute_mic(sess.nwk_skey, frame.dev_addr, frame.fcnt, frame.payload) != frame.mic:
            self.mic_discards += 1
            return "mic_failed", None
        # multi-gateway copies collapse to one record; extra copies are the
        # dedup discards, and the best copy's SNR feeds ADR
        self.dedup_discards += len(receptions) - 1
        if not validate_fcnt(self._get_watermark(sess), frame.fcnt):
            self.fcnt_discards += 1
            return "fcnt_discarded", None
        key = (frame.dev_addr, frame.fcnt)
        if key in self._dedup_seen:
            self.dedup_discards += 1
            return "duplicate", None
        self._dedup_seen.add(key)
        self._set_watermark(sess, frame.fcnt)
        best_snr = max(snr for _, snr in receptions)
        frame.snr_db = best_snr
        self.records.append(
            DeliveredRecord(
                sess.dev_eui_hex,
                frame.dev_addr,
                frame.fcnt,
                arrival,
                frame.payload,
                frame.spreading_factor,
                frame.tx_power_dbm,
                best_snr,
            )
        )
        self.accepted_count += 1
        command = None
        if self.adr_enabled:
            sess.adr.add(best_snr)
            command = adr_step(sess.adr, frame.spreading_factor, frame.tx_power_dbm)
        return "accepted", command

    def records_for(self, dev_eui_hex: str) -> list[DeliveredRecord]:
        return [r for r in self.records if r.dev_eui_hex == dev_eui_hex]


# -- device-side endpoint -----------------------------------------------------------


class LoraEndpoint:
    """Device-side MAC: join management, uplink transmission, radio energy."""

    def __init__(
        self,
        identity: DeviceIdentity,
        radio: RadioParams,
        server: NetworkServer,
        gateways: list[Gateway],
        sim: Simulator,
        device_name: str,
        power=None,
        adr_enabled: bool = True,
    ):
        self.identity = identity
        self.radio = radio
        self.server = server
        self.gateways = gateways
        self.sim = sim
        self.device_name = device_name
        self.power = power
        self.adr_enabled = adr_enabled
        self.session: Session | None = None
        self.join_attempts = 0
        self.tx_count = 0
        self.tx_log: list[tuple[SimTime, float, float, int]] = []  # (at, airtime, charge_mas, sf)
        self._backoff_ms = JOIN_BACKOFF_BASE_MS
        self._retry_handle: int | None = None
        self._entity = f"lora:{device_name}"
        sim.register(self._entity, self._on_event)
        if identity.mode == "abp":
            self.session = server.provision_abp(identity)

    # -- events ------------------------------------------------------------

    def _on_event(self, sim: Simulator, event: Event) -> None:
        if event.kind == EV_JOIN_RETRY:
            self._retry_handle = None
            self.ensure_session(sim.now)

    def cancel_retries(self) -> None:
        if self._retry_handle is not None:
            self.sim.cancel(self._retry_handle)
            self._retry_handle = None

    # -- join --------------------------------------------------------------

    def ensure_session(self, at: SimTime) -> bool:
        """Join if needed. On a lost join request, retries with exponential backoff."""
        if self.session is not None:
            return True
        if self._retry_handle is not None:  # a retry is already queued
            return False
        self.join_attempts += 1
        self._charge_tx(JOIN_REQUEST_BYTES, at)
        heard = any(gw.receive(self.device_name, at, self.sim)[0] for gw in self.gateways)
        if heard:
            self.session = self.server.join(self.identity, at)
            self._backoff_ms = JOIN_BACKOFF_BASE_MS
            return True
        self._retry_handle = self.sim.schedule_at(
            at + self._backoff_ms, self._entity, EV_JOIN_RETRY
        )
        self._backoff_ms = min(self._backoff_ms * JOIN_BACKOFF_FACTOR, JOIN_BACKOFF_CAP_MS)
        return False

    # -- uplink ------------------------------------------------------------

    def send(self, payload: bytes, at: SimTime) -> str:
        """Transmit one frame. The counter advances on transmission, not delivery."""
        if self.session is None:
            return "no_session"
        if len(payload) > MAX_PAYLOAD_BYTES[self.radio.spreading_factor]:
            raise ValueError(
                f"payload of {len(payload)} bytes exceeds "
                f"{MAX_PAYLOAD_BYTES[self.radio.spreading_factor]} at SF{self.radio.spreading_factor}"
            )
        fcnt = self.session.fcnt_up
        self.session.fcnt_up += 1
        self.tx_count += 1
        frame = UplinkFrame(
            dev_addr=self.session.dev_addr,
            fcnt=fcnt,
            payload=payload,
            spreading_factor=self.radio.spreading_factor,
            tx_power_dbm=self.radio.tx_power_dbm,
            mic=compute_mic(self.session.nwk_skey, self.session.dev_addr, fcnt, payload),
            sent_at=at,
        )
        duration = self._charge_tx(len(payload), at)
        receptions = []
        for gw in self.gateways:
            received, snr = gw.receive(self.device_name, at, self.sim)
            if received:
                receptions.append((gw.name, snr))
        arrival = at + round(duration)
        outcome, command = self.server.uplink(frame, receptions, arrival)
        if command is not None and self.adr_enabled:
            # downlink is lossless and instantaneous
            self.radio.spreading_factor, self.radio.tx_power_dbm = command
        return "delivered" if outcome == "accepted" else outcome

    def _charge_tx(self, payload_len: int, at: SimTime) -> float:
        duration = airtime_ms(self.radio, payload_len)
        charge_mas = duration * tx_current_ma(self.radio.tx_power_dbm) / 1000.0
        if self.power is not None:
            self.power.consume_pulse(f"radio:{self.device_name}", charge_mas, at)
        self.tx_log.append((at, duration, charge_mas, self.radio.spreading_factor))
        return duration

    # -- reset -------------------------------------------------------------

    def reset(self, at: SimTime) -> None:
        """Power-on reset of the MAC layer.

        OTAA forgets the session and will renegotiate; ABP keeps its fixed
        address and keys but the volatile frame counter restarts at zero.
        """
        self.cancel_retries()
        self._backoff_ms = JOIN_BACKOFF_BASE_MS
        if self.identity.mode == "otaa":
            self.session = None
        elif self.session is not None:
            self.session.fcnt_up = 0
