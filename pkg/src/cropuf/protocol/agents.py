"""Device agent and trusted third party (TTP) state machines.

Enrollment (TTP <-> one device)::

    device: HELLO{device_id, n, m}
    TTP:    READ_REQUEST{paths, ...}  x k    device: READ_RESPONSE{readings}
    TTP:    BURN_FUSE                         device: BURN_ACK

Provisioning (TTP -> each device of a pair)::

    TTP:    PROVISION{key_id, challenges}    device: KEY_ACK{key_id}

Messaging (device -> device)::

    DATA{key_id, ciphertext}

The key itself never travels: a PROVISION carries only configurations and
loop pairs, which are useless without the device's delays.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import (
    CroPufError,
    FuseBurnedError,
    KeyUnsatisfiableError,
    ParameterError,
    ProtocolError,
    UnderdeterminedError,
)
from ..extraction import PredictedDelayMatrix, ReadingDataset, fit_delay_matrix
from ..keyshare import (
    DEFAULT_MARGIN,
    KeyChallenges,
    ProbeConfig,
    ReadingProbe,
    SharedKey,
    Threshold,
    compute_threshold,
    derive_key,
    generate_challenges,
)
from ..puf import EnvCondition, PufInstance, _jittered_counts, all_paths, parse_paths, path_delays_many
from .messages import (
    BURN_ACK,
    BURN_FUSE,
    DATA,
    ERROR,
    HELLO,
    KEY_ACK,
    PROVISION,
    READ_REQUEST,
    READ_RESPONSE,
    Message,
    decode_message,
    encode_message,
    error,
)
from .otp import xor_decrypt, xor_encrypt
from .transport import Channel, ChannelClosed, SequenceTracker

log = logging.getLogger(__name__)


class DeviceAgent:
    """Firmware side of a device: answers the TTP and exchanges DATA with peers."""

    def __init__(self, device: PufInstance, device_id: str, rng=None, env: EnvCondition | None = None):
        if not device_id:
            raise ParameterError("device_id must be nonempty")
        self.device = device
        self.device_id = device_id
        self.rng = rng if rng is not None else np.random.default_rng(device.params.seed)
        self.env = env or EnvCondition(device.params.temp_ref)
        self.keys: dict[str, SharedKey] = {}
        self.provisions: dict[str, KeyChallenges] = {}
        self.inbox: dict[str, bytes] = {}
        self._spent: set[str] = set()
        self._seq = SequenceTracker()

    # -- session plumbing -------------------------------------------------
    def open_session(self) -> Message:
        self._seq = SequenceTracker()
        return self._seq.stamp(Message(HELLO, {"device_id": self.device_id, "n": self.device.n, "m": self.device.m}))

    def handle_frame(self, frame: bytes) -> bytes | None:
        try:
            msg = decode_message(frame)
            self._seq.accept(msg)
            reply = self.handle(msg)
        except ProtocolError as exc:
            reply = error(exc.code, exc.detail)
        if reply is None:
            return None
        return encode_message(self._seq.stamp(reply))

    def error_frame(self, code: str, detail: str) -> bytes:
        """Encoded ERROR reply stamped in this session's sequence."""
        return encode_message(self._seq.stamp(error(code, detail)))

    # -- message handlers -------------------------------------------------
    def handle(self, msg: Message) -> Message | None:
        handler = {
            READ_REQUEST: self._on_read,
            BURN_FUSE: self._on_burn,
            PROVISION: self._on_provision,
            DATA: self._on_data,
        }.get(msg.type)
        if handler is None:
            return error("unexpected_message", msg.type)
        return handler(msg.payload)

    def _on_read(self, p: dict) -> Message:
        if not self.device.fuse_intact:
            return error("fuse_burned", "counter interface destroyed")
        try:
            rows = parse_paths(p["paths"], self.device.n, self.device.m)
            repeats = int(p.get("repeats", 1))
            if repeats < 1:
                raise ParameterError("repeats must be >= 1")
            env = EnvCondition(float(p["temperature"])) if p.get("temperature") is not None else self.env
            aggregate = p.get("aggregate", "mean")
            if aggregate not in ("mean", "none"):
                raise ParameterError(f"unknown aggregate {aggregate!r}")
            delays = path_delays_many(self.device, rows, env)
            counts = _jittered_counts(self.device, np.repeat(delays[:, None], repeats, axis=1), self.rng)
        except CroPufError as exc:
            return error("bad_request", str(exc))
        readings = []
        for path, row in zip(p["paths"], counts):
            value = float(row.mean()) if aggregate == "mean" else row.tolist()
            readings.append({"path": path, "counts": value, "temperature": env.temperature})
        return Message(READ_RESPONSE, {"readings": readings})

    def _on_burn(self, p: dict) -> Message:
        try:
            self.device.burn_fuse()
        except FuseBurnedError as exc:
            return error("fuse_burned", str(exc))
        return Message(BURN_ACK, {})

    def _on_provision(self, p: dict) -> Message:
        key_id = p["key_id"]
        try:
            kc = KeyChallenges.from_dict(p["challenges"])
            if key_id in self.provisions:
                if self.provisions[key_id] != kc:
                    return error("key_id_conflict", key_id)
                return Message(KEY_ACK, {"key_id": key_id})
            key = derive_key(self.device, kc, self.env, self.rng)
        except (CroPufError, KeyError, TypeError, ValueError) as exc:
            return error("bad_challenge", str(exc))
        self.provisions[key_id] = kc
        self.keys[key_id] = key
        return Message(KEY_ACK, {"key_id": key_id})

    def _on_data(self, p: dict) -> Message | None:
        key_id = p["key_id"]
        if key_id not in self.keys:
            return error("unknown_key", key_id)
        if key_id in self._spent:
            return error("key_reused", key_id)
        try:
            ciphertext = bytes.fromhex(p["ciphertext"])
            self.inbox[key_id] = xor_decrypt(self.keys[key_id], ciphertext)
        except (ValueError, CroPufError) as exc:
            return error("bad_message", str(exc))
        self._spent.add(key_id)
        return None

    # -- local API ----------------------------------------------------------
    def encrypt(self, key_id: str, plaintext: bytes) -> Message:
        """DATA message for ``plaintext``; each key encrypts exactly one message."""
        if key_id not in self.keys:
            raise ProtocolError("unknown_key", key_id)
        if key_id in self._spent:
            raise ProtocolError("key_reused", key_id)
        ciphertext = xor_encrypt(self.keys[key_id], plaintext)
        self._spent.add(key_id)
        return Message(DATA, {"key_id": key_id, "ciphertext": ciphertext.hex()})


@dataclass
class Enrollment:
    device_id: str
    n: int
    m: int
    model: PredictedDelayMatrix
    threshold: Threshold

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "n": self.n,
            "m": self.m,
            "model": self.model.to_dict(),
            "threshold": self.threshold.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Enrollment":
        return cls(d["device_id"], int(d["n"]), int(d["m"]), PredictedDelayMatrix.from_dict(d["model"]),
                   Threshold.from_dict(d["threshold"]))


@dataclass
class KeyRecord:
    key_id: str
    a: str
    b: str
    key: SharedKey


class TrustedThirdParty:
    """Holds every enrolled device's predicted delays and threshold.

    Provisioned keys are kept in ``keys`` for audit, so the TTP can read any
    traffic protected by keys it issued.
    """

    def __init__(
        self,
        rng=None,
        store_dir: str | os.PathLike | None = None,
        probe: ProbeConfig = ProbeConfig(),
        margin_factor: float = DEFAULT_MARGIN,
        fit_repeats: int = 10,
        fit_temperature: float = 25.0,
        read_batch: int = 64,
        max_attempts_per_bit: int = 10_000,
    ):
        self.rng = rng if rng is not None else np.random.default_rng()
        self._entropy = int(self.rng.integers(2**63))
        self._provision_counts: dict[tuple[str, str], int] = {}
        self.store_dir = Path(store_dir) if store_dir is not None else None
        self.probe = probe
        self.margin_factor = margin_factor
        self.fit_repeats = fit_repeats
        self.fit_temperature = fit_temperature
        self.read_batch = read_batch
        self.max_attempts_per_bit = max_attempts_per_bit
        self.enrolled: dict[str, Enrollment] = {}
        self.channels: dict[str, Channel] = {}
        self.keys: dict[str, KeyRecord] = {}
        self._lock = threading.Lock()

    # -- enrollment -----------------------------------------------------------
    def _read(self, channel: Channel, paths: list[str], repeats: int, temperature: float, aggregate: str) -> list:
        out = []
        for start in range(0, len(paths), self.read_batch):
            req = Message(READ_REQUEST, {"paths": paths[start:start + self.read_batch], "repeats": repeats,
                                         "temperature": temperature, "aggregate": aggregate})
            reply = channel.request(req)
            if reply.type == ERROR:
                code = reply.payload["code"]
                if code == "fuse_burned":
                    raise ProtocolError("enrollment_refused", "counter interface already destroyed")
                raise ProtocolError("enrollment_failed", f"{code}: {reply.payload['detail']}")
            if reply.type != READ_RESPONSE:
                raise ProtocolError("enrollment_failed", f"expected READ_RESPONSE, got {reply.type}")
            out.extend(reply.payload["readings"])
        return out

    def enroll(self, channel: Channel) -> str:
        """Extract the device's model over ``channel``, fix its threshold, burn its fuse.

        Nothing is stored unless every step including BURN_ACK succeeds.
        """
        hello = channel.hello
        device_id, n, m = hello.payload["device_id"], hello.payload["n"], hello.payload["m"]
        with self._lock:
            if device_id in self.enrolled:
                raise ProtocolError("enrollment_refused", f"{device_id} already enrolled")
        try:
            rows = all_paths(n, m)
            names = ["-".join(map(str, r)) for r in rows]
            fit = self._read(channel, names, self.fit_repeats, self.fit_temperature, "mean")
            data = ReadingDataset(n, m, rows, [r["counts"] for r in fit], self.fit_temperature)
            table = np.empty((len(rows), len(self.probe.temps), self.probe.repeats))
            for t_i, temp in enumerate(self.probe.temps):
                readings = self._read(channel, names, self.probe.repeats, temp, "none")
                table[:, t_i, :] = [r["counts"] for r in readings]
            try:
                model = fit_delay_matrix(data)
            except UnderdeterminedError as exc:
                raise ProtocolError("enrollment_failed", str(exc)) from exc
            threshold = compute_threshold(model, ReadingProbe(table, n, self.probe), self.margin_factor)
            reply = channel.request(Message(BURN_FUSE, {}))
            if reply.type != BURN_ACK:
                raise ProtocolError("enrollment_failed", f"fuse burn not acknowledged ({reply.type})")
        except (ChannelClosed, OSError, EOFError) as exc:
            raise ProtocolError("session_aborted", f"{device_id}: {exc}") from exc
        entry = Enrollment(device_id, n, m, model, threshold)
        with self._lock:
            if device_id in self.enrolled:
                raise ProtocolError("enrollment_refused", f"{device_id} already enrolled")
            self.enrolled[device_id] = entry
            self.channels[device_id] = channel
        self._persist(entry)
        log.info("enrolled %s (T=%.3f)", device_id, threshold.value)
        return device_id

    def import_enrollment(self, entry: Enrollment, channel: Channel | None = None) -> None:
        """Accept a model fitted elsewhere (e.g. by the manufacturer)."""
        with self._lock:
            self.enrolled[entry.device_id] = entry
            if channel is not None:
                self.channels[entry.device_id] = channel

    def attach(self, channel: Channel) -> str:
        """Register a fresh session to an already enrolled device."""
        device_id = channel.hello.payload["device_id"]
        with self._lock:
            if device_id not in self.enrolled:
                raise ProtocolError("unknown_device", device_id)
            self.channels[device_id] = channel
        return device_id

    # -- provisioning -----------------------------------------------------------
    def provision(self, a: str, b: str, key_bits: int = 128, key: SharedKey | None = None) -> tuple[str, SharedKey]:
        """Pick K, compute each device's challenges for it and send them out."""
        for dev in (a, b):
            if dev not in self.enrolled:
                raise ProtocolError("unknown_device", dev)
            if dev not in self.channels:
                raise ProtocolError("no_session", dev)
        if a == b:
            raise ProtocolError("provisioning_failed", "a key needs two distinct devices")
        rng = self._session_rng(a, b)
        if key is None:
            if key_bits < 1:
                raise ParameterError("key_bits must be >= 1")
            key = SharedKey.random(key_bits, rng)
        key_id = rng.bytes(16).hex()
        bundles = {}
        for dev in (a, b):
            e = self.enrolled[dev]
            try:
                bundles[dev] = generate_challenges(e.model, e.threshold, key, rng, self.max_attempts_per_bit)
            except KeyUnsatisfiableError as exc:
                raise ProtocolError("provisioning_failed", f"{dev}: bit {exc.bit_index}") from exc
        with self._lock:
            self.keys[key_id] = KeyRecord(key_id, a, b, key)
        for dev in (a, b):
            reply = self.channels[dev].request(Message(PROVISION, {"key_id": key_id, "challenges": bundles[dev].to_dict()}))
            if reply.type == ERROR:
                raise ProtocolError(reply.payload["code"], f"{dev}: {reply.payload['detail']}")
            if reply.type != KEY_ACK or reply.payload["key_id"] != key_id:
                raise ProtocolError("provisioning_failed", f"{dev}: bad acknowledgment")
        return key_id, key

    def _session_rng(self, a: str, b: str) -> np.random.Generator:
        """Generator for one provisioning session.

        Seeded by the pair and how often it was provisioned, so sessions for
        disjoint pairs give the same results in any interleaving.
        """
        with self._lock:
            count = self._provision_counts.get((a, b), 0)
            self._provision_counts[(a, b)] = count + 1
        tag = zlib.crc32(f"{a}\0{b}".encode("utf-8"))
        return np.random.default_rng([self._entropy, tag, count])

    # -- persistence --------------------------------------------------------------
    def _persist(self, entry: Enrollment) -> None:
        if self.store_dir is None:
            return
        self.store_dir.mkdir(parents=True, exist_ok=True)
        path = self.store_dir / f"{entry.device_id}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(entry.to_dict(), indent=1))
        tmp.replace(path)

    def load_store(self) -> int:
        if self.store_dir is None or not self.store_dir.is_dir():
            return 0
        count = 0
        for path in sorted(self.store_dir.glob("*.json")):
            self.import_enrollment(Enrollment.from_dict(json.loads(path.read_text())))
            count += 1
        return count
