"""Command-line entry point: ``cropuf <command> [options]``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Every option can also come from a JSON file given with ``--config``; keys are
option names with dashes replaced by underscores, and flags on the command
line override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .errors import CroPufError, ParameterError, ProtocolError
from .extraction import (
    PredictedDelayMatrix,
    ReadingDataset,
    accuracy_crps,
    fit_delay_matrix,
    harvest,
    model_accuracy,
)
from .keyshare import (
    DEFAULT_MARGIN,
    DEFAULT_PROBE_REPEATS,
    DEFAULT_PROBE_TEMPS,
    DeviceProbe,
    KeyChallenges,
    ProbeConfig,
    ReadingProbe,
    SharedKey,
    Threshold,
    compute_threshold,
    cos,
    derive_key,
    generate_challenges,
)
from .protocol import DeviceAgent, DeviceServer, LoopbackChannel, SocketChannel, Transcript, TrustedThirdParty
from .protocol.messages import PROVISION, Message
from .protocol.otp import bits_to_bytes, bytes_to_bits
from .puf import EnvCondition, PufInstance, PufParams, crp_count, sample_puf

log = logging.getLogger("cropuf")

_PARAM_FLAGS = {
    # flag dest -> (PufParams field, type, help)
    "n": ("n", int, "oscillator rows"),
    "m": ("m", int, "inverter stages (odd, >= 5)"),
    "nominal_delay": ("nominal_delay", float, "mean inverter delay"),
    "sigma_process": ("sigma_process", float, "process variation std of a delay"),
    "temp_ref": ("temp_ref", float, "reference temperature in deg C"),
    "temp_coeff_mean": ("temp_coeff_mean", float, "mean relative delay change per deg C"),
    "temp_coeff_sigma": ("temp_coeff_sigma", float, "std of the per-inverter temperature coefficient"),
    "jitter": ("jitter_sigma_rel", float, "relative counter noise std"),
    "counter_window": ("counter_window", float, "counter gate time"),
    "crossing_delay": ("crossing_delay", float, "fixed routing delay per crossing"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument helpers ------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        try:
            n, m = part.lower().split("x")
            out.append((int(n), int(m)))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"size must look like 4x5, got {part!r}") from exc
    return out


def _bits(text: str) -> str:
    if not text or set(text) - {"0", "1"}:
        raise argparse.ArgumentTypeError("expected a string of 0/1 digits")
    return text


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="JSON file with option defaults (flags override it)")
    g.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    g.add_argument("--seed", type=int, default=0, help="master seed (default: %(default)s)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _params_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("device parameters")
    defaults = PufParams()
    for dest, (fld, typ, text) in _PARAM_FLAGS.items():
        g.add_argument(f"--{dest.replace('_', '-')}", dest=dest, type=typ, default=getattr(defaults, fld),
                       help=f"{text} (default: %(default)s)")
    g.add_argument("--integer-counts", action="store_true", help="floor counter readings to integers")


def _probe_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("threshold probe")
    g.add_argument("--probe-temps", type=_floats, default=DEFAULT_PROBE_TEMPS,
                   help="comma-separated probe temperatures (default: %(default)s)")
    g.add_argument("--probe-repeats", type=int, default=DEFAULT_PROBE_REPEATS,
                   help="readings per temperature (default: %(default)s)")
    g.add_argument("--margin-factor", type=float, default=DEFAULT_MARGIN,
                   help="threshold = trigger difference x this (default: %(default)s)")


def _params_from(args) -> PufParams:
    kw = {fld: getattr(args, dest) for dest, (fld, _, _) in _PARAM_FLAGS.items()}
    return PufParams(seed=args.seed, integer_counts=args.integer_counts, **kw)


def _probe_from(args) -> ProbeConfig:
    if not args.probe_temps:
        raise UsageError("--probe-temps must list at least one temperature")
    if args.probe_repeats < 1:
        raise UsageError("--probe-repeats must be >= 1")
    if args.margin_factor < 1:
        raise UsageError("--margin-factor must be >= 1")
    return ProbeConfig(tuple(args.probe_temps), args.probe_repeats)


# -- file helpers ------------------------------------------------------------------

def _read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_text(path: Path | None, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_device(path: Path) -> PufInstance:
    return PufInstance.from_dict(_read_json(path))


def _emit(args, human: str, payload: dict) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


# -- commands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params = _params_from(args)
    device = sample_puf(params)
    _write_text(args.output, _dump(device.to_dict()))
    if args.output is not None:
        _emit(args, f"wrote {device.n}x{device.m} device (seed {params.seed}) to {args.output}",
              {"output": str(args.output), "n": device.n, "m": device.m, "seed": params.seed})
    return 0


def cmd_extract(args) -> int:
    device = _load_device(args.device) if args.device else None
    if args.readings_in:
        data = ReadingDataset.from_csv(args.readings_in.read_text(encoding="utf-8"), n=device.n if device else None)
    else:
        if device is None:
            raise UsageError("extract needs --device or --readings-in")
        env = EnvCondition(args.temperature if args.temperature is not None else device.params.temp_ref)
        data = harvest(device, env=env, repeats=args.repeats, rng=np.random.default_rng(args.seed))
    if args.readings_out:
        _write_text(args.readings_out, data.to_csv())
    t0 = time.perf_counter()
    model = fit_delay_matrix(data, method=args.method)
    seconds = time.perf_counter() - t0
    if args.output:
        _write_text(args.output, _dump(model.to_dict()))
    payload = {"n": model.n, "m": model.m, "readings": len(data), "residual_rms": model.residual_rms,
               "fit_seconds": seconds}
    human = f"fitted {model.n}x{model.m} model from {len(data)} readings (residual rms {model.residual_rms:.3g})"
    if device is not None:
        crps = accuracy_crps(device.n, device.m, args.seed)
        acc = model_accuracy(model, device, crps)
        payload.update(accuracy=acc, crps_scored=len(crps))
        human += f"\naccuracy {acc:.6f} over {len(crps)} CRPs"
    _emit(args, human, payload)
    return 0


def cmd_threshold(args) -> int:
    device = _load_device(args.device)
    if not device.fuse_intact:
        raise ParameterError("device fuse is burned; its counters cannot be probed")
    model = PredictedDelayMatrix.from_dict(_read_json(args.model))
    probe_cfg = _probe_from(args)
    if args.probe == "device":
        probe = DeviceProbe(device, probe_cfg, args.seed)
    else:
        probe = ReadingProbe.from_device(device, probe_cfg, np.random.default_rng(args.seed))
    t = compute_threshold(model, probe, args.margin_factor, closed=args.closed)
    report = cos(model, t, closed=args.closed)
    if args.output:
        _write_text(args.output, _dump(t.to_dict()))
    _emit(args, f"threshold {t.value:.6g} (trigger {t.trigger_delta}, margin {t.margin_factor})\n"
                f"COS {report.cos:.4f} ({report.r_reliable} of {report.r_total} CRPs)",
          {"threshold": t.value, "trigger_delta": t.trigger_delta, "margin_factor": t.margin_factor,
           "cos": report.cos, "reliable": report.r_reliable, "total": report.r_total})
    return 0


def cmd_genchal(args) -> int:
    model = PredictedDelayMatrix.from_dict(_read_json(args.model))
    t = Threshold.from_dict(_read_json(args.threshold))
    rng = np.random.default_rng(args.seed)
    key = SharedKey.parse(args.key) if args.key else SharedKey.random(args.key_bits, rng)
    kc = generate_challenges(model, t, key, rng, args.max_attempts)
    _write_text(args.output, _dump(kc.to_dict()))
    if args.output is not None:
        _emit(args, f"key {key}\nwrote {len(kc)} challenges to {args.output}",
              {"key": str(key), "bits": len(kc), "output": str(args.output)})
    return 0


def cmd_derive(args) -> int:
    device = _load_device(args.device)
    kc = KeyChallenges.from_dict(_read_json(args.challenges))
    env = EnvCondition(args.temperature if args.temperature is not None else device.params.temp_ref)
    key = derive_key(device, kc, env, np.random.default_rng(args.seed))
    _emit(args, str(key), {"key": str(key), "bits": len(key), "temperature": env.temperature})
    return 0


def cmd_device(args) -> int:
    device = _load_device(args.device)
    agent = DeviceAgent(device, args.device_id or args.device.stem, np.random.default_rng(args.seed))
    server = DeviceServer(agent, args.host, args.port)
    print(json.dumps({"device_id": agent.device_id, "host": args.host, "port": server.port}) if args.json
          else f"device {agent.device_id} listening on {args.host}:{server.port}", flush=True)
    try:
        if args.sessions is None:
            server.serve_forever()
        else:
            for _ in range(args.sessions):
                server.handle_request()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        if args.save:
            _write_text(args.device, _dump(device.to_dict()))
    return 0


def cmd_ttp(args) -> int:
    ttp = TrustedThirdParty(np.random.default_rng(args.seed), args.store, _probe_from(args), args.margin_factor)
    ttp.load_store()
    ids = []
    channels = []
    try:
        for host, port in args.connect:
            ch = SocketChannel(host, port)
            channels.append(ch)
            dev = ch.hello.payload["device_id"]
            ids.append(ttp.attach(ch) if dev in ttp.enrolled else ttp.enroll(ch))
            log.info("session with %s", dev)
        payload = {"devices": ids}
        lines = [f"devices: {', '.join(ids)}"]
        if args.key_bits and len(ids) >= 2:
            key = SharedKey.parse(args.fixed_key) if args.fixed_key else None
            key_id, k = ttp.provision(ids[0], ids[1], args.key_bits, key)
            payload.update(key_id=key_id, key=str(k))
            lines.append(f"key_id {key_id}\nkey {k}")
        _emit(args, "\n".join(lines), payload)
    finally:
        for ch in channels:
            ch.close()
    return 0


def _flip_one_challenge(index: int):
    def tamper(msg: Message) -> Message:
        if msg.type != PROVISION:
            return msg
        payload = json.loads(json.dumps(msg.payload))
        chal = payload["challenges"]["challenges"][index]
        chal["pair"] = chal["pair"][::-1]
        return Message(msg.type, payload, msg.seq, msg.v)

    return tamper


def _key_in_transcript(transcript: Transcript, key: SharedKey) -> bool:
    # Short byte strings occur in any JSON stream by chance; raw bytes are
    # only scanned once the key is long enough for a hit to mean something.
    raw = key.to_bytes()
    return transcript.contains(str(key).encode()) or (len(raw) >= 8 and transcript.contains(raw))


def cmd_demo(args) -> int:
    params = _params_from(args)
    probe = _probe_from(args)
    if args.fixed_key:
        key = SharedKey.parse(args.fixed_key)
    else:
        key = None
    key_bits = len(key) if key else args.key_bits
    if set(args.message) <= {"0", "1"}:
        if len(args.message) % 8:
            raise UsageError("a bit-string message needs a multiple of 8 bits")
        plaintext = bits_to_bytes(args.message)
    else:
        plaintext = args.message.encode("utf-8")
    if 8 * len(plaintext) > key_bits:
        raise UsageError(f"message needs {8 * len(plaintext)} key bits, key has {key_bits}")

    rng = np.random.default_rng(args.seed)
    transcript = Transcript()
    ttp = TrustedThirdParty(rng, probe=probe, margin_factor=args.margin_factor)
    alice = DeviceAgent(sample_puf(params.replace(seed=args.seed + 1)), "alice", np.random.default_rng([args.seed, 1]))
    bob = DeviceAgent(sample_puf(params.replace(seed=args.seed + 2)), "bob", np.random.default_rng([args.seed, 2]))
    tamper_index = int(rng.integers(key_bits)) if args.tamper == "flip-one-challenge" else None
    tamper = _flip_one_challenge(tamper_index) if tamper_index is not None else None
    ttp.enroll(LoopbackChannel(alice, transcript, "ttp-alice"))
    ttp.enroll(LoopbackChannel(bob, transcript, "ttp-bob", tamper=tamper))
    key_id, k = ttp.provision("alice", "bob", key_bits, key)

    ka, kb = alice.keys[key_id], bob.keys[key_id]
    mismatched = [i for i, (x, y) in enumerate(zip(ka.bits, kb.bits)) if x != y]
    data = alice.encrypt(key_id, plaintext)
    LoopbackChannel(bob, transcript, "alice-bob").send(data)
    received = bob.inbox.get(key_id)
    ciphertext = bytes.fromhex(data.payload["ciphertext"])
    ok = ka == k and kb == k and received == plaintext

    if args.transcript:
        _write_text(args.transcript, "\n".join(transcript.dump_hex()) + "\n")
    payload = {
        "verdict": "PASS" if ok else "FAIL",
        "key_id": key_id,
        "key": str(k),
        "alice_key": str(ka),
        "bob_key": str(kb),
        "mismatched_bits": mismatched,
        "ciphertext_bits": bytes_to_bits(ciphertext),
        "plaintext_recovered": received == plaintext,
        "frames": len(transcript),
        "key_in_transcript": _key_in_transcript(transcript, k),
    }
    if tamper_index is not None:
        payload["tampered_bit"] = tamper_index
    lines = [
        f"key       {k}",
        f"alice     {ka}",
        f"bob       {kb}",
        f"ciphertext {bytes_to_bits(ciphertext)}",
        f"frames    {len(transcript)}",
    ]
    if mismatched:
        lines.append(f"mismatched bit index: {', '.join(map(str, mismatched))}")
    lines.append("PASS" if ok else "FAIL")
    _emit(args, "\n".join(lines), payload)
    return 0 if ok else 1


def _out_path(args, name: str) -> Path | None:
    return None if args.out is None else args.out / name


def cmd_experiment(args) -> int:
    kind = args.kind
    params = _params_from(args)
    plots = args.out is not None and not args.no_plots
    if kind == "accuracy":
        rows = analysis.accuracy_table(args.sizes, params, args.repeats, args.seed)
        text = analysis.accuracy_csv(rows)
        if args.out:
            _write_text(_out_path(args, "accuracy.csv"), text)
            _write_text(_out_path(args, "accuracy.json"), analysis.summary_json(rows=[r.to_dict() for r in rows]))
            if plots:
                from .report import accuracy_figure
                accuracy_figure(rows, _out_path(args, "accuracy.png"))
        _emit(args, text.rstrip(), {"rows": [r.to_dict() for r in rows]})
        return 0
    if kind == "cos":
        spec = analysis.PopulationSpec(args.count, params, args.seed)
        progress = None
        if args.verbose:
            def progress(i, total):
                if i % 500 == 0 or i == total:
                    log.info("%d / %d devices", i, total)
        res = analysis.cos_population(spec, _probe_from(args), args.margin_factor, progress=progress,
                                      fit_repeats=args.fit_repeats)
        metrics = res.metrics()
        if args.out:
            _write_text(_out_path(args, "cos_histogram.csv"), res.histogram.to_csv())
            _write_text(_out_path(args, "cos_metrics.csv"), analysis.metrics_csv(metrics))
            _write_text(_out_path(args, "cos_summary.json"), analysis.summary_json(
                metrics={m.metric: m.value for m in metrics}, histogram=res.histogram.rows(),
                failures=res.failures, crps_per_device=crp_count(params.n, params.m)))
            if plots:
                from .report import cos_histogram_figure
                cos_histogram_figure(res.histogram, _out_path(args, "cos_histogram.png"))
        _emit(args, res.histogram.to_csv().rstrip() + "\n" + analysis.metrics_csv(metrics).rstrip(),
              {"histogram": res.histogram.rows(), "metrics": {m.metric: m.value for m in metrics},
               "failures": res.failures})
        return 0
    if kind == "uniqueness":
        spec = analysis.PopulationSpec(args.count, params, args.seed)
        rep = analysis.uniqueness(list(spec), analysis.uniqueness_challenges(params.n, params.m, args.challenges))
        text = analysis.metrics_csv([rep.metric()])
        if args.out:
            _write_text(_out_path(args, "uniqueness.csv"), text)
            _write_text(_out_path(args, "uniqueness.json"), analysis.summary_json(
                mean=rep.mean, ci_low=rep.ci_low, ci_high=rep.ci_high, devices=rep.devices,
                challenges=rep.challenges, per_device=list(rep.per_device)))
            if plots:
                from .report import distance_figure
                distance_figure(np.array(rep.per_device), _out_path(args, "uniqueness.png"), rep.mean)
        _emit(args, text.rstrip(), {"mean": rep.mean, "ci_low": rep.ci_low, "ci_high": rep.ci_high,
                                    "devices": rep.devices, "challenges": rep.challenges})
        return 0
    if kind == "adversary":
        rng = np.random.default_rng(args.seed)
        device = sample_puf(params)
        model = analysis.noiseless_model(device)
        t = compute_threshold(model, DeviceProbe(device, _probe_from(args), args.seed), args.margin_factor)
        key = SharedKey.random(args.bits, rng)
        kc = generate_challenges(model, t, key, rng)
        device.burn_fuse()
        rep = analysis.adversary_baseline(device, kc, args.bits, rng)
        text = analysis.metrics_csv(rep.metrics())
        if args.out:
            _write_text(_out_path(args, "adversary.csv"), text)
        _emit(args, text.rstrip(), {"trials": rep.trials, "random_model_accuracy": rep.random_model_accuracy,
                                    "stolen_model_accuracy": rep.stolen_model_accuracy})
        return 0
    raise UsageError(f"unknown experiment {kind!r}")


def cmd_selftest(args) -> int:
    from .vectors import run_selftest

    checks = run_selftest()
    ok = all(c.ok for c in checks)
    if args.json:
        print(json.dumps({"ok": ok, "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in checks]}))
    else:
        for c in checks:
            print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}  ({c.detail})")
        print("selftest PASS" if ok else "selftest FAIL")
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cropuf", description="Crossover ring-oscillator PUF simulator and key-sharing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="sample a device and write it as JSON")
    _common(p)
    _params_args(p)
    p.add_argument("-o", "--output", type=Path, help="device file (default: stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", help="read counters (or a readings CSV) and fit a delay model")
    _common(p)
    p.add_argument("--device", type=Path, help="device file to read from and score against")
    p.add_argument("--readings-in", type=Path, help="fit from this CSV (path,counts,temperature) instead")
    p.add_argument("--readings-out", type=Path, help="also write the harvested readings as CSV")
    p.add_argument("--repeats", type=int, default=10, help="readings averaged per path (default: %(default)s)")
    p.add_argument("--temperature", type=float, help="harvest temperature (default: device reference)")
    p.add_argument("--method", choices=("lstsq", "gd"), default="lstsq", help="solver (default: %(default)s)")
    p.add_argument("-o", "--output", type=Path, help="model file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("threshold", help="run the reliability threshold search for a device and model")
    _common(p)
    _probe_args(p)
    p.add_argument("--device", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--probe", choices=("device", "readings"), default="device",
                   help="simulate responses per pair, or compare a table of counter readings (default: %(default)s)")
    p.add_argument("--closed", action="store_true", help="only loops that end on their start row")
    p.add_argument("-o", "--output", type=Path, help="threshold file")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("genchal", help="compute the challenges that make a device emit a key")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--threshold", type=Path, required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--key", type=_bits, help="key bits (default: random)")
    g.add_argument("--key-bits", type=int, default=128, help="random key length (default: %(default)s)")
    p.add_argument("--max-attempts", type=int, default=10_000, help="random pairs tried per bit (default: %(default)s)")
    p.add_argument("-o", "--output", type=Path, help="challenge file (default: stdout)")
    p.set_defaults(func=cmd_genchal)

    p = sub.add_parser("derive", help="replay key challenges on a device")
    _common(p)
    p.add_argument("--device", type=Path, required=True)
    p.add_argument("--challenges", type=Path, required=True)
    p.add_argument("--temperature", type=float, help="operating temperature (default: device reference)")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("device", help="serve a device agent over TCP")
    _common(p)
    p.add_argument("--device", type=Path, required=True)
    p.add_argument("--device-id", help="identifier announced in HELLO (default: file stem)")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default: %(default)s)")
    p.add_argument("--port", type=int, default=0, help="TCP port, 0 picks a free one (default: %(default)s)")
    p.add_argument("--sessions", type=int, help="exit after this many sessions (default: serve until interrupted)")
    p.add_argument("--save", action="store_true", help="write the device file back on exit (keeps the fuse state)")
    p.set_defaults(func=cmd_device)

    p = sub.add_parser("ttp", help="enroll devices over TCP and provision a key between the first two")
    _common(p)
    _probe_args(p)
    p.add_argument("--connect", type=_endpoint, action="append", required=True, metavar="HOST:PORT",
                   help="device endpoint; repeat per device")
    p.add_argument("--store", type=Path, help="directory with one JSON file per enrolled device")
    p.add_argument("--key-bits", type=int, default=128, help="key length, 0 to only enroll (default: %(default)s)")
    p.add_argument("--fixed-key", type=_bits, help="provision this key instead of a random one")
    p.set_defaults(func=cmd_ttp)

    p = sub.add_parser("demo", help="in-process TTP and two devices: enroll, provision, exchange one message")
    _common(p)
    _params_args(p)
    _probe_args(p)
    p.add_argument("--key-bits", type=int, default=128, help="key length (default: %(default)s)")
    p.add_argument("--fixed-key", type=_bits, help="share this key instead of a random one")
    p.add_argument("--message", default="hello bob", help="bit string (only 0/1) or text (default: %(default)r)")
    p.add_argument("--transcript", type=Path, help="write every frame hex-encoded ('-' for stdout)")
    p.add_argument("--tamper", choices=("none", "flip-one-challenge"), default="none",
                   help="fault injection on the TTP-to-bob link (default: %(default)s)")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("experiment", help="population experiments writing CSV, JSON and PNG")
    _common(p)
    _params_args(p)
    _probe_args(p)
    p.add_argument("kind", choices=("accuracy", "cos", "uniqueness", "adversary"))
    p.add_argument("--sizes", type=_sizes, default=[(3, 5), (3, 7), (4, 5), (5, 5)],
                   help="accuracy: sizes such as 3x5,4x5 (default: 3x5,3x7,4x5,5x5)")
    p.add_argument("--repeats", type=int, default=10, help="accuracy: readings per path (default: %(default)s)")
    p.add_argument("--count", type=int, default=None,
                   help="population size (default: 10000 for cos, 50 for uniqueness)")
    p.add_argument("--fit-repeats", type=int, help="cos: fit from jittered readings instead of the noiseless fit")
    p.add_argument("--challenges", type=int, default=analysis.UNIQUENESS_CHALLENGES,
                   help="uniqueness: shared challenges (default: %(default)s)")
    p.add_argument("--bits", type=int, default=1000, help="adversary: key bits scored (default: %(default)s)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("selftest", help="check the published reference vectors")
    _common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = _read_json(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in sub._actions}
    unknown = sorted(set(cfg) - set(dests) - {"config"})
    if unknown:
        raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
    converted = {}
    for key, value in cfg.items():
        action = dests[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        if action.type is not None and isinstance(value, str):
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        converted[key] = value
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


def _validate(args) -> None:
    if hasattr(args, "n"):
        try:
            _params_from(args).validate()
        except ParameterError as exc:
            raise UsageError(str(exc)) from exc
    if hasattr(args, "probe_temps"):
        _probe_from(args)
    if args.command == "experiment":
        if args.count is None:
            args.count = 10_000 if args.kind == "cos" else 50
        if args.count < 1 or (args.kind == "uniqueness" and args.count < 2):
            raise UsageError("--count is too small for this experiment")
    if args.command == "extract" and args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.command == "demo" and args.fixed_key is None and args.key_bits < 1:
        raise UsageError("--key-bits must be >= 1")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        _validate(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"error: {exc.code}: {exc.detail}", file=sys.stderr)
        return 1
    except (CroPufError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
