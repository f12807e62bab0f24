"""Command-line entry points.

    coldchain run      --scenario F --out DIR [--seed N] [--accel X]
                       [--server HOST:PORT]
    coldchain autotune --scenario F [--relay-amplitude D] [--horizon S]
    coldchain replay   --log FILE --server HOST:PORT --token T [--dev ID]
    coldchain serve    [--host H] [--device-port P] [--http-port P]
                       [--data-dir D] [--token-file F] [--command-ttl S]
                       [--ui-dir D]

Serve options fall back to COLDCHAIN_HOST, COLDCHAIN_DEVICE_PORT,
COLDCHAIN_HTTP_PORT, COLDCHAIN_DATA_DIR, COLDCHAIN_TOKEN_FILE; run accepts
COLDCHAIN_SERVER.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

from .autotune import TuningFailed
from .harness import run as run_scenario
from .harness import autotune_for
from .protocol import SendBuffer, decode_frame, flush
from .scenario import ScenarioError, load_scenario
from .server import ControlPlane


def _split_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(
            f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _cmd_run(args) -> int:
    spec = load_scenario(args.scenario)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    link = None
    if args.server:
        from .netserver import NetLink
        host, port = _split_addr(args.server)
        token = args.token or spec.device_token
        link = NetLink(host, port, spec.device_id, token)
    result = run_scenario(spec, out_dir=args.out, link=link,
                          accel=args.accel)
    if result.tuning is not None:
        t = result.tuning
        print(f"autotuned: kp={t.gains.kp:.4f} ki={t.gains.ki:.6f} "
              f"kd={t.gains.kd:.2f} (a={t.amplitude_c:.3f} degC, "
              f"Pu={t.period_s:.1f} s, Ku={t.ultimate_gain:.2f})")
    print(result.stats.format(), end="")
    print(f"trace: {result.csv_path}")
    print(f"stats: {result.stats_path}")
    print(f"wire log: {result.wirelog_path}")
    return 0


def _cmd_autotune(args) -> int:
    spec = load_scenario(args.scenario)
    if args.relay_amplitude is not None or args.horizon is not None:
        tune = dataclasses.replace(
            spec.autotune,
            **({"relay_amplitude_pct": args.relay_amplitude}
               if args.relay_amplitude is not None else {}),
            **({"observation_horizon_s": args.horizon}
               if args.horizon is not None else {}))
        spec = dataclasses.replace(spec, autotune=tune)
    try:
        res = autotune_for(spec)
    except TuningFailed as exc:
        print(f"tuning failed: {exc}", file=sys.stderr)
        return 1
    print(f"amplitude_c={res.amplitude_c:.4f}")
    print(f"period_s={res.period_s:.2f}")
    print(f"ultimate_gain={res.ultimate_gain:.4f}")
    print(f"kp={res.gains.kp:.6f}")
    print(f"ki={res.gains.ki:.6f}")
    print(f"kd={res.gains.kd:.6f}")
    return 0


def _cmd_replay(args) -> int:
    from .netserver import NetLink
    host, port = _split_addr(args.server)
    with open(args.log, encoding="utf-8") as fh:
        lines = [l for l in fh if l.strip()]
    if not lines:
        print("log is empty", file=sys.stderr)
        return 1
    device_id = args.dev or decode_frame(lines[0]).dev
    link = NetLink(host, port, device_id, args.token)
    buf = SendBuffer(capacity=max(len(lines), 1))
    next_seq = 1
    for line in lines:
        frame = decode_frame(line)
        buf.push(frame.seq, line)
        next_seq = frame.seq + 1
    deadline = time.monotonic() + args.timeout
    while len(buf) and time.monotonic() < deadline:
        flush(buf, link, time.monotonic(), next_seq)
        time.sleep(0.05)
    link.close()
    print(f"replayed {buf.acked_count}/{buf.pushed_count} frames "
          f"({len(buf)} unacked)")
    return 0 if len(buf) == 0 else 1


def _cmd_serve(args) -> int:
    from .netserver import TelemetryServer
    plane = ControlPlane(data_dir=args.data_dir,
                         command_ttl_s=args.command_ttl)
    if args.token_file:
        plane.load_token_file(args.token_file)
    server = TelemetryServer(plane, host=args.host,
                             device_port=args.device_port,
                             http_port=args.http_port,
                             ui_dir=args.ui_dir)
    server.start()
    print(f"device port: {server.device_addr[0]}:{server.device_addr[1]}")
    print(f"http api:    http://{server.http_addr[0]}:{server.http_addr[1]}")
    if args.ui_dir:
        print(f"dashboard:   http://{server.http_addr[0]}:{server.http_addr[1]}/")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        plane.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    env = os.environ.get
    parser = argparse.ArgumentParser(prog="coldchain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    p.add_argument("--accel", type=float, default=None,
                   help="sim seconds per wall second (default: free run)")
    p.add_argument("--server", default=env("COLDCHAIN_SERVER"),
                   help="HOST:PORT of an external control plane")
    p.add_argument("--token", default=None,
                   help="device token for --server (default: scenario's)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("autotune", help="relay-tune gains for a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--relay-amplitude", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.set_defaults(func=_cmd_autotune)

    p = sub.add_parser("replay", help="replay a device wire log to a server")
    p.add_argument("--log", required=True)
    p.add_argument("--server", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--dev", default=None,
                   help="device id (default: from the log)")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("serve", help="run the control plane")
    p.add_argument("--host", default=env("COLDCHAIN_HOST", "127.0.0.1"))
    p.add_argument("--device-port", type=int,
                   default=int(env("COLDCHAIN_DEVICE_PORT", "7600")))
    p.add_argument("--http-port", type=int,
                   default=int(env("COLDCHAIN_HTTP_PORT", "7700")))
    p.add_argument("--data-dir", default=env("COLDCHAIN_DATA_DIR"))
    p.add_argument("--token-file", default=env("COLDCHAIN_TOKEN_FILE"))
    p.add_argument("--command-ttl", type=float, default=60.0)
    p.add_argument("--ui-dir", default=None,
                   help="serve a dashboard build from this directory")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
