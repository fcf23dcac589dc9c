"""mqttauth command line.

    mqttauth run SCENARIO.json [--seed N] [--out DIR]
    mqttauth analyze TRACE [--out DIR]
    mqttauth compare REPORT.json [REPORT.json ...] [--text] [--out DIR]
    mqttauth sweep-chains --lengths 1,2,4 [--alg ES256] [--seed N] [--out DIR]
    mqttauth provision DIR [--seed N] [--port P]
    mqttauth serve BROKER.json [--host H]
    mqttauth device CLIENT.json [--duration S]

Delimited (CSV) results go to stdout; files and figures go under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import time

from . import harness
from .analysis import analyze_trace
from .transport import read_trace, write_trace

log = logging.getLogger("mqttauth")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers: %r" % text)
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _write(path: str, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_run(args) -> int:
    from . import plotting

    scenario = harness.Scenario.load(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    out = args.out or os.path.join("out", scenario.name)
    t0 = time.perf_counter()
    result = harness.run_scenario(scenario)
    log.info("scenario %s simulated %ds in %.2fs", scenario.name, scenario.duration,
             time.perf_counter() - t0)

    os.makedirs(os.path.join(out, "activity"), exist_ok=True)
    os.makedirs(os.path.join(out, "traces"), exist_ok=True)
    _write(os.path.join(out, "report.json"), result.report_json())
    _write(os.path.join(out, "metrics.csv"), result.metrics_csv())
    _write(os.path.join(out, "audit.log"), "".join(line + "\n" for line in result.audit_lines))
    for cid, lines in result.activity.items():
        _write(os.path.join(out, "activity", cid + ".log"), "".join(l + "\n" for l in lines))
    for cid, frames in result.traces.items():
        write_trace(os.path.join(out, "traces", cid + ".trace"), frames)
    if len(result.metrics) >= 2:
        table = harness.compare_schemes(list(result.metrics.values()))
        _write(os.path.join(out, "comparison.csv"), table.to_csv())
        _write(os.path.join(out, "comparison.txt"), table.to_text() + "\n")
    if result.chain_cost:
        _write(os.path.join(out, "chain_cost.csv"), _chain_csv(result.chain_cost))
    plotting.render_scenario(result, out)

    sys.stdout.write(result.metrics_csv())
    log.info("wrote %s", out)
    return 0


def cmd_analyze(args) -> int:
    frames = read_trace(args.trace)
    report = analyze_trace(frames, direction=None if args.all else 0)
    sys.stdout.write("packet_type,frames,distinct_patterns,max_entropy_bits\n")
    for name, n, d, h in report.summary_rows():
        sys.stdout.write("%s,%d,%d,%.6f\n" % (name, n, d, h))
    if args.out:
        from . import plotting
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "entropy.csv"), report.to_csv())
        plotting.plot_entropy(report, os.path.join(args.out, "entropy.png"))
    return 0


def cmd_compare(args) -> int:
    reports = [m for path in args.reports for m in harness.load_report(path)]
    table = harness.compare_schemes(reports)
    sys.stdout.write(table.to_text() + "\n" if args.text else table.to_csv())
    for w in table.warnings:
        log.warning(w)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "comparison.csv"), table.to_csv())
        _write(os.path.join(args.out, "comparison.txt"), table.to_text() + "\n")
    return 0


def _chain_csv(series) -> str:
    return "chain_length,handshake_bytes\n" + "".join("%d,%d\n" % p for p in series)


def cmd_sweep(args) -> int:
    series = harness.chain_cost_sweep(args.lengths, args.alg, seed=args.seed)
    sys.stdout.write(_chain_csv(series))
    if args.out:
        from . import plotting
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "chain_cost.csv"), _chain_csv(series))
        plotting.plot_chain_cost(series, os.path.join(args.out, "chain_cost.png"))
    return 0


def cmd_provision(args) -> int:
    from .config import provision_demo
    for path in provision_demo(args.dir, seed=args.seed, port=args.port):
        print(path)
    return 0


def _raise_interrupt(signum, frame):
    raise KeyboardInterrupt


def cmd_serve(args) -> int:
    from .config import load_broker_config
    from .transport import serve_tcp

    signal.signal(signal.SIGTERM, _raise_interrupt)
    setup = load_broker_config(args.config)
    servers = []
    for name, lst in setup.broker.listeners.items():
        srv = serve_tcp(setup.broker, name, args.host, lst.port,
                        setup.server_channel if lst.secure else None)
        log.info("listener %s (%s) on %s:%d", name, lst.auth.mode.value, args.host, lst.port)
        servers.append(srv)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        for srv in servers:
            srv.shutdown()
        setup.close()
    return 0


def cmd_device(args) -> int:
    from .client import DeviceClient
    from .config import load_client_config
    from .transport import TcpEndpoint

    setup = load_client_config(args.config)
    client = DeviceClient(setup.config, TcpEndpoint(setup.host, setup.port, setup.secure),
                          setup.clock)
    shown = 0

    def tick(_now):
        nonlocal shown
        for e in client.activity[shown:]:
            print(e.to_line(), flush=True)
        shown = len(client.activity)

    try:
        client.maintain(time.time() + args.duration, on_tick=tick)
    except KeyboardInterrupt:
        pass
    client.disconnect("shutdown")
    tick(None)
    if args.trace:
        write_trace(args.trace, client.trace())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqttauth",
                                description="MQTT device authentication experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file under the simulated clock")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="per-offset entropy of a captured trace")
    a.add_argument("trace")
    a.add_argument("--all", action="store_true",
                   help="include broker-to-client frames (default: client-to-broker only)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="cross-scheme comparison of report.json files")
    c.add_argument("reports", nargs="+")
    c.add_argument("--text", action="store_true", help="aligned table instead of CSV")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep-chains", help="handshake bytes per server chain length")
    s.add_argument("--lengths", type=_int_list, default=[1, 2, 4])
    s.add_argument("--alg", default="ES256", choices=["ES256", "RS256"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    pv = sub.add_parser("provision", help="write demo keys, certs and config files")
    pv.add_argument("dir")
    pv.add_argument("--seed", type=int)
    pv.add_argument("--port", type=int, default=8883)
    pv.set_defaults(func=cmd_provision)

    sv = sub.add_parser("serve", help="run a broker over TCP from a config file")
    sv.add_argument("config")
    sv.add_argument("--host", default="127.0.0.1")
    sv.set_defaults(func=cmd_serve)

    d = sub.add_parser("device", help="run one device over TCP in wall-clock time")
    d.add_argument("config")
    d.add_argument("--duration", type=float, default=60.0)
    d.add_argument("--trace")
    d.set_defaults(func=cmd_device)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (harness.ScenarioError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
