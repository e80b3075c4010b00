"""Command-line entry point: node, simulate, verify, bench, fit-profile.

All outputs are CSV or newline-delimited logs; every subcommand is
deterministic given --seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .common import Side
from .profiler import fit_offline, measure_decode_curve
from .retrieval import load_corpus, load_token_lines
from .runtime import (
    METRICS_CSV_HEADER,
    NodeConfig,
    run_loopback_pair,
    run_node,
)
from .scheduler import CostVector
from .simulator import AcceptanceTrace, NetModel, simulate
from .transport import Codec
from .verify import SUITES, run_suites

log = logging.getLogger("specagg")


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _parse_prompt(args: argparse.Namespace) -> list[int]:
    if args.prompt_file:
        lines = load_token_lines(args.prompt_file)
        if not lines:
            raise SystemExit(f"no prompts in {args.prompt_file}")
        return lines[0]
    if args.prompt:
        return [int(tok) for tok in args.prompt.split()]
    raise SystemExit("node needs --prompt or --prompt-file")


def _write_csv(path: str, header: tuple[str, ...], rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _node_config(args: argparse.Namespace) -> NodeConfig:
    corpus = load_corpus(args.corpus, args.chunk_size)
    static = None if args.static_side == "auto" else Side(args.static_side)
    return NodeConfig(
        role=Side(args.role),
        corpus=corpus,
        prompt=_parse_prompt(args),
        vocab_size=args.vocab,
        docs_k=args.docs,
        half=args.half,
        max_new_tokens=args.max_new_tokens,
        max_context=args.max_context,
        seed=args.seed,
        top_p=args.top_p,
        queue_capacity=args.queue_capacity,
        vanilla=args.vanilla,
        static_side=static,
        decode_delay_ms=args.decode_delay_ms,
        link_delay_ms=args.link_delay_ms,
        codec=Codec.BLOCK if args.codec == "block" else Codec.NONE,
        listen=args.listen,
        peer=args.connect,
    )


def _emit_node_outputs(args: argparse.Namespace, result) -> None:
    if args.csv:
        rows = [
            (e.step, e.token, int(e.accept_l), int(e.accept_r), f"{e.latency_ms:.3f}")
            for e in result.target_log
        ]
        _write_csv(args.csv, METRICS_CSV_HEADER, rows)
    if args.target_log:
        Path(args.target_log).write_text(
            "".join(f"{e.token}\n" for e in result.target_log), encoding="ascii"
        )
    if args.profile_csv:
        from .profiler import write_profile_csv

        write_profile_csv(args.profile_csv, result.profile_rows)
    print(
        f"role={result.role} tokens={len(result.target_log)} "
        f"ttft_ms={result.ttft_ms:.1f} mean_latency_ms={result.mean_latency_ms():.2f} "
        f"switches={result.switches}"
    )


def cmd_node(args: argparse.Namespace) -> int:
    if (args.listen is None) == (args.connect is None):
        raise SystemExit("node needs exactly one of --listen / --connect")
    result = run_node(_node_config(args))
    _emit_node_outputs(args, result)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    if (args.trace is None) == (args.bernoulli is None):
        raise SystemExit("simulate needs exactly one of --trace / --bernoulli")
    if args.trace:
        trace = AcceptanceTrace.load_csv(args.trace)
    else:
        trace = AcceptanceTrace.bernoulli(
            args.tokens, args.bernoulli_local, args.bernoulli, args.seed
        )
    costs = CostVector(args.c_dec_l, args.c_dec_r, args.c_trans_l, args.c_trans_r)
    net = NetModel(
        base_latency=args.base_latency,
        extra_latency=args.extra_latency,
        jitter_amplitude=args.jitter_amplitude,
        jitter_period_s=args.jitter_period,
        bandwidth=args.bandwidth,
    )
    result = simulate(trace, costs, net, args.strategy, seed=args.seed)
    if args.csv:
        rows = [
            (step, f"{dt:.6f}", side.value)
            for step, (dt, side) in enumerate(zip(result.per_token, result.side_history))
        ]
        _write_csv(args.csv, ("step", "latency_ms", "agg_side"), rows)
    print(
        f"strategy={args.strategy} tokens={len(result.per_token)} "
        f"total_ms={result.total_time:.3f} per_token_ms={result.total_time / len(result.per_token):.4f} "
        f"steady_ms={result.steady_per_token():.4f} switches={result.switches}"
    )
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    results = run_suites(args.suite, trials=args.trials, seed=args.seed)
    for check in results:
        print(check.line())
    failed = [c for c in results if not c.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus, args.chunk_size)
    prompts = load_token_lines(args.prompts)
    if not prompts:
        raise SystemExit(f"no prompts in {args.prompts}")
    rows = []
    for idx, prompt in enumerate(prompts[: args.limit]):
        base = NodeConfig(
            role=Side.DEVICE,
            corpus=corpus,
            prompt=prompt,
            vocab_size=args.vocab,
            docs_k=args.docs,
            max_new_tokens=args.max_new_tokens,
            max_context=args.max_context,
            seed=args.seed + idx,
            vanilla=args.vanilla,
            decode_delay_ms=args.decode_delay_ms,
            link_delay_ms=args.link_delay_ms,
        )
        device, _cloud = run_loopback_pair(base)
        latencies = [e.latency_ms for e in device.target_log[1:]]
        mean_latency = sum(latencies) / len(latencies) if latencies else 0.0
        rows.append(
            (idx, f"{device.ttft_ms:.3f}", f"{mean_latency:.3f}", len(device.target_log))
        )
        print(
            f"prompt={idx} ttft_ms={device.ttft_ms:.1f} per_token_ms={mean_latency:.2f} "
            f"tokens={len(device.target_log)}"
        )
    if args.csv:
        _write_csv(args.csv, ("prompt", "ttft_ms", "per_token_ms", "tokens"), rows)
    return 0


def cmd_fit_profile(args: argparse.Namespace) -> int:
    samples = measure_decode_curve(
        vocab_size=args.vocab,
        n_docs=args.docs,
        chunk_size=args.chunk_size,
        max_context=args.max_context,
        repeats=args.repeats,
        seed=args.seed,
        sleep_ms=args.per_step_ms,
    )
    model = fit_offline(samples)
    if args.csv:
        _write_csv(
            args.csv,
            ("t", "c_dec_ms"),
            [(t, f"{c:.6f}") for t, c in samples],
        )
    print(f"k_a={model.k_a:.6g} k_b={model.k_b:.6g} k_c={model.k_c:.6g}")
    print(f"predicted at t={args.max_context - 1}: {model.predict(args.max_context - 1):.4f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specagg",
        description="dual-stream speculative aggregation engine and simulator",
    )
    parser.add_argument("--log-level", default="warning", help="logging level")

    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="run one live node against a peer")
    node.add_argument("--role", choices=("device", "cloud"), required=True)
    node.add_argument("--listen", type=_host_port, metavar="HOST:PORT")
    node.add_argument("--connect", type=_host_port, metavar="HOST:PORT")
    node.add_argument("--corpus", required=True)
    node.add_argument("--chunk-size", type=int, default=64)
    node.add_argument("--docs", type=int, default=4, help="documents per side")
    node.add_argument("--half", choices=("auto", "all", "first", "second"), default="auto")
    node.add_argument("--vocab", type=int, default=256)
    node.add_argument("--prompt", help="whitespace-separated token ids")
    node.add_argument("--prompt-file")
    node.add_argument("--max-new-tokens", type=int, default=32)
    node.add_argument("--max-context", type=int, default=256)
    node.add_argument("--seed", type=int, default=0)
    node.add_argument("--top-p", type=float, default=0.8)
    node.add_argument("--queue-capacity", type=int, default=8)
    node.add_argument("--vanilla", action="store_true", help="aggregate before every decode")
    node.add_argument("--static-side", choices=("device", "cloud", "auto"), default="auto")
    node.add_argument("--decode-delay-ms", type=float, default=0.0)
    node.add_argument("--link-delay-ms", type=float, default=0.0)
    node.add_argument("--codec", choices=("none", "block"), default="none")
    node.add_argument("--csv", help="metrics CSV path")
    node.add_argument("--target-log", help="emitted-token log path")
    node.add_argument("--profile-csv", help="profiler snapshot CSV path")
    node.set_defaults(func=cmd_node)

    sim = sub.add_parser("simulate", help="replay an acceptance trace in the simulator")
    sim.add_argument("--trace", help="CSV of (step, accept_l, accept_r)")
    sim.add_argument("--bernoulli", type=float, help="cloud-side acceptance rate")
    sim.add_argument("--bernoulli-local", type=float, default=0.0, help="device-side rate")
    sim.add_argument("--tokens", type=int, default=1000)
    sim.add_argument("--strategy", choices=("device", "cloud", "random", "dragon"), default="device")
    sim.add_argument("--c-dec-l", type=float, default=1.0)
    sim.add_argument("--c-dec-r", type=float, default=1.5)
    sim.add_argument("--c-trans-l", type=float, default=0.0)
    sim.add_argument("--c-trans-r", type=float, default=0.0)
    sim.add_argument("--base-latency", type=float, default=0.0)
    sim.add_argument("--extra-latency", type=float, default=0.0)
    sim.add_argument("--jitter-amplitude", type=float, default=None)
    sim.add_argument("--jitter-period", type=float, default=62.83185307179586)
    sim.add_argument("--bandwidth", type=float, default=None, help="bytes/ms")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--csv", help="per-token CSV path")
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="run verification suites")
    ver.add_argument(
        "--suite",
        action="append",
        choices=SUITES + ("all",),
        help="suite name; repeatable (default all)",
    )
    ver.add_argument("--trials", type=int, default=1_000_000)
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=cmd_verify)

    bench = sub.add_parser("bench", help="latency/TTFT over a prompt file via loopback pairs")
    bench.add_argument("--corpus", required=True)
    bench.add_argument("--prompts", required=True, help="token-id sequences, one per line")
    bench.add_argument("--limit", type=int, default=8)
    bench.add_argument("--chunk-size", type=int, default=64)
    bench.add_argument("--docs", type=int, default=4)
    bench.add_argument("--vocab", type=int, default=256)
    bench.add_argument("--max-new-tokens", type=int, default=20)
    bench.add_argument("--max-context", type=int, default=256)
    bench.add_argument("--vanilla", action="store_true")
    bench.add_argument("--decode-delay-ms", type=float, default=0.0)
    bench.add_argument("--link-delay-ms", type=float, default=0.0)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--csv")
    bench.set_defaults(func=cmd_bench)

    fit = sub.add_parser("fit-profile", help="offline decode-latency fit from a dummy run")
    fit.add_argument("--vocab", type=int, default=256)
    fit.add_argument("--docs", type=int, default=4)
    fit.add_argument("--chunk-size", type=int, default=64)
    fit.add_argument("--max-context", type=int, default=256)
    fit.add_argument("--repeats", type=int, default=3)
    fit.add_argument("--per-step-ms", type=float, default=0.0)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--csv", help="raw samples CSV path")
    fit.set_defaults(func=cmd_fit_profile)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
