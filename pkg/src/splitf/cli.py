"""``splitf`` command line.

Exit status is 0 on success, 1 on a runtime failure (printed as
``error: <category>: <message>``) and 2 on a usage error. Every subcommand
accepts ``--config FILE`` (see :mod:`splitf.config`); explicit flags win over
file values and the ``SPLITF_ENDPOINT`` / ``SPLITF_SEED`` environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import metrics, plotting
from .client import SplitConfig, connect
from .config import env_overrides, load_config
from .decoding import JacobiConfig, LookaheadConfig
from .errors import ConfigError, InputError, SplitError
from .inversion import AttackDecoderConfig, attack_corpus, depth_sweep
from .server import ServerConfig, SplitServer, TcpFrameServer
from .tinyformer import ModelConfig, init_weights, load_weights
from .transport import parse_endpoint, read_transcript
from .wire import decode_frame, encode_frame

log = logging.getLogger("splitf")

HEADER_KEYS = frozenset({"kind", "session_id", "shape", "dtype", "pos", "crop", "keep",
                         "mask_shape", "err", "srv_ms", "layers"})
FORBIDDEN_MARKERS = ("token", "logit", "vocab", "ids")


# -- argument types ----------------------------------------------------------

def layer_span(text: str) -> range:
    try:
        start, stop = (int(part) for part in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START..END, got {text!r}") from None
    return range(start, stop)


def int_list(text: str) -> list[int]:
    """``1,3,5`` or an inclusive ``3..7``."""
    try:
        if ".." in text:
            start, stop = (int(part) for part in text.split(".."))
            return list(range(start, stop + 1))
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 1,2,3 or A..B integers, got {text!r}") from None


def float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def str_list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _bool(text: str) -> bool:
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- shared plumbing ---------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", help="weights file written by save_weights; default: seeded init")
    p.add_argument("--model-config", help="JSON model config (ignored when --weights is given)")
    p.add_argument("--seed", type=int, default=0, help="weight-init and harness seed")


def _add_split_args(p: argparse.ArgumentParser, server_default: str = "sim:0") -> None:
    p.add_argument("--server", default=server_default, help="tcp:HOST:PORT or sim:ONE_WAY_MS[:JITTER[:BPS]]")
    p.add_argument("--prefix", type=int, default=2, help="local layers before the split")
    p.add_argument("--suffix", type=int, default=2, help="local layers after the split")
    p.add_argument("--dtype", choices=("f16", "f32"), default="f32")


def _add_decode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ngram-n", type=int, default=3)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--candidates", type=int, default=2)
    p.add_argument("--block-k", type=int, default=4)


def _weights(args):
    if args.weights:
        return load_weights(args.weights)
    base = {}
    if args.model_config:
        path = Path(args.model_config)
        if not path.is_file():
            raise ConfigError(f"model config {path} does not exist")
        base = json.loads(path.read_text())
    base["seed"] = args.seed
    return init_weights(ModelConfig.from_dict(base))


def _split(args) -> SplitConfig:
    return SplitConfig(args.prefix, args.suffix, args.dtype)


def _lookahead(args) -> LookaheadConfig:
    return LookaheadConfig(args.ngram_n, max(args.window, args.ngram_n), args.candidates)


def _prompts(args, weights, default_n: int) -> list[list[int]]:
    if getattr(args, "prompt", None):
        return [int_list(args.prompt)]
    if getattr(args, "prompt_file", None):
        prompts = metrics.load_corpus(args.prompt_file)
        if not prompts:
            raise InputError(f"{args.prompt_file} holds no prompts")
        return prompts
    corpora = metrics.make_corpora(default_n, 16, weights.config.vocab_size, args.seed)
    return corpora["random"]


def _stem(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".csv", ".png") else p


def _print_rows(rows, keys) -> None:
    print("\t".join(keys))
    for row in rows:
        cells = []
        for k in keys:
            v = row.get(k)
            cells.append("" if v is None else f"{v:.4g}" if isinstance(v, float) else str(v))
        print("\t".join(cells))


# -- subcommands -------------------------------------------------------------

def cmd_serve(args) -> int:
    weights = _weights(args)
    config = ServerConfig(args.layers, session_expiry=args.expiry,
                          max_sessions=args.max_sessions, dtype=args.dtype)
    split_server = SplitServer(weights, config)
    ep = parse_endpoint(args.listen)
    if ep.scheme != "tcp":
        raise ConfigError("serve listens on tcp:HOST:PORT only")
    srv = TcpFrameServer(split_server, ep.host, ep.port)
    print(f"listening tcp:{ep.host}:{srv.port} layers {args.layers.start}..{args.layers.stop}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


def cmd_generate(args) -> int:
    weights = _weights(args)
    prompts = _prompts(args, weights, 1)
    split = _split(args)
    transcript = open(args.transcript, "wb") if args.transcript else None
    stats_fh = open(args.stats_out, "w") if args.stats_out else None
    try:
        client = connect(weights, split, args.server, seed=args.seed, transcript=transcript,
                         rtt_pings=args.rtt_pings)
        try:
            for i, prompt in enumerate(prompts):
                result = metrics.run_mode(client, args.mode, prompt, args.max_new,
                                          ngram_n=args.ngram_n, lookahead=_lookahead(args),
                                          jacobi=JacobiConfig(block_k=args.block_k))
                print(" ".join(map(str, result.tokens)), flush=True)
                if stats_fh:
                    for row in result.stats.step_log:
                        stats_fh.write(json.dumps({"prompt": i, "mode": args.mode, **row}) + "\n")
                    stats_fh.write(json.dumps({"prompt": i, "mode": args.mode, "summary": True,
                                               **result.stats.summary()}) + "\n")
                log.info("prompt %d: %s", i, result.stats.summary())
        finally:
            client.close()
    finally:
        for fh in (transcript, stats_fh):
            if fh:
                fh.close()
    return 0


def cmd_bench(args) -> int:
    weights = _weights(args)
    prompts = _prompts(args, weights, args.n_prompts)
    split = _split(args)
    rows = []
    for mode in args.modes:
        rows.extend(metrics.rtt_sweep(weights, prompts, args.rtts, args.fit_rtt, mode, args.max_new,
                                      split, args.pings, args.seed))
    stem = _stem(args.out)
    metrics.write_table(rows, stem)
    plotting.plot_projection(rows, stem)
    _print_rows(rows, ["mode", "injected_rtt_ms", "rtt_measured_ms", "acceptance",
                       "measured_tok_s", "projected_tok_s", "rel_error", "fixed_overhead_ms"])
    return 0


def _corpora(args, weights) -> dict[str, list[list[int]]]:
    if not args.corpus:
        return metrics.make_corpora(args.n_prompts, 16, weights.config.vocab_size, args.seed)
    corpora = {}
    for item in args.corpus:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"corpus must be NAME=PATH, got {item!r}")
        corpora[name] = metrics.load_corpus(path)
    return corpora


def cmd_ablate(args) -> int:
    weights = _weights(args)
    rows = metrics.run_ablation(weights, _corpora(args, weights), args.ngram, args.modes, args.max_new,
                                args.server, _split(args), _lookahead(args), args.seed)
    stem = _stem(args.out)
    metrics.write_table(rows, stem)
    plotting.plot_ablation(rows, stem)
    _print_rows(rows, ["corpus", "mode", "n", "acceptance", "match_rate", "tok_s", "break_even"])
    return 0


def cmd_verify_quality(args) -> int:
    weights = _weights(args)
    prompts = _prompts(args, weights, args.n_prompts)
    report = metrics.verify_quality(weights, prompts, args.max_new, _split(args), args.server,
                                    _lookahead(args), check_f16=args.check_f16)
    for i, p in enumerate(report["prompts"]):
        verdict = "identical" if p["tokens_identical"] and p["matches_monolithic"] else "MISMATCH"
        line = (f"prompt {i}: {verdict} max_abs_logit_diff={p['max_abs_logit_diff']:.3g} "
                f"ppl_seq={p['self_ppl_sequential']:.4f} ppl_la={p['self_ppl_lookahead']:.4f}")
        if "f16_match_fraction" in p:
            line += f" f16_match={p['f16_match_fraction']:.3f}"
        print(line)
    print(f"all identical: {report['all_identical']}")
    if args.out:
        stem = _stem(args.out)
        metrics.write_table(report["prompts"], stem)
        stem.with_name(stem.name + "_summary.json").write_text(json.dumps(report, indent=2) + "\n")
    if args.dtype == "f32" and not report["all_identical"]:
        return 1
    return 0


def cmd_project(args) -> int:
    if args.mean_step is not None:
        overhead = metrics.decompose_fixed_overhead(args.mean_step, args.rtt)
        print(f"{overhead:.1f}")
        return 0
    if args.overhead is None:
        raise ConfigError("project needs --overhead (or --mean-step to decompose)")
    model = metrics.ProjectionModel(args.overhead, args.acceptance)
    print(f"{model.project(args.rtt):.1f}")
    return 0


def cmd_invert(args) -> int:
    weights = _weights(args)
    corpus = attack_corpus(weights, args.samples, seed=args.seed)
    cfg = AttackDecoderConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                              seed=args.seed)
    report = depth_sweep(weights, corpus, args.depths, cfg, seed=args.seed)
    stem = _stem(args.report)
    metrics.write_table(report.rows, stem)
    stem.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    plotting.plot_depth_sweep(report, stem)
    _print_rows(report.rows, ["depth", "top1_accuracy", "top5_accuracy", "n_train", "n_test"])
    print(f"chance top1={report.random_top1:.4g} top5={report.random_top5:.4g}")
    return 0


def audit_transcript(data: bytes, hidden_dim: int | None = None) -> tuple[list[dict], list[str]]:
    """Decode every recorded frame, check bit-exact re-encoding and the privacy rules.

    Returns per-frame summaries and a list of violations (empty when clean).
    """
    summaries, problems = [], []
    for index, (direction, raw) in enumerate(read_transcript(data)):
        if direction == "M":
            meta = json.loads(raw.decode("utf-8"))
            hidden_dim = hidden_dim or meta.get("hidden_dim")
            continue
        where = f"frame {index} ({direction})"
        try:
            frame = decode_frame(raw)
        except SplitError as exc:
            problems.append(f"{where}: does not decode: {exc}")
            continue
        if encode_frame(frame) != raw:
            problems.append(f"{where}: re-encoding is not bit-exact")
        hlen = int.from_bytes(raw[:4], "little")
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
        for key in header:
            if key not in HEADER_KEYS:
                problems.append(f"{where}: header key {key!r} is not whitelisted")
            if any(marker in key.lower() for marker in FORBIDDEN_MARKERS):
                problems.append(f"{where}: header key {key!r} looks like token or logit data")
        shape = frame.header.tensor_shape
        has_tensor = any(shape) and len(frame.tensor_bytes) > 0
        if has_tensor:
            if len(shape) != 2:
                problems.append(f"{where}: tensor rank {len(shape)} is not [seq, hidden]")
            elif hidden_dim is not None and shape[-1] != hidden_dim:
                problems.append(f"{where}: tensor width {shape[-1]} != hidden_dim {hidden_dim}")
        summaries.append({"index": index, "direction": direction, "kind": frame.header.kind,
                          "shape": list(shape), "dtype": frame.header.dtype, "bytes": len(raw)})
    if hidden_dim is None:
        problems.append("transcript has no metadata record and no --hidden-dim was given")
    return summaries, problems


def cmd_protocol_dump(args) -> int:
    path = Path(args.transcript)
    if not path.is_file():
        raise InputError(f"transcript {path} does not exist")
    summaries, problems = audit_transcript(path.read_bytes(), args.hidden_dim)
    if not args.quiet:
        for s in summaries:
            print(f"{s['index']:5d} {s['direction']} {s['kind']:<16} {s['dtype']} "
                  f"{'x'.join(map(str, s['shape']))} {s['bytes']}B")
    for p in problems:
        print(f"VIOLATION {p}")
    print(f"{len(summaries)} frames, {len(problems)} violations: "
          f"{'privacy audit PASS' if not problems else 'privacy audit FAIL'}")
    return 1 if problems else 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitf", description="Split transformer inference over a latency link.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("serve", cmd_serve, "host the middle layers over TCP")
    _add_model_args(p)
    p.add_argument("--layers", type=layer_span, default=range(2, 6), help="hosted layers START..END (end exclusive)")
    p.add_argument("--expiry", type=float, default=300.0, help="idle session lifetime in seconds")
    p.add_argument("--listen", default="tcp:127.0.0.1:9000")
    p.add_argument("--dtype", choices=("f16", "f32"), default=None, help="response dtype; default mirrors request")
    p.add_argument("--max-sessions", type=int, default=64)

    p = command("generate", cmd_generate, "generate tokens through a split pipeline")
    _add_model_args(p)
    _add_split_args(p)
    _add_decode_args(p)
    p.add_argument("--prompt", help="inline prompt, comma or space separated token ids")
    p.add_argument("--prompt-file", help="one prompt per line")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--mode", choices=("sequential", "jacobi", "lookahead"), default="sequential")
    p.add_argument("--stats-out", help="per-step JSONL stats")
    p.add_argument("--transcript", help="record every frame to this file")
    p.add_argument("--rtt-pings", type=int, default=0, help="measure RTT with this many pings first")

    p = command("bench", cmd_bench, "RTT sweep with fixed-overhead projection")
    _add_model_args(p)
    _add_split_args(p)
    p.add_argument("--prompt-file")
    p.add_argument("--n-prompts", type=int, default=2)
    p.add_argument("--rtts", type=float_list, default=[20, 40, 80, 120])
    p.add_argument("--fit-rtt", type=float, default=80.0)
    p.add_argument("--modes", type=str_list, default=["sequential"])
    p.add_argument("--max-new", type=int, default=24)
    p.add_argument("--pings", type=int, default=20)
    p.add_argument("--out", default="results/bench")

    p = command("ablate", cmd_ablate, "n-gram size by corpus ablation")
    _add_model_args(p)
    _add_split_args(p)
    _add_decode_args(p)
    p.add_argument("--corpus", action="append", help="NAME=PATH, repeatable; default: synthetic pair")
    p.add_argument("--n-prompts", type=int, default=4)
    p.add_argument("--ngram", type=int_list, default=[3, 4, 5, 6, 7])
    p.add_argument("--modes", type=str_list, default=["sequential", "lookahead"])
    p.add_argument("--max-new", type=int, default=100)
    p.add_argument("--out", default="results/ablation")

    p = command("verify-quality", cmd_verify_quality, "sequential vs lookahead vs monolithic token identity")
    _add_model_args(p)
    _add_split_args(p)
    _add_decode_args(p)
    p.add_argument("--prompt-file")
    p.add_argument("--n-prompts", type=int, default=4)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--check-f16", type=_bool, default=True)
    p.add_argument("--out")

    p = command("project", cmd_project, "throughput projection arithmetic")
    p.add_argument("--overhead", type=float, help="fixed per-step overhead in ms")
    p.add_argument("--acceptance", type=float, default=1.0)
    p.add_argument("--rtt", type=float, required=True, help="target RTT in ms")
    p.add_argument("--mean-step", type=float, help="decompose: print mean_step - rtt instead")

    p = command("invert", cmd_invert, "token-recovery attack over split depths")
    _add_model_args(p)
    p.add_argument("--depths", type=int_list, default=[1, 3, 5, 7])
    p.add_argument("--samples", type=int, default=1280)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--report", default="results/inversion")

    p = command("protocol-dump", cmd_protocol_dump, "re-verify a transcript and audit the privacy boundary")
    p.add_argument("transcript")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--quiet", action="store_true")
    return parser


def _apply_overrides(parser: argparse.ArgumentParser, argv: Sequence[str], args) -> argparse.Namespace:
    """Re-parse with config-file and environment values installed as defaults."""
    values = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    values.update(env_overrides())
    if not values:
        return args
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    defaults = {}
    for action in subparser._actions:  # noqa: SLF001
        if action.dest not in values or not action.option_strings:
            continue
        raw = values[action.dest]
        try:
            if action.type is not None:
                value = action.type(raw)
            elif isinstance(action, argparse._AppendAction):  # noqa: SLF001
                value = str_list(raw)
            else:
                value = raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {action.dest}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{action.dest} must be one of {list(action.choices)}, got {value!r}")
        defaults[action.dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            args = _apply_overrides(parser, argv, args)
        except SystemExit as exc:
            return int(exc.code or 0)
        return args.func(args)
    except SplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 1
