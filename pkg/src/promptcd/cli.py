"""Command line: ``promptcd {decode,probe,bench,carve,scenario}``.

Exit codes: 0 success, 2 usage or configuration error, 3 backend or
protocol failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from promptcd import attention as att
from promptcd.backends import (
    BackendError,
    LogitServerEndpoint,
    TableModelSpec,
    conflict_scenario,
    http_provider,
    table_provider,
)
from promptcd.decoder import (
    DEFAULT_APC_RATIO,
    DEFAULT_GAMMA,
    DEFAULT_TEMPLATE,
    ContrastiveConfig,
    DecodeTrace,
    decode,
    stop_ids,
)
from promptcd.distribution import InvalidInputError, PolarityPromptPair
from promptcd.probe import (
    CaptureResult,
    Diagnosis,
    aggregate_metrics,
    capture,
    classify_stubborn,
    load_records,
    rank_histogram,
    score_response,
)

logger = logging.getLogger("promptcd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3

TIMEOUT_ENV = "PROMPTCD_HTTP_TIMEOUT_MS"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    backend_kind: str
    backend_target: str
    template: str
    contrastive: ContrastiveConfig


def parse_backend(value: str) -> tuple[str, str]:
    kind, sep, target = value.partition(":")
    if not sep or kind not in ("table", "http") or not target:
        raise ConfigError(f"--backend must be table:PATH or http:URL, got {value!r}")
    return kind, target


def open_backend(value: str, retries: int = 2):
    kind, target = parse_backend(value)
    if kind == "table":
        try:
            return table_provider(target)
        except OSError as exc:
            raise ConfigError(f"cannot read table spec {target}: {exc}") from exc
        except (InvalidInputError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad table spec {target}: {exc}") from exc
    timeout = float(os.environ.get(TIMEOUT_ENV, 30_000))
    return http_provider(LogitServerEndpoint(target, timeout_ms=timeout, retries=retries))


def _layers(value: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {value!r}") from None
    return lo, hi


def _size(value: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in value.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {value!r}") from None
    return w, h


def _sweep(value: str) -> list[float]:
    try:
        return [float(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {value!r}") from None


# --------------------------------------------------------------------------
# shared decoding options
# --------------------------------------------------------------------------


def _add_decoding_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="table:SPEC.json or http:BASE_URL")
    p.add_argument("--positive", help="positive (behavior-encouraging) prompt")
    p.add_argument("--negative", help="negative (behavior-suppressing) prompt")
    p.add_argument("--template", default=DEFAULT_TEMPLATE,
                   help="prompt layout with {prompt}, {question} and optional {context}")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA, help="contrastive coefficient")
    p.add_argument("--apc", type=float, default=DEFAULT_APC_RATIO, help="plausibility ratio in (0, 1]")
    p.add_argument("--no-apc", action="store_true", help="disable the plausibility head mask")
    p.add_argument("--max-tokens", type=int, default=32)
    p.add_argument("--strategy", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stop", action="append", default=None,
                   help="stop token surface (repeatable); default <eos> when present")
    p.add_argument("--retries", type=int, default=2, help="HTTP retries per request")


def _run_config(args, provider) -> RunConfig:
    if not args.backend:
        raise ConfigError("--backend is required")
    if "{question}" not in args.template:
        raise ConfigError("--template must contain {question}")
    vocab = provider.vocabulary()
    stops = args.stop if args.stop is not None else ["<eos>"]
    try:
        cfg = ContrastiveConfig(
            gamma=args.gamma,
            apc_ratio=args.apc,
            max_tokens=args.max_tokens,
            strategy=args.strategy,
            seed=args.seed,
            stop_tokens=stop_ids(vocab.tokens, stops),
            use_apc=not args.no_apc,
        )
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    kind, target = parse_backend(args.backend)
    return RunConfig(kind, target, args.template, cfg)


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_decode(args) -> int:
    _require(args, "backend", "positive", "negative", "question")
    provider = open_backend(args.backend, args.retries)
    run = _run_config(args, provider)
    try:
        pair = PolarityPromptPair(args.positive, args.negative, args.question)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        result = decode(pair, provider, run.contrastive, template=run.template,
                        context=args.context or "", vanilla=args.vanilla)
    except BackendError as exc:
        if args.trace and exc.partial_trace is not None:
            _write_trace(args.trace, exc.partial_trace, args.top_m)
        raise
    if args.trace:
        _write_trace(args.trace, result.trace, args.top_m)
    if args.json:
        print(json.dumps({"text": result.text, "ids": result.ids, "stopped": result.stopped}))
    else:
        print(result.text)
    return EXIT_OK


def _write_trace(path, trace: DecodeTrace, top_m) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        trace.write_jsonl(fh, top_m)


def _trace_rows(trace: DecodeTrace, source: str):
    if source == "positive":
        return [s.positive for s in trace]
    if source == "negative":
        if any(s.negative is None for s in trace):
            raise ConfigError("trace has no negative distributions (vanilla run)")
        return [s.negative for s in trace]
    return [s.adjusted_log() for s in trace]


def probe_trace(trace: DecodeTrace, vocab, record, source: str = "adjusted") -> dict:
    result = capture(_trace_rows(trace, source), vocab.tokens,
                     record.answer_context, record.answer_parametric)
    return {"id": record.id, **result.to_json(), "diagnosis": classify_stubborn(result).value}


def cmd_probe(args) -> int:
    _require(args, "backend", "dataset")
    provider = open_backend(args.backend)
    vocab = provider.vocabulary()
    try:
        records = load_records(args.dataset)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc
    if not records:
        raise ConfigError("dataset is empty")
    traces = _resolve_traces(args, records)
    results = []
    for record, path in zip(records, traces):
        try:
            with open(path, encoding="utf-8") as fh:
                trace = DecodeTrace.read_jsonl(fh, vocab.size)
        except OSError as exc:
            raise ConfigError(f"cannot read trace {path}: {exc}") from exc
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed trace {path}: {exc}") from exc
        if len(trace) == 0:
            raise ConfigError(f"trace {path} is empty")
        results.append(probe_trace(trace, vocab, record, args.source))
    report = _probe_report(results)
    _emit(report, args.out)
    return EXIT_OK


def _resolve_traces(args, records) -> list[Path]:
    if args.trace_dir:
        return [Path(args.trace_dir) / f"{r.id}{args.trace_suffix}" for r in records]
    traces = args.trace or []
    if len(traces) != len(records):
        raise ConfigError(f"got {len(traces)} trace file(s) for {len(records)} record(s)")
    return [Path(t) for t in traces]


def _probe_report(results: list[dict]) -> dict:
    caps = [CaptureResult(**{k: r[k] for k in ("p_cont", "p_para", "rank_cont", "rank_para", "position")})
            for r in results]
    return {
        "results": results,
        "histogram": rank_histogram(caps),
        "histogram_bins": "convention: 1, 2-5, 6-20, >20",
        "stubborn_count": sum(r["diagnosis"] == Diagnosis.STUBBORN.value for r in results),
        "flipped_count": sum(r["diagnosis"] == Diagnosis.FLIPPED.value for r in results),
    }


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _bench_one(record, provider, run: RunConfig, args, vocab) -> dict:
    pair = PolarityPromptPair(args.positive, args.negative, record.question)
    row = {"id": record.id}
    for mode, vanilla in (("vanilla", True), ("promptcd", False)):
        result = decode(pair, provider, run.contrastive, template=run.template,
                        context=record.context, vanilla=vanilla)
        hits_c, hits_p = score_response(result.text, record)
        diag = probe_trace(result.trace, vocab, record)
        row[mode] = {
            "text": result.text,
            "hits_context": hits_c,
            "hits_parametric": hits_p,
            "diagnosis": diag["diagnosis"],
            "rank_cont": diag["rank_cont"],
        }
        if args.trace_dir:
            with open(Path(args.trace_dir) / f"{record.id}.{mode}.jsonl", "w", encoding="utf-8") as fh:
                result.trace.write_jsonl(fh, args.top_m)
    return row


def cmd_bench(args) -> int:
    _require(args, "backend", "positive", "negative", "dataset")
    if args.positive == args.negative:
        raise ConfigError("positive and negative prompts must differ")
    provider = open_backend(args.backend, args.retries)
    run = _run_config(args, provider)
    vocab = provider.vocabulary()
    try:
        records = load_records(args.dataset)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc
    if not records:
        raise ConfigError("dataset is empty")
    if args.trace_dir:
        Path(args.trace_dir).mkdir(parents=True, exist_ok=True)

    def work(record):
        try:
            return _bench_one(record, provider, run, args, vocab)
        except (BackendError, InvalidInputError) as exc:
            logger.warning("record %s skipped: %s", record.id, exc)
            return {"id": record.id, "error": str(exc)}

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(work, records))

    scored = [r for r in rows if "error" not in r]
    report: dict = {
        "n": len(records),
        "scored": len(scored),
        "skipped": len(rows) - len(scored),
        "records": rows,
    }
    for mode in ("vanilla", "promptcd"):
        if scored:
            metrics = aggregate_metrics([(r[mode]["hits_context"], r[mode]["hits_parametric"]) for r in scored])
            report[mode] = metrics.to_json() | {
                "stubborn_count": sum(r[mode]["diagnosis"] == Diagnosis.STUBBORN.value for r in scored)
            }
        else:
            report[mode] = None
    _emit(report, args.out)
    return EXIT_OK


def _carve_one(pos, neg, img, fusion, spec, out_png: Path) -> dict:
    refined, diag = att.carve(pos, neg, img, fusion, spec)
    att.save_image(refined, out_png)
    diag["output"] = str(out_png)
    return diag


def cmd_carve(args) -> int:
    _require(args, "pos", "neg", "image", "out")
    try:
        pos = att.AttentionStack.load(args.pos)
        neg = att.AttentionStack.load(args.neg)
        img = att.load_image(args.image)
    except OSError as exc:
        raise ConfigError(f"cannot read input: {exc}") from exc
    if pos.data.shape != neg.data.shape:
        raise ConfigError(f"attention shapes differ: {pos.data.shape} vs {neg.data.shape}")
    lo, hi = args.layers
    try:
        fusion = att.FusionSpec.ramp(lo, hi)
        if hi >= pos.layers:
            raise InvalidInputError(f"layers {lo}:{hi} outside stack of {pos.layers} layers")
        width, height = args.size if args.size else (img.shape[1], img.shape[0])
        ps = args.sweep if args.sweep else [args.p]
        specs = [
            att.RefineSpec(top_p=p, k_regions=args.k, epsilon=args.epsilon, pad=args.pad,
                           target_w=width, target_h=height, threshold_mode=args.threshold_mode)
            for p in ps
        ]
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc

    out = Path(args.out)
    diagnostics = []
    for spec in specs:
        target = out if not args.sweep else out.with_name(f"{out.stem}_p{spec.top_p:g}{out.suffix or '.png'}")
        try:
            diagnostics.append(_carve_one(pos, neg, img, fusion, spec, target))
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
    doc = diagnostics if args.sweep else diagnostics[0]
    diag_path = args.diagnostics or str(out.with_suffix(".json"))
    Path(diag_path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_scenario(args) -> int:
    _require(args, "vocab", "cont", "para", "out")
    vocab = list(args.vocab)
    try:
        eos = None
        if args.eos:
            if args.eos not in vocab:
                vocab.append(args.eos)
            eos = vocab.index(args.eos)
        spec = conflict_scenario(vocab.index(args.cont), vocab.index(args.para),
                                 args.pos_margin, args.neg_margin, vocab,
                                 positive_key=args.positive_key, negative_key=args.negative_key,
                                 eos_token=eos)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    spec.save(args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptcd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults (keys are option names)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="contrastive decode one question")
    _add_decoding_options(p)
    p.add_argument("--question")
    p.add_argument("--context", default="")
    p.add_argument("--vanilla", action="store_true", help="positive-prompt-only decoding")
    p.add_argument("--trace", help="write per-step trace JSONL here")
    p.add_argument("--top-m", type=int, default=None, help="store only top-M logits per step")
    p.add_argument("--json", action="store_true", help="print a JSON result instead of plain text")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("probe", help="knowledge token capturing over decode traces")
    p.add_argument("--backend", help="backend whose vocabulary decodes the traces")
    p.add_argument("--dataset", help="conflict records JSONL")
    p.add_argument("--trace", action="append", help="trace JSONL, one per record, in order")
    p.add_argument("--trace-dir", help="directory holding <id><suffix> traces")
    p.add_argument("--trace-suffix", default=".jsonl")
    p.add_argument("--source", choices=("adjusted", "positive", "negative"), default="adjusted",
                   help="which per-step distribution to scan")
    p.add_argument("--out", help="write report JSON here instead of stdout")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", help="vanilla vs contrastive decoding over a conflict dataset")
    _add_decoding_options(p)
    p.add_argument("--dataset")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace-dir", help="write <id>.vanilla.jsonl / <id>.promptcd.jsonl here")
    p.add_argument("--top-m", type=int, default=None)
    p.add_argument("--out", help="write report JSON here instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("carve", help="contrastive-attention crop of an image")
    p.add_argument("--pos", help="positive-prompt attention (JSON or raw ATTN)")
    p.add_argument("--neg", help="negative-prompt attention (JSON or raw ATTN)")
    p.add_argument("--image", help="input PNG")
    p.add_argument("--out", help="output PNG")
    p.add_argument("--diagnostics", help="diagnostics JSON path (default: next to --out)")
    p.add_argument("--layers", type=_layers, default=att.DEFAULT_LAYERS, help="fused layer range LO:HI")
    p.add_argument("--p", type=float, default=att.DEFAULT_TOP_P, help="retained proportion")
    p.add_argument("--k", type=int, default=att.DEFAULT_K, help="regions to keep")
    p.add_argument("--epsilon", type=float, default=att.DEFAULT_EPSILON)
    p.add_argument("--pad", type=int, default=0)
    p.add_argument("--size", type=_size, default=None, help="output WxH (default: input size)")
    p.add_argument("--sweep", type=_sweep, default=None, help="comma-separated p values")
    p.add_argument("--threshold-mode", choices=("proportion", "value"), default="proportion")
    p.set_defaults(func=cmd_carve)

    p = sub.add_parser("scenario", help="write a synthetic knowledge-conflict table spec")
    p.add_argument("--vocab", type=lambda s: s.split(","), help="comma-separated token surfaces")
    p.add_argument("--cont", help="contextual answer token")
    p.add_argument("--para", help="parametric answer token")
    p.add_argument("--pos-margin", type=float, default=0.516)
    p.add_argument("--neg-margin", type=float, default=3.0)
    p.add_argument("--positive-key", default="<pos>")
    p.add_argument("--negative-key", default="<neg>")
    p.add_argument("--eos", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scenario)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {known.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in doc.items()}
    for action in parser._subparsers._group_actions:
        for subparser in action.choices.values():
            dests = {a.dest for a in subparser._actions}
            subparser.set_defaults(**{k: v for k, v in defaults.items() if k in dests})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except ConfigError as exc:
        print(f"promptcd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        parser.print_usage(sys.stderr)
        print(f"promptcd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"promptcd: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
