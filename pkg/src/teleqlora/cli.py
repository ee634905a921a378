"""Command-line pipeline: ingest -> prepare -> train -> generate/evaluate -> report.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime
divergence (training blow-up or an aborted evaluation run).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig, default_config, load_config
from .datapipe import (
    ChatSample,
    FetchError,
    ParseError,
    SourceConfig,
    apply_chat_template,
    build_samples,
    fetch_rfc,
    load_rules_config,
    load_samples,
    parse_rfc,
    save_samples,
    split_stratified,
)
from .datapipe.template import DEFAULT_EOS_TOKEN, END_MARKER, prompt_prefix
from .datapipe.tokenizer import detokenize, tokenize
from .judge import (
    ChatCompletionsClient,
    EvalAborted,
    EvalReport,
    EvalRunConfig,
    InProcessCandidate,
    MockJudge,
    evaluate_set,
    load_rubric,
)
from .lora import LoraConfig
from .model import build_model, generate
from .quant import build_nf4_codebook
from .train import DivergenceError, OptimizerConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_cfg(path: str | None) -> PipelineConfig:
    if path is None:
        return default_config()
    return load_config(path)


def _config_echo(path: str | None) -> dict:
    if path is None:
        return default_config().to_dict()
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _parse_rfc_list(value: str) -> list[int]:
    path = Path(value)
    if path.exists():
        tokens = path.read_text().split()
    else:
        tokens = [t for t in value.replace(",", " ").split() if t]
    if not tokens:
        raise UsageError("--rfc-list is empty")
    try:
        return sorted({int(t) for t in tokens})
    except ValueError as exc:
        raise UsageError(f"bad RFC number in --rfc-list: {exc}") from exc


def cmd_ingest(args) -> int:
    cfg = _load_cfg(args.config)
    numbers = _parse_rfc_list(args.rfc_list)
    taxonomy, rules = load_rules_config(cfg.data.rules_path)
    source = SourceConfig(
        base_url=cfg.data.base_url,
        mirror_dir=cfg.data.mirror_dir,
        cache_dir=cfg.data.cache_dir,
        offline=args.offline,
        request_delay_s=cfg.data.request_delay_s,
        user_agent=cfg.data.user_agent,
        refetch=args.refetch,
    )

    all_samples: list[ChatSample] = []
    failures = 0
    for number in numbers:
        try:
            raw = fetch_rfc(number, source)
            doc = parse_rfc(raw, number=number)
            doc_samples = build_samples(doc, rules, taxonomy)
        except (FetchError, ParseError) as exc:
            failures += 1
            print(f"rfc{number}: skipped ({exc})", file=sys.stderr)
            continue
        all_samples.extend(doc_samples)
        print(f"rfc{number}: {len(doc.sections)} sections -> {len(doc_samples)} samples")

    save_samples(args.out, all_samples)
    counts: dict[str, int] = {}
    for s in all_samples:
        counts[s.category] = counts.get(s.category, 0) + 1
    for slug in sorted(counts):
        print(f"{slug:<28} {counts[slug]}")
    print(f"total samples: {len(all_samples)}  documents failed: {failures}")
    if not all_samples and failures:
        return EXIT_DATA
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _load_cfg(args.config)
    samples = load_samples(args.infile)
    if not samples:
        raise ValueError("input dataset is empty")

    for i, sample in enumerate(samples, start=1):
        sample.text = apply_chat_template(sample, DEFAULT_EOS_TOKEN)
        embedded = sample.input.count(END_MARKER) + sample.output.count(END_MARKER)
        if sample.text.count(END_MARKER) - embedded != 3:
            raise ValueError(f"template marker invariant violated at line {i}")

    test_frac = args.test_frac if args.test_frac is not None else cfg.data.test_frac
    seed = args.seed if args.seed is not None else cfg.data.split_seed
    train_set, test_set = split_stratified(samples, test_frac, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_samples(out / "train.jsonl", train_set)
    save_samples(out / "test.jsonl", test_set)
    print(f"train: {len(train_set)}  test: {len(test_set)}")
    return EXIT_OK


def _build_training_model(cfg: PipelineConfig):
    model = build_model(cfg.model)
    if cfg.train.quantize_base:
        model.quantize_base(build_nf4_codebook(), cfg.train.quant_block_size)
    model.attach_adapters(
        cfg.train.lora_rank, cfg.train.lora_alpha, cfg.train.lora_dropout, cfg.train.seed
    )
    return model


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    samples = load_samples(args.infile)
    model = _build_training_model(cfg)

    epochs = args.epochs if args.epochs is not None else cfg.train.epochs
    opt_cfg = OptimizerConfig(
        peak_lr=cfg.train.peak_lr,
        weight_decay=cfg.train.weight_decay,
        beta1=cfg.train.beta1,
        beta2=cfg.train.beta2,
        eps=cfg.train.eps,
        warmup_frac=cfg.train.warmup_frac,
        micro_batch=cfg.train.micro_batch,
        grad_accum=cfg.train.grad_accum,
        max_grad_norm=cfg.train.max_grad_norm,
        epochs=epochs,
        seed=cfg.train.seed,
    )

    def write_outputs(report):
        if args.report is not None:
            Path(args.report).parent.mkdir(parents=True, exist_ok=True)
            Path(args.report).write_text(report.to_json() + "\n")
            Path(str(args.report) + ".txt").write_text(report.loss_table() + "\n")

    try:
        report = train(model, samples, opt_cfg)
    except DivergenceError as exc:
        # adapters were restored to the last good step inside train()
        save_checkpoint(args.out, model, _config_echo(args.config))
        write_outputs(exc.report)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    if epochs > 0:
        save_checkpoint(args.out, model, _config_echo(args.config))
        print(f"checkpoint written to {args.out}")
    else:
        print("zero epochs requested: no checkpoint written")
    write_outputs(report)
    if report.final_loss is not None:
        print(
            f"steps {len(report.step_losses)}  final loss {report.final_loss:.4f}  "
            f"final accuracy {report.final_accuracy:.4f}"
        )
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_cfg(args.config)
    model, _ = load_checkpoint(args.checkpoint)
    temperature = args.temperature if args.temperature is not None else cfg.generation.temperature
    top_p = args.top_p if args.top_p is not None else cfg.generation.top_p
    max_new = args.max_new if args.max_new is not None else cfg.generation.max_new
    seed = args.seed if args.seed is not None else cfg.generation.seed

    prompt_ids = tokenize(prompt_prefix(args.prompt))
    window = model.cfg.max_seq - max_new
    prompt_ids = prompt_ids[-max(1, window):]
    out = generate(model, prompt_ids, temperature, top_p, max_new, seed=seed)
    print(detokenize(out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args.config)
    model, _ = load_checkpoint(args.checkpoint)
    test_set = load_samples(args.test)
    if args.limit is not None:
        test_set = test_set[: args.limit]
    rubric = load_rubric(cfg.judge.rubric_path)

    mock_path = args.mock_judge if args.mock_judge is not None else cfg.judge.mock_verdicts
    if mock_path is not None:
        judge = MockJudge(mock_path)
    elif cfg.judge.judge_endpoint:
        judge = ChatCompletionsClient(
            cfg.judge.judge_endpoint,
            cfg.judge.judge_model,
            temperature=cfg.judge.judge_temperature,
            max_retries=cfg.judge.max_retries,
            backoff_s=cfg.judge.backoff_s,
        )
    else:
        raise UsageError("no judge endpoint configured and no mock verdicts given")

    run_cfg = EvalRunConfig(
        temperature=cfg.generation.temperature,
        top_p=cfg.generation.top_p,
        max_new=cfg.judge.max_new,
        seed=cfg.generation.seed,
        concurrency=cfg.judge.concurrency,
    )
    candidate = InProcessCandidate(model, run_cfg)

    def write_report(report):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")

    try:
        report = evaluate_set(test_set, candidate, judge, rubric, run_cfg)
    except EvalAborted as exc:
        write_report(exc.report)
        print(f"evaluation aborted: {exc} (partial report saved)", file=sys.stderr)
        return EXIT_DIVERGED
    write_report(report)
    print(f"evaluated {report.evaluated}/{report.total}  failures {len(report.failures)}")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.infile, encoding="utf-8") as fh:
        data = json.load(fh)
    report = EvalReport(**data)
    table = report.render_table()
    print(table)
    if args.out is not None:
        Path(args.out).write_text(table + "\n")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="teleqlora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="fetch, parse, and categorize RFCs into a raw dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--rfc-list", required=True, help="comma-separated numbers or a file of numbers")
    p.add_argument("--out", required=True)
    p.add_argument("--offline", action="store_true")
    p.add_argument("--refetch", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("prepare", help="render templates and produce a stratified split")
    p.add_argument("--config", default=None)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True, help="output directory for train.jsonl/test.jsonl")
    p.add_argument("--test-frac", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fine-tune adapters on a prepared dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--report", default=None, help="write TrainReport JSON (and .txt table) here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample a response for a prompt")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--max-new", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="judge model responses over a test set")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--mock-judge", default=None, help="JSONL of scripted verdicts")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render an evaluation report as a table")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FetchError, ParseError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
