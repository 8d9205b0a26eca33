import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .comparison import compare_runs
from .concept_graph import (
    annotate_samples,
    estimate_cost,
    load_annotations,
    micro_accuracy_from_counts,
    oracle_graph,
    score_graphs,
)
from .config import RunConfig, load_config
from .dataset import TEST_FILE_NAME, generate_dataset, load_samples, train_file_name
from .errors import ConceptDLMError, ConfigError, ContractError
from .logger import logger, set_verbosity
from .model import decode, load_checkpoint
from .provider import MockProvider, make_provider
from .supervision import (
    build_corpus_vocab,
    build_sample_masks,
    detokenize,
    encode_prompt,
    load_corpus_vocab,
    mask_file_name,
    save_masks,
)
from .training import evaluate, extract_answer, save_report, train
from .visualize import export_attention

DEFAULT_DATA_DIR = "./data"
DEFAULT_OUTPUT_DIR = "./output"
HANDLED_ERRORS = (ConceptDLMError, FileNotFoundError, FileExistsError, IndexError)


def verify_file(string):
    if Path(string).is_file():
        return string
    else:
        raise FileNotFoundError(string)


def emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, default=str))


def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = generate_dataset(
        Path(args.data_dir),
        n_train=config.data.n_train,
        n_test=config.data.n_test,
        modes=config.data.modes,
        seed=config.data.seed,
    )
    vocab = build_corpus_vocab(Path(args.data_dir))
    emit({"files": manifest["files"], "tokenizer_hash": vocab.hash})


def cmd_build_masks(args: argparse.Namespace, config: RunConfig) -> None:
    data_dir = Path(args.data_dir)
    mode = args.mode or config.train.mode
    samples = load_samples(data_dir / train_file_name(mode))
    if args.source == "annotations":
        if args.annotations is None:
            raise FileNotFoundError("--annotations is required with --source annotations")
        graphs = load_annotations(Path(args.annotations))
    else:
        graphs = {s.id: oracle_graph(s) for s in samples}
    vocab = load_corpus_vocab(data_dir)
    masks, failures = build_sample_masks(
        samples, graphs, vocab, config.align.convention, config.train.response_pad
    )
    path = Path(args.output) if args.output else data_dir / mask_file_name(mode, config.align.convention)
    save_masks(masks, path)
    emit({"masks": str(path), "n_masks": len(masks), "n_span_failures": len(failures)})


def cmd_annotate(args: argparse.Namespace, config: RunConfig) -> None:
    data_dir = Path(args.data_dir)
    mode = args.mode or config.train.mode
    samples = load_samples(data_dir / train_file_name(mode))
    if args.n_samples is not None:
        samples = samples[: args.n_samples]
    if args.replay is not None:
        provider = MockProvider([Path(args.replay).read_text(encoding="utf-8")])
    else:
        provider = make_provider(config.provider)
    output = Path(args.output) if args.output else data_dir / f"annotations_{mode}.jsonl"
    summary = annotate_samples(samples, provider, output, n_jobs=config.provider.n_jobs)
    emit({"annotations": str(output), **summary})


def cmd_score_graphs(args: argparse.Namespace, config: RunConfig) -> None:
    with open(args.input, "r") as fp:
        try:
            document = json.load(fp)
        except json.JSONDecodeError as e:
            raise ConfigError(f"could not parse {args.input}: {e}") from e
    if not isinstance(document, dict):
        raise ContractError("score input must be a JSON object")
    if "instances" in document:
        emit(dict(score_graphs(document["instances"])))
    elif "counts" in document:
        emit({"micro": micro_accuracy_from_counts(document["counts"])})
    else:
        raise ContractError('score input needs an "instances" or a "counts" key')


def cmd_estimate_cost(args: argparse.Namespace, config: RunConfig) -> None:
    cost = estimate_cost(args.t_in, args.t_out, args.p_in, args.p_out, args.avg_len, args.currency_factor)
    print(f"{cost:.2f}")


def cmd_train(args: argparse.Namespace, config: RunConfig) -> None:
    run = train(
        config,
        Path(args.data_dir),
        Path(args.output_dir),
        run_id=args.run_id,
        masks_path=Path(args.masks) if args.masks else None,
    )
    emit({"run_id": run.run_id, "run_dir": run.run_dir, "checkpoint": run.checkpoints[-1]})


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> None:
    data_dir = Path(args.data_dir)
    test_file = Path(args.test_file) if args.test_file else data_dir / TEST_FILE_NAME
    report = evaluate(Path(args.checkpoint), test_file, load_corpus_vocab(data_dir), config.eval)
    if args.report:
        save_report(report, Path(args.report))
    emit({k: v for k, v in report.items() if k != "records"})


def cmd_decode(args: argparse.Namespace, config: RunConfig) -> None:
    vocab = load_corpus_vocab(Path(args.data_dir))
    checkpoint = load_checkpoint(Path(args.checkpoint), vocab.hash)
    prompt = encode_prompt(args.question, vocab)
    generated = decode(
        checkpoint.params,
        checkpoint.config,
        prompt.ids,
        config.eval.gen_len,
        config.eval.block_len,
        config.eval.steps_per_block,
    )
    text = detokenize(generated, vocab, skip_special=True)
    emit({"text": text, "answer": extract_answer(text)})


def cmd_viz(args: argparse.Namespace, config: RunConfig) -> None:
    data_dir = Path(args.data_dir)
    samples = load_samples(Path(args.samples) if args.samples else data_dir / TEST_FILE_NAME)
    if args.sample_id is None:
        sample = samples[0]
    else:
        matches = [s for s in samples if s.id == args.sample_id]
        if not matches:
            raise IndexError(f"no sample with id {args.sample_id}")
        sample = matches[0]
    result = export_attention(
        Path(args.checkpoint),
        sample,
        load_corpus_vocab(data_dir),
        Path(args.output_dir),
        layers=args.layers,
        align=config.align,
        response_pad=config.train.response_pad,
        render=not args.no_render,
    )
    emit(dict(result))


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> None:
    result = compare_runs(config, Path(args.data_dir), Path(args.output_dir), n_jobs=args.n_jobs)
    print(result["summary"].to_string(index=False))
    emit({"curves": result["curves_path"], "summary": result["summary_path"]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser("conceptdlm")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="Relative path to a TOML or JSON run config. Defaults are used if omitted.",
        default=None,
        type=verify_file,
    )
    common.add_argument(
        "--set",
        help="Override a config value, e.g. --set align.enabled=false. Repeatable.",
        action="append",
        default=[],
        dest="overrides",
        metavar="SECTION.KEY=VALUE",
    )
    common.add_argument("--verbose", help="Log debug messages.", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument(
        "--data-dir",
        help=f"Directory of the generated corpus. Defaults to {DEFAULT_DATA_DIR}.",
        default=DEFAULT_DATA_DIR,
    )

    output = argparse.ArgumentParser(add_help=False)
    output.add_argument(
        "--output-dir",
        help=f"Relative path to output directory for the results. Defaults to {DEFAULT_OUTPUT_DIR}.",
        default=DEFAULT_OUTPUT_DIR,
    )

    checkpoint = argparse.ArgumentParser(add_help=False)
    checkpoint.add_argument("--checkpoint", help="Model checkpoint (.npz).", required=True, type=verify_file)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common, data], help="Generate the synthetic corpus.")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("build-masks", parents=[common, data], help="Build supervision masks.")
    p.add_argument("--source", choices=["oracle", "annotations"], default="oracle")
    p.add_argument("--annotations", help="Annotation JSONL written by annotate.", type=verify_file)
    p.add_argument("--mode", help="Training mode; train.mode by default.")
    p.add_argument("--output", help="Mask file; named after mode and convention by default.")
    p.set_defaults(handler=cmd_build_masks)

    p = sub.add_parser("annotate", parents=[common, data], help="Annotate concept graphs with the teacher.")
    p.add_argument("--mode", help="Training mode; train.mode by default.")
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--output", help="Annotation JSONL path.")
    p.add_argument("--replay", help="Replay this reply instead of calling the endpoint.", type=verify_file)
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("score-graphs", parents=[common], help="Aggregate human judgments of graphs.")
    p.add_argument("--input", required=True, type=verify_file)
    p.set_defaults(handler=cmd_score_graphs)

    p = sub.add_parser("estimate-cost", parents=[common], help="Annotation cost per million data tokens.")
    p.add_argument("--t-in", type=float, required=True)
    p.add_argument("--t-out", type=float, required=True)
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--avg-len", type=float, required=True)
    p.add_argument("--currency-factor", type=float, default=1.0)
    p.set_defaults(handler=cmd_estimate_cost)

    p = sub.add_parser("train", parents=[common, data, output], help="Train a model.")
    p.add_argument("--run-id", default=None)
    p.add_argument("--masks", help="Mask file to use instead of the default one.", type=verify_file)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common, data, checkpoint], help="Evaluate a checkpoint.")
    p.add_argument("--test-file", type=verify_file)
    p.add_argument("--report", help="Write the full report, records included, to this JSON file.")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("decode", parents=[common, data, checkpoint], help="Answer one question.")
    p.add_argument("--question", required=True)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("viz", parents=[common, data, output, checkpoint], help="Export attention maps.")
    p.add_argument("--samples", help="Sample file; the test file by default.", type=verify_file)
    p.add_argument("--sample-id", default=None)
    p.add_argument("--layers", type=int, nargs="+", default=None)
    p.add_argument("--no-render", action="store_true")
    p.set_defaults(handler=cmd_viz)

    p = sub.add_parser("compare", parents=[common, data, output], help="Compare aligned and unaligned runs.")
    p.add_argument("--n-jobs", type=int, default=None)
    p.set_defaults(handler=cmd_compare)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand and return its exit code.

    Handled failures are reported as one JSON line on stderr, e.g.
    ``{"error": "StalenessError", "reason": "...", "command": "train"}``,
    with exit code 1.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except FileNotFoundError as e:
        command = next((a for a in (argv or sys.argv[1:]) if not a.startswith("-")), "")
        report_error(e, command)
        return 1
    set_verbosity(args.verbose)
    logger.debug(f"Parsed arguments: {args}")

    handler: Callable[[argparse.Namespace, RunConfig], None] = args.handler
    try:
        config = load_config(Path(args.config) if args.config else None, args.overrides)
        handler(args, config)
    except HANDLED_ERRORS as e:
        report_error(e, args.command)
        return 1
    return 0


def report_error(error: Exception, command: str) -> None:
    print(
        json.dumps({"error": type(error).__name__, "reason": str(error), "command": command}),
        file=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run_cli(argv))
