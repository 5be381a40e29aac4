# File: src/app/main.py
import argparse
import json
import sys
from typing import Callable, Dict, List, Optional, Type

from pydantic import ValidationError

from src.app.core.config import settings
from src.app.services.experiment_service import ExperimentService, load_experiment_config
from src.app.utils.exceptions import (
    ErrorResponse,
    NonFiniteException,
    ResourceNotFoundException,
    UnsupportedFormatException,
    ValidationException,
    generic_exception_handler,
    non_finite_exception_handler,
    resource_not_found_exception_handler,
    schema_validation_error_handler,
    unsupported_format_exception_handler,
    validation_exception_handler,
)

# Register the exception handlers, most specific first
EXCEPTION_HANDLERS: Dict[Type[BaseException], Callable[..., ErrorResponse]] = {
    ValidationError: schema_validation_error_handler,
    ValidationException: validation_exception_handler,
    ResourceNotFoundException: resource_not_found_exception_handler,
    UnsupportedFormatException: unsupported_format_exception_handler,
    NonFiniteException: non_finite_exception_handler,
    Exception: generic_exception_handler,
}


def handle_exception(exc: Exception) -> ErrorResponse:
    for exc_type in type(exc).__mro__:
        handler = EXCEPTION_HANDLERS.get(exc_type)
        if handler is not None:
            return handler(exc)
    return generic_exception_handler(exc)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment file (.json or .toml)")
    common.add_argument("--seed", type=int, help="override the config's root seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, default=settings.DEFAULT_WORKERS)

    parser = argparse.ArgumentParser(prog=settings.PROJECT_NAME, description=settings.PROJECT_DESC)
    parser.add_argument("--version", action="version", version=settings.VERSION)
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="write the synthetic corpora")
    synth.add_argument("--noise-pool", action="store_true", help="also write a synthetic noise pool")

    perturb = commands.add_parser("perturb", parents=[common], help="apply one sampled perturbation to a WAV")
    perturb.add_argument("--input", required=True)
    perturb.add_argument("--output", required=True)
    perturb.add_argument("--specs", help="JSON list of perturbation specs")

    train = commands.add_parser("train", parents=[common], help="train and evaluate a tokenizer")
    train.add_argument("--corpus", help="training manifest.jsonl instead of the synthetic corpus")

    tokenize = commands.add_parser("tokenize", parents=[common], help="tokenize WAV files")
    tokenize.add_argument("--checkpoint", required=True)
    tokenize.add_argument("inputs", nargs="+")

    evaluate = commands.add_parser("eval", parents=[common], help="robustness report")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--corpus", help="evaluation manifest.jsonl")
    evaluate.add_argument("--specs", help="JSON list of perturbation specs")

    commands.add_parser("vote-analyze", parents=[common], help="token survival under random bit flips")

    replay = commands.add_parser("replay-case", parents=[common], help="re-vote a recorded case table")
    replay.add_argument("--fixture", help="case table JSON (defaults to the bundled one)")

    params = commands.add_parser("params", parents=[common], help="voter parameter overhead")
    params.add_argument("--n", type=int, required=True)
    params.add_argument("--D", dest="hidden_dim", type=int, required=True)
    params.add_argument("--d", dest="code_dim", type=int, required=True)

    commands.add_parser("ablate", parents=[common], help="ablation variants and voter sweep")
    return parser


def run(args: argparse.Namespace) -> object:
    config = load_experiment_config(args.config) if args.config else None
    if config is not None and args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    service = ExperimentService(config, args.out, args.workers)

    if args.command == "synth":
        return service.synth(args.noise_pool)
    if args.command == "perturb":
        return service.perturb(args.input, args.output, args.specs)
    if args.command == "train":
        return service.train(args.corpus)
    if args.command == "tokenize":
        return service.tokenize(args.checkpoint, args.inputs)
    if args.command == "eval":
        return service.evaluate(args.checkpoint, args.corpus, args.specs)
    if args.command == "vote-analyze":
        return service.vote_analyze()
    if args.command == "replay-case":
        return [{**row.model_dump(), "recovered": row.recovered} for row in service.replay_case(args.fixture)]
    if args.command == "params":
        return service.params(args.n, args.hidden_dim, args.code_dim)
    if args.command == "ablate":
        return service.ablate()
    raise ValidationException(f"Unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except Exception as exc:
        code, payload = handle_exception(exc)
        print(json.dumps(payload, default=str), file=sys.stderr)
        return code
    print(json.dumps(result, default=str, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
