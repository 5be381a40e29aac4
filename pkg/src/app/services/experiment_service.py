# File: src/app/services/experiment_service.py
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from slugify import slugify

from src.app.core.logger import create_logger
from src.app.core.seeding import derive_seed, make_rng
from src.app.models.tokenizer import TokenizerModel
from src.app.schemas.analysis import CaseReplayRow
from src.app.schemas.experiment import ExperimentConfig, VoteAnalysisConfig
from src.app.schemas.metrics import RobustnessReport
from src.app.schemas.perturbation import (
    NOISE_KINDS,
    PerturbationSpec,
    default_eval_suite,
    default_training_specs,
)
from src.app.schemas.signal import Utterance
from src.app.schemas.training import HISTORY_FIELDS, EpochRecord, NoiseAwareConfig
from src.app.services.metrics_service import eval_robustness, ued_table_row, write_report
from src.app.services.noise_service import (
    load_perturbation_specs,
    measured_snr_db,
    perturb as apply_perturbation,
    synth_noise_pool,
)
from src.app.services.signal_service import load_wav, read_manifest, save_wav, synth_corpus, write_corpus
from src.app.services.training_service import TrainingService, tokenize as tokenize_waveform
from src.app.services.vote_analysis_service import (
    load_case_table,
    overhead_table,
    replay_case as replay_case_table,
    survival_table,
)
from src.app.utils.exceptions import ResourceNotFoundException, UnsupportedFormatException, ValidationException
from src.app.utils.helpers import (
    collect_versions,
    config_hash,
    utc_timestamp,
    write_csv,
    write_json,
    write_jsonl,
)

logger = create_logger("experiment", "experiment_service.log")

PathLike = Union[str, Path]

CHECKPOINT_NAME = "model.json"
SUMMARY_FIELDS = ["variant", "n_branches", "n_seeds", "mean_ued", "std_ued", "clean_frame_error_rate"]


def input_ids(paths: Sequence[PathLike]) -> List[str]:
    """Input paths relative to their common directory, suffix dropped; ids must be unique."""
    if not paths:
        return []
    resolved = [Path(p).resolve() for p in paths]
    root = Path(os.path.commonpath([p.parent for p in resolved]))
    ids = [p.relative_to(root).with_suffix("").as_posix() for p in resolved]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ValidationException(f"Duplicate input ids: {duplicates}")
    return ids


def load_experiment_config(path: PathLike) -> ExperimentConfig:
    """
    Read a JSON or TOML experiment file. Relative paths inside it are resolved
    against the file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ResourceNotFoundException(f"Config file not found: {path}")

    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            raw = tomllib.loads(text)
        elif path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raise UnsupportedFormatException(f"Config must be .json or .toml, got {path.name}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ValidationException(f"Could not parse {path}: {exc}")

    base = path.parent
    for key in ("noise_pool", "ood_noise_pool", "output_dir"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    for spec in list(raw.get("eval_suite") or []) + list((raw.get("noise_aware") or {}).get("spec_set") or []):
        if spec.get("noise_pool") and not Path(spec["noise_pool"]).is_absolute():
            spec["noise_pool"] = str(base / spec["noise_pool"])

    return ExperimentConfig.model_validate(raw)


class ExperimentService:
    """
    Runs one CLI command end to end and leaves a manifest.json next to its
    outputs.
    """

    def __init__(self, config: Optional[ExperimentConfig], out_dir: Optional[PathLike] = None, workers: int = 1):
        self.config = config
        default_out = config.output_dir if config is not None else Path("runs")
        self.out_dir = Path(out_dir) if out_dir is not None else Path(default_out)
        self.workers = max(1, workers)

    def require_config(self, command: str) -> ExperimentConfig:
        if self.config is None:
            raise ValidationException(f"`{command}` needs --config.")
        return self.config

    @property
    def seed(self) -> int:
        return self.config.seed if self.config is not None else 0

    def _run(self, command: str, out_dir: Path, args: Dict[str, Any], body: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
        started = utc_timestamp()
        logger.info(f"{command}: writing to {out_dir}")
        try:
            outputs = body()
        except Exception as exc:
            logger.error(f"{command} failed: {exc}")
            raise
        write_json(
            out_dir / "manifest.json",
            {
                "command": command,
                "config_hash": config_hash({"config": self.config, "args": args}),
                "seed": self.seed,
                "args": args,
                "versions": collect_versions(),
                "started_at": started,
                "finished_at": utc_timestamp(),
                "outputs": outputs,
            },
        )
        return outputs

    # corpus and noise ---------------------------------------------------

    def corpora(self, config: ExperimentConfig) -> Tuple[List[Utterance], List[Utterance]]:
        """Training and held-out corpora, each from its own derived seed."""
        train_spec = config.corpus.model_copy(update={"seed": derive_seed(config.seed, "corpus")})
        eval_spec = config.corpus.model_copy(
            update={"seed": derive_seed(config.seed, "corpus/eval"), "n_utterances": config.n_eval_utterances}
        )
        train = synth_corpus(train_spec, config.features)
        held_out = [
            u.model_copy(update={"utterance_id": f"eval-{u.utterance_id}"})
            for u in synth_corpus(eval_spec, config.features)
        ]
        return train, held_out

    def noise_pools(self, config: ExperimentConfig, root: Path) -> Tuple[Optional[Path], Optional[Path]]:
        if config.synth_noise_pool:
            dirs = synth_noise_pool(
                root / "noise",
                config.noise_clips_per_family,
                derive_seed(config.seed, "noise/pool"),
                config.corpus.sample_rate_hz,
            )
            return dirs["train"], dirs["ood"]
        return config.noise_pool, config.ood_noise_pool

    def training_specs(self, config: ExperimentConfig, pool: Optional[Path]) -> NoiseAwareConfig:
        if "spec_set" in config.noise_aware.model_fields_set or pool is None:
            return config.noise_aware
        return config.noise_aware.model_copy(update={"spec_set": default_training_specs(pool)})

    def eval_suite(self, config: ExperimentConfig, pool: Optional[Path], ood_pool: Optional[Path]) -> List[PerturbationSpec]:
        return list(config.eval_suite) if config.eval_suite is not None else default_eval_suite(pool, ood_pool)

    # commands ------------------------------------------------------------

    def synth(self, with_noise_pool: bool = False) -> Dict[str, Any]:
        config = self.require_config("synth")
        out_dir = self.out_dir

        def body():
            train, held_out = self.corpora(config)
            outputs = {
                "train_manifest": write_corpus(train, out_dir / "corpus"),
                "eval_manifest": write_corpus(held_out, out_dir / "eval_corpus"),
            }
            if with_noise_pool or config.synth_noise_pool:
                dirs = synth_noise_pool(
                    out_dir / "noise",
                    config.noise_clips_per_family,
                    derive_seed(config.seed, "noise/pool"),
                    config.corpus.sample_rate_hz,
                )
                outputs.update({"noise_pool": dirs["train"], "ood_noise_pool": dirs["ood"]})
            return outputs

        return self._run("synth", out_dir, {"noise_pool": with_noise_pool}, body)

    def perturb(self, input_path: PathLike, output_path: PathLike, specs_path: Optional[PathLike] = None) -> Dict[str, Any]:
        out_dir = self.out_dir

        def body():
            clean = load_wav(input_path)
            specs = load_perturbation_specs(specs_path) if specs_path else default_training_specs()
            noisy, applied = apply_perturbation(clean, specs, make_rng(self.seed, "noise"))
            record = applied.model_dump(mode="json")
            if applied.kind in NOISE_KINDS:
                record["measured_snr_db"] = measured_snr_db(clean, noisy)
            return {
                "wav": save_wav(noisy, output_path),
                "applied": write_json(out_dir / "applied.json", record),
            }

        return self._run(
            "perturb", out_dir, {"input": str(input_path), "output": str(output_path), "specs": str(specs_path)}, body
        )

    def train_run(self, config: ExperimentConfig, run_dir: Path, corpus_manifest: Optional[PathLike] = None) -> Tuple[TokenizerModel, RobustnessReport, List[EpochRecord]]:
        """Train on the config's corpus, save the checkpoint and history, evaluate on held-out data."""
        train, held_out = self.corpora(config)
        if corpus_manifest is not None:
            train = read_manifest(corpus_manifest)
        pool, ood_pool = self.noise_pools(config, run_dir)

        model = TokenizerModel.initialize(config.model, derive_seed(config.seed, "init"), config.features)
        service = TrainingService(
            model,
            config.features,
            self.training_specs(config, pool),
            config.loss_weights,
            config.optim,
            config.train,
        )
        history = service.train(train, config.seed, eval_corpus=held_out)
        model.save(run_dir / CHECKPOINT_NAME)
        write_csv(run_dir / "history.csv", [r.model_dump() for r in history], HISTORY_FIELDS)

        report = eval_robustness(
            model, held_out, self.eval_suite(config, pool, ood_pool), config.features, config.seed, self.workers
        )
        write_report(report, run_dir)
        return model, report, history

    def train(self, corpus_manifest: Optional[PathLike] = None) -> Dict[str, Any]:
        config = self.require_config("train")
        out_dir = self.out_dir

        def body():
            _, report, history = self.train_run(config, out_dir, corpus_manifest)
            return {
                "checkpoint": out_dir / CHECKPOINT_NAME,
                "history": out_dir / "history.csv",
                "epochs": len(history),
                "average_ued": report.average_ued,
                "clean_frame_error_rate": report.clean_frame_error_rate,
            }

        return self._run("train", out_dir, {"corpus": str(corpus_manifest)}, body)

    def tokenize(self, checkpoint: PathLike, inputs: Sequence[PathLike]) -> Dict[str, Any]:
        out_dir = self.out_dir

        def body():
            model = TokenizerModel.load(checkpoint)
            records: List[Dict[str, Any]] = [{"d": model.code_dim}]
            for utterance_id, path in zip(input_ids(inputs), inputs):
                records.append({"id": utterance_id, "tokens": tokenize_waveform(model, load_wav(path))})
            return {"tokens": write_jsonl(out_dir / "tokens.jsonl", records), "count": len(inputs)}

        return self._run("tokenize", out_dir, {"checkpoint": str(checkpoint), "inputs": [str(p) for p in inputs]}, body)

    def evaluate(self, checkpoint: Optional[PathLike] = None, corpus_manifest: Optional[PathLike] = None, specs_path: Optional[PathLike] = None) -> Dict[str, Any]:
        """Robustness report for a checkpoint, or for a freshly initialized model when none is given."""
        config = self.require_config("eval")
        out_dir = self.out_dir

        def body():
            if checkpoint is not None:
                model = TokenizerModel.load(checkpoint)
            else:
                model = TokenizerModel.initialize(config.model, derive_seed(config.seed, "init"), config.features)
            _, held_out = self.corpora(config)
            if corpus_manifest is not None:
                held_out = read_manifest(corpus_manifest)
            pool, ood_pool = self.noise_pools(config, out_dir)
            suite = load_perturbation_specs(specs_path) if specs_path else self.eval_suite(config, pool, ood_pool)
            report = eval_robustness(model, held_out, suite, model.feature_config, config.seed, self.workers)
            paths = write_report(report, out_dir)
            return {**paths, "average_ued": report.average_ued}

        return self._run(
            "eval",
            out_dir,
            {"checkpoint": str(checkpoint), "corpus": str(corpus_manifest), "specs": str(specs_path)},
            body,
        )

    def vote_analyze(self) -> Dict[str, Any]:
        out_dir = self.out_dir
        params = self.config.vote_analysis if self.config is not None else None

        def body():
            va = params or VoteAnalysisConfig()
            rows = survival_table(va.n_values, va.d, va.p_values, va.trials, derive_seed(self.seed, "mc"), self.workers)
            fields = ["n", "d", "p", "analytic", "exhaustive", "mc_estimate", "mc_stderr", "override_rate"]
            return {"survival": write_csv(out_dir / "survival.csv", rows, fields), "rows": len(rows)}

        return self._run("vote-analyze", out_dir, {}, body)

    def replay_case(self, fixture: Optional[PathLike] = None) -> List[CaseReplayRow]:
        out_dir = self.out_dir
        rows: List[CaseReplayRow] = []

        def body():
            rows.extend(replay_case_table(load_case_table(fixture)))
            data = [{**r.model_dump(), "recovered": r.recovered} for r in rows]
            fields = ["position", "reference", "voted", "voters_wrong", "n_voters", "recovered"]
            return {"replay": write_csv(out_dir / "replay.csv", data, fields)}

        self._run("replay-case", out_dir, {"fixture": str(fixture)}, body)
        return rows

    def params(self, n: int, hidden_dim: int, code_dim: int) -> List[Dict[str, int]]:
        out_dir = self.out_dir
        rows: List[Dict[str, int]] = []

        def body():
            rows.extend(overhead_table(n, hidden_dim, code_dim))
            return {"params": write_csv(out_dir / "params.csv", rows, ["n", "params", "increment"])}

        self._run("params", out_dir, {"n": n, "D": hidden_dim, "d": code_dim}, body)
        return rows

    # ablation ------------------------------------------------------------

    def ablation_configs(self, base: ExperimentConfig) -> Dict[str, ExperimentConfig]:
        """Variant name -> config; voter sweep entries reuse `full` when the branch count matches."""

        def with_model(config: ExperimentConfig, n: int) -> ExperimentConfig:
            quantizer = config.model.quantizer.model_copy(update={"n_branches": n})
            return config.model_copy(update={"model": config.model.model_copy(update={"quantizer": quantizer})})

        no_consensus = base.loss_weights.model_copy(update={"consensus": 0.0})
        no_routing = base.noise_aware.model_copy(update={"enabled": False})
        variants = {
            "full": base,
            "no-consensus": base.model_copy(update={"loss_weights": no_consensus}),
            "no-noise-aware": base.model_copy(update={"noise_aware": no_routing}),
            "single-branch": with_model(base, 1).model_copy(
                update={"noise_aware": no_routing, "loss_weights": no_consensus}
            ),
        }
        for n in base.voter_counts:
            if n != base.model.quantizer.n_branches:
                variants[f"voters-{n}"] = with_model(base, n)
        return variants

    def ablate(self) -> Dict[str, Any]:
        base = self.require_config("ablate")
        out_dir = self.out_dir

        def body():
            variants = self.ablation_configs(base)
            reports: Dict[str, List[RobustnessReport]] = {name: [] for name in variants}
            for name, config in variants.items():
                for seed in base.ablation_seeds:
                    run_dir = out_dir / slugify(f"{name}-seed-{seed}")
                    _, report, _ = self.train_run(config.model_copy(update={"seed": seed}), run_dir)
                    reports[name].append(report)
                    logger.info(f"ablate {name} seed={seed}: average UED {report.average_ued:.2f}")

            rows, extra_fields = [], []
            for name, runs in reports.items():
                row = {
                    "variant": name,
                    "n_branches": variants[name].model.quantizer.n_branches,
                    "n_seeds": len(runs),
                    "mean_ued": float(np.mean([r.average_ued for r in runs])),
                    "std_ued": float(np.std([r.average_ued for r in runs])),
                    "clean_frame_error_rate": float(np.mean([r.clean_frame_error_rate for r in runs])),
                }
                for label in ued_table_row(runs[0]):
                    if label == "avg":
                        continue
                    row[f"ued_{label}"] = float(np.mean([ued_table_row(r)[label] for r in runs]))
                    if f"ued_{label}" not in extra_fields:
                        extra_fields.append(f"ued_{label}")
                rows.append(row)

            return {
                "summary": write_csv(out_dir / "summary.csv", rows, SUMMARY_FIELDS + extra_fields),
                "variants": list(variants),
            }

        return self._run("ablate", out_dir, {"seeds": list(base.ablation_seeds)}, body)
