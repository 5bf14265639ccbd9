"""Command-line entry point for reproducible experiment recipes.

Subcommands: gen-data, train, evaluate, analyze, average-ckpts.  Every
artifact-producing command writes a manifest.json recording the inputs
that determine its outputs; rerunning with the same inputs reproduces the
artifacts byte for byte (training logs carry no timestamps).

The BLAS thread caps are applied at import time, before numpy loads, so
runs are not perturbed by library-level parallelism.  Set SLP_MNMT_THREADS
to raise the cap.
"""

import os

_threads = os.environ.get("SLP_MNMT_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    config_sha256,
    default_experiment_config,
    load_config,
    save_config,
)
from .data import (
    DataError,
    SyntheticSuite,
    first_content_id,
    generate_synthetic_suite,
    language_infos,
    load_suite,
    save_suite,
)
from .eval_analysis import (
    EvalError,
    dictionary_overlap,
    evaluate_model,
    export_decoder_representations,
    gradient_conflict_matrix,
    probe_batch,
    selection_report,
    write_metrics,
)
from .model import LanguageError, init_params
from .tensor import ShapeError
from .training import (
    BASELINE,
    STAGE1,
    STAGE2,
    CheckpointError,
    TrainingError,
    average_checkpoints,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train_baseline,
    train_stage1,
    train_stage2,
    write_checkpoint,
)

# parameter initialisation draws from its own stream so data generation,
# training, and init never share randomness
_INIT_STREAM = 11

_FAILURES = (
    ConfigError,
    DataError,
    TrainingError,
    CheckpointError,
    EvalError,
    LanguageError,
    ShapeError,
    FileNotFoundError,
    NotADirectoryError,
)


def _json_dump(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _write_manifest(out_dir: Path, *, command: str, config_hash: str,
                    seed, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_sha256": config_hash,
        "seed": seed,
        "tool_version": __version__,
    }
    if extra:
        manifest.update(extra)
    _json_dump(manifest, Path(out_dir) / "manifest.json")


def _checkpoint_config_hash(path: Path) -> str:
    ckpt = read_checkpoint(Path(path))
    canon = json.dumps(
        {"config": ckpt.config.to_dict(), "variant": ckpt.variant,
         "languages": [[l.id, l.tier, l.symbol_token] for l in ckpt.languages]},
        sort_keys=True, separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _generate(cfg: ExperimentConfig) -> SyntheticSuite:
    d = cfg.data
    return generate_synthetic_suite(
        d.seed,
        d.languages,
        base_vocab_size=d.base_vocab_size,
        source_alphabet_size=d.source_alphabet_size,
        dev_size=d.dev_size,
        min_len=d.min_len,
        max_len=d.max_len,
    )


def _suite_for_training(cfg: ExperimentConfig) -> SyntheticSuite:
    suite = load_suite(Path(cfg.paths.corpus_dir))
    d = cfg.data
    found = (suite.seed, suite.base_vocab_size, suite.source_alphabet_size,
             suite.dev_size, suite.min_len, suite.max_len, suite.specs)
    wanted = (d.seed, d.base_vocab_size, d.source_alphabet_size,
              d.dev_size, d.min_len, d.max_len, d.languages)
    if found != wanted:
        raise ConfigError(
            f"corpus in {cfg.paths.corpus_dir} was generated from a different "
            "data section than this config"
        )
    if len(suite.vocab) != cfg.model.vocab_size:
        raise ConfigError(
            f"corpus vocabulary has {len(suite.vocab)} entries, "
            f"model.vocab_size is {cfg.model.vocab_size}"
        )
    return suite


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = _generate(cfg)
    save_suite(suite, out)
    _write_manifest(out, command="gen-data", config_hash=config_sha256(cfg),
                    seed=cfg.data.seed)
    print(f"wrote suite with {len(suite.specs)} languages to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    suite = _suite_for_training(cfg)
    infos = language_infos(cfg.data.languages)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    log_path = out / "train_log.jsonl"
    log_file = open(log_path, "w", encoding="utf-8")

    def log_fn(rec: dict) -> None:
        log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    init_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.train.seed, _INIT_STREAM])
    )
    try:
        if args.stage == "1":
            if args.resume:
                raise ConfigError("--resume is only meaningful for --stage 2")
            params = init_params(cfg.model, infos, init_rng, variant="slp")
            state = train_stage1(params, suite.train, cfg.train, cfg.sampling,
                                 log_fn=log_fn, checkpoint_dir=out)
            stage = STAGE1
        elif args.stage == "2":
            if not args.resume:
                raise ConfigError(
                    "--stage 2 continues a stage-1 model: pass --resume "
                    "with the stage-1 checkpoint"
                )
            params, _, _, prev_stage = load_checkpoint(Path(args.resume))
            if prev_stage != STAGE1:
                raise ConfigError(
                    f"--resume checkpoint is from {prev_stage!r}, expected {STAGE1!r}"
                )
            if params.config != cfg.model:
                raise ConfigError("checkpoint model config does not match this config")
            state = train_stage2(params, suite.train, cfg.train, cfg.sampling,
                                 log_fn=log_fn, checkpoint_dir=out)
            stage = STAGE2
        else:
            if args.resume:
                raise ConfigError("--resume is only meaningful for --stage 2")
            params = init_params(cfg.model, infos, init_rng, variant="baseline")
            state = train_baseline(params, suite.train, cfg.train, cfg.sampling,
                                   log_fn=log_fn, checkpoint_dir=out)
            stage = BASELINE
    finally:
        log_file.close()

    final = out / f"{stage}-final.ckpt"
    save_checkpoint(final, params, state, state.step, stage)
    _write_manifest(out, command="train", config_hash=config_sha256(cfg),
                    seed=cfg.train.seed,
                    extra={"stage": stage, "steps": state.step,
                           "resume": args.resume or None})
    print(f"{stage}: {state.step} steps, final checkpoint {final}")
    return 0


def _cmd_evaluate(args) -> int:
    params, _, step, stage = load_checkpoint(Path(args.ckpt))
    suite = load_suite(Path(args.data))
    known = {l.id for l in params.languages}
    extra = set(suite.dev) - known
    if extra:
        raise ConfigError(f"checkpoint does not know directions {sorted(extra)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(
        params, suite.dev, suite.vocab,
        beam_size=args.beam,
        length_penalty=args.length_penalty,
        max_len=args.max_decode_len,
    )
    write_metrics(report, out / "metrics.json")
    _write_manifest(out, command="evaluate",
                    config_hash=_checkpoint_config_hash(Path(args.ckpt)),
                    seed=None,
                    extra={"checkpoint_stage": stage, "checkpoint_step": step,
                           "beam_size": args.beam,
                           "length_penalty": args.length_penalty})
    agg = report.aggregate()
    print(f"evaluated {len(report.directions)} directions: "
          f"mean BLEU {agg['bleu']:.2f}, token accuracy {agg['token_accuracy']:.4f}")
    return 0


def _cmd_analyze(args) -> int:
    params, _, step, stage = load_checkpoint(Path(args.ckpt))
    suite = load_suite(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.what == "conflicts":
        probes = {d: probe_batch(c, args.budget) for d, c in suite.dev.items()}
        report = gradient_conflict_matrix(params, probes, partition=args.partition)
        _json_dump(report.to_dict(), out / "conflicts.json")
        artifact = "conflicts.json"
    elif args.what == "overlap":
        fc = first_content_id(len(suite.specs))
        langs = sorted(suite.train)
        values = [
            [dictionary_overlap(suite.train[a], suite.train[b], fc) for b in langs]
            for a in langs
        ]
        _json_dump({"languages": langs, "values": values}, out / "overlap.json")
        artifact = "overlap.json"
    elif args.what == "selection":
        _json_dump(selection_report(params), out / "selection.json")
        artifact = "selection.json"
    else:
        first = sorted(suite.dev)[0]
        sentences = [list(src[1:]) for src, _ in suite.dev[first].pairs[: args.limit]]
        if args.layer == "slp-output":
            layer = args.layer
        else:
            try:
                layer = int(args.layer)
            except ValueError:
                raise EvalError(
                    f"--layer must be an integer or 'slp-output', got {args.layer!r}"
                )
        export_decoder_representations(params, sentences, layer,
                                       out / "representations.tsv")
        artifact = "representations.tsv"

    _write_manifest(out, command=f"analyze-{args.what}",
                    config_hash=_checkpoint_config_hash(Path(args.ckpt)),
                    seed=None,
                    extra={"checkpoint_stage": stage, "checkpoint_step": step})
    print(f"wrote {out / artifact}")
    return 0


def _cmd_average_ckpts(args) -> int:
    ckpt_dir = Path(args.dir)
    paths = sorted(ckpt_dir.glob(args.pattern))
    if args.last < 1:
        raise CheckpointError("--last must be at least 1")
    if len(paths) < args.last:
        raise CheckpointError(
            f"asked for the last {args.last} checkpoints but only {len(paths)} "
            f"match {args.pattern!r} in {ckpt_dir}"
        )
    chosen = paths[-args.last:]
    avg = average_checkpoints([read_checkpoint(p) for p in chosen])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out, avg)
    manifest = {
        "command": "average-ckpts",
        "config_sha256": _checkpoint_config_hash(chosen[-1]),
        "seed": None,
        "tool_version": __version__,
        "inputs": [p.name for p in chosen],
    }
    _json_dump(manifest, out.parent / f"{out.name}.manifest.json")
    print(f"averaged {len(chosen)} checkpoints into {out}")
    return 0


def _cmd_init_config(args) -> int:
    save_config(default_experiment_config(), Path(args.out))
    print(f"wrote default experiment config to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slp-mnmt",
        description="Multilingual translation experiments with a selective "
                    "language-specific pool.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic suite")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=["1", "2", "baseline"])
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None,
                   help="stage-1 checkpoint to continue from (stage 2 only)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="decode the dev sets and write metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--max-decode-len", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("analyze", help="run one analysis instrument")
    p.add_argument("what", choices=["conflicts", "overlap", "selection",
                                    "representations"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--partition", default="shared",
                   help="parameter partition for conflicts (default: shared)")
    p.add_argument("--budget", type=int, default=512,
                   help="probe batch token budget for conflicts")
    p.add_argument("--layer", default="0",
                   help="decoder layer index or 'slp-output' for representations")
    p.add_argument("--limit", type=int, default=32,
                   help="sentences to export for representations")
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("average-ckpts", help="average the last N checkpoints")
    p.add_argument("--last", type=int, required=True)
    p.add_argument("--dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="*-epoch*.ckpt",
                   help="glob for candidate checkpoints (default: per-epoch ones)")
    p.set_defaults(fn=_cmd_average_ckpts)

    p = sub.add_parser("init-config", help="write the default experiment config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_init_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except _FAILURES as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
