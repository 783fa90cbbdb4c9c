"""Command-line interface: pretrain, customize, generate, edit, eval, inspect.

Every run resolves its configuration (flags over config file over
defaults), writes all outputs under --out, and drops a manifest recording
the resolved configuration, inputs, seed, and timings next to them.

Exit codes: 0 success, 2 usage error, 3 data or format error,
4 numerical or training failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import bench as gbench
from . import pipeline as pl
from . import world as gw
from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointFormatError,
    EditSequenceError,
    GlyphflowError,
    InvalidInputError,
    NumericalError,
    TrainingDivergedError,
)
from .knowledge_editor import (
    DEFAULT_EDIT_REPEATS,
    apply_sequence,
    load_edit_script,
    save_reports,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed config file: {exc}") from exc
    if not isinstance(obj, dict):
        raise InvalidInputError("config file must hold a JSON object")
    return obj


def _resolve(args: argparse.Namespace, config_file: dict, defaults: dict) -> dict:
    """flags > config file > defaults; flags left at None fall through."""
    resolved = dict(defaults)
    resolved.update({k: v for k, v in config_file.items() if k in defaults})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir: Path, command: str, resolved: dict, inputs: dict,
                    outputs: list[str], seed: int, timings: dict) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": resolved,
        "inputs": inputs,
        "outputs": outputs,
        "master_seed": seed,
        "timings_seconds": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"{what} not found: {path}")
    return p


def cmd_pretrain(args) -> int:
    cfg_file = _load_config_file(args.config)
    defaults = {
        "steps": pl.PretrainConfig().flow_steps,
        "enc_steps": pl.PretrainConfig().encoder_steps,
        "lr": pl.PretrainConfig().flow_lr,
        "seed": 0,
    }
    resolved = _resolve(args, cfg_file, defaults)
    if resolved["steps"] < 1 or resolved["enc_steps"] < 1:
        raise InvalidInputError("step counts must be >= 1")
    corpus_path = _require_file(args.corpus, "corpus spec")
    world = gw.load_world(corpus_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    config = pl.PretrainConfig(
        encoder_steps=int(resolved["enc_steps"]),
        flow_steps=int(resolved["steps"]),
        flow_lr=float(resolved["lr"]),
        seed=int(resolved["seed"]),
    )
    ckpt, logs = pl.pretrain_base(world, config)
    ckpt_path = out_dir / "base.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    with open(out_dir / "training_log.jsonl", "w") as fh:
        for section, log in logs.items():
            for rec in log:
                fh.write(json.dumps({"stage": section, **rec}) + "\n")
    _write_manifest(
        out_dir, "pretrain", resolved, {"corpus": str(corpus_path)},
        [str(ckpt_path)], int(resolved["seed"]),
        {"total": time.perf_counter() - t0},
    )
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_customize(args) -> int:
    cfg_file = _load_config_file(args.config)
    defaults = {
        "eta": pl.DEFAULT_ETA,
        "lr": pl.TrainConfig().lr,
        "steps": pl.TrainConfig().steps,
        "seed": 0,
    }
    resolved = _resolve(args, cfg_file, defaults)
    if resolved["eta"] <= 0:
        raise InvalidInputError("--eta must be positive")
    if resolved["steps"] < 1:
        raise InvalidInputError("--steps must be >= 1")
    base_path = _require_file(args.base, "base checkpoint")
    concept_path = _require_file(args.concept, "concept spec")
    ckpt = load_checkpoint(base_path)
    concept = pl.load_concept(concept_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    config = pl.TrainConfig(
        lr=float(resolved["lr"]),
        steps=int(resolved["steps"]),
        seed=int(resolved["seed"]),
    )
    try:
        result = pl.customize(ckpt, concept, config, eta=float(resolved["eta"]))
    except TrainingDivergedError:
        print("customize failed in stage 1 (visual concept learning)", file=sys.stderr)
        raise
    except (EditSequenceError, NumericalError):
        print("customize failed in stage 2 (textual knowledge updating)", file=sys.stderr)
        raise
    ckpt_path = out_dir / "customized.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    save_reports(out_dir / "edit_reports.jsonl", result.edit_reports)
    with open(out_dir / "training_log.jsonl", "w") as fh:
        for rec in result.stage1_log:
            fh.write(json.dumps({"stage": "lora", **rec}) + "\n")
    _write_manifest(
        out_dir, "customize", resolved,
        {"base": str(base_path), "concept": str(concept_path)},
        [str(ckpt_path)], int(resolved["seed"]),
        {"total": time.perf_counter() - t0},
    )
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg_file = _load_config_file(args.config)
    defaults = {"seed": 0, "steps": 32}
    resolved = _resolve(args, cfg_file, defaults)
    if resolved["steps"] < 1:
        raise InvalidInputError("--steps must be >= 1")
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    grid, meta = pl.generate(
        ckpt, args.prompt, seed=int(resolved["seed"]), steps=int(resolved["steps"])
    )
    base = out_dir / "sample"
    pl.export_sample(grid, meta, base)
    _write_manifest(
        out_dir, "generate", {**resolved, "prompt": args.prompt},
        {"ckpt": str(ckpt_path)},
        [str(base.with_suffix(".ppm")), str(base.with_suffix(".json"))],
        int(resolved["seed"]), {"total": time.perf_counter() - t0},
    )
    print(f"wrote {base.with_suffix('.ppm')}")
    return EXIT_OK


def cmd_edit(args) -> int:
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    script_path = _require_file(args.script, "edit script")
    ckpt = load_checkpoint(ckpt_path)
    requests = load_edit_script(script_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    repeats = args.repeats if args.repeats is not None else DEFAULT_EDIT_REPEATS
    if repeats < 1:
        raise InvalidInputError("--repeats must be >= 1")
    t0 = time.perf_counter()
    reports = apply_sequence(ckpt.encoder, requests, repeats_per_request=repeats)
    out_ckpt = out_dir / "edited.ckpt"
    save_checkpoint(ckpt, out_ckpt)
    save_reports(out_dir / "edit_reports.jsonl", reports)
    _write_manifest(
        out_dir, "edit", {"repeats": repeats},
        {"ckpt": str(ckpt_path), "script": str(script_path)},
        [str(out_ckpt)], 0, {"total": time.perf_counter() - t0},
    )
    print(f"wrote {out_ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    bench_path = _require_file(args.bench, "benchmark spec")
    ckpt = load_checkpoint(ckpt_path)
    try:
        spec_obj = json.loads(bench_path.read_text())
        spec = gbench.BenchmarkSpec(
            concept_count=spec_obj.get("concept_count", 4),
            knowledge_per_concept=spec_obj.get("knowledge_per_concept", 5),
            seeds=tuple(spec_obj.get("seeds", (0, 1, 2, 3, 4))),
            generation_pairs=spec_obj.get("generation_pairs"),
            master_seed=spec_obj.get("master_seed", 0),
        )
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed benchmark spec: {exc}") from exc
    if ckpt.world is None:
        raise InvalidInputError("checkpoint carries no world spec")
    dataset = gbench.build_benchmark(ckpt.world, spec)
    covered = [c for c in dataset.concepts if c.spec.id in ckpt.concepts]
    if not covered:
        raise InvalidInputError(
            "checkpoint covers none of the benchmark's concepts"
        )
    dataset.concepts = covered
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    recon = gbench.eval_reconstruction(ckpt, dataset)
    gen = gbench.eval_generation(ckpt, dataset)
    recon.save(out_dir / "reconstruction")
    gen.save(out_dir / "generation")
    _write_manifest(
        out_dir, "eval",
        {"concept_count": spec.concept_count, "seeds": list(spec.seeds)},
        {"ckpt": str(ckpt_path), "bench": str(bench_path)},
        [str(out_dir / "reconstruction.json"), str(out_dir / "generation.json")],
        spec.master_seed, {"total": time.perf_counter() - t0},
    )
    print(json.dumps({"reconstruction": recon.aggregates, "generation": gen.aggregates}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    info = inspect_checkpoint(ckpt_path)
    print(json.dumps(info, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphflow",
        description="Knowledge-aware concept customization on a synthetic glyph world.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base encoder and flow model")
    p.add_argument("--corpus", required=True, help="world spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="flow training steps")
    p.add_argument("--enc-steps", dest="enc_steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="flow learning rate")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("customize", help="bind a concept: adapters then knowledge edits")
    p.add_argument("--base", required=True)
    p.add_argument("--concept", required=True, help="concept spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None, help="adapter training steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_customize)

    p = sub.add_parser("generate", help="sample an image for a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="Euler steps")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("edit", help="apply a knowledge-edit script to a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=None,
                   help="closed-form refinements per request")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="run benchmark evaluation for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bench", required=True, help="benchmark spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print checkpoint header and section checksums")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if "--" in str(exc) or "must be" in str(exc) else EXIT_DATA
    except CheckpointFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingDivergedError, EditSequenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GlyphflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
