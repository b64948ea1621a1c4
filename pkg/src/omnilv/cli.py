"""Command-line entry point: omnilv {degrade,train,sample,eval,ablate}."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import TaskCatalog, UnknownTaskError, build_testset, entry_stem, load_manifest
from .conditioning import Conditioning, FusionError, FusionMode
from .degradations import DegradationParamError
from .dit import ConfigError, GeometryError, PlanMismatchError
from .flow import SamplerDivergenceError
from .io import FormatError, array_digest, load_image, read_json, save_olvt, save_ppm, sha256_hex, write_json
from .tensor import TensorError
from .train import (
    AXES,
    INJECT_CHOICES,
    RunConfig,
    TrainingDivergedError,
    ablate,
    catalog_for,
    default_vocab_for,
    evaluate,
    load_checkpoint,
    predict,
    provenance,
    train,
)

log = logging.getLogger("omnilv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def exit_code_for(exc: BaseException) -> int:
    # FormatError subclasses ValueError, so it is tested before the config errors
    if isinstance(exc, FormatError):
        return EXIT_IO
    if isinstance(exc, (TensorError, TrainingDivergedError, SamplerDivergenceError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, DegradationParamError, UnknownTaskError, PlanMismatchError, FusionError,
                        GeometryError, json.JSONDecodeError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def load_run(path, out=None, inject=None) -> RunConfig:
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if out is not None:
        doc["output_dir"] = str(out)
    if inject is not None:
        doc.setdefault("train", {})["inject"] = inject
    return RunConfig.from_dict(doc)


def _marker(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".failed")


# -- commands ------------------------------------------------------------------------------
def cmd_degrade(args) -> dict:
    catalog = TaskCatalog()
    for t in args.task:
        catalog[t]
    man = build_testset(catalog, args.task, args.n, args.seed, args.size, icl_pairs=args.icl_pairs)
    extra = {"tool_version": __version__,
             "config_sha256": sha256_hex(json.dumps({"tasks": args.task, "n": args.n, "seed": args.seed,
                                                     "size": args.size, "icl_pairs": args.icl_pairs},
                                                    sort_keys=True))}
    path = man.write(args.out, extra=extra)
    log.info("wrote %d pairs to %s", len(man.entries), path)
    return {"manifest": str(path), "manifest_sha256": man.digest()}


def cmd_train(args) -> dict:
    run = load_run(args.config, args.out, args.inject)
    out = run.output_dir or "run"
    state, report = train(run, out, resume=args.resume)
    if state.history and not np.isfinite(state.history[-1].loss):
        raise TrainingDivergedError(state.step, None)
    return {"checkpoint": str(Path(out) / "checkpoint"), "step": state.step, **provenance(run)}


def cmd_sample(args) -> dict:
    state, run = load_checkpoint(args.checkpoint)
    cfg, tr = run.model, run.train
    lq = load_image(args.input)
    if lq.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(f"input has shape {lq.shape}, model expects "
                          f"{(cfg.channels, cfg.image_size, cfg.image_size)}")
    vocab = default_vocab_for(catalog_for(tr))
    ids = vocab.encode(args.instruction) if args.instruction else []
    if args.instruction and all(i == vocab.unk_id for i in ids):
        log.warning("instruction has no known words; sampling with visual prompts only")
        ids = []
    pairs = [np.stack([load_image(a), load_image(b)]) for a, b in args.icl_pair]
    if len(pairs) > cfg.max_icl_pairs:
        raise FusionError(f"{len(pairs)} exemplar pairs given, the model holds {cfg.max_icl_pairs}")
    icl = np.stack(pairs)[None] if pairs else None
    cond = Conditioning(lq[None], [ids], icl, FusionMode(tr.fusion_mode))
    out = predict(state.params, cfg, tr.plan, cond, steps=args.steps, seed=args.seed)[0]
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_olvt(stem.with_suffix(".olvt"), out)
    save_ppm(stem.with_suffix(".ppm"), out)
    info = {"output_sha256": array_digest(out), "steps": args.steps, "seed": args.seed,
            "instruction": args.instruction, "icl_pairs": len(pairs), **provenance(run)}
    write_json(stem.with_suffix(".json"), info)
    return info


def cmd_eval(args) -> dict:
    state, run = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    vocab = default_vocab_for(catalog_for(run.train))
    preds = None
    if args.predictions:
        root = Path(args.predictions)
        preds = [load_image(root / f"{entry_stem(e, i)}.olvt") for i, e in enumerate(manifest.entries)]
    report = evaluate(state.params, run, manifest, vocab, predictions=preds)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_ablate(args) -> dict:
    run = load_run(args.config, args.out)
    out = run.output_dir or f"ablation_{args.axis}"
    path = ablate(args.axis, run, out)
    return {"csv": str(path)}


# -- parser --------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnilv", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", help="synthesise a held-out LQ/HQ corpus")
    d.add_argument("--task", action="append", required=True, help="task id (repeatable)")
    d.add_argument("--n", type=int, required=True, help="pairs per task")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--size", type=int, default=32)
    d.add_argument("--icl-pairs", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--inject", choices=INJECT_CHOICES)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="restore one image with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help=".ppm or .olvt image")
    s.add_argument("--instruction", default="")
    s.add_argument("--icl-pair", nargs=2, action="append", default=[], metavar=("LQ", "HQ"))
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output path stem; .ppm, .olvt and .json are written")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint (or saved predictions) on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", help="directory of <stem>.olvt outputs to score instead of sampling")
    e.add_argument("--out", help="report path (stdout if omitted)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run one ablation axis and write its CSV")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None)
    try:
        if out is None and args.command in ("train", "ablate"):
            run = load_run(args.config)
            out = run.output_dir or ("run" if args.command == "train" else f"ablation_{args.axis}")
            args.out = out
        args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        print(f"omnilv {args.command}: error: {exc}", file=sys.stderr)
        if out is not None:
            marker = _marker(out)
            try:
                marker.parent.mkdir(parents=True, exist_ok=True)
                marker.write_text(f"{type(exc).__name__}: {exc}\nexit {code}\n")
            except OSError:
                pass
        return code
    if out is not None and _marker(out).exists():
        _marker(out).unlink()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
