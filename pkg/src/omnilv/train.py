"""Staged training loop, checkpoints, evaluation and ablation runners."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import (
    TRAIN_SEED_RANGE,
    Manifest,
    ManifestEntry,
    TaskCatalog,
    TaskSpec,
    build_testset,
    make_pair,
    sample_spec_for,
)
from .conditioning import (
    Conditioning,
    FusionMode,
    InjectionPlan,
    Variant,
    Vocab,
    apply_plan,
    init_params,
    is_backbone,
    to_signed,
    to_unit,
)
from .dit import ConfigError, ModelConfig
from .flow import LossRecord, cfm_loss, draw_noise_and_time, euler_sample, sample_rng
from .io import canonical_json, load_olvt, read_json, save_olvt, sha256_hex, write_json
from .metrics import psnr, ssim
from .optim import AdamState, optimizer_step
from .tensor import Tensor, TensorError, no_grad

log = logging.getLogger(__name__)

INJECT_CHOICES = ("input", "first-frozen", "first", "second", "interval", "none")
PROMPT_FORMATS = ("text", "visual", "both")
ABLATION_HEADER = ["variant", "task", "psnr", "ssim", "baseline_psnr"]


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    tasks: list = field(default_factory=lambda: ["denoise_gaussian"])
    inject: str = "first"
    fusion_mode: str = "addition"
    prompt_format: str | None = None
    eval_every: int = 0
    eval_n_per_task: int = 4
    eval_seed: int = 0
    eval_steps: int = 20
    train_pool: int = 256
    checkpoint_every: int = 0
    init_checkpoint: str | None = None
    prior_steps: int = 0
    param_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2 (got {self.stage})")
        if self.inject not in INJECT_CHOICES:
            raise ConfigError(f"inject must be one of {INJECT_CHOICES}")
        FusionMode(self.fusion_mode)
        if self.prompt_format is not None and self.prompt_format not in PROMPT_FORMATS:
            raise ConfigError(f"prompt_format must be one of {PROMPT_FORMATS}")
        if self.stage == 1 and self.prompt_format == "visual":
            raise ConfigError("stage 1 trains single-image tasks only; visual prompts need stage 2")
        if self.steps < 0 or self.batch_size < 1 or self.train_pool < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and train_pool >= 1 required")
        if not self.tasks:
            raise ConfigError("at least one task is required")

    @property
    def plan(self) -> InjectionPlan | None:
        return None if self.inject == "none" else InjectionPlan.from_flag(self.inject)

    @property
    def format(self) -> str:
        if self.prompt_format is not None:
            return self.prompt_format
        return "text" if self.stage == 1 else "both"

    @property
    def uses_icl(self) -> bool:
        return self.stage == 2 and self.format in ("visual", "both")

    @property
    def uses_text(self) -> bool:
        return self.format in ("text", "both")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if self.train.stage == 2 and self.model.max_icl_pairs < 1:
            raise ConfigError("stage 2 requires max_icl_pairs >= 1")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": dataclasses.asdict(self.train), "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        unknown = set(doc) - {"model", "train", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        train_doc = doc.get("train", {})
        bad = set(train_doc) - {f.name for f in dataclasses.fields(TrainConfig)}
        if bad:
            raise ConfigError(f"unknown train config keys: {sorted(bad)}")
        try:
            return cls(ModelConfig.from_dict(doc.get("model", {})), TrainConfig(**train_doc), doc.get("output_dir"))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return sha256_hex(canonical_json(d))

    def replace(self, **train_changes) -> RunConfig:
        return RunConfig(self.model, dataclasses.replace(self.train, **train_changes), self.output_dir)


def provenance(run: RunConfig) -> dict:
    return {"config_sha256": run.digest(), "tool_version": __version__}


def catalog_for(train: TrainConfig) -> TaskCatalog:
    base = TaskCatalog()
    tasks = []
    for task_id, spec in base.tasks.items():
        over = train.param_overrides.get(task_id)
        if over:
            ranges = dict(spec.param_ranges)
            for name, rng_def in over.items():
                if name not in ranges and name not in _kind_params(spec):
                    raise ConfigError(f"override {task_id}.{name}: no such parameter")
                ranges[name] = tuple(rng_def) if not isinstance(rng_def, list) or len(rng_def) == 2 else rng_def
            spec = dataclasses.replace(spec, param_ranges=ranges)
        tasks.append(spec)
    unknown = set(train.param_overrides) - set(base.tasks)
    if unknown:
        raise ConfigError(f"overrides for unknown tasks {sorted(unknown)}")
    return TaskCatalog(tasks)


def _kind_params(spec: TaskSpec) -> set:
    from .degradations import PARAM_RANGES

    return set(PARAM_RANGES[spec.kind])


def default_vocab_for(catalog: TaskCatalog) -> Vocab:
    return Vocab(catalog.words())


# -- datasets ------------------------------------------------------------------------------
def train_seed(seed: int, task_index: int, i: int) -> int:
    lo, hi = TRAIN_SEED_RANGE
    return lo + (seed * 1_000_003 + task_index * 100_003 + i) % (hi - lo)


def build_pool(catalog: TaskCatalog, tasks, n: int, seed: int, size: int) -> Manifest:
    """Pre-generated training pairs; seeds lie in TRAIN_SEED_RANGE."""
    entries = []
    for ti, task_id in enumerate(tasks):
        for i in range(n):
            s = train_seed(seed, ti, i)
            lq, hq, instr = make_pair(task_id, catalog, s, size)
            entries.append(ManifestEntry(task_id, s, sample_spec_for(task_id, catalog, s).to_dict(), instr, lq, hq))
    return Manifest(seed, size, entries, seed_range=TRAIN_SEED_RANGE)


@dataclass
class Batch:
    lq: np.ndarray
    hq: np.ndarray
    instr_ids: list
    icl: np.ndarray | None
    task_ids: list
    noise: np.ndarray
    t: np.ndarray


def make_batch(pool: Manifest, train: TrainConfig, vocab: Vocab, step: int, n_icl: int) -> Batch:
    by_task: dict[str, list[ManifestEntry]] = {}
    for e in pool.entries:
        by_task.setdefault(e.task_id, []).append(e)
    tasks = list(train.tasks)
    lq, hq, instr, icl, task_ids, noise, ts = [], [], [], [], [], [], []
    for i in range(train.batch_size):
        rng = sample_rng(train.seed, step, i, 0xBA7)
        task = tasks[int(rng.integers(len(tasks)))]
        items = by_task[task]
        k = int(rng.integers(len(items)))
        e = items[k]
        lq.append(e.lq)
        hq.append(e.hq)
        task_ids.append(task)
        instr.append(vocab.encode(e.instruction) if train.uses_text else [])
        if n_icl:
            pairs = []
            for _ in range(n_icl):
                j = int(rng.integers(len(items) - 1)) if len(items) > 1 else 0
                j = j + 1 if len(items) > 1 and j >= k else j
                pairs.append(np.stack([items[j].lq, items[j].hq]))
            icl.append(np.stack(pairs))
        x0, t = draw_noise_and_time(train.seed, step, i, e.hq.shape)
        noise.append(x0)
        ts.append(t)
    return Batch(np.stack(lq), np.stack(hq), instr, np.stack(icl) if n_icl else None, task_ids,
                 np.stack(noise), np.array(ts))


def batch_conditioning(batch: Batch, train: TrainConfig) -> Conditioning:
    return Conditioning(batch.lq, batch.instr_ids, batch.icl, FusionMode(train.fusion_mode))


# -- state -----------------------------------------------------------------------------------
@dataclass
class TrainState:
    params: dict[str, Tensor]
    opt: AdamState
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


def save_checkpoint(path, state: TrainState, run: RunConfig) -> Path:
    """Directory of OLVT tensors plus manifest.json; fully determines the future trajectory."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    for group in ("params", "adam_m", "adam_v"):
        (tmp / group).mkdir(parents=True)
    files = {}
    for name, p in state.params.items():
        save_olvt(tmp / "params" / f"{name}.olvt", p.data)
        save_olvt(tmp / "adam_m" / f"{name}.olvt", state.opt.m[name])
        save_olvt(tmp / "adam_v" / f"{name}.olvt", state.opt.v[name])
        files[name] = f"{name}.olvt"
    write_json(tmp / "manifest.json", {
        "format": "omnilv-checkpoint",
        **provenance(run),
        "model_config": run.model.to_dict(),
        "run_config": run.to_dict(),
        "step": state.step,
        "adam_step": state.opt.step,
        "rng": {"seed": run.train.seed, "next_step": state.step},
        "tensors": files,
        "loss_history": [dataclasses.asdict(r) for r in state.history],
    })
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path) -> tuple[TrainState, RunConfig]:
    path = Path(path)
    doc = read_json(path / "manifest.json")
    run = RunConfig.from_dict(doc["run_config"])
    params, m, v = {}, {}, {}
    for name, fname in doc["tensors"].items():
        params[name] = Tensor(load_olvt(path / "params" / fname), requires_grad=True, name=name)
        m[name] = load_olvt(path / "adam_m" / fname).copy()
        v[name] = load_olvt(path / "adam_v" / fname).copy()
    history = [LossRecord(**r) for r in doc["loss_history"]]
    return TrainState(params, AdamState(m, v, doc["adam_step"]), doc["step"], history), run


def checkpoint_digest(path) -> str:
    """Hash over every file in a checkpoint directory (names and bytes)."""
    path = Path(path)
    h = []
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.append(f"{f.relative_to(path)}:{sha256_hex(f.read_bytes())}")
    return sha256_hex("\n".join(h))


# -- evaluation ------------------------------------------------------------------------------
def predict(params, cfg: ModelConfig, plan: InjectionPlan | None, cond: Conditioning,
            steps: int = 20, seed: int = 0) -> np.ndarray:
    """Euler-sample HQ estimates in [0, 1] for a batch of conditions."""
    b = cond.lq.shape[0]
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    with no_grad():
        forward = apply_plan(plan, params, cfg, cond)
        x = euler_sample(forward, b, shape, steps=steps, seed=seed)
    return to_unit(x)


def score_task(outputs, entries) -> dict:
    ps = [psnr(o, e.hq) for o, e in zip(outputs, entries)]
    ss = [ssim(o, e.hq) for o, e in zip(outputs, entries)]
    base = [psnr(e.lq, e.hq) for e in entries]
    return {
        "psnr_mean": float(np.mean(ps)),
        "ssim_mean": float(np.mean(ss)),
        "psnr_input_baseline": float(np.mean(base)),
        "n": len(entries),
    }


def evaluate(params, run: RunConfig, manifest: Manifest, vocab: Vocab, predictions=None) -> dict:
    """Per-task PSNR/SSIM of Euler samples against HQ, plus the LQ-input baseline.

    ``predictions`` (one image per manifest entry, in order) replaces sampling.
    """
    cfg, train = run.model, run.train
    plan = train.plan
    started = time.perf_counter()
    tasks = {}
    for ti, task_id in enumerate(manifest.tasks()):
        idx = [i for i, e in enumerate(manifest.entries) if e.task_id == task_id]
        entries = [manifest.entries[i] for i in idx]
        if predictions is not None:
            tasks[task_id] = score_task([predictions[i] for i in idx], entries)
            continue
        lq = np.stack([e.lq for e in entries])
        icl = None
        if train.uses_icl:
            if any(len(e.icl) < 1 for e in entries):
                raise ConfigError("ICL evaluation needs a manifest built with icl_pairs >= 1")
            n = cfg.max_icl_pairs
            icl = np.stack([np.stack([np.stack([a, b]) for _, a, b in e.icl[:n]]) for e in entries])
        instr = [vocab.encode(e.instruction) if train.uses_text else [] for e in entries]
        cond = Conditioning(lq, instr, icl, FusionMode(train.fusion_mode))
        out = predict(params, cfg, plan, cond, steps=train.eval_steps, seed=train.eval_seed * 1009 + ti)
        tasks[task_id] = score_task(out, entries)
    return {
        "tasks": tasks,
        "wall_clock_s": time.perf_counter() - started,
        "manifest_sha256": manifest.digest(),
        **provenance(run),
    }


# -- training ---------------------------------------------------------------------------------
def _init_state(run: RunConfig) -> TrainState:
    params = init_params(run.model, run.train.plan, seed=run.train.seed)
    if run.train.init_checkpoint:
        prior, _ = load_checkpoint(run.train.init_checkpoint)
        for name, p in prior.params.items():
            if is_backbone(name) and name in params:
                if params[name].shape != p.shape:
                    raise ConfigError(f"init checkpoint tensor {name} has shape {p.shape}, expected {params[name].shape}")
                params[name].data[...] = p.data
    return TrainState(params, AdamState.zeros_like({k: p.data for k, p in params.items()}))


def train_step(state: TrainState, run: RunConfig, pool: Manifest, vocab: Vocab) -> tuple[float, dict[str, np.ndarray], Batch]:
    """One optimisation step; returns (loss, gradients used, batch)."""
    cfg, train = run.model, run.train
    plan = train.plan
    n_icl = cfg.max_icl_pairs if train.uses_icl else 0
    batch = make_batch(pool, train, vocab, state.step, n_icl)
    for p in state.params.values():
        p.grad = None
    forward = apply_plan(plan, state.params, cfg, batch_conditioning(batch, train))
    loss, per_sample = cfm_loss(forward, to_signed(batch.hq), batch.noise, batch.t, per_sample=True)
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in state.params.items()}
    trainable = {k for k, p in state.params.items() if p.requires_grad}
    optimizer_step(state.arrays(), grads, state.opt, train.learning_rate, train.weight_decay,
                   train.grad_clip, trainable)
    for i, (task, t) in enumerate(zip(batch.task_ids, batch.t)):
        state.history.append(LossRecord(state.step, float(per_sample[i]), task, float(t)))
    state.step += 1
    return loss.item(), grads, batch


def train(run: RunConfig, out_dir=None, resume=None, stop_after: int | None = None,
          eval_manifest: Manifest | None = None, pool: Manifest | None = None):
    """Run (or resume) training to ``run.train.steps``; returns (TrainState, MetricReport).

    ``stop_after`` halts early after that many steps in this call (for interruption tests).
    """
    cfg, tr = run.model, run.train
    catalog = catalog_for(tr)
    vocab = default_vocab_for(catalog)
    if len(vocab) > cfg.instr_vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} words but instr_vocab_size={cfg.instr_vocab_size}")
    if resume is not None:
        state, saved = load_checkpoint(resume)
        if saved.digest() != run.digest():
            raise ConfigError("checkpoint was produced by a different config")
    else:
        state = _init_state(run)
    if pool is None:
        pool = build_pool(catalog, tr.tasks, tr.train_pool, tr.seed, cfg.image_size)
    if eval_manifest is None:
        eval_manifest = build_testset(catalog, tr.tasks, tr.eval_n_per_task, tr.eval_seed, cfg.image_size,
                                      icl_pairs=cfg.max_icl_pairs if tr.uses_icl else 0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "provenance.json", {**provenance(run), "run_config": run.to_dict()})
    last_good = str(resume) if resume is not None else None

    done_here = 0
    while state.step < tr.steps and (stop_after is None or done_here < stop_after):
        try:
            loss, _, _ = train_step(state, run, pool, vocab)
        except TensorError as exc:
            raise TrainingDivergedError(state.step, last_good) from exc
        if not math.isfinite(loss):
            raise TrainingDivergedError(state.step, last_good)
        done_here += 1
        if state.step % 100 == 0:
            log.info("step %d loss %.5f", state.step, loss)
        if out is not None and tr.checkpoint_every and state.step % tr.checkpoint_every == 0:
            last_good = str(save_checkpoint(out / "checkpoint", state, run))
        if tr.eval_every and state.step % tr.eval_every == 0 and state.step < tr.steps:
            report = evaluate(state.params, run, eval_manifest, vocab)
            if out is not None:
                write_json(out / f"report_step{state.step:06d}.json", {**report, "step": state.step})

    report = evaluate(state.params, run, eval_manifest, vocab)
    report["step"] = state.step
    if out is not None:
        save_checkpoint(out / "checkpoint", state, run)
        write_loss_csv(out / "loss.csv", state.history)
        write_json(out / "report.json", report)
    return state, report


def write_loss_csv(path, history: list[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "t", "loss"])
        for r in history:
            w.writerow([r.step, r.task_id, repr(r.t), repr(r.loss)])


# -- ablations --------------------------------------------------------------------------------
AXES = ("injection", "fusion", "prompt-format")


def ablation_cells(axis: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    if axis == "injection":
        cells = []
        for v in Variant:
            plan = InjectionPlan(v)
            cells.append((f"{plan.row}_{v.value}", base.replace(inject=v.value)))
        return cells
    if axis == "fusion":
        fmt = base.train.prompt_format if base.train.prompt_format in ("visual", "both") else "both"
        return [(m.value, base.replace(stage=2, fusion_mode=m.value, prompt_format=fmt)) for m in FusionMode]
    if axis == "prompt-format":
        return [(f, base.replace(stage=2, prompt_format=f)) for f in PROMPT_FORMATS]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def ablate(axis: str, base: RunConfig, out_dir) -> Path:
    """Train one model per cell on shared data and write variant,task,psnr,ssim,baseline_psnr."""
    cells = ablation_cells(axis, base)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = cells[0][1]
    catalog = catalog_for(first.train)
    icl = first.model.max_icl_pairs if any(c.train.uses_icl for _, c in cells) else 0
    manifest = build_testset(catalog, first.train.tasks, first.train.eval_n_per_task, first.train.eval_seed,
                             first.model.image_size, icl_pairs=icl)
    pool = build_pool(catalog, first.train.tasks, first.train.train_pool, first.train.seed, first.model.image_size)

    init = base.train.init_checkpoint
    if axis == "injection" and init is None:
        prior_run = base.replace(inject="none", steps=base.train.prior_steps or base.train.steps)
        train(prior_run, out / "prior", eval_manifest=manifest, pool=pool)
        init = str(out / "prior" / "checkpoint")

    rows, hashes = [], {}
    for name, run in cells:
        if init is not None:
            run = run.replace(init_checkpoint=init)
        _, report = train(run, out / name, eval_manifest=manifest, pool=pool)
        hashes[name] = report["manifest_sha256"]
        for task, m in report["tasks"].items():
            rows.append([name, task, m["psnr_mean"], m["ssim_mean"], m["psnr_input_baseline"]])
    if len(set(hashes.values())) != 1:
        raise AssertionError(f"ablation cells evaluated on different manifests: {hashes}")

    path = out / f"ablation_{axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}", f"{r[4]:.6f}"])
    write_json(out / f"ablation_{axis}.meta.json", {
        "axis": axis,
        "cells": [n for n, _ in cells],
        "eval_manifest_sha256": hashes,
        **provenance(base),
    })
    return path
