"""Task registry mapping task ids to operators, parameter ranges and instruction templates."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degradations import DegradationSpec, apply, gen_clean, rng_for
from .io import array_digest, canonical_json, save_olvt, save_ppm, sha256_hex, write_json

# Training and evaluation draw image seeds from disjoint integer ranges.
TRAIN_SEED_RANGE = (0, 1_000_000_000)
TEST_SEED_RANGE = (1_000_000_000, 2_000_000_000)

SEVERITY_WORDS = ("light", "medium", "heavy")


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    param_ranges: dict = field(default_factory=dict)  # name -> (lo, hi) or tuple of choices
    template: str = ""
    direction: str = "restore"  # restore | enhance | annotate
    severity_param: str | None = None
    severity_increasing: bool = True  # False when larger parameter values are milder

    def sample_spec(self, seed: int) -> DegradationSpec:
        rng = rng_for(seed, 0x5EC)
        params = {}
        for name, rng_def in sorted(self.param_ranges.items()):
            if isinstance(rng_def, list):
                params[name] = rng_def[int(rng.integers(len(rng_def)))]
            else:
                lo, hi = rng_def
                if isinstance(lo, int) and isinstance(hi, int):
                    params[name] = int(rng.integers(lo, hi + 1))
                else:
                    params[name] = float(rng.uniform(lo, hi))
        return DegradationSpec(self.kind, params, seed=int(seed))

    def severity(self, spec: DegradationSpec) -> str:
        if self.severity_param is None:
            return ""
        lo, hi = self.param_ranges[self.severity_param]
        frac = 0.5 if hi == lo else (spec.params[self.severity_param] - lo) / (hi - lo)
        if not self.severity_increasing:
            frac = 1.0 - frac
        return SEVERITY_WORDS[min(2, int(frac * 3))]

    def instruction(self, spec: DegradationSpec) -> str:
        return self.template.format(level=self.severity(spec)).strip()


def _t(task_id, kind, ranges, template, direction="restore", sev=None, inc=True):
    return TaskSpec(task_id, kind, ranges, template, direction, sev, inc)


DEFAULT_TASKS = [
    _t("denoise_gaussian", "gaussian_noise", {"sigma": (0.02, 0.2)}, "remove {level} gaussian noise", sev="sigma"),
    _t("denoise_poisson", "poisson_noise", {"peak": (10.0, 100.0)}, "remove {level} poisson noise", sev="peak", inc=False),
    _t("deblur_gaussian", "gaussian_blur", {"sigma": (0.5, 2.0)}, "remove {level} gaussian blur", sev="sigma"),
    _t("deblur_motion", "motion_blur", {"length": (3, 9), "angle": (0.0, 180.0)}, "remove {level} motion blur", sev="length"),
    _t("depixelate", "pixelate", {"block": (2, 4)}, "remove {level} pixelation", sev="block"),
    _t("dequantize_hist", "quantize_hist", {"levels": (4, 16)}, "remove {level} hist quantization", sev="levels", inc=False),
    _t("dequantize_median", "quantize_median", {"levels": (4, 16)}, "remove {level} median quantization", sev="levels", inc=False),
    _t("dequantize_otsu", "quantize_otsu", {}, "remove otsu quantization"),
    _t("dering", "ringing", {"cutoff": (0.2, 0.6)}, "remove {level} ringing artifacts", sev="cutoff", inc=False),
    _t("decompress", "compress_dct", {"quality": (5, 40)}, "remove {level} compression artifacts", sev="quality", inc=False),
    _t("inpaint", "mask_inpaint", {"n_rects": (1, 4)}, "inpaint the masked regions"),
    _t("lowlight", "darken_gamma", {"gamma": (1.5, 3.0)}, "brighten the dark image", "enhance"),
    _t("underexposed", "darken_shift", {"shift": (0.1, 0.3)}, "brighten the underexposed image", "enhance"),
    _t("overexposed", "brighten_shift", {"shift": (0.1, 0.3)}, "darken the overexposed image", "enhance"),
    _t("contrast", "contrast_scale", {"factor": (0.3, 0.7)}, "increase the contrast", "enhance"),
    _t("saturation", "saturation_scale", {"factor": (0.2, 0.6)}, "increase the saturation", "enhance"),
    _t("demosaic", "mosaic", {"block": (2, 4)}, "remove the mosaic", "enhance"),
    _t("desharpen", "oversharpen", {"amount": (1.0, 3.0), "sigma": (0.8, 1.5)}, "remove oversharpening", "enhance"),
    _t("colorize", "grayscale", {}, "colorize the image", "enhance"),
    _t("canny", "canny", {"lo": (0.1, 0.1), "hi": (0.3, 0.3)}, "detect canny edges", "annotate"),
    _t("brighten_gamma", "brighten_gamma", {"gamma": (0.4, 0.7)}, "brighten the image", "annotate"),
    _t("darken_gamma", "darken_gamma", {"gamma": (1.5, 2.5)}, "darken the image", "annotate"),
    _t("icl_identity", "identity", {}, "keep the image unchanged", "annotate"),
    _t("icl_invert", "invert", {}, "invert the colors", "annotate"),
]


class TaskCatalog:
    def __init__(self, tasks=None):
        tasks = DEFAULT_TASKS if tasks is None else tasks
        self.tasks: dict[str, TaskSpec] = {t.task_id: t for t in tasks}

    def __getitem__(self, task_id: str) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTaskError(f"unknown task id {task_id!r}") from None

    def __contains__(self, task_id) -> bool:
        return task_id in self.tasks

    def __iter__(self):
        return iter(self.tasks)

    def words(self) -> list[str]:
        found = set(SEVERITY_WORDS)
        for t in self.tasks.values():
            found.update(t.template.replace("{level}", " ").lower().split())
        return sorted(found)


def task_salt(task_id: str) -> int:
    return zlib.crc32(task_id.encode("utf-8"))


def make_pair(task_id: str, catalog: TaskCatalog, seed: int, size: int = 32):
    """(lq, hq, instruction) for one seeded sample of ``task_id``."""
    task = catalog[task_id]
    salt = task_salt(task_id)
    clean = gen_clean(int(rng_for(seed, salt).integers(2**62)), size)
    spec = task.sample_spec(int(rng_for(seed, salt, 1).integers(2**62)))
    if task.direction == "annotate":
        lq, hq = clean, apply(spec, clean)
    else:
        lq, hq = apply(spec, clean), clean
    return lq, hq, task.instruction(spec)


def sample_spec_for(task_id: str, catalog: TaskCatalog, seed: int) -> DegradationSpec:
    return catalog[task_id].sample_spec(int(rng_for(seed, task_salt(task_id), 1).integers(2**62)))


@dataclass
class ManifestEntry:
    task_id: str
    seed: int
    spec: dict
    instruction: str
    lq: np.ndarray
    hq: np.ndarray
    icl: list = field(default_factory=list)  # [(seed, lq, hq), ...]

    def record(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "spec": self.spec,
            "instruction": self.instruction,
            "lq_sha256": array_digest(self.lq),
            "hq_sha256": array_digest(self.hq),
            "icl": [{"seed": s, "lq_sha256": array_digest(a), "hq_sha256": array_digest(b)}
                    for s, a, b in self.icl],
        }


@dataclass
class Manifest:
    seed: int
    image_size: int
    entries: list[ManifestEntry]
    seed_range: tuple[int, int] = TEST_SEED_RANGE
    train_seed_range: tuple[int, int] = TRAIN_SEED_RANGE

    def header(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": self.image_size,
            "test_seed_range": list(self.seed_range),
            "train_seed_range": list(self.train_seed_range),
            "disjoint_from_training": _disjoint(self.seed_range, self.train_seed_range),
        }

    def digest(self) -> str:
        return sha256_hex(canonical_json({"header": self.header(), "entries": [e.record() for e in self.entries]}))

    def tasks(self) -> list[str]:
        return list(dict.fromkeys(e.task_id for e in self.entries))

    def to_json(self, paths: list[dict] | None = None) -> dict:
        entries = []
        for i, e in enumerate(self.entries):
            rec = e.record()
            if paths is not None:
                rec.update(paths[i])
            entries.append(rec)
        return {**self.header(), "manifest_sha256": self.digest(), "entries": entries}

    def write(self, out_dir, extra: dict | None = None) -> Path:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        paths = []
        for i, e in enumerate(self.entries):
            stem = entry_stem(e, i)
            rec = {"stem": stem}
            for role, arr in (("lq", e.lq), ("hq", e.hq)):
                save_olvt(out / "images" / f"{stem}_{role}.olvt", arr)
                save_ppm(out / "images" / f"{stem}_{role}.ppm", arr)
                rec[role] = f"images/{stem}_{role}.olvt"
            for j, (_, a, b) in enumerate(e.icl):
                save_olvt(out / "images" / f"{stem}_icl{j}_lq.olvt", a)
                save_olvt(out / "images" / f"{stem}_icl{j}_hq.olvt", b)
            rec["icl_paths"] = [[f"images/{stem}_icl{j}_lq.olvt", f"images/{stem}_icl{j}_hq.olvt"]
                                for j in range(len(e.icl))]
            paths.append(rec)
        doc = self.to_json(paths)
        if extra:
            doc.update(extra)
        path = out / "manifest.json"
        write_json(path, doc)
        return path


def entry_stem(entry: ManifestEntry, index: int) -> str:
    return f"{entry.task_id}_{index:05d}"


def _disjoint(a, b) -> bool:
    return a[1] <= b[0] or b[1] <= a[0]


def test_seed(seed: int, task_index: int, i: int) -> int:
    lo, hi = TEST_SEED_RANGE
    return lo + (seed * 7919 + task_index * 100_003 + i) % (hi - lo)


def build_testset(catalog: TaskCatalog, tasks, n_per_task: int, seed: int = 0, size: int = 32,
                  icl_pairs: int = 0) -> Manifest:
    """Held-out corpus; every image seed lies in TEST_SEED_RANGE."""
    entries = []
    for ti, task_id in enumerate(tasks):
        catalog[task_id]
        for i in range(n_per_task):
            s = test_seed(seed, ti, 2 * i * (icl_pairs + 1))
            lq, hq, instr = make_pair(task_id, catalog, s, size)
            icl = []
            for j in range(icl_pairs):
                es = test_seed(seed, ti, 2 * i * (icl_pairs + 1) + 2 * (j + 1))
                a, b, _ = make_pair(task_id, catalog, es, size)
                icl.append((es, a, b))
            entries.append(ManifestEntry(task_id, s, sample_spec_for(task_id, catalog, s).to_dict(),
                                         instr, lq, hq, icl))
    man = Manifest(seed=seed, image_size=size, entries=entries)
    if not man.header()["disjoint_from_training"]:  # pragma: no cover - constants guarantee it
        raise AssertionError("test and train seed ranges overlap")
    return man


def load_manifest(path) -> Manifest:
    from .io import FormatError, load_olvt, read_json

    path = Path(path)
    doc = read_json(path)
    root = path.parent
    entries = []
    for rec in doc["entries"]:
        icl = []
        for (a, b), meta in zip(rec.get("icl_paths", []), rec.get("icl", [])):
            icl.append((meta["seed"], load_olvt(root / a), load_olvt(root / b)))
        entries.append(ManifestEntry(rec["task_id"], rec["seed"], rec["spec"], rec["instruction"],
                                     load_olvt(root / rec["lq"]), load_olvt(root / rec["hq"]), icl))
    man = Manifest(doc["seed"], doc["image_size"], entries,
                   tuple(doc["test_seed_range"]), tuple(doc["train_seed_range"]))
    if "manifest_sha256" in doc and man.digest() != doc["manifest_sha256"]:
        raise FormatError(f"{path}: image files do not match the recorded manifest hash")
    return man
