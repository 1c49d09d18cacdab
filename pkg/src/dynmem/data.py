"""Synthetic three-task image corpus and the time-ordered training stream.

Tasks share one binary objective (is a target sprite imprinted?) while their
appearance shifts: A = smooth background with a dark target, B = sharp
background with a dark target (modality-shift), C = sharp background with a
bright target (target-shift). Exactly one attribute changes per shift.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .validation import ConfigError, ShapeError

TASKS = ("A", "B", "C")
TASK_ATTRS = {"A": ("smooth", "low"), "B": ("sharp", "low"), "C": ("sharp", "high")}
CORPUS_MAGIC = b"DMCORPUS1\n"
SPLITS = ("base", "continuous", "validation", "test")


@dataclass(frozen=True)
class CorpusConfig:
    """Generator parameters plus per-split sample counts (desk scale)."""

    image_size: int = 32
    smooth_blur: float = 3.0
    sharp_blur: float = 1.2
    smooth_noise: float = 0.02
    sharp_noise: float = 0.08
    contrast: float = 0.10
    sprite_size: int = 7
    scale_min: float = 0.75
    scale_max: float = 1.5
    offset_min: float = 0.3
    offset_max: float = 0.5
    base_count: int = 600
    continuous_counts: tuple = (600, 400, 950)
    eval_count: int = 150  # per task, validation and test each
    ramp_fraction: float = 0.15

    def config_hash(self):
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    """A labeled split; tasks ride along for evaluation-only diagnostics."""

    images: np.ndarray  # (N, 1, S, S) float32 in [0, 1]
    labels: np.ndarray  # (N,) uint8
    tasks: np.ndarray   # (N,) of "A"/"B"/"C"
    ids: np.ndarray     # (N,) int64, globally unique across splits

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return Dataset(self.images[mask], self.labels[mask], self.tasks[mask], self.ids[mask])

    def task_subset(self, task):
        return self.subset(self.tasks == task)


def _plus_sprite(size):
    arm = size // 3
    lo, hi = arm, size - arm
    mask = np.zeros((size, size), dtype=bool)
    mask[lo:hi, :] = True
    mask[:, lo:hi] = True
    return mask


def generate_background(modality, rng, cfg=CorpusConfig()):
    """One background image for the given modality ("smooth" | "sharp")."""
    if modality == "smooth":
        blur, noise = cfg.smooth_blur, cfg.smooth_noise
    elif modality == "sharp":
        blur, noise = cfg.sharp_blur, cfg.sharp_noise
    else:
        raise ConfigError(f"unknown modality {modality!r}")
    s = cfg.image_size
    base = gaussian_filter(rng.standard_normal((s, s)), blur)
    base = (base - base.mean()) / (base.std() + 1e-12)
    img = 0.5 + cfg.contrast * base + noise * rng.standard_normal((s, s))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def imprint_target(image, polarity, rng, cfg=CorpusConfig()):
    """Imprint the target sprite at a random location, rotation and scale.

    The affected pixels gain +u ("high") or -u ("low"), u ~ U[offset_min,
    offset_max]; the result is clamped to [0, 1]. Returns a new image.
    """
    sprite = _plus_sprite(cfg.sprite_size)
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    theta = rng.uniform(0.0, 2 * np.pi)
    foot = int(np.ceil(cfg.sprite_size * scale * np.sqrt(2)))  # room for rotation
    s = image.shape[-1]
    if foot > s:
        raise ShapeError(f"target footprint {foot} does not fit into image of size {s}")
    top = rng.integers(0, s - foot + 1)
    left = rng.integers(0, s - foot + 1)
    # inverse-map footprint pixels into the sprite frame (nearest neighbor)
    yy, xx = np.mgrid[0:foot, 0:foot].astype(np.float64)
    cy = cx = (foot - 1) / 2.0
    sc = cfg.sprite_size / 2.0 - 0.5
    cos, sin = np.cos(theta), np.sin(theta)
    u = (cos * (yy - cy) + sin * (xx - cx)) / scale + sc
    v = (-sin * (yy - cy) + cos * (xx - cx)) / scale + sc
    ui = np.rint(u).astype(int)
    vi = np.rint(v).astype(int)
    inside = (ui >= 0) & (ui < cfg.sprite_size) & (vi >= 0) & (vi < cfg.sprite_size)
    mask = np.zeros((foot, foot), dtype=bool)
    mask[inside] = sprite[ui[inside], vi[inside]]
    offset = rng.uniform(cfg.offset_min, cfg.offset_max)
    if polarity == "low":
        offset = -offset
    elif polarity != "high":
        raise ConfigError(f"unknown polarity {polarity!r}")
    out = np.array(image, copy=True)
    region = out[..., top : top + foot, left : left + foot]
    region[..., mask] = np.clip(region[..., mask] + offset, 0.0, 1.0)
    return out


def _make_samples(task, count, rng, cfg, id_start):
    """Balanced labeled samples for one task; exactly half are positives."""
    modality, polarity = TASK_ATTRS[task]
    n_pos = count // 2
    labels = np.array([1] * n_pos + [0] * (count - n_pos), dtype=np.uint8)
    images = np.empty((count, 1, cfg.image_size, cfg.image_size), dtype=np.float32)
    for i, lab in enumerate(labels):
        img = generate_background(modality, rng, cfg)
        if lab:
            img = imprint_target(img, polarity, rng, cfg)
        images[i, 0] = img
    order = rng.permutation(count)
    ids = np.arange(id_start, id_start + count, dtype=np.int64)
    return Dataset(images[order], labels[order], np.full(count, task), ids)


@dataclass
class Corpus:
    base: Dataset
    continuous: Dataset
    validation: Dataset
    test: Dataset
    config: CorpusConfig
    seed: int

    def split(self, name):
        return getattr(self, name)


def build_corpus(cfg=CorpusConfig(), seed=0):
    """Deterministic {base, continuous, validation, test} corpus.

    Sample ids are disjoint across splits; labels are balanced 50/50 within
    every split/task.
    """
    rng = np.random.default_rng(seed)
    next_id = 0
    splits = {}
    plan = {
        "base": {"A": cfg.base_count},
        "continuous": dict(zip(TASKS, cfg.continuous_counts)),
        "validation": {t: cfg.eval_count for t in TASKS},
        "test": {t: cfg.eval_count for t in TASKS},
    }
    for split, tasks in plan.items():
        parts = []
        for task, count in tasks.items():
            parts.append(_make_samples(task, count, rng, cfg, next_id))
            next_id += count
        splits[split] = Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.tasks for p in parts]),
            np.concatenate([p.ids for p in parts]),
        )
    return Corpus(splits["base"], splits["continuous"], splits["validation"],
                  splits["test"], cfg, seed)


# -- stream schedule -------------------------------------------------------

@dataclass
class StreamSchedule:
    """Per-position task mixture weights with pure segments and linear ramps."""

    weights: np.ndarray  # (n_positions, 3), rows sum to 1
    ramp_spans: list     # [(start, end), ...] one per transition window
    segment_lengths: tuple

    def __len__(self):
        return len(self.weights)

    def checkpoint_positions(self):
        """Last position where each task's mixture weight equals 1."""
        out = {}
        for t_idx, task in enumerate(TASKS):
            pure = np.nonzero(self.weights[:, t_idx] == 1.0)[0]
            if pure.size == 0:
                raise ConfigError(f"no pure segment for task {task}")
            out[task] = int(pure[-1])
        return out

    def ramp_midpoint(self, which):
        start, end = self.ramp_spans[which]
        return (start + end) // 2


def build_schedule(segment_lengths, ramp_fraction=0.15):
    """Linear transition ramps spanning the segment boundaries; the window
    carves floor(ramp_fraction * min(adjacent lengths)) positions from each
    side, so expected per-task draw counts match the segment sizes."""
    lengths = tuple(int(n) for n in segment_lengths)
    n = sum(lengths)
    weights = np.zeros((n, len(lengths)))
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    for i, (start, end) in enumerate(zip(bounds[:-1], bounds[1:])):
        weights[start:end, i] = 1.0
    spans = []
    for i in range(len(lengths) - 1):
        half = int(ramp_fraction * min(lengths[i], lengths[i + 1]))
        b = bounds[i + 1]
        start, end = b - half, b + half
        width = end - start
        down = 1.0 - (np.arange(width) + 0.5) / width
        weights[start:end, :] = 0.0
        weights[start:end, i] = down
        weights[start:end, i + 1] = 1.0 - down
        spans.append((int(start), int(end)))
    return StreamSchedule(weights, spans, lengths)


def emit_stream(continuous, schedule, rng):
    """Order the continuous split into a stream following the schedule.

    Every continuous sample is emitted exactly once. Pure segments contain
    only their task; inside each ramp window the two tasks' carved counts are
    placed by weighted sampling without replacement, so the mixture follows
    the linear ramp.
    """
    counts = {t: int(np.sum(continuous.tasks == t)) for t in TASKS}
    if tuple(counts[t] for t in TASKS) != schedule.segment_lengths or len(continuous) != len(schedule):
        raise ConfigError(
            f"schedule segments {schedule.segment_lengths} do not match "
            f"continuous split counts {counts}"
        )
    n = len(schedule)
    assignment = np.full(n, -1, dtype=int)
    pure_mask = schedule.weights == 1.0
    for t_idx in range(len(TASKS)):
        assignment[pure_mask[:, t_idx]] = t_idx
    for span_i, (start, end) in enumerate(schedule.ramp_spans):
        width = end - start
        w_first = schedule.weights[start:end, span_i]
        k_first = width // 2  # equal carve from both adjacent segments
        pick = rng.choice(width, size=k_first, replace=False, p=w_first / w_first.sum())
        window = np.full(width, span_i + 1, dtype=int)
        window[pick] = span_i
        assignment[start:end] = window
    # pop per-task samples in shuffled order
    order = np.empty(n, dtype=np.int64)
    pools = {}
    for t_idx, task in enumerate(TASKS):
        idx = np.nonzero(continuous.tasks == task)[0]
        pools[t_idx] = list(rng.permutation(idx))
    for pos, t_idx in enumerate(assignment):
        order[pos] = pools[t_idx].pop()
    return continuous.subset(order)


# -- corpus IO -------------------------------------------------------------

def save_corpus(corpus, out_dir):
    """Write one binary container per split plus a human-readable manifest.

    Split file layout: magic line, 8-byte little-endian header length, JSON
    header {version, image_size, count, seed, config_hash, fields}, then raw
    row-major array bytes in header field order (ids int64, tasks uint8
    codes, labels uint8, pixels float32).
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = corpus.config.config_hash()
    manifest = {
        "version": 1,
        "seed": corpus.seed,
        "config": asdict(corpus.config),
        "config_hash": cfg_hash,
        "counts": {},
    }
    for split in SPLITS:
        ds = corpus.split(split)
        manifest["counts"][split] = {t: int(np.sum(ds.tasks == t)) for t in TASKS}
        task_codes = np.array([TASKS.index(t) for t in ds.tasks], dtype=np.uint8)
        header = {
            "version": 1,
            "image_size": corpus.config.image_size,
            "count": len(ds),
            "seed": corpus.seed,
            "config_hash": cfg_hash,
            "fields": [
                {"name": "ids", "dtype": "int64"},
                {"name": "tasks", "dtype": "uint8"},
                {"name": "labels", "dtype": "uint8"},
                {"name": "pixels", "dtype": "float32"},
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode() + b"\n"
        with open(out_dir / f"{split}.dmc", "wb") as f:
            f.write(CORPUS_MAGIC)
            f.write(len(blob).to_bytes(8, "little"))
            f.write(blob)
            f.write(ds.ids.astype(np.int64).tobytes())
            f.write(task_codes.tobytes())
            f.write(ds.labels.astype(np.uint8).tobytes())
            f.write(np.ascontiguousarray(ds.images, dtype=np.float32).tobytes())
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_corpus(corpus_dir):
    """Load a corpus written by save_corpus, validating the config hash."""
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no corpus manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg_dict = dict(manifest["config"])
    cfg_dict["continuous_counts"] = tuple(cfg_dict["continuous_counts"])
    cfg = CorpusConfig(**cfg_dict)
    if cfg.config_hash() != manifest["config_hash"]:
        raise ConfigError("corpus manifest config hash mismatch")
    splits = {}
    for split in SPLITS:
        with open(corpus_dir / f"{split}.dmc", "rb") as f:
            if f.read(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
                raise ConfigError(f"{split}.dmc is not a corpus container")
            hlen = int.from_bytes(f.read(8), "little")
            header = json.loads(f.read(hlen))
            if header["config_hash"] != manifest["config_hash"]:
                raise ConfigError(f"{split}.dmc config hash differs from the manifest")
            count = header["count"]
            s = header["image_size"]
            ids = np.frombuffer(f.read(count * 8), dtype=np.int64).copy()
            tasks = np.frombuffer(f.read(count), dtype=np.uint8)
            labels = np.frombuffer(f.read(count), dtype=np.uint8).copy()
            pixels = np.frombuffer(f.read(count * s * s * 4), dtype=np.float32)
            images = pixels.reshape(count, 1, s, s).copy()
        splits[split] = Dataset(images, labels, np.array([TASKS[c] for c in tasks]), ids)
    return Corpus(splits["base"], splits["continuous"], splits["validation"],
                  splits["test"], cfg, manifest["seed"])
