"""Dataset manifests, precomputed-embedding I/O, synthetic videos, episodes.

A dataset is an index of video records plus one prompt embedding per
class. Frame features arrive as precomputed T x D embeddings (any
external extractor can produce them); the synthetic encoder generates
them deterministically for verification. The episodic sampler draws
N-way K-shot P-query tasks from class-disjoint splits.

File formats:
  index:   JSON-lines, fields {video_id, class_id, split, feature_file, T, D}
  feature: raw little-endian float32, row-major T x D, no header
  prompts: header (class count u32, D u32) then per class
           (class_id u32, D little-endian float32)
"""

from __future__ import annotations

import functools
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ManifestError, ProtocolError

SPLITS = ("train", "val", "test")

# stream tags keeping every derived random stream disjoint under one run seed
_PROTO_TAG = 1
_FRAME_TAG = 2
_BASE_TAG = 3
_PERM_TAG = 4
_PROMPT_TAG = 5
_EPISODE_TAG = 6
FAKE_TAG = 7


def keyed_rng(*key) -> np.random.Generator:
    """Counter-based generator for an integer key tuple.

    Same key, same stream, bit for bit; distinct keys give statistically
    independent streams. This is the only RNG construction used anywhere,
    so every random draw in the system is reproducible from (seed, key).
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def episode_rng(run_seed: int, episode_index: int) -> np.random.Generator:
    """The sampling stream for one episode of one run."""
    return keyed_rng(run_seed, _EPISODE_TAG, episode_index)


@dataclass
class VideoRecord:
    """One video: identity, label, split, and lazily loaded features."""

    video_id: str
    class_id: int
    split: str
    frames: int
    dim: int
    feature_file: Optional[str] = None
    _features: Optional[np.ndarray] = field(default=None, repr=False)

    def features(self) -> np.ndarray:
        """The T x D float32 feature stack, loaded on first access.

        Caching is an idempotent write, so concurrent readers are safe.
        """
        if self._features is None:
            raw = np.fromfile(self.feature_file, dtype="<f4")
            self._features = raw.reshape(self.frames, self.dim)
        return self._features


class DatasetManifest:
    """Immutable view of a validated dataset.

    Construction enforces the protocol invariants: unique video ids,
    class-disjoint splits, and a prompt embedding for every referenced
    class.
    """

    def __init__(self, records, prompts, class_names=None):
        records = list(records)
        problems = []
        seen = set()
        for rec in records:
            if rec.video_id in seen:
                problems.append(f"duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)
            if rec.split not in SPLITS:
                problems.append(f"{rec.video_id}: unknown split {rec.split!r}")
        class_splits: dict[int, set] = {}
        for rec in records:
            class_splits.setdefault(rec.class_id, set()).add(rec.split)
        for cid, splits in sorted(class_splits.items()):
            if len(splits) > 1:
                problems.append(f"class {cid} appears in multiple splits: "
                                f"{sorted(splits)}")
            if cid not in prompts:
                problems.append(f"class {cid} has no prompt embedding")
        if problems:
            raise ManifestError("invalid manifest: " + "; ".join(problems))
        self.records = records
        self.prompts = {int(c): np.asarray(v, dtype=np.float32)
                        for c, v in prompts.items()}
        self.class_names = dict(class_names) if class_names else {
            c: f"class_{c}" for c in self.prompts}
        self._by_split: dict[str, dict[int, list]] = {s: {} for s in SPLITS}
        for rec in records:
            self._by_split[rec.split].setdefault(rec.class_id, []).append(rec)
        for groups in self._by_split.values():
            for vids in groups.values():
                vids.sort(key=lambda r: r.video_id)

    def classes_in(self, split: str) -> list:
        return sorted(self._by_split[split])

    def videos_of(self, split: str, class_id: int) -> list:
        return self._by_split[split][class_id]

    def prompt_bank(self, split: str = "train"):
        """(class ids, stacked prompt matrix) for every class of a split."""
        ids = self.classes_in(split)
        return ids, np.stack([self.prompts[c] for c in ids])


def prompt_token(manifest: DatasetManifest, class_id: int) -> np.ndarray:
    """The stored prompt embedding for a class."""
    if class_id not in manifest.prompts:
        raise DataError(f"no prompt embedding for class {class_id}")
    return manifest.prompts[class_id]


# ---------------------------------------------------------------------------
# manifest files


def load_prompts(path) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read prompt sidecar: {exc}") from None
    if len(blob) < 8:
        raise ManifestError(f"{path}: truncated prompt sidecar")
    count, dim = struct.unpack_from("<II", blob, 0)
    out = {}
    off = 8
    for _ in range(count):
        if off + 4 + 4 * dim > len(blob):
            raise ManifestError(f"{path}: truncated prompt sidecar")
        cid = struct.unpack_from("<I", blob, off)[0]
        off += 4
        out[cid] = np.frombuffer(blob[off:off + 4 * dim], dtype="<f4").copy()
        off += 4 * dim
    if off != len(blob):
        raise ManifestError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def write_prompts(path, prompts: dict) -> None:
    ids = sorted(prompts)
    dim = len(next(iter(prompts.values()))) if ids else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(ids), dim))
        for cid in ids:
            vec = np.asarray(prompts[cid], dtype="<f4")
            if vec.shape != (dim,):
                raise ManifestError(f"prompt for class {cid} has shape "
                                    f"{vec.shape}, expected ({dim},)")
            fh.write(struct.pack("<I", cid))
            fh.write(vec.tobytes())


def load_manifest(index_path, prompts_path=None) -> DatasetManifest:
    """Read and validate a JSON-lines index plus its prompt sidecar.

    All problems are collected and reported together rather than failing
    on the first.
    """
    base = os.path.dirname(os.path.abspath(index_path))
    if prompts_path is None:
        prompts_path = os.path.join(base, "prompts.bin")
    records = []
    problems = []
    try:
        fh = open(index_path, "r", encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read index: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: bad JSON ({exc.msg})")
                continue
            missing = [k for k in ("video_id", "class_id", "split",
                                   "feature_file", "T", "D") if k not in obj]
            if missing:
                problems.append(f"line {lineno}: missing fields {missing}")
                continue
            rec = VideoRecord(video_id=str(obj["video_id"]),
                              class_id=int(obj["class_id"]),
                              split=str(obj["split"]),
                              frames=int(obj["T"]), dim=int(obj["D"]),
                              feature_file=os.path.join(base, obj["feature_file"]))
            if rec.frames < 1 or rec.dim < 1:
                problems.append(f"{rec.video_id}: non-positive T or D")
                continue
            if not os.path.isfile(rec.feature_file):
                problems.append(f"{rec.video_id}: feature file "
                                f"{obj['feature_file']!r} missing")
                continue
            expect = 4 * rec.frames * rec.dim
            actual = os.path.getsize(rec.feature_file)
            if actual != expect:
                problems.append(f"{rec.video_id}: feature file holds {actual} "
                                f"bytes, expected {expect} for "
                                f"{rec.frames}x{rec.dim}")
                continue
            records.append(rec)
    if problems:
        raise ManifestError(f"{index_path}: " + "; ".join(problems))
    prompts = load_prompts(prompts_path) if os.path.isfile(prompts_path) else {}
    if records and not prompts:
        raise ManifestError(f"{index_path}: prompt sidecar {prompts_path} "
                            f"missing or empty")
    return DatasetManifest(records, prompts)


def write_manifest(out_dir, records_features, prompts, index_name="index.jsonl"):
    """Write feature binaries, prompt sidecar, and the JSON-lines index.

    ``records_features`` is an iterable of (VideoRecord, T x D array).
    Returns the index path.
    """
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, index_name)
    with open(index_path, "w", encoding="utf-8") as fh:
        for rec, feats in records_features:
            feats = np.ascontiguousarray(feats, dtype="<f4")
            if feats.shape != (rec.frames, rec.dim):
                raise ManifestError(f"{rec.video_id}: features {feats.shape} "
                                    f"vs declared ({rec.frames}, {rec.dim})")
            fname = f"{rec.video_id}.bin"
            feats.tofile(os.path.join(out_dir, fname))
            fh.write(json.dumps({"video_id": rec.video_id,
                                 "class_id": rec.class_id,
                                 "split": rec.split,
                                 "feature_file": fname,
                                 "T": rec.frames, "D": rec.dim}) + "\n")
    write_prompts(os.path.join(out_dir, "prompts.bin"), prompts)
    return index_path


# ---------------------------------------------------------------------------
# synthetic encoder


@dataclass(frozen=True)
class SyntheticConfig:
    """Deterministic stand-in for a frozen visual/text encoder pair.

    static mode: every video of a class is the class prototype plus frame
    noise, and the prompt IS the prototype, so classes are linearly
    separable and prompt-aligned.

    permuted mode: all classes share one multiset of base frames (a large
    common component plus per-slot deltas) arranged in a class-specific
    order. Frame means are identical across classes; only temporal order
    distinguishes them, which isolates the motion pathway.
    """

    num_classes: int
    dim: int
    frames: int = 8
    scale: float = 1.0
    sigma: float = 0.3
    mode: str = "static"
    seed: int = 0
    common_ratio: float = 8.0

    def __post_init__(self):
        if self.mode not in ("static", "permuted"):
            raise ConfigError(f"unknown synthetic mode {self.mode!r}")
        if self.sigma < 0:
            raise ConfigError(f"negative noise sigma {self.sigma}")
        if self.num_classes < 1 or self.dim < 1 or self.frames < 1:
            raise ConfigError("num_classes, dim, frames must be positive")


def class_prototype(cfg: SyntheticConfig, class_id: int) -> np.ndarray:
    rng = keyed_rng(cfg.seed, _PROTO_TAG, class_id)
    return (cfg.scale * rng.standard_normal(cfg.dim)).astype(np.float32)


@functools.lru_cache(maxsize=32)
def _base_deltas(cfg: SyntheticConfig) -> np.ndarray:
    return cfg.scale * keyed_rng(
        cfg.seed, _BASE_TAG, 1).standard_normal((cfg.frames, cfg.dim))


@functools.lru_cache(maxsize=32)
def _base_frames(cfg: SyntheticConfig) -> np.ndarray:
    common = cfg.common_ratio * cfg.scale * keyed_rng(
        cfg.seed, _BASE_TAG, 0).standard_normal(cfg.dim)
    return (common[None, :] + _base_deltas(cfg)).astype(np.float32)


@functools.lru_cache(maxsize=32)
def _permutations(cfg: SyntheticConfig) -> list:
    """Distinct frame orders per class, a deterministic walk of adjacent
    transpositions from a random base order.

    Keeping class orders a few swaps apart makes raw-frame margins between
    classes narrow while the corresponding frame differences flip hard,
    which is exactly the regime the motion pathway is meant for."""
    if cfg.frames == 1 and cfg.num_classes > 1:
        raise ConfigError(f"cannot find {cfg.num_classes} distinct orders "
                          f"of 1 frame")
    current = keyed_rng(cfg.seed, _PERM_TAG, 0).permutation(cfg.frames)
    seen = {tuple(current)}
    orders = [current.copy()]
    for cid in range(1, cfg.num_classes):
        rng = keyed_rng(cfg.seed, _PERM_TAG, cid)
        for attempt in range(10_000):
            pos = int(rng.integers(cfg.frames - 1))
            current[[pos, pos + 1]] = current[[pos + 1, pos]]
            if tuple(current) not in seen:
                break
        else:
            raise ConfigError(f"cannot find {cfg.num_classes} distinct orders "
                              f"of {cfg.frames} frames")
        seen.add(tuple(current))
        orders.append(current.copy())
    return orders


def class_prompt(cfg: SyntheticConfig, class_id: int) -> np.ndarray:
    if cfg.mode == "static":
        return class_prototype(cfg, class_id)
    rng = keyed_rng(cfg.seed, _PROMPT_TAG, class_id)
    return rng.standard_normal(cfg.dim).astype(np.float32)


def synth_encode(cfg: SyntheticConfig, class_id: int,
                 instance_seed: int) -> np.ndarray:
    """Features of one synthetic video, deterministic in all arguments."""
    if not 0 <= class_id < cfg.num_classes:
        raise DataError(f"class {class_id} outside 0..{cfg.num_classes - 1}")
    noise_rng = keyed_rng(cfg.seed, _FRAME_TAG, class_id, instance_seed)
    noise = cfg.sigma * noise_rng.standard_normal((cfg.frames, cfg.dim))
    if cfg.mode == "static":
        clean = np.tile(class_prototype(cfg, class_id), (cfg.frames, 1))
    else:
        clean = _base_frames(cfg)[_permutations(cfg)[class_id]]
    return (clean + noise).astype(np.float32)


def split_classes(num_classes: int, fractions=(0.5, 0.25, 0.25)) -> dict:
    """Partition class ids into train/val/test by fraction (train gets the
    rounding remainder)."""
    n_val = round(num_classes * fractions[1])
    n_test = round(num_classes * fractions[2])
    n_train = num_classes - n_val - n_test
    if n_train < 1:
        raise ConfigError(f"split fractions {fractions} leave no training "
                          f"classes out of {num_classes}")
    ids = list(range(num_classes))
    return {"train": ids[:n_train],
            "val": ids[n_train:n_train + n_val],
            "test": ids[n_train + n_val:]}


def build_synthetic_manifest(cfg: SyntheticConfig, videos_per_class: int,
                             fractions=(0.5, 0.25, 0.25)) -> DatasetManifest:
    """In-memory manifest over the synthetic encoder."""
    splits = split_classes(cfg.num_classes, fractions)
    records = []
    for split, ids in splits.items():
        for cid in ids:
            for v in range(videos_per_class):
                records.append(VideoRecord(
                    video_id=f"c{cid:03d}_v{v:03d}", class_id=cid, split=split,
                    frames=cfg.frames, dim=cfg.dim,
                    _features=synth_encode(cfg, cid, v)))
    prompts = {cid: class_prompt(cfg, cid) for cid in range(cfg.num_classes)}
    return DatasetManifest(records, prompts)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeBatch:
    """One N-way K-shot P-query task.

    ``support[c]`` holds K records and ``query[c]`` holds P records for
    episode class index c; ``class_ids[c]`` is the global class id and
    ``prompts[c]`` its prompt embedding.
    """

    way: int
    shot: int
    queries_per_class: int
    class_ids: list
    support: list
    query: list
    prompts: list


def sample_episode(manifest: DatasetManifest, rng: np.random.Generator,
                   way: int, shot: int, queries_per_class: int,
                   split: str) -> EpisodeBatch:
    """Uniform episode draw: classes without replacement, then K+P videos
    without replacement per class (first K support, rest query)."""
    classes = manifest.classes_in(split)
    if len(classes) < way:
        raise ProtocolError(f"need {way} classes in split {split!r}, "
                            f"have {len(classes)}")
    picked = [classes[i] for i in rng.choice(len(classes), way, replace=False)]
    need = shot + queries_per_class
    support, query, prompts = [], [], []
    for cid in picked:
        vids = manifest.videos_of(split, cid)
        if len(vids) < need:
            raise ProtocolError(f"class {cid} has {len(vids)} videos in "
                                f"{split!r}, need {need}")
        idx = rng.choice(len(vids), need, replace=False)
        chosen = [vids[i] for i in idx]
        support.append(chosen[:shot])
        query.append(chosen[shot:])
        prompts.append(manifest.prompts[cid])
    return EpisodeBatch(way=way, shot=shot, queries_per_class=queries_per_class,
                        class_ids=picked, support=support, query=query,
                        prompts=prompts)
