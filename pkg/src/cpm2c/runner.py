"""Episodic training, parallel evaluation, and the model gradient audit.

Training accumulates gradients over a window of episodes per optimizer
step (the window mean, so window size changes variance but not scale),
logs one metrics row per step, and keeps the last healthy parameter
snapshot so a non-finite gradient aborts without corrupting the run.
Evaluation distributes episodes over worker threads but reduces in
episode-index order, so the reported numbers do not depend on the
worker count.
"""

from __future__ import annotations

import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import DatasetManifest, episode_rng, keyed_rng, sample_episode, \
    write_manifest
from .errors import ConfigError, DataError, NumericalError
from .metric import AlignmentConfig
from .model import Ablation, Model, episode_forward
from .nn import Adam, apply_state, load_checkpoint, save_checkpoint
from .objective import LossWeights
from .tensor import Tensor

PRESETS = {
    "full": Ablation(),
    "no-motion": Ablation(use_motion=False),
    "motion-only": Ablation(use_normal=False),
    "no-consistency": Ablation(),
}

_GRADCHECK_TAG = 9


@dataclass
class RunConfig:
    """Every knob of a training or evaluation run."""

    way: int = 5
    shot: int = 1
    queries: int = 1
    steps: int = 100
    window: int = 1                  # episodes accumulated per step
    lr: float = 1e-3
    seed: int = 0
    temperature: float = 0.1
    alpha: float = 1.0
    gamma: float = 0.1
    bidirectional: bool = True
    relaxed_ends: bool = False
    lam_adapt: float = 1.0
    lam_task: float = 1.0
    lam_consistency: float = 1.0
    consistency_reduction: str = "sum"
    preset: str = "full"
    num_heads: int = 8
    ffn_hidden: Optional[int] = None
    phi_blocks: int = 2
    workers: int = 1
    train_split: str = "train"
    eval_split: str = "val"
    eval_episodes: int = 200
    eval_start: int = 1_000_000      # index offset keeping eval episodes
                                     # disjoint from training episodes
    log_every: int = 50

    def __post_init__(self):
        for name in ("way", "shot", "queries", "window", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, "
                                  f"got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from "
                              f"{sorted(PRESETS)}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def weights(self) -> LossWeights:
        lam_con = 0.0 if self.preset == "no-consistency" \
            else self.lam_consistency
        return LossWeights(self.lam_adapt, self.lam_task, lam_con,
                           self.temperature)

    def align(self) -> AlignmentConfig:
        return AlignmentConfig(self.gamma, self.bidirectional,
                               self.relaxed_ends)

    def ablation(self) -> Ablation:
        return PRESETS[self.preset]


def manifest_shape(manifest: DatasetManifest):
    """The common (frames, dim) of every manifest record."""
    shapes = {(rec.frames, rec.dim) for rec in manifest.records}
    if len(shapes) != 1:
        raise DataError(f"manifest mixes feature shapes {sorted(shapes)}")
    return next(iter(shapes))


def build_model(manifest: DatasetManifest, cfg: RunConfig) -> Model:
    frames, dim = manifest_shape(manifest)
    return Model(dim=dim, frames=frames, num_heads=cfg.num_heads,
                 ffn_hidden=cfg.ffn_hidden, phi_blocks=cfg.phi_blocks,
                 temperature=cfg.temperature, seed=cfg.seed)


def restore_model(mdl: Model, path) -> None:
    apply_state(mdl.named_state(), load_checkpoint(path))


def _episode_kwargs(cfg: RunConfig):
    return dict(weights=cfg.weights(), align=cfg.align(), alpha=cfg.alpha,
                ablation=cfg.ablation(),
                consistency_reduction=cfg.consistency_reduction)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Model
    history: list
    wall_time: float
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None


def _snapshot(mdl: Model):
    return [(name, np.array(value.data if isinstance(value, Tensor)
                            else value, copy=True))
            for name, value in mdl.named_state()]


def _restore_snapshot(mdl: Model, snap) -> None:
    state = dict(snap)
    for name, value in mdl.named_state():
        saved = state[name]
        if isinstance(value, Tensor):
            value.data = saved.copy()
        else:
            value[...] = saved


def train(manifest: DatasetManifest, cfg: RunConfig,
          out_dir: Optional[str] = None, mdl: Optional[Model] = None,
          log=None) -> TrainResult:
    """Run cfg.steps optimizer steps of episodic training.

    Each step averages gradients over ``cfg.window`` episodes. A
    non-finite gradient aborts the run: parameters roll back to the end
    of the last healthy step (written to the checkpoint when ``out_dir``
    is given) and a NumericalError names the step. Same config plus same
    seed reproduces the run bit for bit.
    """
    if mdl is None:
        mdl = build_model(manifest, cfg)
    log = log if log is not None else sys.stdout
    optimizer = Adam(mdl.named_parameters(), lr=cfg.lr)
    bank = manifest.prompt_bank(cfg.train_split)
    kwargs = _episode_kwargs(cfg)
    history = []
    metrics_fh = None
    checkpoint_path = metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        metrics_fh = open(metrics_path, "w", encoding="utf-8")

    good = _snapshot(mdl)
    start = time.perf_counter()
    header_done = False
    try:
        for step in range(cfg.steps):
            optimizer.zero_grad()
            sums = {"adapt": 0.0, "task": 0.0, "consistency": 0.0,
                    "total": 0.0}
            for j in range(cfg.window):
                index = step * cfg.window + j
                episode = sample_episode(manifest,
                                         episode_rng(cfg.seed, index),
                                         cfg.way, cfg.shot, cfg.queries,
                                         cfg.train_split)
                with T.Tape():
                    res = episode_forward(mdl, episode, run_seed=cfg.seed,
                                          episode_index=index, bank=bank,
                                          train=True, **kwargs)
                T.backward(res.loss)
                for key in sums:
                    sums[key] += res.parts[key]
            if cfg.window > 1:
                for _, p in mdl.named_parameters():
                    if p.grad is not None:
                        p.grad = p.grad / cfg.window
            try:
                optimizer.step()
            except NumericalError as exc:
                _restore_snapshot(mdl, good)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, mdl.named_state())
                raise NumericalError(
                    f"aborted at optimizer step {step}: {exc}; parameters "
                    f"rolled back to the end of step {step - 1}") from exc
            good = _snapshot(mdl)
            row = {"step": step + 1,
                   "wall": round(time.perf_counter() - start, 3)}
            row.update((k, sums[k] / cfg.window) for k in sums)
            history.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
                if not header_done:
                    print(f"{'step':>6} {'total':>12} {'adapt':>10} "
                          f"{'task':>10} {'consist':>12} {'wall':>8}",
                          file=log)
                    header_done = True
                print(f"{row['step']:>6} {row['total']:>12.4f} "
                      f"{row['adapt']:>10.4f} {row['task']:>10.4f} "
                      f"{row['consistency']:>12.4f} {row['wall']:>8.1f}",
                      file=log)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, mdl.named_state())
    return TrainResult(mdl, history, time.perf_counter() - start,
                       checkpoint_path, metrics_path)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    episodes: int
    total_queries: int
    correct: int
    accuracy: float
    half_width: float                # 1.96 * sqrt(p * (1 - p) / queries)
    wall_time: float
    parts_mean: Optional[dict] = None
    per_episode_correct: list = field(default_factory=list)


def evaluate(manifest: DatasetManifest, mdl: Model, cfg: RunConfig,
             episodes: Optional[int] = None, split: Optional[str] = None,
             start_index: Optional[int] = None, compute_losses: bool = False,
             workers: Optional[int] = None, bank=None,
             way: Optional[int] = None, shot: Optional[int] = None,
             queries: Optional[int] = None) -> EvalResult:
    """Score the model over a block of evaluation episodes.

    Episode i draws from the stream keyed by (seed, start_index + i), so
    the block is reproducible and disjoint from training. Results are
    reduced in index order with float64 accumulators; any worker count
    gives the same numbers. Parameters are never mutated.
    """
    episodes = cfg.eval_episodes if episodes is None else episodes
    split = cfg.eval_split if split is None else split
    start = cfg.eval_start if start_index is None else start_index
    workers = cfg.workers if workers is None else workers
    way = cfg.way if way is None else way
    shot = cfg.shot if shot is None else shot
    queries = cfg.queries if queries is None else queries
    kwargs = _episode_kwargs(cfg)
    dtype = T.default_dtype().__name__

    def run_one(i: int):
        with T.precision(dtype):
            index = start + i
            episode = sample_episode(manifest, episode_rng(cfg.seed, index),
                                     way, shot, queries, split)
            return episode_forward(mdl, episode, run_seed=cfg.seed,
                                   episode_index=index, bank=bank,
                                   train=False,
                                   compute_losses=compute_losses, **kwargs)

    t0 = time.perf_counter()
    if workers == 1:
        results = [run_one(i) for i in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(episodes)))

    correct = 0
    total = 0
    per_episode = []
    part_sums: dict = {}
    for res in results:                  # index order: reduction is fixed
        correct += res.correct
        total += len(res.true_labels)
        per_episode.append(res.correct)
        if compute_losses:
            for key, val in res.parts.items():
                part_sums[key] = part_sums.get(key, 0.0) + float(val)
    accuracy = correct / total if total else 0.0
    half = 1.96 * np.sqrt(accuracy * (1.0 - accuracy) / total) if total else 0.0
    parts_mean = ({k: v / episodes for k, v in part_sums.items()}
                  if compute_losses else None)
    return EvalResult(episodes, total, correct, accuracy, float(half),
                      time.perf_counter() - t0, parts_mean, per_episode)


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class GradcheckEntry:
    name: str
    max_err: float
    worst_coord: int
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_err <= 1e-4


@dataclass
class GradcheckReport:
    entries: list
    tolerance: float
    wall_time: float

    @property
    def ok(self) -> bool:
        return all(e.max_err <= self.tolerance for e in self.entries)

    @property
    def worst(self) -> GradcheckEntry:
        return max(self.entries, key=lambda e: e.max_err)

    def summary(self) -> str:
        lines = [f"{'parameter':<40} {'max rel err':>12} {'coord':>7} "
                 f"{'status':>7}"]
        for e in self.entries:
            status = "ok" if e.max_err <= self.tolerance else "FAIL"
            lines.append(f"{e.name:<40} {e.max_err:>12.3e} "
                         f"{e.worst_coord:>7} {status:>7}")
        verdict = "PASS" if self.ok else (
            f"FAIL: parameter {self.worst.name!r} coordinate "
            f"{self.worst.worst_coord} rel err {self.worst.max_err:.3e} "
            f"> {self.tolerance}")
        lines.append(verdict)
        return "\n".join(lines)


def gradcheck(manifest: DatasetManifest, cfg: RunConfig,
              coords_per_param: int = 20, h: float = 1e-5,
              tol: float = 1e-4, episode_index: int = 0) -> GradcheckReport:
    """Compare every model parameter's gradient to central differences.

    Runs in float64 on one fixed training episode through the full
    weighted loss. Each parameter tensor is probed at up to
    ``coords_per_param`` random coordinates; the report lists the max
    relative error per parameter and fails if any exceeds ``tol``.
    """
    t0 = time.perf_counter()
    with T.precision("float64"):
        mdl = build_model(manifest, cfg)
        bank = manifest.prompt_bank(cfg.train_split)
        episode = sample_episode(manifest,
                                 episode_rng(cfg.seed, episode_index),
                                 cfg.way, cfg.shot, cfg.queries,
                                 cfg.train_split)
        kwargs = _episode_kwargs(cfg)

        def loss_value() -> float:
            res = episode_forward(mdl, episode, run_seed=cfg.seed,
                                  episode_index=episode_index, bank=bank,
                                  train=True, **kwargs)
            return float(res.loss.data)

        for _, p in mdl.named_parameters():
            p.grad = None
        with T.Tape():
            res = episode_forward(mdl, episode, run_seed=cfg.seed,
                                  episode_index=episode_index, bank=bank,
                                  train=True, **kwargs)
        T.backward(res.loss)

        entries = []
        rng = keyed_rng(cfg.seed, _GRADCHECK_TAG)
        for name, p in mdl.named_parameters():
            analytic = p.grad if p.grad is not None \
                else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            aflat = np.asarray(analytic).reshape(-1)
            count = min(coords_per_param, flat.size)
            coords = rng.choice(flat.size, size=count, replace=False)
            max_err, worst = 0.0, -1
            for c in coords:
                c = int(c)
                old = flat[c]
                flat[c] = old + h
                hi = loss_value()
                flat[c] = old - h
                lo = loss_value()
                flat[c] = old
                numeric = (hi - lo) / (2.0 * h)
                err = abs(aflat[c] - numeric) / max(1.0, abs(numeric))
                if err > max_err:
                    max_err, worst = err, c
            entries.append(GradcheckEntry(name, max_err, worst, count))
    return GradcheckReport(entries, tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# feature archiving


def dump_features(manifest: DatasetManifest, out_dir: str,
                  split: Optional[str] = None) -> str:
    """Write the manifest (optionally one split) to ``out_dir``.

    Features, prompts and the index land in the standard binary layout;
    loading the result reproduces the input records bit for bit.
    """
    records = [rec for rec in manifest.records
               if split is None or rec.split == split]
    if not records:
        raise DataError(f"no records to dump for split {split!r}")
    keep = {rec.class_id for rec in records}
    prompts = {cid: vec for cid, vec in manifest.prompts.items()
               if cid in keep}
    return write_manifest(out_dir, [(rec, rec.features()) for rec in records],
                          prompts)
