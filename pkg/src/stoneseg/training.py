"""Training loop, grid search, warm start, and hold-out evaluation.

A run walks seeded mini-batches for a fixed number of epochs, logging one
record per optimizer step and one per validation pass.  Records mirror to
a JSON Lines file when a log path is given; each line is self-contained
and tagged with its run id, so concurrent runs can append to one file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import imgio, metrics
from .annotations import DatasetIndex, IndexEntry
from .nnet.checkpoint import Checkpoint, load_checkpoint
from .nnet.model import ModelConfig, backward, build_model, forward, predict_mask

__all__ = [
    "TrainConfig",
    "GridSpec",
    "DivergedRunError",
    "ArrayDataset",
    "total_steps",
    "make_batches",
    "train_model",
    "grid_search",
    "pick_best_cell",
    "evaluate_model",
    "summarize_frames",
    "carve_val_split",
    "run_id",
    "steps_to_target",
]

OPTIMIZERS = ("sgd", "adam")
DIVERGENCE_LOSS = 100.0


class DivergedRunError(RuntimeError):
    """Training produced a non-finite or runaway loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int = 0
    optimizer: str = "adam"
    validation_interval: Optional[int] = None  # None = once per epoch
    warm_start: Optional[str] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.validation_interval is not None and self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")

    def echo(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "validation_interval": self.validation_interval,
            "warm_start": self.warm_start,
        }


@dataclass(frozen=True)
class GridSpec:
    learning_rates: tuple
    batch_sizes: tuple
    seeds_per_cell: int = 1

    def __post_init__(self):
        if not self.learning_rates or not self.batch_sizes:
            raise ValueError("grid axes must be non-empty")
        if self.seeds_per_cell < 1:
            raise ValueError("seeds_per_cell must be >= 1")


def run_id(config: ModelConfig, tcfg: TrainConfig) -> str:
    arch = f"{config.block_kind}{'pp' if config.nested_skips else ''}d{config.depth}"
    return f"{arch}-{tcfg.learning_rate:g}-{tcfg.batch_size}-{tcfg.seed}"


def total_steps(dataset_length: int, batch_size: int, epochs: int) -> int:
    """Optimizer steps in a full run: ceil(n / batch) batches per epoch."""
    if dataset_length < 1 or batch_size < 1 or epochs < 1:
        raise ValueError("dataset_length, batch_size and epochs must all be >= 1")
    return math.ceil(dataset_length / batch_size) * epochs


def _batch_positions(n: int, batch_size: int, seed: int, epoch: int):
    """Shuffled positions 0..n-1 chunked into batches (last may be short)."""
    order = np.random.default_rng(seed ^ epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(index: DatasetIndex, split: str, batch_size: int, seed: int, epoch: int):
    """Per-epoch batches of index entries under a seeded shuffle.

    The shuffle seed is seed XOR epoch, so epochs reorder independently
    while the whole schedule stays reproducible.
    """
    entries = index.split_entries(split)
    if not entries:
        raise ValueError(f"split '{split}' is empty")
    return [[entries[i] for i in pos] for pos in _batch_positions(len(entries), batch_size, seed, epoch)]


class ArrayDataset:
    """In-memory dataset: per split, frames (N,1,H,W) float32 in [0,1] and
    masks (N,1,H,W) float32 in {0,1}."""

    def __init__(self, splits: dict):
        self.splits = {}
        for name, (x, y) in splits.items():
            x = np.asarray(x, dtype=np.float32)
            y = np.asarray(y, dtype=np.float32)
            if x.ndim == 3:
                x = x[:, None]
            if y.ndim == 3:
                y = y[:, None]
            if x.shape != y.shape:
                raise ValueError(f"split '{name}': frames {x.shape} vs masks {y.shape}")
            self.splits[name] = (x, y)

    def arrays(self, split: str):
        if split not in self.splits or len(self.splits[split][0]) == 0:
            raise ValueError(f"split '{split}' is empty")
        return self.splits[split]

    def size(self, split: str) -> int:
        return len(self.splits.get(split, ((), ()))[0])

    def input_size(self):
        for x, _ in self.splits.values():
            return (x.shape[2], x.shape[3])
        raise ValueError("dataset has no splits")

    @classmethod
    def from_index(cls, index: DatasetIndex, root) -> "ArrayDataset":
        """Load every referenced frame and mask PNG into memory."""
        import os

        buckets = {}
        for e in index.entries:
            frame = imgio.read_gray(os.path.join(root, e.frame_path)).astype(np.float32) / 255.0
            mask = imgio.read_mask(os.path.join(root, e.mask_path)).astype(np.float32)
            buckets.setdefault(e.split, ([], []))
            buckets[e.split][0].append(frame)
            buckets[e.split][1].append(mask)
        return cls({k: (np.stack(v[0]), np.stack(v[1])) for k, v in buckets.items()})


def carve_val_split(index: DatasetIndex, fraction: float, seed: int) -> DatasetIndex:
    """Relabel a seeded video-level subset of the train split as val."""
    if not 0 < fraction < 1:
        raise ValueError("val fraction must be in (0, 1)")
    vids = index.video_ids("train")
    if len(vids) < 2:
        raise ValueError("need >= 2 train videos to carve a validation split")
    n_val = max(1, int(math.floor(fraction * len(vids) + 0.5)))
    order = np.random.default_rng(seed).permutation(len(vids))
    val_ids = {vids[i] for i in order[:n_val]}
    entries = tuple(
        e._replace(split="val") if e.split == "train" and e.video_id in val_ids else e
        for e in index.entries
    )
    return DatasetIndex(entries, index.seed)


def _sgd_step(params, grads, lr):
    for name in params:
        params[name] -= (lr * grads[name]).astype(params[name].dtype)


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name in params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            params[name] -= (lr * correct * self.m[name]
                             / (np.sqrt(self.v[name]) + self.eps)).astype(params[name].dtype)


def _batch_dice(prob, y):
    pred = predict_mask(prob)
    gt = (y != 0)
    return metrics.dice(pred, gt.astype(np.uint8))


def _validate(config, params, x, y, batch_size):
    """Forward-only pass over a split: mean per-frame Dice and mean BCE."""
    dices = []
    bces = []
    for i in range(0, len(x), batch_size):
        prob = forward(config, params, x[i:i + batch_size], check_finite=False)
        yb = y[i:i + batch_size]
        for j in range(len(prob)):
            dices.append(_batch_dice(prob[j:j + 1], yb[j:j + 1]))
            bces.append(metrics.bce(prob[j], yb[j]))
    return float(np.mean(dices)), float(np.mean(bces))


class _RecordSink:
    def __init__(self, log_path):
        self.records = []
        self.fh = open(log_path, "a") if log_path else None

    def emit(self, rec):
        self.records.append(rec)
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def train_model(config: ModelConfig, tcfg: TrainConfig, data: ArrayDataset,
                log_path=None):
    """Run a full training schedule and return (Checkpoint, records).

    One record per optimizer step (split "train", loss and batch Dice of
    the just-consumed batch) and one per validation pass (split "val",
    forward-only).  Non-finite loss or loss above 100 aborts the run.
    """
    x_train, y_train = data.arrays("train")
    has_val = data.size("val") > 0
    if has_val:
        x_val, y_val = data.arrays("val")

    if tcfg.warm_start:
        ckpt = load_checkpoint(tcfg.warm_start)
        if ckpt.config != config:
            raise ValueError(
                f"warm-start checkpoint config {ckpt.config} does not match requested {config}"
            )
        params = {k: v.copy() for k, v in ckpt.parameters.items()}
        steps_done = ckpt.training_steps_completed
    else:
        params = build_model(config, seed=tcfg.seed)
        steps_done = 0

    n = len(x_train)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    interval = tcfg.validation_interval or steps_per_epoch
    optimizer = _Adam(params) if tcfg.optimizer == "adam" else None
    rid = run_id(config, tcfg)
    echo = tcfg.echo()
    sink = _RecordSink(log_path)

    def record(step, epoch, split, dice, bce_val):
        sink.emit({"run_id": rid, "step": step, "epoch": epoch, "split": split,
                   "dice": dice, "bce": bce_val, **echo})

    step = 0
    try:
        for epoch in range(tcfg.epochs):
            for pos in _batch_positions(n, tcfg.batch_size, tcfg.seed, epoch):
                xb, yb = x_train[pos], y_train[pos]
                loss, grads, prob = backward(config, params, xb, yb)
                if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                    raise DivergedRunError(
                        f"run {rid} diverged at step {step + 1}: loss {loss}"
                    )
                if optimizer:
                    optimizer.step(params, grads, tcfg.learning_rate)
                else:
                    _sgd_step(params, grads, tcfg.learning_rate)
                step += 1
                record(step, epoch, "train", _batch_dice(prob, yb), loss)
                if has_val and step % interval == 0:
                    vdice, vbce = _validate(config, params, x_val, y_val, tcfg.batch_size)
                    record(step, epoch, "val", vdice, vbce)
    finally:
        sink.close()

    ckpt = Checkpoint(
        config=config,
        parameters=params,
        training_steps_completed=steps_done + step,
        input_size=data.input_size(),
    )
    return ckpt, sink.records


def steps_to_target(records, target: float):
    """First step whose validation Dice reaches the target, else None."""
    for rec in records:
        if rec["split"] == "val" and rec["dice"] >= target:
            return rec["step"]
    return None


def grid_search(config: ModelConfig, grid: GridSpec, data: ArrayDataset,
                base: TrainConfig = None, log_path=None):
    """Train every (learning rate x batch size x seed) cell.

    Cell score = best validation Dice over the cell's seeds.  Diverged
    runs score nothing but do not stop the search.  Ties prefer the lower
    learning rate, then the smaller batch.  Returns (best TrainConfig,
    records of all runs, per-cell summary).
    """
    if base is None:
        base = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=5)
    all_records = []
    cells = []
    for lr in grid.learning_rates:
        for bs in grid.batch_sizes:
            best_seed_score = None
            best_seed = None
            diverged = 0
            for seed in range(grid.seeds_per_cell):
                tcfg = replace(base, learning_rate=lr, batch_size=bs, seed=seed)
                try:
                    _, records = train_model(config, tcfg, data, log_path=log_path)
                except DivergedRunError:
                    diverged += 1
                    continue
                all_records.extend(records)
                vals = [r["dice"] for r in records if r["split"] == "val"]
                score = max(vals) if vals else None
                if score is not None and (best_seed_score is None or score > best_seed_score):
                    best_seed_score, best_seed = score, seed
            cells.append({"learning_rate": lr, "batch_size": bs,
                          "score": best_seed_score, "seed": best_seed,
                          "diverged_runs": diverged})
    best = pick_best_cell(cells)
    best_cfg = replace(base, learning_rate=best["learning_rate"],
                       batch_size=best["batch_size"], seed=best["seed"])
    return best_cfg, all_records, cells


def pick_best_cell(cells) -> dict:
    """Highest score wins; ties fall to the lower learning rate, then the
    smaller batch size.  Cells without a score (all runs diverged) lose."""
    scored = [c for c in cells if c["score"] is not None]
    if not scored:
        raise DivergedRunError("every grid cell diverged or produced no validation score")
    return max(scored, key=lambda c: (c["score"], -c["learning_rate"], -c["batch_size"]))


def evaluate_model(ckpt: Checkpoint, data: ArrayDataset, split: str = "test",
                   batch_size: int = 8) -> dict:
    """Hold-out report: per-frame metrics averaged over the split.

    AUC is reported two ways: "auc" pools every pixel of the split into
    one ranking, and "auc_mean" averages per-frame AUC over frames where
    it is defined (single-class frames are skipped and counted).  PSNR is
    averaged over frames with finite PSNR, with exact-match frames
    counted separately.
    """
    x, y = data.arrays(split)
    probs = []
    for i in range(0, len(x), batch_size):
        probs.append(forward(ckpt.config, ckpt.parameters, x[i:i + batch_size],
                             check_finite=False))
    return summarize_frames(np.concatenate(probs), y, split)


def summarize_frames(prob: np.ndarray, y: np.ndarray, split: str = "test") -> dict:
    """Aggregate per-frame reports for (N,1,H,W) probabilities and masks."""
    prob = np.asarray(prob)
    y = np.asarray(y).reshape(prob.shape)
    if prob.ndim == 3:
        prob, y = prob[:, None], y[:, None]
    keys = ("dice", "accuracy", "iou", "precision", "recall", "bce")
    sums = dict.fromkeys(keys, 0.0)
    counts = np.zeros(4, dtype=np.int64)  # tp fp tn fn
    aucs = []
    auc_skipped = 0
    psnrs = []
    psnr_inf = 0
    for i in range(len(prob)):
        rep = metrics.frame_report(prob[i, 0], y[i, 0])
        for k in keys:
            sums[k] += rep[k]
        counts += (rep["tp"], rep["fp"], rep["tn"], rep["fn"])
        if rep["auc"] is None:
            auc_skipped += 1
        else:
            aucs.append(rep["auc"])
        if math.isinf(rep["psnr"]):
            psnr_inf += 1
        else:
            psnrs.append(rep["psnr"])

    n = len(prob)
    flat_gt = (y != 0).reshape(-1)
    report = {k: sums[k] / n for k in keys}
    report.update({
        "n_frames": n,
        "split": split,
        "auc": metrics.roc_auc(prob.reshape(-1), flat_gt).auc
               if (flat_gt.any() and not flat_gt.all()) else None,
        "auc_mean": float(np.mean(aucs)) if aucs else None,
        "auc_undefined_frames": auc_skipped,
        "psnr": float(np.mean(psnrs)) if psnrs else math.inf,
        "psnr_exact_frames": psnr_inf,
        "tp": int(counts[0]), "fp": int(counts[1]),
        "tn": int(counts[2]), "fn": int(counts[3]),
    })
    return report
