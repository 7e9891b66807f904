"""Mini-batch Adam on the per-sample L1 loss, with best-validation restore."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import format_float
from .errors import ConfigError, DimensionError, DivergenceError
from .graph import Graph
from .model import DeepGraphONet, save_params
from .sampling import DatasetSplit, TripletSet, mode_for_variant
from .tensorcore import Tensor, adam_step, as_tensor, no_grad, sub, tabs, tmean, tsum

log = logging.getLogger(__name__)


def l1_loss(pred, target) -> Tensor:
    """Sum of absolute node errors; for ``[B, n]`` inputs, the mean over the batch."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: pred {pred.shape} vs target {target.shape}")
    per_sample = tsum(tabs(sub(pred, target)), axis=-1)
    return per_sample if per_sample.ndim == 0 else tmean(per_sample)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    val_every: int = 1
    checkpoint_path: str | None = None
    resample_windows: bool | None = None  # None: on for the resolution-independent variant

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("epochs, batch_size and val_every must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_epochs: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int | None = None
    epoch_seconds: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        val = dict(zip(self.val_epochs, self.val_loss))
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tl in enumerate(self.train_loss):
                w.writerow([e, format_float(tl), format_float(val[e]) if e in val else ""])


def evaluate_loss(model: DeepGraphONet, g: Graph, triplets: TripletSet, chunk: int = 4096) -> float:
    """Mean per-sample L1 loss; records no tape and never touches parameters."""
    N = len(triplets)
    if N == 0:
        raise ConfigError("evaluate_loss needs a non-empty triplet set")
    total = 0.0
    with no_grad():
        for lo in range(0, N, chunk):
            idx = np.arange(lo, min(lo + chunk, N))
            X, inv = triplets.grouped_batch(idx, model.config.variant)
            pred = model.forward_grouped(g, X, triplets.h_n[idx], inv).data
            total += np.abs(pred - triplets.targets[idx]).sum()
    return float(total / N)


def _epoch_order(groups: np.ndarray, rng: np.random.Generator, shuffle: bool) -> np.ndarray:
    """Row order with whole window groups shuffled (rows of a group stay adjacent)."""
    if not shuffle:
        return np.arange(groups.size)
    _, first, counts = np.unique(groups, return_index=True, return_counts=True)
    perm = rng.permutation(first.size)
    return np.concatenate([np.arange(first[k], first[k] + counts[k]) for k in perm])


def train(model: DeepGraphONet, split: DatasetSplit, cfg: TrainConfig,
          g: Graph | None = None) -> tuple[DeepGraphONet, TrainHistory]:
    """Train ``model`` in place; on return it holds the best-validation weights."""
    if split.train is None or len(split.train) == 0:
        raise ConfigError("training set is empty")
    g = g if g is not None else split.train_trajs[0].graph
    mcfg = model.config
    if split.sampling is not None and split.sampling.mode != mode_for_variant(mcfg.variant):
        raise ConfigError(f"{mcfg.variant} model cannot train on {split.sampling.mode}-sensor windows")
    resample = cfg.resample_windows
    if resample is None:
        resample = mcfg.variant == "resolution_independent"
    if resample and split.sampling is None:
        raise ConfigError("window re-sampling needs the split's sampling config")

    rng = np.random.default_rng(cfg.seed)
    store = model.store
    store.zero_grad()
    hist = TrainHistory()
    best_val = np.inf
    best_values = store.values()
    data = split.train

    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        if resample and epoch > 0:
            data = split.sampling.build(split.train_trajs, seed=[split.sampling.seed, epoch])
        hq = data.h_n
        Y = data.targets
        N = len(data)
        order = _epoch_order(data.group, rng, cfg.shuffle)
        running = 0.0
        for bi, lo in enumerate(range(0, N, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            X, inv = data.grouped_batch(idx, mcfg.variant)
            loss = l1_loss(model.forward_grouped(g, X, hq[idx], inv), Y[idx])
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            loss.backward()
            adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            running += val * idx.size
        hist.train_loss.append(running / N)

        if split.val is not None and len(split.val) and (
                epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            vl = evaluate_loss(model, g, split.val)
            if not np.isfinite(vl):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            hist.val_epochs.append(epoch)
            hist.val_loss.append(vl)
            if vl < best_val:
                best_val = vl
                best_values = store.values()
                hist.best_epoch = epoch
                if cfg.checkpoint_path:
                    save_params(model, cfg.checkpoint_path)
        hist.epoch_seconds.append(time.perf_counter() - t_start)
        log.debug("epoch %d train %.6g", epoch, hist.train_loss[-1])

    if hist.best_epoch is None:
        hist.best_epoch = cfg.epochs - 1
        best_values = store.values()
        if cfg.checkpoint_path:
            save_params(model, cfg.checkpoint_path)
    store.load_values(best_values)
    return model, hist
