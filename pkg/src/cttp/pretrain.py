"""Pretraining loops: contrastive pairing plus the single-sensor baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio
from . import model as M
from .autodiff import NumericError, Tensor

log = logging.getLogger(__name__)

MODES = ("cttp", "recon", "sup-class", "sup-pose", "random")
BASELINE_MODES = ("recon", "sup-class", "sup-pose", "random")
SWEEP_SIZES = (8, 16, 32, 64, 128, 256)


@dataclass
class PretrainConfig:
    mode: str = "cttp"
    batch_size: int = 128
    epochs: int = 30
    lr: float = 3e-4
    tau: float = 0.2
    symmetric: bool = True
    tied: bool = True  # cttp only: one network embeds both sensors
    seed: int = 0
    backbone_dim: int = M.BACKBONE_DIM

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pretraining mode {self.mode!r}; choose from {MODES}")
        if self.mode == "cttp" and self.batch_size < 2:
            raise ValueError("cttp needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class BatchPairs:
    index: np.ndarray
    gel: np.ndarray
    membrane: np.ndarray
    tool_ids: np.ndarray
    poses: np.ndarray


def batch_indices(n: int, batch_size: int, epoch_seed: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into full batches; the remainder is dropped."""
    if n < batch_size:
        raise ValueError(f"split of {n} records is smaller than one batch of {batch_size}")
    order = ad.rng_stream(seed, "train-shuffle", epoch_seed).permutation(n)
    n_batches = n // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]


def build_batches(split: dataio.SplitData, batch_size: int, epoch_seed: int, seed: int = 0):
    for idx in batch_indices(len(split), batch_size, epoch_seed, seed):
        yield BatchPairs(idx, split.gel[idx], split.membrane[idx], split.tool_ids[idx], split.poses[idx])


@dataclass
class PretrainResult:
    mode: str
    towers: dict
    losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    steps: int = 0

    def checkpoint(self) -> dict:
        return M.towers_state(self.towers)


def _check_finite(loss: Tensor, step: int):
    if not math.isfinite(float(loss.data)):
        raise NumericError(f"non-finite loss at step {step}")


def _run_epochs(cfg, split, params, loss_fn, result, epoch_hook=None):
    opt = ad.Adam(params, lr=cfg.lr)
    step = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in build_batches(split, cfg.batch_size, epoch, cfg.seed):
            with ad.Tape():
                loss = loss_fn(batch)
                _check_finite(loss, step)
                opt.zero_grad()
                ad.backward(loss)
            try:
                opt.step()
            except NumericError as e:
                raise NumericError(f"{e} at step {step}") from e
            val = float(loss.data)
            result.losses.append(val)
            epoch_losses.append(val)
            step += 1
        result.epoch_losses.append(float(np.mean(epoch_losses)))
        log.info("%s epoch %d/%d loss %.4f", cfg.mode, epoch + 1, cfg.epochs, result.epoch_losses[-1])
        if epoch_hook is not None:
            epoch_hook(epoch, result)
    result.steps = step
    return result


def pretrain_cttp(cfg: PretrainConfig, split: dataio.SplitData, epoch_hook=None) -> PretrainResult:
    if cfg.mode != "cttp":
        raise ValueError(f"pretrain_cttp called with mode {cfg.mode!r}")
    towers = M.build_towers(cfg.seed, cfg.backbone_dim, tied=cfg.tied)
    ccfg = M.ContrastiveConfig(cfg.tau, cfg.symmetric)
    params = M.unique_parameters(towers)

    def loss_fn(batch):
        _, z1 = towers["gel"].forward(batch.gel)
        _, z2 = towers["membrane"].forward(batch.membrane)
        return M.infonce_loss(z1, z2, ccfg)

    return _run_epochs(cfg, split, params, loss_fn, PretrainResult("cttp", towers), epoch_hook)


def pretrain_baseline(cfg: PretrainConfig, split: dataio.SplitData, epoch_hook=None) -> PretrainResult:
    """Train each sensor's tower on its own frames with a mode-specific head.

    Towers are never tied here: nothing links the two sensors.  Heads are
    discarded afterwards; projection heads stay at their init.
    """
    if cfg.mode not in BASELINE_MODES:
        raise ValueError(f"pretrain_baseline does not handle mode {cfg.mode!r}")
    towers = M.build_towers(cfg.seed, cfg.backbone_dim)
    result = PretrainResult(cfg.mode, towers)
    if cfg.mode == "random":
        return result

    heads = {}
    for s, tower in towers.items():
        rng = ad.rng_stream(cfg.seed, f"init/head/{cfg.mode}/{s}")
        if cfg.mode == "recon":
            heads[s] = M.ReconHead(cfg.backbone_dim, M.CHANNELS[s], rng, size=split.hw[0], prefix=f"{s}.head")
        elif cfg.mode == "sup-class":
            n_classes = int(split.tool_ids.max()) + 1
            heads[s] = M.ClassifierHead(cfg.backbone_dim, n_classes, rng, prefix=f"{s}.head")
        else:
            heads[s] = M.PoseHead(cfg.backbone_dim, rng, prefix=f"{s}.head")
    params = []
    for s in towers:
        params += towers[s].encoder.parameters() + heads[s].parameters()

    def loss_fn(batch):
        total = None
        for s, tower in towers.items():
            frames = batch.gel if s == "gel" else batch.membrane
            out = heads[s](tower.features(frames))
            if cfg.mode == "recon":
                loss = M.recon_mse(out, M.prepare_frames(frames, s))
            elif cfg.mode == "sup-class":
                loss = M.ce_loss(out, batch.tool_ids.astype(np.int64))
            else:
                loss = M.pose_mse(out, batch.poses)
            total = loss if total is None else total + loss
        return total

    _run_epochs(cfg, split, params, loss_fn, result, epoch_hook)
    result.heads = heads
    return result


def pretrain(cfg: PretrainConfig, split: dataio.SplitData, epoch_hook=None) -> PretrainResult:
    if cfg.mode == "cttp":
        return pretrain_cttp(cfg, split, epoch_hook)
    return pretrain_baseline(cfg, split, epoch_hook)


def checkpoint_hook(out_dir):
    """Epoch hook writing ``epoch_###.ckpt`` files."""
    out = Path(out_dir)

    def hook(epoch, result):
        dataio.save_checkpoint(result.checkpoint(), out / f"epoch_{epoch + 1:03d}.ckpt")

    return hook


def batch_size_sweep(sizes, base: PretrainConfig, split: dataio.SplitData, evaluate=None):
    """Train one CTTP model per batch size; ``evaluate(result) -> dict`` adds metrics per row."""
    sizes = list(sizes)
    if not sizes:
        raise ValueError("empty size list")
    bad = [s for s in sizes if s < 2]
    if bad:
        raise ValueError(f"batch sizes must be >= 2, got {bad}")
    rows, results = [], {}
    for size in sizes:
        cfg = replace(base, mode="cttp", batch_size=int(size))
        res = pretrain_cttp(cfg, split)
        results[size] = res
        row = {"batch_size": int(size), "steps": res.steps, "final_epoch_loss": res.epoch_losses[-1] if res.epoch_losses else None}
        if evaluate is not None:
            row.update(evaluate(res))
        rows.append(row)
    return rows, results
