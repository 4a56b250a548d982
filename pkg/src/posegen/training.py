"""Training and evaluation loops shared by the CLI, demos and tests."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .data import Dataset, Sample
from .geometry import RigidTransform, sample_points
from .metrics import EvalRecord, add_distance, adds_distance
from .model import Batch, PoseNet, PosePrediction, prepare_inputs, select_final, stack_inputs
from .refine import IcpConfig, icp_refine

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    lr_final_fraction: float = 0.05  # cosine decay down to lr * this
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    max_seconds: float = 0.0  # 0 = no wall-clock limit
    chamfer_targets: int = 1024  # model points per generation target; 0 = grid_size

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.chamfer_targets < 0:
            raise ValueError("chamfer_targets must be >= 0")


@dataclass
class EpochLog:
    epoch: int
    pose: float
    cd_cano: float
    cd_posed: float
    total: float
    seconds: float


def _batch_targets(samples: Sequence[Sample], dataset: Dataset, n_target: int,
                   rng: np.random.Generator):
    cano = []
    for s in samples:
        cloud = dataset.objects[s.object_id].cloud_cano.points
        cano.append(cloud[rng.choice(len(cloud), n_target, replace=n_target > len(cloud))])
    cano = np.stack(cano)
    posed = np.stack([s.pose_gt.apply(c) for s, c in zip(samples, cano)])
    return cano, posed


def batch_loss(net: PoseNet, batch: Batch, samples: Sequence[Sample], dataset: Dataset,
               w: losses.LossWeights, rng: np.random.Generator, n_target: int = 0):
    """Forward pass and the three loss terms as tensors (means over the batch)."""
    with_gen = w.cano > 0 or w.posed > 0
    _, head, gen = net.forward(batch, with_generation=with_gen)
    model_pts = np.stack([s.model_sampled.points for s in samples])
    gt_pts = np.stack([s.pose_gt.apply(s.model_sampled.points) for s in samples])
    sym = np.array([dataset.objects[s.object_id].symmetric for s in samples])
    parts = []
    for flag in (False, True):
        idx = np.nonzero(sym == flag)[0]
        if len(idx) == 0:
            continue
        if len(idx) == len(samples):
            q, t, c = head.quat, head.trans, head.conf
        else:
            q, t, c = (ad.gather_rows(x, idx, axis=0) for x in (head.quat, head.trans, head.conf))
        parts.append(losses.confidence_pose_loss_tensor(q, t, c, gt_pts[idx], model_pts[idx], flag))
    pose = ad.mean(parts[0] if len(parts) == 1 else ad.concat(parts, axis=0))
    if with_gen:
        cano_t, posed_t = _batch_targets(samples, dataset, n_target or net.cfg.grid_size, rng)
        cd_cano = ad.mean(losses.chamfer_tensor(gen.cano, cano_t))
        cd_posed = ad.mean(losses.chamfer_tensor(gen.posed, posed_t))
    else:
        cd_cano = cd_posed = ad.Tensor(np.zeros((), dtype=net.dtype))
    return pose, cd_cano, cd_posed


def train(net: PoseNet, dataset: Dataset, cfg: TrainConfig = TrainConfig(),
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> list[EpochLog]:
    """Minimise the weighted total loss with Adam; returns one log row per epoch."""
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    state = ad.AdamState()
    samples = dataset.samples
    n_batches = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history = []
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        sums = np.zeros(4)
        t0 = time.perf_counter()
        for k in range(n_batches):
            chunk = [samples[i] for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            batch = stack_inputs([prepare_inputs(s.appearance, s.observed.points,
                                                 s.model_sampled.points, net.cfg, rng, net.dtype)
                                  for s in chunk])
            for p in params:
                p.zero_grad()
            with ad.Tape() as tape:
                lp, lc, lg = batch_loss(net, batch, chunk, dataset, cfg.weights, rng,
                                        cfg.chamfer_targets)
                loss = losses.total_loss(lp, lc, lg, cfg.weights)
            ad.backward(tape, loss)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.value)
            frac = step / max(total_steps - 1, 1)
            lr = cfg.lr * (cfg.lr_final_fraction + (1 - cfg.lr_final_fraction)
                           * 0.5 * (1 + math.cos(math.pi * frac)))
            ad.adam_step(params, lr, cfg.beta1, cfg.beta2, cfg.eps, state)
            step += 1
            sums += len(chunk) * np.array([lp.item(), lc.item(), lg.item(), loss.item()])
        means = sums / len(samples)
        row = EpochLog(epoch, *(float(v) for v in means), time.perf_counter() - t0)
        history.append(row)
        log.info("epoch %d: pose %.5f cd_cano %.5f cd_posed %.5f total %.5f (%.1fs)",
                 epoch, row.pose, row.cd_cano, row.cd_posed, row.total, row.seconds)
        if on_epoch is not None:
            on_epoch(row)
        if cfg.max_seconds and time.perf_counter() - start > cfg.max_seconds:
            log.info("stopping after epoch %d: time budget reached", epoch)
            break
    return history


def write_loss_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_P", "L_CD_cano", "L_CD_gt", "total", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.pose), repr(r.cd_cano), repr(r.cd_posed),
                        repr(r.total), f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# inference and evaluation


def inference_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 11])


def predict_batch(net: PoseNet, samples: Sequence[Sample], seed: int = 0,
                  start_index: int = 0, with_generation: bool = False):
    """Per-point predictions (and optionally generated clouds) for ``samples``."""
    items = [prepare_inputs(s.appearance, s.observed.points, s.model_sampled.points, net.cfg,
                            inference_rng(seed, start_index + k), net.dtype)
             for k, s in enumerate(samples)]
    batch = stack_inputs(items)
    _, head, gen = net.forward(batch, with_generation=with_generation)
    preds = [head.prediction(b) for b in range(len(samples))]
    return preds, gen


@dataclass
class SampleResult:
    index: int
    object_id: str
    estimate: RigidTransform
    record: EvalRecord
    icp_residual: float = float("nan")
    icp_iterations: int = 0


def evaluate_poses(dataset: Dataset, estimates: Sequence[RigidTransform],
                   with_icp: bool = False, icp_cfg: IcpConfig = IcpConfig()) -> list[SampleResult]:
    """Score given pose estimates, optionally after ICP refinement."""
    out = []
    for i, (s, est) in enumerate(zip(dataset.samples, estimates)):
        obj = dataset.objects[s.object_id]
        residual, iters = float("nan"), 0
        if with_icp:
            est, residual, iters, _ = icp_refine(est, s.observed, obj.cloud_cano, icp_cfg)
        rec = EvalRecord(s.object_id, add_distance(s.pose_gt, est, obj.cloud_cano),
                         adds_distance(s.pose_gt, est, obj.cloud_cano), obj.symmetric, obj.diameter)
        out.append(SampleResult(i, s.object_id, est, rec, residual, iters))
    return out


def predict_dataset(net: PoseNet, dataset: Dataset, seed: int = 0,
                    batch_size: int = 64) -> list[PosePrediction]:
    preds = []
    for start in range(0, len(dataset.samples), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        p, _ = predict_batch(net, chunk, seed, start)
        preds.extend(p)
    return preds


def evaluate(net: PoseNet, dataset: Dataset, with_icp: bool = False, seed: int = 0,
             icp_cfg: IcpConfig = IcpConfig()) -> list[SampleResult]:
    """Predict, keep the most confident hypothesis, optionally refine, score."""
    estimates = [select_final(p) for p in predict_dataset(net, dataset, seed)]
    return evaluate_poses(dataset, estimates, with_icp, icp_cfg)


def generation_errors(net: PoseNet, dataset: Dataset, seed: int = 0, n_target: int = 1024,
                      batch_size: int = 64) -> np.ndarray:
    """(n, 2) float64 Chamfer distances of the canonical and posed generated clouds."""
    rows = []
    for start in range(0, len(dataset.samples), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        _, gen = predict_batch(net, chunk, seed, start, with_generation=True)
        for b, s in enumerate(chunk):
            obj = dataset.objects[s.object_id]
            target = sample_points(obj.cloud_cano, n_target, seed + start + b).points
            rows.append((losses.chamfer(target, gen.cano.value[b].astype(np.float64)),
                         losses.chamfer(s.pose_gt.apply(target), gen.posed.value[b].astype(np.float64))))
    return np.array(rows)
