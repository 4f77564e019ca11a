"""SGD with a poly learning-rate schedule, the training loop, and evaluation."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import AugmentConfig, DepthSample, augment, make_edge_targets, sample_rng, sobel, stack_batch
from .losses import LossWeights, total_loss
from .metrics import REL_DENOMINATORS, EvalReport, MetricAccumulator
from .model import EGDNet, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    init_lr: float = 0.01
    power: float = 0.9
    max_epoch: int = 25
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 20.0
    edge_threshold: float = 0.25
    augment: bool = True
    flip_prob: float = 0.5
    rotation_degrees: float = 5.0
    jitter_min: float = 0.6
    jitter_max: float = 1.4
    checkpoint_every: int = 1
    rel_denominator: str = "ground_truth"
    dtype: str = "float32"

    def __post_init__(self):
        if self.init_lr <= 0:
            raise ValueError("init_lr must be positive")
        if self.power <= 0:
            raise ValueError("power must be positive")
        if self.max_epoch < 1:
            raise ValueError("max_epoch must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.rel_denominator not in REL_DENOMINATORS:
            raise ValueError(f"rel_denominator must be one of {REL_DENOMINATORS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def augment_config(self) -> AugmentConfig:
        if not self.augment:
            return AugmentConfig.disabled()
        r = self.rotation_degrees
        return AugmentConfig(self.flip_prob, (-r, r), (self.jitter_min, self.jitter_max))


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """init_lr * (1 - epoch / max_epoch) ** power."""
    if not 0 <= epoch <= cfg.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epoch}]")
    return cfg.init_lr * (1 - epoch / cfg.max_epoch) ** cfg.power


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place heavy-ball update: v = m*v + (g + wd*p); p -= lr*v."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter '{name}' has no gradient")
    for name, p in params.items():
        dt = p.dtype.type
        step = p.grad + dt(weight_decay) * p.data if weight_decay else p.grad
        v = velocity.get(name)
        v = step.astype(p.dtype, copy=True) if v is None else dt(momentum) * v + step
        velocity[name] = v
        p.data = p.data - dt(lr) * v


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step(self.params, self.velocity, lr, self.momentum, self.weight_decay)


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS to one thread so float reductions are reproducible bit for bit."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _prepare_batch(samples: Sequence[DepthSample], dtype, edge_threshold: float):
    rgb, depth, valid = stack_batch(list(samples), dtype)
    return Tensor(rgb), Tensor(sobel(rgb)), depth, valid, make_edge_targets(depth, valid, edge_threshold)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[DepthSample],
    out_dir=None,
    deterministic: bool = True,
    on_step: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train from scratch and return the final checkpoint.

    Per epoch: seeded shuffle, per-sample augmentation streams derived from
    (seed, epoch, index), poly learning rate. Checkpoints go to ``out_dir``
    every ``checkpoint_every`` epochs and as ``final.egdc``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    expect = (model_cfg.input_height, model_cfg.input_width)
    for i, s in enumerate(dataset):
        if s.size != expect:
            raise ValueError(f"sample {i} is {s.size[1]}x{s.size[0]}, model expects {expect[1]}x{expect[0]}")
    dtype = np.dtype(train_cfg.dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with single_threaded(deterministic):
        model = EGDNet(model_cfg, rng=np.random.default_rng(train_cfg.seed), dtype=dtype)
        model.train()
        opt = SGD(dict(model.named_parameters()), train_cfg.momentum, train_cfg.weight_decay)
        aug_cfg = train_cfg.augment_config
        weights = train_cfg.loss_weights
        step = 0
        n = len(dataset)
        for epoch in range(train_cfg.max_epoch):
            lr = poly_lr(epoch, train_cfg)
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                idx = order[start : start + train_cfg.batch_size]
                batch = [augment(dataset[i], aug_cfg, sample_rng(train_cfg.seed, epoch, int(i))) for i in idx]
                rgb, grads, depth_gt, valid, edge_gt = _prepare_batch(batch, dtype, train_cfg.edge_threshold)
                pred, edge_logits = model(rgb, grads)
                loss, parts = total_loss(pred, depth_gt, edge_logits, edge_gt, valid, weights)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                record = {"epoch": epoch, "step": step, "lr": lr, **parts}
                log.info("epoch %d step %d lr %.5f loss %.4f (depth %.4f, edge %.4f)",
                         epoch, step, lr, parts["total"], parts["depth"], parts["edge"])
                if on_step is not None:
                    on_step(record)
                step += 1
            every = train_cfg.checkpoint_every
            if out_dir is not None and every > 0 and (epoch + 1) % every == 0:
                save_checkpoint(Checkpoint.from_model(model, opt.velocity, epoch + 1, step),
                                out_dir / f"epoch_{epoch + 1:03d}.egdc")
        final = Checkpoint.from_model(model, opt.velocity, train_cfg.max_epoch, step)
        if out_dir is not None:
            save_checkpoint(final, out_dir / "final.egdc")
    return final


def evaluate(
    source: Checkpoint | EGDNet,
    dataset: Sequence[DepthSample],
    batch_size: int = 8,
    rel_denominator: str = "ground_truth",
) -> EvalReport:
    """Eval-mode forward, clamp, and pixel-weighted metrics over the whole dataset."""
    model = source.build_model() if isinstance(source, Checkpoint) else source
    cfg = model.config
    acc = MetricAccumulator(rel_denominator)
    dataset = list(dataset)
    for start in range(0, len(dataset), batch_size):
        rgb, depth, valid = stack_batch(dataset[start : start + batch_size], np.float64)
        pred, _ = model.predict(rgb)
        acc.update(np.clip(pred, cfg.depth_min, cfg.depth_max), depth, valid)
    return acc.report()
