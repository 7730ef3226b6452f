"""Masked heatmap loss, optimizers, the training loop and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .network import LandmarkNet, NetworkConfig, build_network, forward
from .serialization import read_checkpoint_file, write_checkpoint_file, FormatError
from .tensor import GradTape, NonFiniteError, ShapeError, Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a step cannot proceed (degenerate batch, non-finite loss)."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"optimizer kind must be 'adam' or 'sgd_momentum', got {self.kind!r}")
        # lr == 0 is allowed: it is the null-update control run
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


def masked_mse_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over the elements of unmasked channels only.

    ``mask`` is ``[N, 8]`` booleans, true where the channel participates. With
    no participating channel the loss is 0.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(f"masked_mse_loss: pred {pred.shape} vs target {target.shape}")
    if mask.shape != pred.shape[:2]:
        raise ShapeError(f"masked_mse_loss: mask {mask.shape} vs channels {pred.shape[:2]}")
    count = int(mask.sum()) * pred.shape[2] * pred.shape[3]
    weights = Tensor(mask.astype(np.float64)[:, :, None, None])
    diff = ops.sub(pred, target)
    total = ops.sum(ops.mul(ops.mul(diff, diff), weights))
    return ops.mul(total, Tensor(1.0 / count if count else 0.0))


class Optimizer:
    """Adam or SGD with momentum over a network's named parameters."""

    def __init__(self, config: OptimizerConfig):
        config.validate()
        self.config = config
        self.t = 0
        self.slots: dict = {}

    def step(self, named_params) -> None:
        cfg = self.config
        self.t += 1
        for name, p in named_params:
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.kind == "adam":
                m, v = self.slots.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                self.slots[name] = (m, v)
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                p.data = p.data - cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                (buf,) = self.slots.get(name) or (np.zeros_like(p.data),)
                buf = cfg.momentum * buf + g
                self.slots[name] = (buf,)
                p.data = p.data - cfg.learning_rate * buf

    def state_tensors(self) -> dict:
        out = {}
        for name, arrays in self.slots.items():
            for i, arr in enumerate(arrays):
                out[f"opt.{i}.{name}"] = arr
        return out

    def load_state_tensors(self, tensors: dict, t: int) -> None:
        self.t = t
        width = 2 if self.config.kind == "adam" else 1
        # keep table order so a reloaded optimizer re-serializes identically
        names = list(dict.fromkeys(k.split(".", 2)[2] for k in tensors))
        self.slots = {n: tuple(tensors[f"opt.{i}.{n}"] for i in range(width)) for n in names}


def collate(samples: Sequence) -> tuple:
    images = np.stack([s.image for s in samples])
    targets = np.stack([s.target for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, targets, masks


def train_step(net: LandmarkNet, batch: tuple, optimizer: Optimizer, step: int = 0) -> float:
    """One forward/backward/update. Gradients are zeroed afterwards."""
    images, targets, masks = batch
    if len(images) == 0:
        raise TrainingError("empty batch", step)
    if not np.asarray(masks).any():
        raise TrainingError("every landmark channel in the batch is masked", step)
    buffers = [(stats, attr, getattr(stats, attr).copy()) for _, stats, attr in net.named_buffers()]
    try:
        # overflow surfaces as NonFiniteError below, numpy's warning is noise
        with np.errstate(over="ignore", invalid="ignore"), GradTape() as tape:
            pred = forward(net, Tensor(images), "train")
            loss = masked_mse_loss(pred, targets, masks)
            tape.backward(loss)
    except NonFiniteError as exc:
        # leave the network exactly as it was before the failed step
        for stats, attr, saved in buffers:
            setattr(stats, attr, saved)
        net.zero_grad()
        raise TrainingError(f"non-finite value: {exc}", step) from exc
    value = loss.item()
    named = list(net.named_parameters())
    optimizer.step(named)
    net.zero_grad()
    return value


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    order: list = field(default_factory=list)
    rng_state: Optional[dict] = None


class Trainer:
    """Owns a network, its optimizer and the deterministic batch schedule.

    Each epoch draws one permutation of the training set from a single
    seeded generator; the generator state, the current permutation and the
    cursor into it are part of every checkpoint, so a resumed run replays
    exactly the batches an uninterrupted run would have seen.
    """

    def __init__(self, net_config: NetworkConfig, opt_config: OptimizerConfig, samples: Sequence,
                 extra_meta: Optional[dict] = None):
        opt_config.validate()
        self.net_config = net_config
        self.opt_config = opt_config
        self.samples = list(samples)
        if not self.samples:
            raise TrainingError("empty training set")
        self.net = build_network(net_config, opt_config.seed)
        self.optimizer = Optimizer(opt_config)
        self.rng = np.random.default_rng(opt_config.seed)
        self.state = TrainState()
        self.extra_meta = dict(extra_meta or {})

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.samples) // self.opt_config.batch_size)

    def _next_batch(self) -> list:
        st = self.state
        if st.cursor >= len(st.order):
            if st.order:
                st.epoch += 1
            st.order = self.rng.permutation(len(self.samples)).tolist()
            st.cursor = 0
        idx = st.order[st.cursor:st.cursor + self.opt_config.batch_size]
        st.cursor += len(idx)
        return [self.samples[i] for i in idx]

    def step(self) -> float:
        batch = collate(self._next_batch())
        loss = train_step(self.net, batch, self.optimizer, self.state.step)
        self.state.step += 1
        return loss

    def run(self, steps: int, on_step: Optional[Callable[[int, float], None]] = None) -> list:
        losses = []
        for _ in range(steps):
            loss = self.step()
            losses.append(loss)
            if on_step is not None:
                on_step(self.state.step, loss)
        return losses

    @property
    def total_steps(self) -> int:
        return self.opt_config.epochs * self.steps_per_epoch

    # -- checkpoints ---------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        st = self.state
        return {
            "network": self.net_config.to_dict(),
            "optimizer": self.opt_config.to_dict(),
            "train_state": {"step": st.step, "epoch": st.epoch, "cursor": st.cursor, "order": st.order,
                            "opt_t": self.optimizer.t},
            "rng_state": _jsonable(self.rng.bit_generator.state),
            "extra": self.extra_meta,
        }

    def checkpoint_tensors(self) -> dict:
        tensors = dict(self.net.state_tensors())
        tensors.update(self.optimizer.state_tensors())
        return tensors

    def save(self, path) -> None:
        save_checkpoint(path, self)

    def restore(self, meta: dict, tensors: dict) -> None:
        if NetworkConfig.from_dict(meta["network"]) != self.net_config:
            raise FormatError("checkpoint network config does not match the trainer's")
        net_tensors = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
        self.net.load_state_tensors(net_tensors, strict=True)
        ts = meta["train_state"]
        self.optimizer.load_state_tensors({k: v for k, v in tensors.items() if k.startswith("opt.")}, ts["opt_t"])
        self.state = TrainState(ts["step"], ts["epoch"], ts["cursor"], list(ts["order"]), meta["rng_state"])
        self.rng.bit_generator.state = meta["rng_state"]


def _jsonable(state: dict) -> dict:
    return {k: (_jsonable(v) if isinstance(v, dict) else int(v) if isinstance(v, np.integer) else v)
            for k, v in state.items()}


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.meta["network"])

    @property
    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig.from_dict(self.meta["optimizer"])

    def network_tensors(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}

    def build_network(self) -> LandmarkNet:
        net = build_network(self.network_config, self.optimizer_config.seed)
        net.load_state_tensors(self.network_tensors(), strict=True)
        return net


def save_checkpoint(path, trainer: Trainer) -> None:
    write_checkpoint_file(path, trainer.checkpoint_meta(), trainer.checkpoint_tensors())


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = read_checkpoint_file(path)
    for key in ("network", "optimizer", "train_state", "rng_state"):
        if key not in meta:
            raise FormatError(f"{path}: checkpoint metadata lacks {key!r}")
    return Checkpoint(meta, tensors)


def resume_trainer(path, samples: Sequence) -> Trainer:
    ckpt = load_checkpoint(path)
    trainer = Trainer(ckpt.network_config, ckpt.optimizer_config, samples, ckpt.meta.get("extra"))
    trainer.restore(ckpt.meta, ckpt.tensors)
    return trainer
