"""Alternating min-max training: RMSProp, step-decline learning rate, ablations.

Each iteration first descends the generator on lambda * content + regularizer
with the discriminator frozen, then ascends the discriminator on the
regularizer evaluated with the just-updated generator. no_advreg drops the
regularizer and the discriminator entirely; no_dmse forces alpha to zero.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset as ds
from . import tensor as T
from .loss import LossWeights, _generator_terms, discriminator_objective
from .nn import (Discriminator, Generator, build_discriminator, build_generator,
                 save_params)
from .tensor import Tensor

MODES = ("full", "no_dmse", "no_advreg")


class NonFiniteError(RuntimeError):
    """A gradient or objective went NaN/Inf; training stops rather than
    corrupting state."""


@dataclass
class TrainConfig:
    lambda_: float = 1e4
    alpha: float = 1e5
    batch_size: int = 6
    iterations: int = 80000
    lr0: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: Optional[int] = None   # None -> iterations // 4
    seed: int = 0
    mode: str = "full"
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    checkpoint_every: int = 0              # 0 disables intermediate checkpoints
    patch_size: int = 512
    width_multiplier: float = 1.0
    adv_convention: str = "paper"          # paper: D = P(generated); classic flips roles
    clamp_eps: float = 1e-7
    mse_reduction: str = "image_sum"

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if self.lr0 <= 0 or not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("need lr0 > 0 and 0 < lr_decay_factor <= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.adv_convention not in ("paper", "classic"):
            raise ValueError(f"adv_convention must be 'paper' or 'classic'")
        if self.lr_decay_every is None:
            self.lr_decay_every = max(1, self.iterations // 4)
        if self.mode == "no_dmse":
            self.alpha = 0.0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Laptop-scale preset; loss weights keep their full-scale values."""
        base = dict(batch_size=4, iterations=2000, patch_size=64,
                    width_multiplier=0.25, checkpoint_every=500)
        base.update(overrides)
        return cls(**base)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_, self.alpha, self.clamp_eps)


@dataclass
class RmsPropState:
    s: np.ndarray   # running mean of squared gradients, elementwise >= 0

    @classmethod
    def for_param(cls, param: Tensor) -> "RmsPropState":
        return cls(np.zeros_like(param.data))


@dataclass
class OptStates:
    gen: list[RmsPropState]
    disc: list[RmsPropState]

    @classmethod
    def create(cls, gen: Generator, disc: Optional[Discriminator]) -> "OptStates":
        return cls([RmsPropState.for_param(p) for p in gen.parameters()],
                   [] if disc is None else
                   [RmsPropState.for_param(p) for p in disc.parameters()])


def rmsprop_step(param: Tensor, grad, state: RmsPropState, lr: float,
                 rho: float = 0.9, eps: float = 1e-8):
    """s <- rho*s + (1-rho)*grad^2;  param <- param - lr*grad/sqrt(s+eps)."""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if g.shape != param.shape:
        raise T.ShapeError(f"rmsprop_step: gradient shape {g.shape} does not match "
                           f"parameter {param.shape}")
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient; iteration aborted")
    state.s = rho * state.s + (1.0 - rho) * np.square(g)
    param.data = (param.data - lr * g / np.sqrt(state.s + eps)).astype(param.dtype)
    return param, state


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Geometric step decline: lr0 * factor^(iteration // decay_every)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.lr0 * config.lr_decay_factor ** (iteration // config.lr_decay_every)


@dataclass
class TrainRecord:
    iter: int
    lr: float
    content: float
    adv_reg: float
    g_obj: float
    d_obj: float
    ms: float

    def to_json(self) -> str:
        return json.dumps({"iter": self.iter, "lr": self.lr, "content": self.content,
                           "adv_reg": self.adv_reg, "g_obj": self.g_obj,
                           "d_obj": self.d_obj, "ms": self.ms})


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def content_values(self) -> list[float]:
        return [r.content for r in self.records]

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(rec.to_json() + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as f:
            for line in f:
                if line.strip():
                    log.append(TrainRecord(**json.loads(line)))
        return log

    def same_trajectory(self, other: "TrainLog") -> bool:
        """Equality over every field except wall time."""
        if len(self) != len(other):
            return False
        return all(
            (a.iter, a.lr, a.content, a.adv_reg, a.g_obj, a.d_obj)
            == (b.iter, b.lr, b.content, b.adv_reg, b.g_obj, b.d_obj)
            for a, b in zip(self.records, other.records))


def _apply_grads(params: list[Tensor], tape: T.Tape, grads, states, lr, rho, eps,
                 ascend: bool = False):
    for p, st in zip(params, states):
        g = tape.grad_for(grads, p)
        garr = g.data if g is not None else np.zeros_like(p.data)
        rmsprop_step(p, -garr if ascend else garr, st, lr, rho, eps)


def train_step(gen: Generator, disc: Optional[Discriminator], optstates: OptStates,
               batch, config: TrainConfig, iteration: int) -> TrainRecord:
    """One alternation: generator descent with D_k, then discriminator ascent
    with G_{k+1} (skipped entirely in no_advreg mode)."""
    t0 = time.perf_counter()
    lr = lr_at(iteration, config)
    weights = config.loss_weights()
    include_adv = config.mode != "no_advreg"

    with T.Tape() as tape:
        obj, content, reg, _ = _generator_terms(
            gen, disc, batch, weights, include_adv,
            config.adv_convention, config.mse_reduction)
    g_obj = obj.item()
    content_val = content.item()
    reg_val = reg.item() if reg is not None else 0.0
    if not (np.isfinite(g_obj) and np.isfinite(content_val) and np.isfinite(reg_val)):
        raise NonFiniteError("non-finite generator objective; iteration aborted")
    grads = T.backward(tape, obj)
    _apply_grads(gen.parameters(), tape, grads, optstates.gen, lr,
                 config.rmsprop_rho, config.rmsprop_eps)

    d_obj_val = 0.0
    if include_adv:
        with T.Tape() as tape2:
            d_obj = discriminator_objective(disc, gen, batch, config.clamp_eps,
                                            config.adv_convention)
        d_obj_val = d_obj.item()
        if not np.isfinite(d_obj_val):
            raise NonFiniteError("non-finite discriminator objective; iteration aborted")
        dgrads = T.backward(tape2, d_obj)
        _apply_grads(disc.parameters(), tape2, dgrads, optstates.disc, lr,
                     config.rmsprop_rho, config.rmsprop_eps, ascend=True)

    ms = (time.perf_counter() - t0) * 1e3
    return TrainRecord(iteration, lr, content_val, reg_val, g_obj, d_obj_val, ms)


def train_loop(config: TrainConfig, dataset, out_dir=None):
    """Run the full schedule; returns (generator, TrainLog, checkpoint paths).

    dataset is anything with __len__ and load_pair(i) -> (ldr, hdr) arrays;
    batches are sampled with replacement under config.seed. Deterministic up
    to the wall-time field of the log.
    """
    if len(dataset) == 0:
        raise ValueError("train_loop: dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    gen = build_generator(config.width_multiplier, config.seed)
    disc = None
    if config.mode != "no_advreg":
        disc = build_discriminator(config.width_multiplier, config.seed + 1,
                                   input_hw=config.patch_size)
    optstates = OptStates.create(gen, disc)
    rng = np.random.default_rng(config.seed)

    log = TrainLog()
    checkpoints: list[Path] = []

    def checkpoint(tag: str):
        if out_dir is None:
            return
        gp = out_dir / f"generator_{tag}.itmn"
        save_params(gen, gp)
        checkpoints.append(gp)
        if disc is not None:
            save_params(disc, out_dir / f"discriminator_{tag}.itmn")

    for it in range(config.iterations):
        ldr, hdr, rng = ds.sample_batch(dataset, rng, config.batch_size,
                                        config.patch_size)
        log.append(train_step(gen, disc, optstates, (ldr, hdr), config, it))
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 \
                and (it + 1) < config.iterations:
            checkpoint(f"iter{it + 1:06d}")

    checkpoint("final")
    if out_dir is not None:
        log.to_jsonl(out_dir / "log.jsonl")
    return gen, log, checkpoints
