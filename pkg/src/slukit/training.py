"""Multi-task training loop: weighted loss, Adam, checkpointed resume.

One step draws one batch per enabled task, backpropagates the weighted
sum of task losses, clips the global gradient norm, and applies Adam
with an inverse-sqrt warmup schedule.

Determinism contract: every random choice comes from a stream seeded by
(seed, purpose, task), and a task with weight zero draws from none of
its streams. A run with weights (1,0,0) therefore consumes exactly the
random numbers of a single-task run, which makes the two bit-identical.
Saved training state (optimizer moments, stream positions, generator
states) restores mid-run training so that resume continues the
uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, NumericError
from .model import TASKS, MultiTaskModel, multitask_loss

STATE_NAME = "train_state.json"
MOMENTS_NAME = "moments.bin"

# stream purposes; ordinals keep per-task generators disjoint
_BATCH_STREAM = 1
_DROPOUT_STREAM = 2


@dataclass
class TrainConfig:
    w_s2ie: float = 0.6
    w_s2t: float = 0.2
    w_t2ie: float = 0.2
    main_task: str = "s2ie"
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 1000
    batch_size: int = 16
    max_epochs: int = 20
    seed: int = 0
    grad_clip: float = 5.0
    label_smoothing: float = 0.1
    patience: int = 5
    freeze: tuple = ()

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        weights = self.weights()
        if any(w < 0 for w in weights.values()):
            raise ConfigError("task weights must be nonnegative")
        if sum(weights.values()) <= 0:
            raise ConfigError("at least one task weight must be positive")
        if self.main_task not in TASKS:
            raise ConfigError(f"unknown main task {self.main_task!r}")
        if weights[self.main_task] <= 0:
            raise ConfigError(f"main task {self.main_task} has weight 0")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def weights(self) -> dict[str, float]:
        return {"s2ie": self.w_s2ie, "s2t": self.w_s2t, "t2ie": self.w_t2ie}

    def enabled_tasks(self) -> list[str]:
        return [t for t in TASKS if self.weights()[t] > 0]

    def to_json(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["freeze"] = list(self.freeze)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to cfg.lr over warmup, then decay as 1/sqrt(step)."""
    if step < 1:
        raise ConfigError("schedule is defined for steps >= 1")
    return cfg.lr * min(step / cfg.warmup_steps, (cfg.warmup_steps / step) ** 0.5)


def _rng(seed: int, purpose: int, ordinal: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, purpose, ordinal)))


class _BatchStream:
    """Per-epoch permutation over a batch list, reshuffled when exhausted."""

    def __init__(self, batches: list, rng: np.random.Generator):
        if not batches:
            raise ConfigError("a task stream needs at least one batch")
        self.batches = batches
        self.rng = rng
        self.perm: list[int] = []
        self.pos = 0

    def next(self):
        if self.pos >= len(self.perm):
            self.perm = [int(i) for i in self.rng.permutation(len(self.batches))]
            self.pos = 0
        batch = self.batches[self.perm[self.pos]]
        self.pos += 1
        return batch

    def state(self) -> dict:
        return {"perm": self.perm, "pos": self.pos, "rng": self.rng.bit_generator.state}

    def restore(self, doc: dict) -> None:
        self.perm = [int(i) for i in doc["perm"]]
        self.pos = int(doc["pos"])
        self.rng.bit_generator.state = doc["rng"]


class Adam:
    """Adam over named parameters; moments are float32 like the weights."""

    def __init__(self, params: list, cfg: TrainConfig):
        self.params = params  # [(name, Tensor)]
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}
        self.t = {n: 0 for n, _ in params}

    def step(self, lr: float) -> None:
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / (1.0 - b1**t)
            vhat = self.v[name] / (1.0 - b2**t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def clip_gradients(params: list, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = total**0.5
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Trainer:
    """Drives one model over per-task batch lists.

    data: {task: [batch, ...]} for every enabled task. Batches are the
    dict shape consumed by MultiTaskModel.task_loss.
    """

    def __init__(self, model: MultiTaskModel, cfg: TrainConfig, data: dict):
        self.model = model
        self.cfg = cfg
        self.weights = cfg.weights()
        missing = [t for t in cfg.enabled_tasks() if t not in data or not data[t]]
        if missing:
            raise ConfigError(f"no batches for enabled tasks: {', '.join(missing)}")
        comps = model.components()
        unknown = [c for c in cfg.freeze if c not in comps]
        if unknown:
            raise ConfigError(f"freeze names unknown components: {', '.join(unknown)}")
        frozen = {name for c in cfg.freeze for name, _ in comps[c]}
        self.updatable = [
            (n, p) for n, p in model.trainable_parameters() if n not in frozen
        ]
        self.optimizer = Adam(self.updatable, cfg)
        seeds = {t: i for i, t in enumerate(TASKS)}
        self.streams = {
            t: _BatchStream(data[t], _rng(cfg.seed, _BATCH_STREAM, seeds[t]))
            for t in cfg.enabled_tasks()
        }
        self.drop_rng = {
            t: _rng(cfg.seed, _DROPOUT_STREAM, seeds[t]) for t in cfg.enabled_tasks()
        }
        self.step_count = 0
        self.epoch = 0
        self.best_dev = float("inf")
        self.bad_epochs = 0

    # -- one optimizer step ---------------------------------------------------

    def train_step(self) -> dict:
        self.step_count += 1
        losses: dict[str, T.Tensor] = {}
        parts: dict[str, dict] = {}
        with T.Tape():
            for task in self.cfg.enabled_tasks():
                batch = dict(self.streams[task].next())
                batch["label_smoothing"] = self.cfg.label_smoothing
                try:
                    loss, p = self.model.task_loss(
                        task, batch, rng=self.drop_rng[task], training=True
                    )
                except NumericError as exc:
                    raise NumericError(
                        f"task {task} failed at step {self.step_count}: {exc}"
                    )
                if not np.isfinite(loss.item()):
                    raise NumericError(
                        f"non-finite {task} loss at step {self.step_count}"
                    )
                losses[task] = loss
                parts[task] = p
            total = multitask_loss(losses, self.weights)
            T.backward(total)
        grad_norm = clip_gradients(self.updatable, self.cfg.grad_clip)
        lr = lr_at(self.step_count, self.cfg)
        self.optimizer.step(lr)
        for _, p in self.updatable:
            p.zero_grad()
        task_losses = {t: l.item() for t, l in losses.items()}
        return {
            "step": self.step_count,
            "losses": task_losses,
            # reported total recomputes the weighted sum in float64 task order
            "total": sum(self.weights[t] * task_losses[t] for t in TASKS if t in task_losses),
            "grad_norm": grad_norm,
            "lr": lr,
        }

    # -- evaluation ------------------------------------------------------------

    def eval_loss(self, batches: list, task: str | None = None) -> float:
        task = task or self.cfg.main_task
        vals = []
        for batch in batches:
            loss, _ = self.model.task_loss(task, batch, rng=None, training=False)
            vals.append(loss.item())
        if not vals:
            raise ConfigError("eval_loss needs at least one batch")
        return float(np.mean(vals))

    # -- epoch loop with early stopping -----------------------------------------

    def fit(self, dev_batches: list | None = None, log=None) -> dict:
        history = []
        steps_per_epoch = len(self.streams[self.cfg.main_task].batches)
        while self.epoch < self.cfg.max_epochs:
            self.epoch += 1
            reports = [self.train_step() for _ in range(steps_per_epoch)]
            entry = {
                "epoch": self.epoch,
                "train_total": float(np.mean([r["total"] for r in reports])),
            }
            if dev_batches is not None:
                dev = self.eval_loss(dev_batches)
                entry["dev_loss"] = dev
                if dev < self.best_dev - 1e-9:
                    self.best_dev = dev
                    self.bad_epochs = 0
                else:
                    self.bad_epochs += 1
            history.append(entry)
            if log:
                log(entry)
            if dev_batches is not None and self.bad_epochs >= self.cfg.patience:
                break
        return {"epochs": self.epoch, "history": history, "best_dev": self.best_dev}

    # -- state persistence ------------------------------------------------------

    def save_state(self, path, vocab_hashes: dict | None = None) -> Path:
        out = save_checkpoint(self.model, path, vocab_hashes)
        names = [n for n, _ in self.updatable]
        with open(out / MOMENTS_NAME, "wb") as fh:
            for n in names:
                fh.write(np.ascontiguousarray(self.optimizer.m[n], dtype="<f4").tobytes())
            for n in names:
                fh.write(np.ascontiguousarray(self.optimizer.v[n], dtype="<f4").tobytes())
        doc = {
            "config": self.cfg.to_json(),
            "step": self.step_count,
            "epoch": self.epoch,
            "best_dev": self.best_dev,
            "bad_epochs": self.bad_epochs,
            "adam_t": self.optimizer.t,
            "moment_names": names,
            "streams": {t: s.state() for t, s in self.streams.items()},
            "drop_rng": {t: r.bit_generator.state for t, r in self.drop_rng.items()},
        }
        (out / STATE_NAME).write_text(json.dumps(doc), encoding="utf-8")
        return out

    @classmethod
    def resume(cls, path, data: dict) -> "Trainer":
        path = Path(path)
        try:
            doc = json.loads((path / STATE_NAME).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CheckpointError(f"no {STATE_NAME} in {path}")
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable training state in {path}: {exc}")
        model = load_checkpoint(path)
        cfg = TrainConfig.from_json(doc["config"])
        trainer = cls(model, cfg, data)
        names = doc["moment_names"]
        live = [n for n, _ in trainer.updatable]
        if names != live:
            raise CheckpointError("saved optimizer state names do not match the model")
        blob = (path / MOMENTS_NAME).read_bytes()
        sizes = {n: p.size for n, p in trainer.updatable}
        want = 2 * 4 * sum(sizes.values())
        if len(blob) != want:
            raise CheckpointError(
                f"{MOMENTS_NAME} holds {len(blob)} bytes, expected {want}"
            )
        offset = 0
        for slot in (trainer.optimizer.m, trainer.optimizer.v):
            for n, p in trainer.updatable:
                arr = np.frombuffer(blob, dtype="<f4", count=p.size, offset=offset)
                slot[n] = arr.reshape(p.shape).copy()
                offset += 4 * p.size
        trainer.optimizer.t = {n: int(v) for n, v in doc["adam_t"].items()}
        trainer.step_count = int(doc["step"])
        trainer.epoch = int(doc["epoch"])
        trainer.best_dev = float(doc["best_dev"])
        trainer.bad_epochs = int(doc["bad_epochs"])
        for task, state in doc["streams"].items():
            trainer.streams[task].restore(state)
        for task, state in doc["drop_rng"].items():
            trainer.drop_rng[task].bit_generator.state = state
        return trainer
