"""Adam training loop, evaluation and the learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Network, NetworkConfig
from .numerics import Adam, Rng
from .selection import AnnealSchedule, anneal
from .tasks import Task

METRIC_COLUMNS = ("step", "train_loss", "iid_acc", "ood_acc", "temp", "lr")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 0.002
    warmup_frac: float = 0.05
    temp_start: float = 1.0
    temp_end: float = 0.1
    anneal_frac: float = 0.8
    train_len: tuple[int, int] = (1, 40)
    eval_len: tuple[int, int] = (40, 256)
    eval_every: int = 1000
    eval_samples: int = 512
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.train_len = tuple(int(v) for v in self.train_len)
        self.eval_len = tuple(int(v) for v in self.eval_len)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_samples < 1:
            raise ValueError("batch_size, eval_every and eval_samples must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_frac <= 1 or not 0 <= self.anneal_frac <= 1:
            raise ValueError("warmup_frac and anneal_frac must lie in [0, 1]")
        for name, (lo, hi) in (("train_len", self.train_len), ("eval_len", self.eval_len)):
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or null")
        # AnnealSchedule validates the temperatures
        self.anneal_schedule()

    def anneal_schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.temp_start, self.temp_end, int(round(self.anneal_frac * self.steps)))


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to 0 at ``cfg.steps``."""
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(cfg.steps - warm, 1)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


@dataclass
class TrainState:
    network: Network
    optimizer: Adam = field(default_factory=Adam)
    step: int = 0


def _lengths(rng: Rng, length_range, samples: int) -> np.ndarray:
    lo, hi = length_range
    return rng.integers(lo, hi + 1, samples)


def evaluate(model, task: Task, length_range, samples: int, rng: Rng, max_batch: int = 256) -> float:
    """Accuracy over ``samples`` fresh sequences with lengths uniform in the range."""
    correct, _ = _eval_counts(model, task, _lengths(rng, length_range, samples), rng, max_batch)
    return float(correct.sum() / samples)


def evaluate_buckets(model, task: Task, buckets, samples: int, rng: Rng, max_batch: int = 256) -> dict:
    """Accuracy per (lo, hi) bucket, lengths uniform over the union of buckets."""
    lo = min(b[0] for b in buckets)
    hi = max(b[1] for b in buckets)
    lengths = _lengths(rng, (lo, hi), samples)
    correct, lens = _eval_counts(model, task, lengths, rng, max_batch)
    out = {}
    for b_lo, b_hi in buckets:
        m = (lens >= b_lo) & (lens <= b_hi)
        out[f"{b_lo}-{b_hi}"] = float(correct[m].mean()) if m.any() else float("nan")
    out["overall"] = float(correct.mean())
    return out


def _eval_counts(model, task, lengths, rng, max_batch):
    correct = np.zeros(len(lengths), dtype=bool)
    for i, L in enumerate(np.unique(lengths)):
        where = np.flatnonzero(lengths == L)
        sub = rng.spawn(int(L))
        for lo in range(0, len(where), max_batch):
            part = where[lo:lo + max_batch]
            tok, lab = task.batch(sub.spawn(lo), len(part), int(L))
            correct[part] = model.predict(tok) == lab
    return correct, lengths


def _clip(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g).real) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(net_cfg: NetworkConfig, cfg: TrainConfig, task: Task, seed: int = 0, workers: int = 1,
          callback=None) -> tuple[TrainState, list[dict]]:
    """Train from scratch; returns the final state and one metrics row per step.

    ``iid_acc``/``ood_acc`` are filled at evaluation steps (every
    ``eval_every`` steps and after the last one) and None elsewhere.
    """
    if net_cfg.vocab != task.vocab or net_cfg.classes != task.classes:
        raise ValueError(f"network vocab/classes {net_cfg.vocab}/{net_cfg.classes} do not fit task {task.name}")
    net = Network.init(net_cfg, seed)
    net.workers = workers
    state = TrainState(net)
    root = Rng(seed)
    data_rng, eval_rng = root.spawn(1), root.spawn(2)
    schedule = cfg.anneal_schedule()
    rows: list[dict] = []

    def eval_row(step):
        r = eval_rng.spawn(step)
        return (evaluate(net, task, cfg.train_len, cfg.eval_samples, r.spawn(0)),
                evaluate(net, task, cfg.eval_len, cfg.eval_samples, r.spawn(1)))

    if cfg.steps == 0:
        iid, ood = eval_row(0)
        rows.append(dict(step=0, train_loss=None, iid_acc=iid, ood_acc=ood, temp=schedule.temp_start, lr=0.0))
        return state, rows

    params = net.parameters()
    for step in range(cfg.steps):
        temp = anneal(schedule, step)
        lr = lr_at(cfg, step)
        r = data_rng.spawn(step)
        length = int(r.integers(cfg.train_len[0], cfg.train_len[1] + 1))
        tokens, labels = task.batch(r, cfg.batch_size, length)
        loss, grads = net.loss_and_grads(tokens, labels, temp)
        if not math.isfinite(loss):
            raise TrainingDiverged(step)
        gnorm = _clip(grads, cfg.grad_clip)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(step, "non-finite gradient")
        state.optimizer.step(params, grads, lr)
        net.mark_updated()
        state.step = step + 1
        row = dict(step=step + 1, train_loss=loss, iid_acc=None, ood_acc=None, temp=temp, lr=lr)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            row["iid_acc"], row["ood_acc"] = eval_row(step + 1)
        rows.append(row)
        if callback is not None:
            callback(row)
    return state, rows


def config_dict(net_cfg: NetworkConfig, cfg: TrainConfig) -> dict:
    return {"network": asdict(net_cfg), "train": asdict(cfg)}
