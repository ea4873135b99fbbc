"""Byte-level LM pre-training: data windows, LR schedule, Adam, evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import Model
from .reporting import write_csv
from .checkpoint import save_checkpoint
from .tensor import cross_entropy, make_rng, no_grad

log = logging.getLogger(__name__)

BOS_ID = 256
BYTE_VOCAB = 257  # 256 byte values + BOS


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_corpus(path, train_fraction: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Read a UTF-8 text file and split it contiguously by byte offset."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    raw = path.read_bytes()
    raw.decode("utf-8")  # reject non-UTF-8 input early
    return split_tokens(encode(raw), train_fraction)


def split_tokens(tokens: np.ndarray, train_fraction: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * train_fraction)
    return tokens[:cut], tokens[cut:]


@dataclass
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 16
    seq_len: int = 256
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.10
    final_lr_fraction: float = 0.10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    eval_interval: int = 100
    eval_tokens: int = 65536
    eval_batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError(f"final_lr_fraction must lie in (0, 1], got {self.final_lr_fraction}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.total_steps < 0 or self.batch_size < 1 or self.seq_len < 1 or self.eval_interval < 1:
            raise ValueError("total_steps, batch_size, seq_len and eval_interval must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``final_lr_fraction * peak_lr``."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    peak = config.peak_lr
    warm = math.floor(config.warmup_fraction * total)
    if step < warm:
        return peak * step / warm
    progress = 1.0 if total == warm else (step - warm) / (total - warm)
    floor = config.final_lr_fraction
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


# -- optimizer ------------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params[i].data`` in place.

    A ``None`` gradient counts as zero. Raises ``NonFiniteGradient`` before
    touching any parameter if a gradient holds NaN or inf.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    for g in grads:
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.data.shape != m.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {p.data.shape}")
        if g is None:
            g = np.zeros_like(m)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
    return state


def clip_grad_norm(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if total > max_norm:
        c = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= c
    return total


# -- data & evaluation ----------------------------------------------------------------


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = len(tokens)
    if n < seq_len + 1:
        raise ValueError(f"training stream has {n} tokens, need at least {seq_len + 1}")
    starts = rng.integers(0, n - seq_len, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)
    win = tokens[idx]
    return win[:, :-1], win[:, 1:]


def eval_windows(tokens: np.ndarray, seq_len: int, max_tokens: int | None = None):
    """Non-overlapping teacher-forced windows covering at most ``max_tokens`` targets."""
    n = len(tokens)
    if n < 2:
        raise ValueError("evaluation set needs at least two tokens")
    T = min(seq_len, n - 1)
    count = (n - 1) // T
    if max_tokens is not None:
        count = max(1, min(count, max_tokens // T))
    idx = np.arange(count)[:, None] * T + np.arange(T + 1)
    win = tokens[idx]
    return win[:, :-1], win[:, 1:]


def evaluate_loss(model: Model, eval_tokens: np.ndarray, seq_len: int = 256,
                  max_tokens: int | None = None, batch_size: int = 16) -> float:
    """Mean next-token cross-entropy (nats) over the evaluation windows."""
    seq_len = min(seq_len, model.config.max_seq_len)
    x, y = eval_windows(np.asarray(eval_tokens), seq_len, max_tokens)
    total = 0.0
    with no_grad():
        for i in range(0, len(x), batch_size):
            logits = model.forward(x[i:i + batch_size])
            total += float(cross_entropy(logits, y[i:i + batch_size]).data) * y[i:i + batch_size].size
    return total / y.size


def evaluate_perplexity(model: Model, eval_tokens: np.ndarray, seq_len: int = 256,
                        max_tokens: int | None = None, batch_size: int = 16) -> float:
    loss = evaluate_loss(model, eval_tokens, seq_len, max_tokens, batch_size)
    return math.exp(loss) if loss < 700 else math.inf


# -- training loop ------------------------------------------------------------------


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    eval_loss: float
    eval_ppl: float
    lr: float
    seconds: float


RUNLOG_COLUMNS = ("step", "train_loss", "eval_loss", "eval_ppl", "lr", "seconds")


@dataclass
class RunLog:
    records: list[EvalRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None
    settings: dict = field(default_factory=dict)

    @property
    def final_eval_loss(self) -> float:
        return self.records[-1].eval_loss if self.records else math.nan

    @property
    def final_ppl(self) -> float:
        return math.inf if self.diverged else self.records[-1].eval_ppl

    def write_csv(self, path) -> None:
        write_csv(path, RUNLOG_COLUMNS, (
            (r.step, r.train_loss, r.eval_loss, r.eval_ppl, r.lr, r.seconds) for r in self.records
        ))


def _ppl(loss: float) -> float:
    return math.exp(loss) if loss < 700 else math.inf


def train(model: Model, corpus: tuple[np.ndarray, np.ndarray], config: TrainConfig,
          checkpoint_path=None) -> RunLog:
    """Run ``config.total_steps`` Adam updates on random windows of the train split.

    Update ``k`` (1-based) uses ``lr_at(k)``. Evaluation happens at step 0,
    every ``eval_interval`` steps and at the end. A non-finite loss or
    gradient stops the run and marks it diverged; the log gathered so far is
    kept.
    """
    train_tokens, eval_tokens = corpus
    seq_len = min(config.seq_len, model.config.max_seq_len)
    rng = make_rng(config.seed)
    params = model.parameters()
    state = AdamState.zeros_like(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    runlog = RunLog(settings={
        "optimizer": "adam", "adam_beta1": config.adam_beta1, "adam_beta2": config.adam_beta2,
        "adam_eps": config.adam_eps, "weight_decay": 0.0, "grad_clip": config.grad_clip,
    })
    t0 = time.perf_counter()

    def evaluate() -> float:
        return evaluate_loss(model, eval_tokens, seq_len, config.eval_tokens, config.eval_batch_size)

    x, y = sample_batch(train_tokens, config.batch_size, seq_len, rng)
    with no_grad():
        first = float(cross_entropy(model.forward(x), y).data)
    ev = evaluate()
    runlog.records.append(EvalRecord(0, first, ev, _ppl(ev), lr_at(0, config), time.perf_counter() - t0))

    # overflow on the way to a diverged loss is expected, not noteworthy
    with np.errstate(over="ignore", invalid="ignore"):
        window: list[float] = []
        for step in range(1, config.total_steps + 1):
            if step > 1:
                x, y = sample_batch(train_tokens, config.batch_size, seq_len, rng)
            model.zero_grad()
            loss = cross_entropy(model.forward(x), y)
            value = float(loss.data)
            runlog.losses.append(value)
            window.append(value)
            lr = lr_at(step, config)
            try:
                if not math.isfinite(value):
                    raise NonFiniteGradient("non-finite loss")
                loss.backward()
                grads = [p.grad for p in params]
                if config.grad_clip:
                    clip_grad_norm(grads, config.grad_clip)
                adam_step(params, grads, state, lr)
            except NonFiniteGradient as exc:
                log.warning("run diverged at step %d: %s", step, exc)
                runlog.diverged, runlog.diverged_at = True, step
                runlog.records.append(EvalRecord(step, value, math.inf, math.inf, lr, time.perf_counter() - t0))
                break
            if step % config.eval_interval == 0 or step == config.total_steps:
                ev = evaluate()
                train_loss = float(np.mean(window))
                window = []
                runlog.records.append(EvalRecord(step, train_loss, ev, _ppl(ev), lr, time.perf_counter() - t0))
                log.info("step %d train %.4f eval %.4f ppl %.3f", step, train_loss, ev, _ppl(ev))
                if not math.isfinite(ev):
                    runlog.diverged, runlog.diverged_at = True, step
                    break
    model.zero_grad()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return runlog
