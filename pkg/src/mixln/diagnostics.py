"""Layer-efficacy instruments: angular distance, performance drop, gradient norms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Model, prune_layer
from .reporting import write_csv
from .tensor import cross_entropy, no_grad
from .training import eval_windows, evaluate_loss, evaluate_perplexity


class UndefinedDistance(ValueError):
    pass


def angular_distance(u, v) -> float:
    """``arccos(cos(u, v)) / pi``, in [0, 1].

    Evaluated as ``2 atan2(|u^ - v^|, |u^ + v^|)`` on the unit vectors, which
    is the same angle without arccos's loss of precision near 0 and pi.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    return float(_rowwise_angular(u[None], v[None])[0])


def _rowwise_angular(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise UndefinedDistance("angular distance is undefined for a zero vector")
    ua, ub = a / na, b / nb
    theta = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=-1), np.linalg.norm(ua + ub, axis=-1))
    return np.clip(theta / np.pi, 0.0, 1.0)


@dataclass
class AngularDistanceMatrix:
    """``distances[l, n]`` = token-mean distance between block inputs ``l`` and ``l + n``.

    Index ``L`` stands for the output of the last block. Entries with
    ``l + n > L`` are NaN.
    """

    n_layers: int
    distances: np.ndarray
    token_count: int

    def entries(self):
        L = self.n_layers
        for ell in range(L + 1):
            for n in range(L + 1 - ell):
                yield ell, n, float(self.distances[ell, n])

    def write_csv(self, path) -> None:
        write_csv(path, ("layer", "n", "distance"), self.entries())


def angular_distance_matrix(model: Model, corpus_tokens, max_tokens: int = 65536,
                            seq_len: int | None = None, batch_size: int = 16) -> AngularDistanceMatrix:
    """Average per-token angular distances between all pairs of block inputs."""
    seq_len = seq_len or model.config.max_seq_len
    tokens = np.asarray(corpus_tokens)
    if len(tokens) < seq_len + 1:
        raise ValueError(f"corpus has {len(tokens)} tokens, shorter than one sequence of {seq_len}")
    if max_tokens < 1:
        raise ValueError("max_tokens must be at least 1")
    x, _ = eval_windows(tokens, seq_len, -(-max_tokens // seq_len) * seq_len)
    L = len(model.active)
    sums = np.zeros((L + 1, L + 1))
    count = 0
    remaining = max_tokens
    with no_grad():
        for i in range(0, len(x), batch_size):
            if remaining <= 0:
                break
            states = [h.data.reshape(-1, h.shape[-1]).astype(np.float64)
                      for h in model.hidden_states(x[i:i + batch_size])]
            take = min(remaining, states[0].shape[0])
            states = [s[:take] for s in states]
            for ell in range(L + 1):
                for n in range(1, L + 1 - ell):
                    sums[ell, n] += _rowwise_angular(states[ell], states[ell + n]).sum()
            count += take
            remaining -= take
    dist = sums / count
    mask = np.add.outer(np.arange(L + 1), np.arange(L + 1)) > L
    dist[mask] = np.nan
    return AngularDistanceMatrix(L, dist, count)


@dataclass
class GradProfile:
    norms: np.ndarray
    step: int = 0
    mode: str = ""

    def write_csv(self, path) -> None:
        write_csv(path, ("block", "norm", "step", "mode"),
                  ((i, float(v), self.step, self.mode) for i, v in enumerate(self.norms)))


def grad_profile(model: Model, inputs, targets, step: int = 0, mode: str | None = None) -> GradProfile:
    """Per-block L2 norm of the LM-loss gradient over all of the block's parameters.

    Runs one forward/backward pass; gradients are cleared afterwards.
    """
    model.zero_grad()
    cross_entropy(model.forward(inputs), targets).backward()
    norms = []
    for ell in model.active:
        sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in model.block_parameters(ell)
                 if p.grad is not None)
        norms.append(math.sqrt(sq))
    model.zero_grad()
    return GradProfile(np.array(norms), step, mode if mode is not None else model.config.placement_mode)


def balance_score(profile: GradProfile | np.ndarray) -> float:
    """``min / max`` of the block gradient norms; 1 means perfectly uniform."""
    norms = np.asarray(profile.norms if isinstance(profile, GradProfile) else profile, dtype=np.float64)
    if not np.isfinite(norms).all():
        raise ValueError("gradient profile contains non-finite norms")
    top = norms.max()
    if top == 0:
        raise ValueError("degenerate gradient profile: every norm is zero")
    return float(norms.min() / top)


@dataclass
class PruneReport:
    original_loss: float
    original_ppl: float
    layers: list[int] = field(default_factory=list)
    pruned_ppl: list[float] = field(default_factory=list)
    delta: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        write_csv(path, ("layer", "ppl_pruned", "delta"), zip(self.layers, self.pruned_ppl, self.delta))


def performance_drop(model: Model, ell: int, eval_tokens, seq_len: int | None = None,
                     max_tokens: int | None = None, baseline_ppl: float | None = None) -> float:
    """Perplexity after bypassing block ``ell`` minus the unpruned perplexity."""
    seq_len = seq_len or model.config.max_seq_len
    if baseline_ppl is None:
        baseline_ppl = evaluate_perplexity(model, eval_tokens, seq_len, max_tokens)
    return evaluate_perplexity(prune_layer(model, ell), eval_tokens, seq_len, max_tokens) - baseline_ppl


def prune_report(model: Model, eval_tokens, seq_len: int | None = None,
                 max_tokens: int | None = None) -> PruneReport:
    seq_len = seq_len or model.config.max_seq_len
    base_loss = evaluate_loss(model, eval_tokens, seq_len, max_tokens)
    base = math.exp(base_loss)
    report = PruneReport(base_loss, base)
    for ell in model.active:
        pruned = evaluate_perplexity(prune_layer(model, ell), eval_tokens, seq_len, max_tokens)
        report.layers.append(ell)
        report.pruned_ppl.append(pruned)
        report.delta.append(pruned - base)
    return report


def thirds(n_layers: int, exclude_last: bool = True) -> tuple[list[int], list[int]]:
    """Earliest and deepest third of the layers; the final layer can be dropped from the latter."""
    k = max(1, n_layers // 3)
    early = list(range(k))
    deep = list(range(n_layers - k, n_layers - 1 if exclude_last else n_layers))
    return early, deep


def quartiles(n_layers: int) -> tuple[list[int], list[int]]:
    k = max(1, n_layers // 4)
    layers = list(range(n_layers))
    return layers[:k], layers[-k:]
