"""Flat experiment configs, corpus resolution and cached training runs.

An experiment config is one flat JSON object. It holds every ``ModelConfig``
field, every ``TrainConfig`` field, and a few data and diagnostic keys. The
single ``seed`` feeds both the initialization and the data order. Unknown
keys are rejected.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, fields
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import stdlib_corpus_text
from .diagnostics import balance_score, grad_profile
from .model import PLACEMENT_MODES, ModelConfig, init_params
from .training import RunLog, TrainConfig, encode, load_corpus, sample_batch, split_tokens, train

OUTPUT_ROOT_ENV = "MIXLN_OUTPUT_ROOT"
STDLIB_CORPUS = "stdlib"

MANIFEST = "manifest.json"
RUNLOG = "runlog.csv"
CHECKPOINT = "model.ckpt"
SUMMARY = "summary.json"
INIT_PROFILE = "grad_profile_init.csv"

EXTRA_DEFAULTS = {
    "corpus": STDLIB_CORPUS,      # path to a UTF-8 text file, or "stdlib"
    "corpus_max_bytes": None,     # truncate the corpus (null = whole file)
    "train_fraction": 0.9,        # contiguous train/eval split by byte offset
    "diag_tokens": 65536,         # token budget for angular distance and pruning
    "grad_batch_size": 8,         # sequences in the gradient-profile batch
    "seeds": None,                # compare / sweep-alpha seeds (null = [seed])
    "alphas": [0.0, 1 / 6, 0.25, 1 / 3, 5 / 12, 0.5, 1.0],  # sweep-alpha grid
    "modes": ["pre_ln", "post_ln", "mix_ln", "deepnorm", "sandwich_ln"],  # compare modes
    "output_dir": "runs/default",
}


def default_config() -> dict:
    cfg = {}
    cfg.update(ModelConfig().to_dict())
    cfg.update({k: v for k, v in TrainConfig().to_dict().items() if k != "seed"})
    cfg.update(EXTRA_DEFAULTS)
    return cfg


def known_keys() -> set[str]:
    return set(default_config())


# -- parsing ------------------------------------------------------------------------


def parse_ratio(text: str) -> float:
    """Read a ratio written as ``0.25``, ``1/6`` or a percentage such as ``16.7%``.

    Percentages are rounded labels of simple fractions, so they snap to the
    nearest fraction with denominator at most 24 when that lies within half
    a percentage point.
    """
    s = str(text).strip()
    if s.endswith("%"):
        value = float(s[:-1]) / 100.0
        snapped = Fraction(value).limit_denominator(24)
        return float(snapped) if abs(float(snapped) - value) < 0.005 else value
    if "/" in s:
        return float(Fraction(s))
    return float(s)


def parse_value(text: str):
    """JSON value if it parses as one, otherwise a ratio, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        return parse_ratio(text)
    except (ValueError, ZeroDivisionError):
        return text


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, _, value = pair.partition("=")
        out[key.strip()] = parse_value(value.strip())
    return out


def resolve_config(path=None, overrides=None) -> dict:
    """Defaults, then the config file, then ``key=value`` overrides; validated."""
    cfg = default_config()
    layers = []
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed JSON config ({exc})") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        layers.append(doc)
    if overrides:
        layers.append(dict(overrides))
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(layer)
    validate(cfg)
    return cfg


def _split(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    mkeys = {f.name for f in fields(ModelConfig)}
    tkeys = {f.name for f in fields(TrainConfig)}
    model = ModelConfig(**{k: cfg[k] for k in mkeys})
    tr = TrainConfig(**{k: cfg[k] for k in tkeys if k != "seed"}, seed=cfg["seed"])
    return model, tr


def validate(cfg: dict) -> None:
    types = {k: type(v) for k, v in default_config().items() if v is not None}
    for key, value in cfg.items():
        want = types.get(key)
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            cfg[key] = value = float(value)
        if want is not None and not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise ValueError(f"config field {key!r}: expected {want.__name__}, got {value!r}")
    try:
        _split(cfg)
    except ValueError as exc:
        raise ValueError(f"invalid config: {exc}") from exc
    if cfg["grad_clip"] is not None and not (isinstance(cfg["grad_clip"], (int, float)) and cfg["grad_clip"] > 0):
        raise ValueError(f"config field 'grad_clip': expected a positive number or null, got {cfg['grad_clip']!r}")
    if cfg["corpus_max_bytes"] is not None and not (isinstance(cfg["corpus_max_bytes"], int)
                                                    and cfg["corpus_max_bytes"] > 0):
        raise ValueError("config field 'corpus_max_bytes': expected a positive integer or null")
    if not 0 < cfg["train_fraction"] < 1:
        raise ValueError("config field 'train_fraction': must lie in (0, 1)")
    if cfg["seq_len"] > cfg["max_seq_len"]:
        raise ValueError(f"config field 'seq_len': {cfg['seq_len']} exceeds max_seq_len {cfg['max_seq_len']}")
    if cfg["vocab_size"] < 257:
        raise ValueError("config field 'vocab_size': byte-level corpora need at least 257 ids")
    if cfg["diag_tokens"] < 1 or cfg["grad_batch_size"] < 1:
        raise ValueError("diag_tokens and grad_batch_size must be positive")
    if cfg["seeds"] is not None:
        if not cfg["seeds"] or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0
                                       for x in cfg["seeds"]):
            raise ValueError("config field 'seeds': expected a non-empty list of non-negative integers or null")
    try:
        cfg["alphas"] = [parse_ratio(a) if isinstance(a, str) else a for a in cfg["alphas"]]
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"config field 'alphas': {exc}") from exc
    if not cfg["alphas"] or not all(isinstance(a, (int, float)) and not isinstance(a, bool) and 0 <= a <= 1
                                    for a in cfg["alphas"]):
        raise ValueError("config field 'alphas': every alpha must be a number in [0, 1]")
    cfg["alphas"] = [float(a) for a in cfg["alphas"]]
    bad = [m for m in cfg["modes"] if m not in PLACEMENT_MODES]
    if not cfg["modes"] or bad:
        raise ValueError(f"config field 'modes': unknown mode(s) {bad}; expected a subset of {list(PLACEMENT_MODES)}")


# Keys that determine what a single training run computes; the rest only
# steer multi-run commands or diagnostics.
RUN_KEYS = ({f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
            | {"corpus", "corpus_max_bytes", "train_fraction", "grad_batch_size"})


def run_identity(cfg: dict) -> dict:
    return {k: cfg[k] for k in sorted(RUN_KEYS) if k in cfg}


def seeds_of(cfg: dict) -> list[int]:
    return list(cfg["seeds"]) if cfg["seeds"] is not None else [cfg["seed"]]


def model_config(cfg: dict) -> ModelConfig:
    return _split(cfg)[0]


def train_config(cfg: dict) -> TrainConfig:
    return _split(cfg)[1]


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_output_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    return out if out.is_absolute() else output_root() / out


def write_manifest(cfg: dict, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- corpus ------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _stdlib_tokens(max_bytes):
    return encode(stdlib_corpus_text(max_bytes))


def corpus_tokens(corpus: str, max_bytes=None, train_fraction: float = 0.9):
    """Train/eval token streams for a corpus path or the bundled ``stdlib`` text."""
    if corpus == STDLIB_CORPUS:
        return split_tokens(_stdlib_tokens(max_bytes), train_fraction)
    if max_bytes is None:
        return load_corpus(corpus, train_fraction)
    path = Path(corpus)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    raw = path.read_bytes()[:max_bytes]
    raw.decode("utf-8", errors="ignore")
    return split_tokens(encode(raw), train_fraction)


def experiment_corpus(cfg: dict):
    return corpus_tokens(cfg["corpus"], cfg["corpus_max_bytes"], cfg["train_fraction"])


# -- runs ----------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    final_eval_loss: float
    final_ppl: float
    diverged: bool
    diverged_at: int | None
    balance_score_at_init: float
    runlog: RunLog | None = None

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / CHECKPOINT

    def load_model(self):
        return load_checkpoint(self.checkpoint)


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


def _read_summary(out_dir: Path) -> RunResult:
    doc = json.loads((out_dir / SUMMARY).read_text(encoding="utf-8"))
    return RunResult(out_dir, float(doc["final_eval_loss"]), float(doc["final_ppl"]), bool(doc["diverged"]),
                     doc["diverged_at"], float(doc["balance_score_at_init"]))


def init_profile_batch(cfg: dict, train_tokens: np.ndarray):
    """Fixed batch for the step-0 gradient profile, drawn independently of training."""
    rng = np.random.default_rng([cfg["seed"], 0x6A9])
    return sample_batch(train_tokens, cfg["grad_batch_size"], cfg["seq_len"], rng)


def run_experiment(cfg: dict, out_dir: Path | None = None, reuse: bool = False) -> RunResult:
    """Train one configuration and write manifest, run log, checkpoint and summary.

    With ``reuse`` a directory that already holds a finished run of the same
    resolved config is returned as is.
    """
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
    if reuse and (out_dir / SUMMARY).is_file() and (out_dir / CHECKPOINT).is_file():
        try:
            previous = json.loads((out_dir / MANIFEST).read_text(encoding="utf-8"))
            same = run_identity(previous) == run_identity(cfg)
        except (OSError, json.JSONDecodeError):
            same = False
        if same:
            return _read_summary(out_dir)
    corpus = experiment_corpus(cfg)
    write_manifest(cfg, out_dir)
    (out_dir / SUMMARY).unlink(missing_ok=True)
    model = init_params(model_config(cfg))
    profile = grad_profile(model, *init_profile_batch(cfg, corpus[0]), step=0)
    profile.write_csv(out_dir / INIT_PROFILE)
    try:
        balance = balance_score(profile)
    except ValueError:
        balance = math.nan
    runlog = train(model, corpus, train_config(cfg), checkpoint_path=out_dir / CHECKPOINT)
    runlog.write_csv(out_dir / RUNLOG)
    result = RunResult(out_dir, runlog.final_eval_loss, runlog.final_ppl, runlog.diverged, runlog.diverged_at,
                       balance, runlog)
    summary = {
        "final_eval_loss": _json_float(result.final_eval_loss),
        "final_ppl": _json_float(result.final_ppl),
        "diverged": result.diverged,
        "diverged_at": result.diverged_at,
        "balance_score_at_init": _json_float(balance),
        "steps_completed": runlog.records[-1].step if runlog.records else 0,
        "optimizer": runlog.settings,
    }
    (out_dir / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result
