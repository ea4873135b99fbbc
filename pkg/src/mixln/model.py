"""LLaMA-style decoder with per-layer normalization placement.

Every block holds an attention sublayer and a SwiGLU FFN sublayer. How each
sublayer is wrapped with its residual connection and normalizer is decided
per layer by the placement schedule:

    post      LN(x + F(x))
    pre       x + F(LN(x))
    sandwich  x + LN(F(LN(x)))
    deepnorm  LN(lam * x + F(x)),  lam = (2L) ** 0.25

``mix_ln`` uses ``post`` for the first ``floor(alpha * L)`` layers and ``pre``
for the rest. All modes share one final normalizer before the output head.
Positions use learned absolute embeddings (no rotary).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .normalization import NormSpec, SigmaTrace, apply_norm
from .tensor import (Tensor, add, cross_entropy, make_rng, masked_fill, matmul, reshape, scale,
                     scaled_dot_attention, softmax, swiglu, take_rows, transpose)

PLACEMENT_MODES = ("post_ln", "pre_ln", "mix_ln", "deepnorm", "sandwich_ln")
INIT_MODES = ("standard", "scaled_init", "scaled_init+scaled_embed")
SUBLAYERS = ("attn", "ffn")

# Standard normal truncated to [-2, 2] has this std; dividing by it makes the
# realised std of the standard init exactly ``init_std``.
_TRUNC2_STD = 0.8796256610342398


@dataclass
class ModelConfig:
    n_layers: int = 12
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 342
    vocab_size: int = 257
    max_seq_len: int = 256
    norm: str = "rmsnorm"
    norm_eps: float = 1e-5
    norm_affine: bool = True
    placement_mode: str = "pre_ln"
    alpha: float = 0.25
    init_mode: str = "standard"
    init_std: float = 0.02
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.placement_mode not in PLACEMENT_MODES:
            raise ValueError(f"unknown placement_mode {self.placement_mode!r}; expected one of {PLACEMENT_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"unknown init_mode {self.init_mode!r}; expected one of {INIT_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.norm_spec  # validates norm kind / eps

    @property
    def norm_spec(self) -> NormSpec:
        return NormSpec(kind=self.norm, eps=self.norm_eps, affine=self.norm_affine)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def norm_schedule(n_layers: int, alpha: float) -> list[str]:
    """``post`` for the first ``floor(alpha * n_layers)`` layers, ``pre`` after."""
    if n_layers < 1:
        raise ValueError("n_layers must be at least 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    # The slack absorbs representation error for ratios such as 1/3.
    n_post = min(n_layers, math.floor(alpha * n_layers + 1e-9))
    return ["post"] * n_post + ["pre"] * (n_layers - n_post)


def placement_schedule(config: ModelConfig) -> list[str]:
    L = config.n_layers
    mode = config.placement_mode
    if mode == "mix_ln":
        return norm_schedule(L, config.alpha)
    return [{"post_ln": "post", "pre_ln": "pre", "deepnorm": "deepnorm", "sandwich_ln": "sandwich"}[mode]] * L


def deepnorm_residual_scale(n_layers: int) -> float:
    return (2.0 * n_layers) ** 0.25


def deepnorm_init_gain(n_layers: int) -> float:
    return (8.0 * n_layers) ** -0.25


def scaled_init_std(d_model: int, n_layers: int) -> float:
    return math.sqrt(2.0 / (5.0 * d_model)) / math.sqrt(2.0 * n_layers)


# -- block wrappers ---------------------------------------------------------------

Sublayer = Callable[[Tensor], Tensor]


def post_ln_block(x: Tensor, F: Sublayer, norm: Sublayer) -> Tensor:
    return norm(x + F(x))


def pre_ln_block(x: Tensor, F: Sublayer, norm: Sublayer) -> Tensor:
    return x + F(norm(x))


def sandwich_block(x: Tensor, F: Sublayer, norm_in: Sublayer, norm_out: Sublayer) -> Tensor:
    return x + norm_out(F(norm_in(x)))


def deepnorm_block(x: Tensor, F: Sublayer, norm: Sublayer, n_layers: int) -> Tensor:
    return norm(add(scale(x, deepnorm_residual_scale(n_layers)), F(x)))


# -- sublayers --------------------------------------------------------------------

_mask_cache: dict[int, np.ndarray] = {}


def causal_mask(T: int) -> np.ndarray:
    """Boolean ``(T, T)`` mask, true strictly above the diagonal (future keys)."""
    m = _mask_cache.get(T)
    if m is None:
        m = np.triu(np.ones((T, T), dtype=bool), k=1)
        m.setflags(write=False)
        _mask_cache[T] = m
    return m


def causal_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int,
                     fused: bool = True) -> Tensor:
    """Multi-head causal self-attention on ``(B, T, d)`` inputs.

    ``fused=False`` builds the same computation from elementary ops; it is
    slower and far hungrier for memory, and exists as a cross-check.
    """
    B, T, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(matmul(x, wq)), heads(matmul(x, wk)), heads(matmul(x, wv))
    if fused:
        ctx = scaled_dot_attention(q, k, v, causal_mask(T))
    else:
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = softmax(masked_fill(scores, causal_mask(T), -np.inf), axis=-1)
        ctx = matmul(weights, v)
    out = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    return matmul(out, wo)


# -- model ------------------------------------------------------------------------


def _norm_names(placement: str, sub: str) -> list[str]:
    if placement == "sandwich":
        return [f"{sub}_norm_in", f"{sub}_norm_out"]
    return [f"{sub}_norm"]


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter name and shape, in declaration (and checkpoint) order."""
    d, V, dff = config.d_model, config.vocab_size, config.d_ff
    layout = [("tok_emb", (V, d)), ("pos_emb", (config.max_seq_len, d))]
    norm_params = ["gain", "bias"] if config.norm == "layernorm" else ["gain"]
    for ell, placement in enumerate(placement_schedule(config)):
        pre = f"blocks.{ell}."
        layout += [(pre + f"attn.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]
        layout += [(pre + "ffn.w_gate", (d, dff)), (pre + "ffn.w_up", (d, dff)), (pre + "ffn.w_down", (dff, d))]
        if config.norm_affine:
            for sub in SUBLAYERS:
                for nm in _norm_names(placement, sub):
                    layout += [(pre + f"{nm}.{p}", (d,)) for p in norm_params]
    if config.norm_affine:
        layout += [(f"final_norm.{p}", (d,)) for p in norm_params]
    layout.append(("head", (d, V)))
    return layout


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * (std / _TRUNC2_STD)


def init_params(config: ModelConfig) -> "Model":
    """Sample a fresh model.

    ``standard``: every matrix from a normal truncated at two standard
    deviations, rescaled so its std is ``init_std``; gains 1, biases 0.
    ``scaled_init``: attention output and FFN down projections instead drawn
    from N(0, sqrt(2/(5d)) / sqrt(2L)). ``scaled_init+scaled_embed`` also
    multiplies the embedding output by sqrt(d). DeepNorm multiplies the value,
    output and FFN matrices by (8L)^-1/4.
    """
    rng = make_rng(config.seed)
    dt = config.np_dtype
    L, d = config.n_layers, config.d_model
    scaled = config.init_mode != "standard"
    small_std = scaled_init_std(d, L)
    beta = deepnorm_init_gain(L) if config.placement_mode == "deepnorm" else 1.0
    params: dict[str, Tensor] = {}
    for name, shape in parameter_layout(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf == "bias":
            arr = np.zeros(shape)
        elif scaled and leaf in ("wo", "w_down"):
            arr = rng.normal(0.0, small_std, shape)
        else:
            arr = _trunc_normal(rng, shape, config.init_std)
        if beta != 1.0 and leaf in ("wv", "wo", "w_gate", "w_up", "w_down"):
            arr = arr * beta
        params[name] = Tensor(arr.astype(dt), requires_grad=True)
    return Model(config, params)


class Model:
    """Parameters plus the list of blocks that take part in the forward pass.

    Pruned models share parameter tensors with their parent; only ``active``
    differs.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], active: list[int] | None = None):
        self.config = config
        self.params = params
        self.placements = placement_schedule(config)
        self.active = list(range(config.n_layers)) if active is None else list(active)
        self.embed_scale = math.sqrt(config.d_model) if config.init_mode.endswith("scaled_embed") else 1.0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def block_parameters(self, ell: int) -> list[Tensor]:
        pre = f"blocks.{ell}."
        return [p for n, p in self.params.items() if n.startswith(pre)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # forward ------------------------------------------------------------------

    def _norm(self, prefix: str, sigma_trace: SigmaTrace | None) -> Sublayer:
        spec = self.config.norm_spec
        gain = self.params.get(prefix + ".gain")
        bias = self.params.get(prefix + ".bias")

        def fn(t: Tensor) -> Tensor:
            if sigma_trace is not None:
                sigma_trace.record(prefix, t)
            return apply_norm(t, spec, gain, bias)

        return fn

    def _sublayer(self, ell: int, sub: str) -> Sublayer:
        p = self.params
        pre = f"blocks.{ell}.{sub}."
        if sub == "attn":
            wq, wk, wv, wo = (p[pre + w] for w in ("wq", "wk", "wv", "wo"))
            return lambda t: causal_attention(t, wq, wk, wv, wo, self.config.n_heads)
        wg, wu, wd = p[pre + "w_gate"], p[pre + "w_up"], p[pre + "w_down"]
        return lambda t: swiglu(t, wg, wu, wd)

    def block(self, ell: int, x: Tensor, sigma_trace: SigmaTrace | None = None) -> Tensor:
        placement = self.placements[ell]
        for sub in SUBLAYERS:
            F = self._sublayer(ell, sub)
            norms = [self._norm(f"blocks.{ell}.{nm}", sigma_trace) for nm in _norm_names(placement, sub)]
            if placement == "post":
                x = post_ln_block(x, F, norms[0])
            elif placement == "pre":
                x = pre_ln_block(x, F, norms[0])
            elif placement == "sandwich":
                x = sandwich_block(x, F, norms[0], norms[1])
            else:
                x = deepnorm_block(x, F, norms[0], self.config.n_layers)
        return x

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        T = tokens.shape[1]
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        h = take_rows(self.params["tok_emb"], tokens) + take_rows(self.params["pos_emb"], np.arange(T))
        if self.embed_scale != 1.0:
            h = scale(h, self.embed_scale)
        return h

    def hidden_states(self, tokens, sigma_trace: SigmaTrace | None = None) -> list[Tensor]:
        """Inputs to every active block followed by the stack output (pre final norm)."""
        states = [self.embed(tokens)]
        for ell in self.active:
            states.append(self.block(ell, states[-1], sigma_trace))
        return states

    def forward(self, tokens, sigma_trace: SigmaTrace | None = None) -> Tensor:
        h = self.hidden_states(tokens, sigma_trace)[-1]
        h = self._norm("final_norm", sigma_trace)(h)
        return matmul(h, self.params["head"])

    __call__ = forward

    def loss(self, inputs, targets) -> Tensor:
        return cross_entropy(self.forward(inputs), targets)


def prune_layer(model: Model, ell: int) -> Model:
    """A view of ``model`` whose forward pass skips block ``ell`` entirely."""
    if not 0 <= ell < model.config.n_layers:
        raise IndexError(f"layer index {ell} out of range for {model.config.n_layers} layers")
    if ell not in model.active:
        raise IndexError(f"layer {ell} is already pruned")
    return Model(model.config, model.params, [a for a in model.active if a != ell])
