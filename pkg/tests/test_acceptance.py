"""Acceptance criteria 1-9, one test (or a small group) per criterion.

Each test is marked ``criterion(n)``; the terminal summary prints one
PASS/FAIL line per criterion. Criteria 6 and 7 train nine toy models and only
run with ``--runslow``; their runs are cached by ``tests/slow_suite.py``.
"""

import math
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from gradcheck import check_grads, randn
from mixln.checkpoint import load_checkpoint, save_checkpoint
from mixln.diagnostics import angular_distance_matrix, balance_score, grad_profile, prune_report, quartiles, thirds
from mixln.model import (
    Model,
    ModelConfig,
    deepnorm_block,
    init_params,
    norm_schedule,
    post_ln_block,
    pre_ln_block,
    sandwich_block,
    scaled_init_std,
)
from mixln.normalization import (
    identity_approx_error,
    jacobian_report,
    layer_norm,
    rms_norm,
)
from mixln.tensor import Tensor, cross_entropy, finite_diff_grad, matmul, relative_error, softmax, swiglu
from mixln.training import TrainConfig, evaluate_loss, train


def note(record_property, text):
    record_property("detail", text)
    print(text)


# -- 1. gradient oracles ------------------------------------------------------------------


def _op_cases(rng):
    """(name, loss, leaves) for every differentiable op, one random instance each."""
    a, b = randn(rng, 3, 4), randn(rng, 4, 5)
    s = randn(rng, 2, 6)
    x, wg, wu, wd = randn(rng, 3, 6), randn(rng, 6, 8), randn(rng, 6, 8), randn(rng, 8, 6)
    h, g, bias = randn(rng, 3, 8), randn(rng, 8), randn(rng, 8)
    logits = randn(rng, 4, 7)
    targets = rng.integers(0, 7, 4)
    probe = lambda *shape: Tensor(rng.standard_normal(shape))
    p45, p26, p36, p38 = probe(3, 5), probe(2, 6), probe(3, 6), probe(3, 8)

    def ffn():
        w1, w2, w3 = randn(rng, 8, 12), randn(rng, 8, 12), randn(rng, 12, 8)
        return (lambda t: swiglu(t, w1, w2, w3)), [w1, w2, w3]

    def norm():
        gg, bb = randn(rng, 8), randn(rng, 8)
        return (lambda t: layer_norm(t, 1e-5, gg, bb)), [gg, bb]

    F, fp = ffn()
    (n1, q1), (n2, q2) = norm(), norm()
    xb, pb = randn(rng, 2, 8), probe(2, 8)
    return [
        ("matmul", lambda: (matmul(a, b) * p45).sum(), [a, b]),
        ("softmax", lambda: (softmax(s) * p26).sum(), [s]),
        ("swiglu", lambda: (swiglu(x, wg, wu, wd) * p36).sum(), [x, wg, wu, wd]),
        ("layer_norm", lambda: (layer_norm(h, 1e-5, g, bias) * p38).sum(), [h, g, bias]),
        ("rms_norm", lambda: (rms_norm(h, 1e-5, g) * p38).sum(), [h, g]),
        ("cross_entropy", lambda: cross_entropy(logits, targets), [logits]),
        ("post_ln_block", lambda: (post_ln_block(xb, F, n1) * pb).sum(), [xb, *fp, *q1]),
        ("pre_ln_block", lambda: (pre_ln_block(xb, F, n1) * pb).sum(), [xb, *fp, *q1]),
        ("sandwich_block", lambda: (sandwich_block(xb, F, n1, n2) * pb).sum(), [xb, *fp, *q1, *q2]),
        ("deepnorm_block", lambda: (deepnorm_block(xb, F, n1, 12) * pb).sum(), [xb, *fp, *q1]),
    ]


MODES = ("post_ln", "pre_ln", "mix_ln", "deepnorm", "sandwich_ln")


def _model_error(seed):
    cfg = ModelConfig(n_layers=2, d_model=4, n_heads=2, d_ff=6, vocab_size=5, max_seq_len=3,
                      norm=("rmsnorm", "layernorm")[seed % 2], placement_mode=MODES[seed % 5], alpha=0.5,
                      init_std=0.5, seed=seed, dtype="float64")
    model = init_params(cfg)
    rng = np.random.default_rng(seed)
    inputs, targets = rng.integers(0, 5, (2, 3)), rng.integers(0, 5, (2, 3))
    model.loss(inputs, targets).backward()
    worst = 0.0
    for _, p in model.named_parameters():
        fd = finite_diff_grad(lambda _: model.loss(inputs, targets), p, h=1e-5)
        worst = max(worst, relative_error(p.grad, fd))
    return worst


@pytest.mark.criterion(1)
def test_gradient_oracle_suite(record_property):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        for name, loss, leaves in _op_cases(np.random.default_rng(seed)):
            worst[name] = max(worst.get(name, 0.0), check_grads(loss, leaves, tol=1e-5))
        worst["model"] = max(worst.get("model", 0.0), _model_error(seed))
    elapsed = time.perf_counter() - t0
    note(record_property, f"20 seeds, worst op rel err {max(v for k, v in worst.items() if k != 'model'):.1e}, "
                          f"model {worst['model']:.1e}, {elapsed:.0f}s")
    assert all(v < 1e-5 for k, v in worst.items() if k != "model"), worst
    assert worst["model"] < 1e-3
    assert elapsed < 120


# -- 2. Jacobian ------------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_layer_norm_jacobian(record_property):
    t0 = time.perf_counter()
    match = null = 0.0
    for d in (2, 8, 64):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(d) * (seed + 1) + seed
            if d == 2:
                x = np.array([1.0, -1.0]) * (seed + 1) + seed
            rep = jacobian_report(x, trials=10, rng=rng)
            match = max(match, float(np.abs(rep.analytic_jacobian - rep.autodiff_jacobian).max()))
            null = max(null, *rep.null_direction_residuals.values())
    elapsed = time.perf_counter() - t0
    note(record_property, f"max |analytic - autodiff| {match:.1e}, null residual {null:.1e}, {elapsed:.1f}s")
    assert match < 1e-6 and null < 1e-10 and elapsed < 30


# -- 3. identity approximation -----------------------------------------------------------------


@pytest.mark.criterion(3)
def test_identity_approximation_improves_with_width(record_property):
    t0 = time.perf_counter()
    dims = (64, 128, 256, 512)
    means = []
    for d in dims:
        errs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            errs.append(identity_approx_error(rng.standard_normal(d), trials=200, rng=rng))
        means.append(float(np.mean(errs)))
    x = np.random.default_rng(0).standard_normal(256)
    z = (x - x.mean()) / x.std()
    along_z = identity_approx_error(x, trials=1, directions=z[None])
    elapsed = time.perf_counter() - t0
    note(record_property, "mean error " + ", ".join(f"d={d}: {m:.4f}" for d, m in zip(dims, means))
         + f"; along z {along_z:.6f}; {elapsed:.1f}s")
    assert all(a > b for a, b in zip(means, means[1:]))
    assert along_z == pytest.approx(1.0, abs=1e-9)
    assert elapsed < 60


# -- 4. schedule ------------------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_norm_schedule(record_property):
    t0 = time.perf_counter()
    checked = 0
    for L in range(1, 65):
        for k in range(0, 2 * L + 1):
            alpha = Fraction(k, 2 * L)
            s = norm_schedule(L, float(alpha))
            n_post = math.floor(alpha * L)
            assert s == ["post"] * n_post + ["pre"] * (L - n_post)
            checked += 1
    assert norm_schedule(12, 0.25).count("post") == 3
    assert norm_schedule(32, 0.0625).count("post") == 2
    elapsed = time.perf_counter() - t0
    note(record_property, f"{checked} (L, alpha) cells; L=12/0.25 -> 3 post, L=32/6.25% -> 2 post; {elapsed:.2f}s")
    assert elapsed < 1.0


# -- 5. gradient flow at init ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def init_profiles(small_corpus):
    train_tokens = small_corpus[0]
    out = {m: [] for m in ("post_ln", "pre_ln", "mix_ln")}
    for seed in range(10):
        rng = np.random.default_rng([seed, 5])
        starts = rng.integers(0, train_tokens.size - 129, 8)
        x = np.stack([train_tokens[s:s + 128] for s in starts])
        y = np.stack([train_tokens[s + 1:s + 129] for s in starts])
        for mode in out:
            cfg = ModelConfig(n_layers=12, d_model=64, n_heads=4, d_ff=172, max_seq_len=128, placement_mode=mode,
                              alpha=0.25, seed=seed, dtype="float64")
            out[mode].append(grad_profile(init_params(cfg), x, y).norms)
    return {m: np.array(v) for m, v in out.items()}


@pytest.mark.criterion(5)
def test_init_post_ln_early_layers_starved(init_profiles, record_property):
    post = init_profiles["post_ln"]
    note(record_property, "(a) post-LN block0/block11 per seed: "
         + " ".join(f"{a:.3g}/{b:.3g}" for a, b in post[:, [0, 11]]))
    assert post[:, 0].mean() < post[:, 11].mean()


@pytest.mark.criterion(5)
def test_init_pre_ln_deep_layers_starved(init_profiles, record_property):
    pre = init_profiles["pre_ln"]
    note(record_property, "(b) pre-LN block0/block11 per seed: "
         + " ".join(f"{a:.3g}/{b:.3g}" for a, b in pre[:, [0, 11]]))
    assert pre[:, 11].mean() < pre[:, 0].mean()


@pytest.mark.criterion(5)
def test_init_mix_ln_most_balanced(init_profiles, record_property):
    scores = {m: [balance_score(n) for n in v] for m, v in init_profiles.items()}
    means = {m: float(np.mean(v)) for m, v in scores.items()}
    for m, v in scores.items():
        print(f"{m} balance per seed: " + " ".join(f"{s:.3f}" for s in v))
    note(record_property, "(c) mean balance " + ", ".join(f"{m} {v:.3f}" for m, v in means.items()))
    assert means["mix_ln"] > means["pre_ln"] and means["mix_ln"] > means["post_ln"]


# -- 6 and 7. toy pre-training (slow) ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_runs():
    sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
    import slow_suite

    return slow_suite.run_all(reuse=True)


def _mean_ppl(runs, mode):
    return float(np.mean([r.final_ppl for (m, _), r in runs.items() if m == mode]))


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_toy_pretraining_ordering(toy_runs, record_property):
    pre, mix, post = (_mean_ppl(toy_runs, m) for m in ("pre_ln", "mix_ln", "post_ln"))
    post_diverged = any(r.diverged for (m, _), r in toy_runs.items() if m == "post_ln")
    for (m, s), r in sorted(toy_runs.items()):
        print(f"{m} seed {s}: ppl {r.final_ppl:.4f} diverged={r.diverged}")
    note(record_property, f"mean ppl pre {pre:.4f}, mix {mix:.4f}, post {post:.4f}"
                          + (" (post diverged)" if post_diverged else ""))
    assert mix <= pre
    assert post_diverged or post > pre


@pytest.fixture(scope="module")
def layer_efficacy(toy_runs, small_corpus):
    from mixln.experiment import corpus_tokens

    sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
    import slow_suite

    _, eval_tokens = corpus_tokens(slow_suite.BASE["corpus"])
    out = {}
    for (mode, seed), run in toy_runs.items():
        if mode == "post_ln":
            continue
        model = run.load_model()
        rep = prune_report(model, eval_tokens, seq_len=256, max_tokens=65536)
        ang = angular_distance_matrix(model, eval_tokens, max_tokens=65536, seq_len=256)
        out[mode, seed] = (np.array(rep.delta), np.array([ang.distances[ell, 1] for ell in range(12)]))
    return out


def _group_mean(eff, mode, which, layers):
    return float(np.mean([eff[k][which][layers].mean() for k in eff if k[0] == mode]))


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_pre_ln_deep_layers_matter_less(layer_efficacy, record_property):
    early, deep = thirds(12)
    shallow_q, deep_q = quartiles(12)
    dp_early, dp_deep = (_group_mean(layer_efficacy, "pre_ln", 0, g) for g in (early, deep))
    ad_shallow, ad_deep = (_group_mean(layer_efficacy, "pre_ln", 1, g) for g in (shallow_q, deep_q))
    note(record_property, f"pre-LN dP early {dp_early:.4f} deep {dp_deep:.4f}; "
                          f"n=1 angular shallow {ad_shallow:.4f} deep {ad_deep:.4f}")
    assert dp_deep < dp_early
    assert ad_deep < ad_shallow


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_mix_ln_deep_layers_matter_more(layer_efficacy, record_property):
    _, deep = thirds(12)
    pre, mix = (_group_mean(layer_efficacy, m, 0, deep) for m in ("pre_ln", "mix_ln"))
    note(record_property, f"deep-third dP pre {pre:.4f} mix {mix:.4f}")
    assert mix > pre


# -- 8. determinism and persistence ---------------------------------------------------------------------------

_TRACE_SCRIPT = """
import hashlib, numpy as np
from mixln.data import stdlib_corpus_text
from mixln.model import ModelConfig, init_params
from mixln.training import TrainConfig, encode, split_tokens, train
corpus = split_tokens(encode(stdlib_corpus_text(200_000)))
model = init_params(ModelConfig(n_layers=2, d_model=32, n_heads=2, d_ff=48, max_seq_len=32, placement_mode="mix_ln",
                                alpha=0.5, seed=7, dtype="float64"))
log = train(model, corpus, TrainConfig(total_steps=50, batch_size=4, seq_len=32, eval_interval=25,
                                       eval_tokens=1024, seed=7))
print(len(log.losses), hashlib.sha256(np.array(log.losses, dtype=np.float64).tobytes()).hexdigest())
"""


@pytest.mark.criterion(8)
def test_loss_trace_identical_across_processes(record_property):
    t0 = time.perf_counter()
    outs = [subprocess.run([sys.executable, "-c", _TRACE_SCRIPT], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    note(record_property, f"50-step trace sha256 {outs[0].split()[-1][:16]}..., {time.perf_counter() - t0:.0f}s")
    assert outs[0] == outs[1] and outs[0].startswith("50 ")


@pytest.mark.criterion(8)
def test_checkpoint_preserves_eval_loss(small_corpus, tmp_path, record_property):
    model = init_params(ModelConfig(n_layers=3, d_model=32, n_heads=2, d_ff=48, max_seq_len=32,
                                    placement_mode="mix_ln", alpha=1 / 3, seed=3))
    train(model, small_corpus, TrainConfig(total_steps=20, batch_size=4, seq_len=32, eval_interval=20,
                                           eval_tokens=1024, seed=3))
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    a = evaluate_loss(model, small_corpus[1], 32, 4096)
    b = evaluate_loss(back, small_corpus[1], 32, 4096)
    note(record_property, f"eval loss {a!r} before and {b!r} after reload")
    assert a == b


# -- 9. initialization arithmetic -------------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_scaled_init_std(record_property):
    want = math.sqrt(2 / (5 * 512)) / math.sqrt(2 * 12)
    assert scaled_init_std(512, 12) == pytest.approx(want, rel=1e-15)
    cfg = ModelConfig(n_layers=12, d_model=512, n_heads=8, d_ff=200, vocab_size=8, max_seq_len=4,
                      init_mode="scaled_init", dtype="float64")
    w = init_params(cfg).params["blocks.0.ffn.w_down"].data
    got = float(w.std())
    note(record_property, f"sampled std {got:.6f} over {w.size} draws vs {want:.6f}")
    assert w.size >= 100_000
    assert abs(got - want) / want < 0.05


@pytest.mark.criterion(9)
def test_scaled_embed_multiplies_norm_by_sqrt_d(record_property):
    d = 64
    cfg = ModelConfig(n_layers=2, d_model=d, n_heads=4, d_ff=96, vocab_size=257, max_seq_len=16,
                      init_mode="scaled_init+scaled_embed", dtype="float64")
    scaled = init_params(cfg)
    plain = Model(ModelConfig(**{**cfg.to_dict(), "init_mode": "scaled_init"}), scaled.params)
    tokens = np.arange(32).reshape(2, 16)
    ratio = np.linalg.norm(scaled.embed(tokens).data, axis=-1) / np.linalg.norm(plain.embed(tokens).data, axis=-1)
    note(record_property, f"embedding norm ratio {ratio.min():.12f}..{ratio.max():.12f} vs sqrt(d) {math.sqrt(d)}")
    np.testing.assert_allclose(ratio, math.sqrt(d), rtol=1e-12)
