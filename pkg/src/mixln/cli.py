"""``mixln`` command line: train, sweep-alpha, diagnose, compare.

Configs are flat JSON objects (see ``configs/default.json``); any key can be
overridden on the command line as ``key=value``. Relative output paths are
resolved against ``$MIXLN_OUTPUT_ROOT`` (default: the working directory).
Exit status is 0 whenever the experiment ran, diverged runs included, and 2
on bad input or I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import experiment as ex
from .checkpoint import CheckpointError, load_checkpoint, read_header
from .diagnostics import angular_distance_matrix, grad_profile, prune_report
from .model import PLACEMENT_MODES
from .normalization import jacobian_table, sigma_tracker, write_jacobian_csv
from .reporting import fmt, write_csv
from .training import eval_windows

log = logging.getLogger("mixln")

SWEEP_COLUMNS = ("alpha", "final_ppl", "diverged")
SWEEP_RUN_COLUMNS = ("alpha", "seed", "final_ppl", "diverged")
COMPARE_COLUMNS = ("mode", "seed", "final_ppl", "diverged", "balance_score_at_init")
DIAGNOSTICS = ("grad", "angular", "prune", "jacobian", "sigma")


class UsageError(ValueError):
    pass


def _list(text: str, conv) -> list:
    text = text.strip()
    if text.startswith("["):
        return [conv(str(v)) for v in json.loads(text)]
    return [conv(part) for part in text.split(",") if part.strip()]


def _alpha_label(a: float) -> str:
    return f"alpha_{a:.6f}"


def _resolve(args, extra: dict | None = None) -> dict:
    overrides = ex.parse_overrides(args.overrides)
    overrides.update(extra or {})
    return ex.resolve_config(args.config, overrides)


def _run_cells(cells, parallel: int):
    """Train ``(cfg, out_dir)`` cells, optionally in worker processes; order is preserved."""
    if parallel > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(ex.run_experiment, cfg, out) for cfg, out in cells]
            return [f.result() for f in futures]
    return [ex.run_experiment(cfg, out) for cfg, out in cells]


# -- subcommands -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = ex.resolve_output_dir(cfg)
    res = ex.run_experiment(cfg, out)
    state = "diverged" if res.diverged else "finished"
    print(f"{state}: final eval ppl {fmt(res.final_ppl)}; artifacts in {out}")
    return 0


def cmd_sweep_alpha(args) -> int:
    extra = {}
    if args.alphas:
        extra["alphas"] = _list(args.alphas, ex.parse_ratio)
    if args.seeds:
        extra["seeds"] = _list(args.seeds, int)
    cfg = _resolve(args, extra)
    out = ex.resolve_output_dir(cfg)
    ex.write_manifest(cfg, out)
    seeds = ex.seeds_of(cfg)
    cells, keys = [], []
    for a in cfg["alphas"]:
        for s in seeds:
            cell = dict(cfg, placement_mode="mix_ln", alpha=a, seed=s, seeds=None,
                        output_dir=str(out / _alpha_label(a) / f"seed_{s}"))
            cells.append((cell, Path(cell["output_dir"])))
            keys.append((a, s))
    results = _run_cells(cells, args.parallel)
    write_csv(out / "runs.csv", SWEEP_RUN_COLUMNS,
              ((a, s, r.final_ppl, r.diverged) for (a, s), r in zip(keys, results)))
    rows = []
    for i, a in enumerate(cfg["alphas"]):
        group = results[i * len(seeds):(i + 1) * len(seeds)]
        ppl = [r.final_ppl for r in group]
        mean = math.inf if not all(math.isfinite(p) for p in ppl) else float(np.mean(ppl))
        rows.append((a, mean, any(r.diverged for r in group)))
    write_csv(out / "summary.csv", SWEEP_COLUMNS, rows)
    for a, p, d in rows:
        print(f"alpha {a:.4f}: ppl {fmt(p)}{' (diverged)' if d else ''}")
    return 0


def cmd_compare(args) -> int:
    extra = {}
    if args.modes:
        modes = _list(args.modes, str.strip)
        unknown = [m for m in modes if m not in PLACEMENT_MODES]
        if unknown:
            raise UsageError(f"unknown mode(s) {unknown}; expected any of {list(PLACEMENT_MODES)}")
        extra["modes"] = modes
    if args.seeds:
        extra["seeds"] = _list(args.seeds, int)
    cfg = _resolve(args, extra)
    out = ex.resolve_output_dir(cfg)
    ex.write_manifest(cfg, out)
    cells, keys = [], []
    for m in cfg["modes"]:
        for s in ex.seeds_of(cfg):
            cell = dict(cfg, placement_mode=m, seed=s, seeds=None, output_dir=str(out / m / f"seed_{s}"))
            cells.append((cell, Path(cell["output_dir"])))
            keys.append((m, s))
    results = _run_cells(cells, args.parallel)
    write_csv(out / "comparison.csv", COMPARE_COLUMNS,
              ((m, s, r.final_ppl, r.diverged, r.balance_score_at_init) for (m, s), r in zip(keys, results)))
    for (m, s), r in zip(keys, results):
        print(f"{m:12s} seed {s}: ppl {fmt(r.final_ppl)} diverged={int(r.diverged)} "
              f"balance@init {fmt(r.balance_score_at_init)}")
    return 0


def _diagnose_corpus(args):
    """Corpus for diagnostics: --corpus, else the one recorded next to the checkpoint, else stdlib."""
    if args.corpus:
        return ex.corpus_tokens(args.corpus, args.corpus_max_bytes)
    if args.checkpoint:
        manifest = Path(args.checkpoint).parent / ex.MANIFEST
        if manifest.is_file():
            cfg = json.loads(manifest.read_text(encoding="utf-8"))
            return ex.corpus_tokens(cfg.get("corpus", ex.STDLIB_CORPUS), cfg.get("corpus_max_bytes"),
                                    cfg.get("train_fraction", 0.9))
    return ex.corpus_tokens(ex.STDLIB_CORPUS, args.corpus_max_bytes)


def cmd_diagnose(args) -> int:
    which = args.which
    out = Path(args.out)
    out = out if out.is_absolute() else ex.output_root() / out
    options = {"which": which, "checkpoint": args.checkpoint, "corpus": args.corpus,
               "corpus_max_bytes": args.corpus_max_bytes, "max_tokens": args.max_tokens,
               "batch_size": args.batch_size, "seq_len": args.seq_len, "dims": None,
               "trials": args.trials, "seed": args.seed}
    if which == "jacobian":
        dims = _list(args.dims, int)
        if not dims or any(d < 2 for d in dims):
            raise UsageError("--dims needs integers of at least 2")
        options["dims"] = dims
        reports = jacobian_table(tuple(dims), trials=args.trials, seed=args.seed)
        out.mkdir(parents=True, exist_ok=True)
        write_jacobian_csv(out / "jacobian.csv", reports)
        _write_diag_manifest(out, options, None)
        for r in reports:
            print(f"d={r.d}: approx error {r.identity_approx_error:.4f} +- {r.identity_approx_error_std:.4f}")
        return 0
    if not args.checkpoint:
        raise UsageError(f"diagnose {which} needs --checkpoint")
    version, doc, _ = read_header(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    _, eval_tokens = _diagnose_corpus(args)
    seq_len = min(args.seq_len or model.config.max_seq_len, model.config.max_seq_len)
    out.mkdir(parents=True, exist_ok=True)
    if which == "angular":
        m = angular_distance_matrix(model, eval_tokens, max_tokens=args.max_tokens, seq_len=seq_len)
        m.write_csv(out / "angular.csv")
        print(f"angular distances over {m.token_count} tokens -> {out / 'angular.csv'}")
    elif which == "prune":
        rep = prune_report(model, eval_tokens, seq_len=seq_len, max_tokens=args.max_tokens)
        rep.write_csv(out / "prune.csv")
        print(f"baseline ppl {fmt(rep.original_ppl)} -> {out / 'prune.csv'}")
    else:
        x, y = eval_windows(eval_tokens, seq_len, args.batch_size * seq_len)
        if which == "grad":
            prof = grad_profile(model, x, y, step=args.step)
            prof.write_csv(out / "grad.csv")
            print(f"gradient norms for {len(prof.norms)} blocks -> {out / 'grad.csv'}")
        else:
            sig = sigma_tracker(model, x)
            write_csv(out / "sigma.csv", ("normalizer", "sigma"), sig.items())
            print(f"{len(sig)} normalizer inputs -> {out / 'sigma.csv'}")
    _write_diag_manifest(out, options, doc)
    return 0


def _write_diag_manifest(out: Path, options: dict, doc) -> None:
    """Record the resolved options in ``out/manifest.json``, one entry per diagnostic."""
    path = out / ex.MANIFEST
    manifest = {}
    if path.is_file():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    entry = {"options": options}
    if doc is not None:
        entry["checkpoint_config"] = doc["config"]
        entry["checkpoint_active"] = doc["active"]
    manifest.setdefault("diagnose", {})[options["which"]] = entry
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixln", description="Normalization-placement experiments on toy LMs.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    def with_parallel(p):
        p.add_argument("--parallel", type=int, default=1, metavar="N", help="run up to N cells at once")
        p.add_argument("--seeds", help="comma-separated seeds (overrides the seeds key)")

    p = sub.add_parser("train", help="train one model")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-alpha", help="train Mix-LN over a grid of Post-LN ratios")
    with_config(p)
    with_parallel(p)
    p.add_argument("--alphas", help="e.g. 0,1/6,0.25,1/3,5/12,0.5,1 or 16.7%%,25%%")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("compare", help="train several placement modes under one config")
    with_config(p)
    with_parallel(p)
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(PLACEMENT_MODES)}")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="layer diagnostics on a checkpoint (jacobian needs none)")
    p.add_argument("which", choices=DIAGNOSTICS)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", help="UTF-8 text file or 'stdlib'")
    p.add_argument("--corpus-max-bytes", type=int)
    p.add_argument("--out", default="diagnostics", help="output directory")
    p.add_argument("--max-tokens", type=int, default=65536)
    p.add_argument("--batch-size", type=int, default=8, help="sequences for grad and sigma")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--step", type=int, default=0, help="step index recorded in the grad profile")
    p.add_argument("--dims", default="64,128,256,512", help="hidden sizes for jacobian")
    p.add_argument("--trials", type=int, default=100, help="random directions for jacobian")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        # key=value pairs may follow options; argparse leaves those behind
        stray = [r for r in rest if r.startswith("-") or "=" not in r or not hasattr(args, "overrides")]
        if stray:
            parser.error(f"unrecognized arguments: {' '.join(stray)}")
        if rest:
            args.overrides = list(args.overrides) + rest
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "parallel", 1) < 1:
        print("mixln: error: --parallel must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CheckpointError, UsageError, ValueError, OSError, UnicodeDecodeError) as exc:
        print(f"mixln {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
