"""Command-line entry point and experiment orchestration.

Subcommands: generate, metatrain, multitrain, transfer, finetune, evaluate,
grid, gradcheck.  Exit codes: 0 success, 1 usage error, 2 numerical failure.
Every run writes its fully resolved configuration next to its outputs, and
all evaluation events go to a JSON-lines metrics log so summary tables can
be rebuilt without rerunning anything.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import statistics
import sys

import numpy as np

from . import autodiff as ad
from . import evaluate as eval_mod
from . import metalearn as meta_mod
from . import tasks as tasks_mod
from . import ulr as ulr_mod
from .learner import LearnConfig, LearnError
from .metalearn import MetaConfig, MetaError
from .model import ModelConfig, ModelError, init_params

log = logging.getLogger(__name__)

OUTPUT_ENV = "METAMT_OUTPUT"

INIT_KINDS = ("random", "transfer", "multilingual", "meta")


def output_root() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


# ---------------------------------------------------------------------------
# config files: plain "key = value" lines


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_resolved_config(out_dir, **sections) -> None:
    os.makedirs(out_dir, exist_ok=True)
    resolved = {
        name: dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
        for name, cfg in sections.items()
    }
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)


def _apply_overrides(cls, overrides: dict[str, str], prefix: str = ""):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in overrides:
            raw = overrides[key]
            typ = f.type if isinstance(f.type, type) else str(f.type)
            if "tuple" in str(typ):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif "int" in str(typ):
                kwargs[f.name] = int(raw)
            elif "float" in str(typ):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# shared setup


def _load_family(args, cfg_model):
    sources, targets, pivot = tasks_mod.load_family(args.family, max_len=cfg_model.max_len)
    return sources, targets, pivot


def _fresh_init(cfg_model, pivot_path, n_slots, seed):
    tokens, vectors = ulr_mod.load_embeddings(pivot_path)
    ulr_state, entries = ulr_mod.init_ulr_params(vectors, n_slots)
    params = init_params(cfg_model, len(tokens) + 4, np.random.default_rng(seed), entries)
    return params, ulr_state


def _find_task(tasks, name):
    for t in tasks:
        if t.name == name:
            return t
    raise ValueError(f"unknown task {name!r}; have {[t.name for t in tasks]}")


# ---------------------------------------------------------------------------
# comparison grid


def run_comparison_grid(family_dir, target_names, init_checkpoints: dict,
                        budgets, strategies, seeds, cfg_model: ModelConfig,
                        learn_cfg: LearnConfig, out_dir,
                        max_test_sentences: int | None = None,
                        init_seed: int = 0, n_slots: int = 32) -> list[dict]:
    """Fine-tune every (init x budget x strategy x seed) cell on each target
    and emit per-cell mean +/- stddev of test BLEU.

    `init_checkpoints` maps init name -> checkpoint path; the special name
    'random' needs no checkpoint.  Returns summary rows (also written to CSV
    next to the metrics log).
    """
    os.makedirs(out_dir, exist_ok=True)
    sources, targets, pivot = tasks_mod.load_family(family_dir, max_len=cfg_model.max_len)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    records = []
    cells: dict[tuple, list[float]] = {}

    inits = {}
    for name, ckpt in init_checkpoints.items():
        if name == "random":
            inits[name] = _fresh_init(cfg_model, pivot, n_slots, init_seed)
        else:
            if ckpt is None or not os.path.exists(str(ckpt)):
                raise FileNotFoundError(f"missing checkpoint for init '{name}': {ckpt}")
            params, state, _ = meta_mod.load_checkpoint(ckpt)
            inits[name] = (params, state)

    for tname in target_names:
        target = _find_task(targets, tname)
        for init_name, (params, state) in inits.items():
            for budget in budgets:
                for strategy in strategies:
                    lc = dataclasses.replace(learn_cfg, strategy=strategy)
                    for seed in seeds:
                        score, _, _ = eval_mod.finetune_and_score(
                            params, cfg_model, state, target, budget, lc, seed,
                            max_test_sentences)
                        cells.setdefault((tname, init_name, budget, strategy), []).append(score)
                        records.append(eval_mod.MetricsRecord(
                            f"grid/{tname}/{init_name}", seed, 0, tname, "test",
                            None, score, budget))
    eval_mod.append_metrics(metrics_path, records)

    rows = []
    for (tname, init_name, budget, strategy), scores in sorted(cells.items()):
        rows.append({
            "task": tname, "init": init_name, "budget": budget,
            "strategy": strategy, "n": len(scores),
            "bleu_mean": statistics.fmean(scores),
            "bleu_std": statistics.stdev(scores) if len(scores) > 1 else 0.0,
        })
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _print_table(rows)
    return rows


def _print_table(rows) -> None:
    if not rows:
        return
    header = f"{'task':10} {'init':14} {'budget':>8} {'strategy':9} {'BLEU':>18}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['task']:10} {r['init']:14} {r['budget']:>8} {r['strategy']:9} "
              f"{r['bleu_mean']:9.2f} +/- {r['bleu_std']:.2f}")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args):
    overrides = read_config_file(args.config) if args.config else {}
    spec = _apply_overrides(tasks_mod.SyntheticFamilySpec, overrides)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    tasks_mod.generate_family(spec, args.family)
    write_resolved_config(args.family, family=spec)
    print(f"family written to {args.family}")
    return 0


def _make_cfgs(args):
    overrides = read_config_file(args.config) if args.config else {}
    cfg_model = _apply_overrides(ModelConfig, overrides, "model.")
    learn_cfg = _apply_overrides(LearnConfig, overrides, "learn.")
    meta_cfg = _apply_overrides(MetaConfig, overrides, "meta.")
    if getattr(args, "seed", None) is not None:
        meta_cfg = dataclasses.replace(meta_cfg, seed=args.seed)
    if getattr(args, "estimator", None):
        meta_cfg = dataclasses.replace(meta_cfg, estimator=args.estimator)
    if getattr(args, "strategy", None):
        learn_cfg = dataclasses.replace(learn_cfg, strategy=args.strategy)
    return cfg_model, learn_cfg, meta_cfg


def _cmd_train(args, mode):
    cfg_model, learn_cfg, meta_cfg = _make_cfgs(args)
    sources, targets, pivot = _load_family(args, cfg_model)
    if args.sources:
        wanted = args.sources.split(",")
        sources = [_find_task(sources, n) for n in wanted]
    validation = _find_task(targets, args.validation) if args.validation else None
    params, state = _fresh_init(cfg_model, pivot, args.slots, meta_cfg.seed)

    if mode == "metatrain":
        params, metrics = meta_mod.meta_train(
            params, sources, meta_cfg, cfg_model, state, validation, learn_cfg,
            run_id=args.run_id)
    elif mode == "multitrain":
        params, metrics = meta_mod.multilingual_train(
            params, sources, meta_cfg, cfg_model, state, validation, learn_cfg,
            run_id=args.run_id)
    else:  # transfer
        if len(sources) != 1:
            raise ValueError("transfer requires exactly one source (--sources)")
        params, metrics = meta_mod.transfer_init(
            params, sources[0], meta_cfg, cfg_model, state, validation, learn_cfg,
            run_id=args.run_id)

    out_dir = os.path.join(output_root(), args.run_id)
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoint.npz")
    meta_mod.save_checkpoint(ckpt, params, state, {
        "mode": mode, "config_hash": meta_mod.config_hash(cfg_model, learn_cfg, meta_cfg),
    })
    eval_mod.append_metrics(os.path.join(out_dir, "metrics.jsonl"), metrics)
    write_resolved_config(out_dir, model=cfg_model, learn=learn_cfg, meta=meta_cfg)
    print(f"checkpoint written to {ckpt}")
    return 0


def _cmd_finetune(args):
    cfg_model, learn_cfg, meta_cfg = _make_cfgs(args)
    _, targets, _ = _load_family(args, cfg_model)
    target = _find_task(targets, args.target)
    params, state, _ = meta_mod.load_checkpoint(args.checkpoint)
    score, tuned, history = eval_mod.finetune_and_score(
        params, cfg_model, state, target, args.budget, learn_cfg,
        meta_cfg.seed)
    out_dir = os.path.join(output_root(), args.run_id)
    os.makedirs(out_dir, exist_ok=True)
    meta_mod.save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), tuned, state,
                             {"mode": "finetune"})
    eval_mod.append_metrics(os.path.join(out_dir, "metrics.jsonl"), [
        eval_mod.MetricsRecord(args.run_id, meta_cfg.seed, len(history["train_loss"]),
                               target.name, "test", None, score, args.budget)])
    write_resolved_config(out_dir, model=cfg_model, learn=learn_cfg)
    print(f"test BLEU {score:.2f}")
    return 0


def _cmd_evaluate(args):
    cfg_model, _, _ = _make_cfgs(args)
    _, targets, _ = _load_family(args, cfg_model)
    target = _find_task(targets, args.target)
    params, state, _ = meta_mod.load_checkpoint(args.checkpoint)
    score = eval_mod.zero_shot_eval(params, cfg_model, state, target)
    print(f"zero-shot BLEU {score:.2f}")
    return 0


def _cmd_grid(args):
    cfg_model, learn_cfg, _ = _make_cfgs(args)
    inits = {"random": None}
    for kv in (args.init or []):
        name, _, path = kv.partition("=")
        if name not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}, got {name!r}")
        inits[name] = path or None
    budgets = [int(b) for b in args.budgets.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    strategies = args.strategies.split(",")
    out_dir = os.path.join(output_root(), args.run_id)
    run_comparison_grid(args.family, args.targets.split(","), inits, budgets,
                        strategies, seeds, cfg_model, learn_cfg, out_dir,
                        n_slots=args.slots)
    write_resolved_config(out_dir, model=cfg_model, learn=learn_cfg,
                          grid={"inits": list(inits), "budgets": budgets,
                                "seeds": seeds, "strategies": strategies})
    return 0


def _cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed or 0)
    w1 = ad.parameter(rng.normal(0, 0.5, size=(6, 8)))
    w2 = ad.parameter(rng.normal(0, 0.5, size=(8, 4)))
    x = np.asarray(rng.normal(size=(3, 6)))

    def f(params):
        h = ad.relu(ad.matmul(ad.Tensor(x), params["w1"]))
        return (ad.softmax(ad.matmul(h, params["w2"])) ** 2).sum()

    report = ad.grad_check(f, {"w1": w1, "w2": w2})
    for name, r in report["per_param"].items():
        print(f"{name}: max_rel_err={r['max_rel_err']:.3e} "
              f"{'ok' if r['passed'] else 'FAIL'}")
    print("PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 2


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metamt",
                                description="meta-learning translation laboratory")
    p.add_argument("--config", help="key = value config file")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, family=True):
        if family:
            sp.add_argument("--family", required=True, help="family directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--run-id", default=None)

    g = sub.add_parser("generate", help="generate a synthetic family")
    common(g)

    for mode in ("metatrain", "multitrain", "transfer"):
        t = sub.add_parser(mode)
        common(t)
        t.add_argument("--sources", help="comma-separated source task names")
        t.add_argument("--validation", help="validation target task name")
        t.add_argument("--estimator", choices=meta_mod.ESTIMATORS)
        t.add_argument("--slots", type=int, default=32, help="universal slot count")

    f = sub.add_parser("finetune")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--target", required=True)
    f.add_argument("--budget", type=int, default=16000)
    f.add_argument("--strategy", choices=("all", "emb+enc", "emb"))

    e = sub.add_parser("evaluate", help="zero-shot evaluation of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target", required=True)

    gr = sub.add_parser("grid", help="init x budget x strategy x seed comparison")
    common(gr)
    gr.add_argument("--targets", required=True)
    gr.add_argument("--init", action="append",
                    help="name=checkpoint (repeatable); random is implicit")
    gr.add_argument("--budgets", default="16000")
    gr.add_argument("--strategies", default="all")
    gr.add_argument("--seeds", default="0,1,2,3,4")
    gr.add_argument("--slots", type=int, default=32, help="universal slot count")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    common(gc, family=False)

    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    if getattr(args, "run_id", None) is None:
        args.run_id = args.cmd
    handlers = {
        "generate": _cmd_generate,
        "metatrain": lambda a: _cmd_train(a, "metatrain"),
        "multitrain": lambda a: _cmd_train(a, "multitrain"),
        "transfer": lambda a: _cmd_train(a, "transfer"),
        "finetune": _cmd_finetune,
        "evaluate": _cmd_evaluate,
        "grid": _cmd_grid,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.cmd](args)
    except (ValueError, FileNotFoundError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MetaError, LearnError, ad.AutodiffError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
