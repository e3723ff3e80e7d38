"""Command-line driver.

Subcommands: train, eval, sweep-beta, ablate, gradcheck, bench. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .bench import measure_latency
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, from_dict, load_config
from .data import (DataError, Vocab, gen_synthetic_classification, gen_synthetic_impressions,
                   gen_synthetic_retrieval, load_mind, read_retrieval_jsonl, retrieval_from_rows)
from .distill import ModelPair, NumericError
from .encoder import ConfigError, InputError
from .tasks import recsys as task_recsys
from .train import MAIN_METRIC, Trainer, build_pair, metric_value

log = logging.getLogger("jointkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_BETAS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- data

def load_data(cfg):
    """-> (splits dict with train/valid/test, vocab size, num_classes)."""
    if cfg.task == "classify":
        if cfg.data == "synthetic":
            splits, _ = gen_synthetic_classification(cfg.synthetic_spec())
            return splits, cfg.vocab_size, cfg.num_classes
        if cfg.data == "mind":
            vocab = Vocab.load(cfg.vocab_path) if cfg.vocab_path else None
            mind = load_mind(cfg.news_path, cfg.behaviors_path, cfg.max_seq_len, vocab)
            return mind.classify, len(mind.vocab), len(mind.categories)
    if cfg.task == "recsys":
        if cfg.data == "synthetic":
            return gen_synthetic_impressions(cfg.impression_spec()), cfg.vocab_size, None
        if cfg.data == "mind":
            vocab = Vocab.load(cfg.vocab_path) if cfg.vocab_path else None
            mind = load_mind(cfg.news_path, cfg.behaviors_path, cfg.max_seq_len, vocab,
                             max_history=cfg.history_len)
            return mind.impressions, len(mind.vocab), None
    if cfg.task == "retrieval":
        if cfg.data == "synthetic":
            return gen_synthetic_retrieval(cfg.retrieval_spec()), cfg.vocab_size, None
        if cfg.data == "jsonl":
            train_rows = read_retrieval_jsonl(cfg.train_path)
            test_rows = read_retrieval_jsonl(cfg.test_path)
            vocab = (Vocab.load(cfg.vocab_path) if cfg.vocab_path
                     else Vocab.build([q for q, _, _ in train_rows] + [d for _, d, _ in train_rows]))
            n_valid = max(1, len(train_rows) // 10)
            tr = retrieval_from_rows(train_rows[n_valid:], vocab, min(16, cfg.max_seq_len), cfg.max_seq_len)
            va = retrieval_from_rows(train_rows[:n_valid], vocab, min(16, cfg.max_seq_len), cfg.max_seq_len)
            te = retrieval_from_rows(test_rows, vocab, min(16, cfg.max_seq_len), cfg.max_seq_len)
            return {"train": tr, "valid": va, "test": te}, len(vocab), None
    raise ConfigError(f"data: source {cfg.data!r} not supported for task {cfg.task!r}")


def make_trainer(cfg, vocab_size, num_classes):
    enc_cfg = cfg.encoder_config(vocab_size)
    if cfg.task == "retrieval" and cfg.init_checkpoint:
        src, _ = load_checkpoint(cfg.init_checkpoint)
        p = src.pair
        enc = p.student or (src.full_pair.student if src.full_pair else None) or p.teacher
        heads = p.s_heads if p.student is not None else p.heads
        pool = {k: v for k, v in heads.items() if k.startswith("pool.")}
        for k, v in pool.items():
            v.name = k
        for k, v in enc.params.items():
            v.name = "student." + k
        pair = ModelPair(None, enc, pool, K=1)
    else:
        pair = build_pair(cfg.task, enc_cfg, cfg.K, cfg.mode, cfg.seed, num_classes, cfg.attn_dim)
        if cfg.task == "retrieval":
            pair.heads = {k: v for k, v in pair.heads.items() if k.startswith("pool.")}
    return Trainer(cfg.task, pair, cfg.distill_config(), cfg.train_settings(), mode=cfg.mode)


# ---------------------------------------------------------------- commands

def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def run_training(cfg, out):
    """Train per ``cfg`` writing artifacts under ``out``; returns the metrics dict."""
    splits, vocab_size, num_classes = load_data(cfg)
    trainer = make_trainer(cfg, vocab_size, num_classes)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    main = MAIN_METRIC[cfg.task]
    best = {"value": None}
    steps_fh = open(out / "steps.jsonl", "w")

    def on_step(rep):
        steps_fh.write(json.dumps(rep, sort_keys=True, default=_json_default) + "\n")

    def on_epoch(rec, tr):
        log.info("epoch %s (%s) %s", rec["epoch"], rec["phase"], json.dumps(
            {k: v for k, v in rec.items() if k in ("teacher", "student")}, default=_json_default))
        if tr.phase == "teacher":
            return
        path = "student" if tr.pair.student is not None else "teacher"
        if path in rec:
            v = metric_value(rec[path], main)
            if v is not None and (best["value"] is None or v > best["value"]):
                best["value"] = v
                save_checkpoint(out / "best.ckpt", tr, cfg.to_dict())

    valid = splits.get("valid")
    eval_valid = valid if valid is not None and len(valid) else None
    try:
        history = trainer.fit(splits["train"], eval_valid, on_step=on_step, on_epoch=on_epoch)
    finally:
        steps_fh.close()
    save_checkpoint(out / "final.ckpt", trainer, cfg.to_dict())
    test = {}
    for path, enc in (("teacher", trainer.pair.teacher), ("student", trainer.pair.student)):
        if enc is not None:
            test[path] = trainer.evaluate(splits["test"], path)
    metrics = {"epochs": history, "test": test, "best_valid": best["value"]}
    _write_json(out / "metrics.json", metrics)
    return metrics


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    return cfg.validate()


def cmd_train(args):
    cfg = _load_cfg(args)
    metrics = run_training(cfg, cfg.out_dir)
    print(json.dumps(metrics["test"], sort_keys=True, default=_json_default))
    return EXIT_OK


def cmd_eval(args):
    trainer, header = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = from_dict(header["config"]) if header["config"] else RunConfig(task=trainer.task)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    splits, _, _ = load_data(cfg)
    out = {}
    for path, enc in (("teacher", trainer.pair.teacher), ("student", trainer.pair.student)):
        if enc is not None:
            out[path] = trainer.adapter.evaluate(trainer.pair, splits[args.split], path)
    text = json.dumps(out, indent=2, sort_keys=True, default=_json_default)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval_metrics.json").write_text(text + "\n")
    return EXIT_OK


def _final_row(metrics, steps_path):
    path = "student" if "student" in metrics["test"] else "teacher"
    row = {r["metric"]: r["value"] for r in metrics["test"][path]}
    last = None
    with open(steps_path) as fh:
        for line in fh:
            last = json.loads(line)
    for k in ("L_s", "L_t", "L_hidden_l", "L_hidden_p", "L_distill"):
        row["final_" + k] = None if last is None else last.get(k)
    return row


def _write_csv(path, rows):
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_sweep_beta(args):
    cfg = _load_cfg(args)
    betas = [float(b) for b in args.betas.split(",")] if args.betas else list(DEFAULT_BETAS)
    out = Path(cfg.out_dir)
    rows = []
    for b in betas:
        sub = out / f"beta_{b:g}"
        m = run_training(cfg.replace(beta=b, out_dir=str(sub)), sub)
        rows.append({"beta": b, "seed": cfg.seed, **_final_row(m, sub / "steps.jsonl")})
        log.info("beta %g done", b)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep_beta.csv", rows)
    print((out / "sweep_beta.csv").read_text(), end="")
    return EXIT_OK


ABLATIONS = (
    ("full", {}),
    ("w/o momentum", {"enable_momentum": False}),
    ("w/o distillation loss", {"enable_distill_loss": False}),
    ("w/o hidden loss", {"enable_hidden_layer_loss": False, "enable_pooled_hidden_loss": False}),
)


def cmd_ablate(args):
    cfg = _load_cfg(args)
    out = Path(cfg.out_dir)
    rows = []
    for name, kw in ABLATIONS:
        sub = out / name.replace("/", "").replace(" ", "_")
        m = run_training(cfg.replace(out_dir=str(sub), **kw), sub)
        rows.append({"variant": name, "seed": cfg.seed, **_final_row(m, sub / "steps.jsonl")})
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", rows)
    print((out / "ablation.csv").read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_cfg(args)
    task = "recsys" if cfg.task == "recsys" else "classify"
    pair = build_pair(task, cfg.encoder_config(), cfg.K, "joint", cfg.seed, cfg.num_classes, cfg.attn_dim)
    if task == "classify":
        spec = cfg.replace(n_train=8, n_valid=1, n_test=1).synthetic_spec()
        d = gen_synthetic_classification(spec)[0]["train"]
        batch = (d.tokens[:3], d.mask[:3], d.labels[:3])
    else:
        imp = gen_synthetic_impressions(cfg.replace(n_train=4, n_valid=1, n_test=1).impression_spec())["train"]
        batch = task_recsys.make_batch(imp, imp.samples[:2])
    report = gc.run(pair, batch, cfg.distill_config(), task=task, n_samples=args.samples, seed=cfg.seed,
                    tol=args.tol)
    for r in report["losses"]:
        print(f"{r['loss']:<12} max_rel_error={r['max_rel_error']:.3e} n={r['n_params']} "
              f"{'PASS' if r['pass'] else 'FAIL'}")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    _write_json(Path(cfg.out_dir) / "gradcheck.json", report)
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def cmd_bench(args):
    cfg = _load_cfg(args)
    pair = build_pair("classify", cfg.encoder_config(), cfg.K, "joint", cfg.seed, cfg.num_classes,
                      cfg.attn_dim)
    rep = measure_latency(pair, n_samples=args.samples, warmup=args.warmup, seed=cfg.seed)
    print(json.dumps(rep, indent=2))
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    _write_json(Path(cfg.out_dir) / "bench.json", rep)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="jointkd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config=False):
        sp.add_argument("--config", required=needs_config, help="key = value config file")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        return sp

    common(sub.add_parser("train", help="train per config")).set_defaults(fn=cmd_train)
    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "valid", "test"))
    e.set_defaults(fn=cmd_eval)
    s = common(sub.add_parser("sweep-beta", help="one run per momentum beta"))
    s.add_argument("--betas", help="comma-separated list (default 0..0.3 step 0.05)")
    s.set_defaults(fn=cmd_sweep_beta)
    common(sub.add_parser("ablate", help="full model plus single-component removals")).set_defaults(
        fn=cmd_ablate)
    g = common(sub.add_parser("gradcheck", help="finite-difference audit of every loss"))
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--tol", type=float, default=1e-3)
    g.set_defaults(fn=cmd_gradcheck)
    b = common(sub.add_parser("bench", help="teacher vs student forward latency"))
    b.add_argument("--samples", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=100)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (DataError, InputError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
