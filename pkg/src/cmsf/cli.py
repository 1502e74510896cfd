"""Command-line front end.

Subcommands: gen-data, train, eval, analyze, flops. Option resolution order
is defaults < config file < flags; every train run writes the fully resolved
options to run.cfg inside the run directory, which is enough to replay the
run exactly (training is deterministic given its config). The analyze path
exploits that: it replays the run, probes the final bank, and renders
figures next to the CSV/JSON reports.

Exit codes: 0 success, 1 runtime failure (structured line on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .core import Stream, make_rng
from .data import (AugmentSpec, Dataset, gen_hierarchical, gen_mixture,
                   inject_label_noise, load_csv, load_dataset, mask_labels,
                   save_csv, save_dataset, split_dataset)
from .encoder import load_checkpoint
from .evaluation import diagnostics_sweep, evaluate_encoder
from .flops import BranchSpec, ComputeRow, compute_totals, table9, table9_csv
from .trainer import TrainConfig, train


class UsageError(ValueError):
    pass


def _threads_default() -> int:
    try:
        return max(1, int(os.environ.get("CMSF_THREADS", "1")))
    except ValueError:
        return 1


# keys accepted in config files and their parsers; mirrors TrainConfig plus
# the run-level paths
def _parse_kprime(s: str):
    return None if s.lower() in ("none", "inf", "all") else int(s)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


TRAIN_KEYS: dict[str, tuple] = {
    "mode": (str, "none"),
    "epochs": (int, 30),
    "batch_size": (int, 64),
    "bank_size": (int, 4096),
    "emb_dim": (int, 32),
    "enc_hidden": (str, "64"),
    "pred_hidden": (str, "64"),
    "lr": (float, 0.05),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "ema_momentum": (float, 0.99),
    "k": (int, 5),
    "kprime": (_parse_kprime, 50),
    "conf_threshold": (float, 0.85),
    "include_target": (_parse_bool, True),
    "msf_aux_weight": (float, 0.0),
    "pseudo_source": (str, "head"),
    "head_updates_per_epoch": (int, 2),
    "head_hidden": (int, 64),
    "head_epochs": (int, 40),
    "head_lr": (float, 0.01),
    "aug_sigma": (float, 0.1),
    "aug_dropout": (float, 0.1),
    "aug_scale_lo": (float, 0.8),
    "aug_scale_hi": (float, 1.2),
    "seed": (int, 0),
    "threads": (int, None),       # None -> CMSF_THREADS or 1
    "eval_every": (int, 0),
    "data": (str, None),
    "eval_data": (str, ""),
    "out": (str, None),
}


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments ignored."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in TRAIN_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = val
    return out


def resolve_train_options(args: argparse.Namespace) -> dict:
    """defaults < config file < command-line flags."""
    resolved = {k: default for k, (_, default) in TRAIN_KEYS.items()}
    if args.config:
        for key, raw in parse_config_file(args.config).items():
            parse, _ = TRAIN_KEYS[key]
            try:
                resolved[key] = parse(raw)
            except ValueError as e:
                raise UsageError(f"bad value for {key!r}: {e}") from None
    for key in TRAIN_KEYS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
    if resolved["threads"] is None:
        resolved["threads"] = _threads_default()
    if not resolved["data"]:
        raise UsageError("missing required option: data (use --data or config file)")
    if not resolved["out"]:
        raise UsageError("missing required option: out (use --out or config file)")
    return resolved


def _fmt_cfg_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_run_cfg(resolved: dict, path) -> None:
    with open(path, "w") as f:
        for key in sorted(resolved):
            f.write(f"{key} = {_fmt_cfg_value(resolved[key])}\n")


def _parse_hidden(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s or s.lower() == "none":
        return ()
    return tuple(int(part) for part in s.split(","))


def config_from_resolved(resolved: dict) -> TrainConfig:
    aug = AugmentSpec(resolved["aug_sigma"], resolved["aug_dropout"],
                      (resolved["aug_scale_lo"], resolved["aug_scale_hi"]))
    return TrainConfig(
        mode=resolved["mode"], epochs=resolved["epochs"],
        batch_size=resolved["batch_size"], bank_size=resolved["bank_size"],
        emb_dim=resolved["emb_dim"],
        enc_hidden=_parse_hidden(resolved["enc_hidden"]),
        pred_hidden=_parse_hidden(resolved["pred_hidden"]),
        lr=resolved["lr"], momentum=resolved["momentum"],
        weight_decay=resolved["weight_decay"],
        ema_momentum=resolved["ema_momentum"], k=resolved["k"],
        kprime=resolved["kprime"], conf_threshold=resolved["conf_threshold"],
        include_target=resolved["include_target"],
        msf_aux_weight=resolved["msf_aux_weight"],
        pseudo_source=resolved["pseudo_source"],
        head_updates_per_epoch=resolved["head_updates_per_epoch"],
        head_hidden=resolved["head_hidden"], head_epochs=resolved["head_epochs"],
        head_lr=resolved["head_lr"], augment=aug, seed=resolved["seed"],
        threads=resolved["threads"], eval_every=resolved["eval_every"])


def load_any(path) -> Dataset:
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    if str(path).endswith(".csv"):
        return load_csv(path)
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    rng = make_rng(args.seed, Stream.DATA)
    if args.kind == "mixture":
        d = gen_mixture(args.classes, args.per_class, args.dim, args.sep, rng,
                        name=args.name or "mixture")
    elif args.kind == "hierarchical":
        d = gen_hierarchical(args.super_classes, args.sub_per_super,
                             args.per_sub, args.dim, rng,
                             name=args.name or "hierarchical")
    else:
        raise UsageError(f"unknown kind {args.kind!r}")

    # optional held-out file from the same mixture; noise and masking apply
    # to the training part only so evaluation labels stay clean
    held = None
    if args.test_fraction > 0:
        if not args.test_out:
            raise UsageError("--test-fraction needs --test-out")
        d, held = split_dataset(d, args.test_fraction,
                                make_rng(args.seed, Stream.SPLIT, 1))
    elif args.test_out:
        raise UsageError("--test-out needs --test-fraction > 0")

    if args.noise_rate > 0:
        d = inject_label_noise(d, args.noise_rate, make_rng(args.seed, Stream.NOISE))
    if args.labeled_fraction < 1.0:
        d = mask_labels(d, args.labeled_fraction, make_rng(args.seed, Stream.SPLIT))

    def _save(ds, path):
        if str(path).endswith(".csv"):
            save_csv(ds, path)
        else:
            save_dataset(ds, path)
        print(f"wrote {path}: n={ds.n} dim={ds.dim} classes={ds.num_classes} "
              f"labeled={int(ds.labeled_mask().sum())}")

    _save(d, args.out)
    if held is not None:
        _save(held, args.test_out)
    return 0


def cmd_train(args) -> int:
    resolved = resolve_train_options(args)
    cfg = config_from_resolved(resolved)
    data = load_any(resolved["data"])
    eval_data = load_any(resolved["eval_data"]) if resolved["eval_data"] else None
    os.makedirs(resolved["out"], exist_ok=True)
    write_run_cfg(resolved, os.path.join(resolved["out"], "run.cfg"))
    result = train(data, cfg, run_dir=resolved["out"], eval_data=eval_data)
    last = result.metrics[-1]
    extra = f" knn_acc={last['knn_acc']:.4f}" if last.get("knn_acc") is not None else ""
    print(f"trained mode={cfg.mode} epochs={cfg.epochs} "
          f"final_loss={last['loss']:.6f}{extra} -> {resolved['out']}")
    return 0


def _find_checkpoint(args) -> str:
    if args.checkpoint:
        return args.checkpoint
    if args.run:
        return os.path.join(args.run, "checkpoint.cmck")
    raise UsageError("need --checkpoint or --run")


def cmd_eval(args) -> int:
    ckpt_path = _find_checkpoint(args)
    if not os.path.exists(ckpt_path):
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    pair, _, _ = load_checkpoint(ckpt_path)
    net = pair.target if args.which == "target" else pair.online
    data = load_any(args.data)
    test = load_any(args.test)
    threads = args.threads if args.threads else _threads_default()
    report = evaluate_encoder(net, data, test, knn_k=args.knn_k,
                              probe=args.probe, seed=args.seed,
                              threads=threads, name=args.name)
    out_dir = args.out or (args.run and os.path.join(args.run, "eval")) or "eval"
    os.makedirs(out_dir, exist_ok=True)
    report.save_json(os.path.join(out_dir, "eval.json"))
    report.save_csv(os.path.join(out_dir, "eval.csv"))
    for key in sorted(report.metrics):
        print(f"{key} = {report.metrics[key]:.4f}")
    print(f"reports -> {out_dir}")
    return 0


def cmd_analyze(args) -> int:
    run_cfg_path = os.path.join(args.run, "run.cfg")
    if not os.path.exists(run_cfg_path):
        raise UsageError(f"no run.cfg under {args.run}; train first")
    raw = parse_config_file(run_cfg_path)
    resolved = {k: default for k, (_, default) in TRAIN_KEYS.items()}
    for key, val in raw.items():
        parse, _ = TRAIN_KEYS[key]
        resolved[key] = parse(val)
    if args.threads:
        resolved["threads"] = args.threads
    cfg = config_from_resolved(resolved)
    data = load_any(resolved["data"])

    # deterministic replay reconstructs the final bank/cache state exactly
    result = train(data, cfg)
    report = diagnostics_sweep(result, data, num_queries=args.num_queries)

    out_dir = args.out or os.path.join(args.run, "analysis")
    os.makedirs(out_dir, exist_ok=True)
    report.save_json(os.path.join(out_dir, "diagnostics.json"))
    report.save_csv(os.path.join(out_dir, "diagnostics.csv"))

    from .plots import plot_loss_curve, plot_purity_curve, plot_rank_histogram
    plot_rank_histogram(report, os.path.join(out_dir, "rank_hist.png"))
    title = f"mode={cfg.mode} seed={cfg.seed}"
    plot_loss_curve(result.metrics, os.path.join(out_dir, "loss_curve.png"), title)
    plot_purity_curve(result.metrics, os.path.join(out_dir, "purity_curve.png"), title)

    print(f"median_rank_of_neighbor_{report.k} = {report.median_kth_rank:g}")
    print(f"purity_constrained_top{report.k} = {report.purity_constrained:.4f}")
    print(f"purity_unconstrained_top{report.m} = {report.purity_unconstrained:.4f}")
    print(f"reports -> {out_dir}")
    return 0


def cmd_flops(args) -> int:
    if args.table9:
        csv_text = table9_csv()
        if args.out:
            with open(args.out, "w") as f:
                f.write(csv_text)
            print(f"wrote {args.out}")
        else:
            sys.stdout.write(csv_text)
        matched = sum(r.match for r in table9())
        print(f"# matched {matched}/13 printed rows", file=sys.stderr)
        return 0
    labeled = None
    if args.lab_batch > 0:
        labeled = BranchSpec(args.lab_fwd, args.lab_bwd, args.lab_batch)
    row = ComputeRow(args.name, BranchSpec(args.unl_fwd, args.unl_bwd, args.unl_batch),
                     labeled, args.iters, args.epochs, args.gflops * 1e9)
    t = compute_totals(row)
    print(json.dumps({
        "name": row.name,
        "mini_batch_fwd": t.mini_batch_fwd,
        "mini_batch_bwd": t.mini_batch_bwd,
        "mini_batch": t.mini_batch,
        "total_fwd_passes": t.total_fwd_passes,
        "total_bwd_passes": t.total_bwd_passes,
        "total_passes": t.total_passes,
        "total_flops": t.total_flops,
    }, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmsf",
                                description="constrained mean-shift training, "
                                            "evaluation, and compute accounting")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("-o", "--out", required=True)
    g.add_argument("--kind", default="mixture", choices=["mixture", "hierarchical"])
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=500)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--sep", type=float, default=3.0)
    g.add_argument("--super-classes", type=int, default=4)
    g.add_argument("--sub-per-super", type=int, default=3)
    g.add_argument("--per-sub", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-rate", type=float, default=0.0)
    g.add_argument("--labeled-fraction", type=float, default=1.0)
    g.add_argument("--test-out", dest="test_out", default="",
                   help="write a held-out file from the same mixture")
    g.add_argument("--test-fraction", dest="test_fraction", type=float,
                   default=0.0)
    g.add_argument("--name", default="")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train with a constraint mode")
    t.add_argument("--config", default="", help="key = value config file")
    t.add_argument("--data")
    t.add_argument("-o", "--out")
    t.add_argument("--mode", choices=["none", "self", "sup", "semi",
                                      "semi_basic", "cross"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--bank-size", dest="bank_size", type=int)
    t.add_argument("--emb-dim", dest="emb_dim", type=int)
    t.add_argument("--enc-hidden", dest="enc_hidden")
    t.add_argument("--pred-hidden", dest="pred_hidden")
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--ema-momentum", dest="ema_momentum", type=float)
    t.add_argument("--k", type=int)
    t.add_argument("--kprime", type=_parse_kprime)
    t.add_argument("--conf-threshold", dest="conf_threshold", type=float)
    t.add_argument("--include-target", dest="include_target", type=_parse_bool)
    t.add_argument("--msf-aux-weight", dest="msf_aux_weight", type=float)
    t.add_argument("--pseudo-source", dest="pseudo_source", choices=["head", "knn"])
    t.add_argument("--head-updates-per-epoch", dest="head_updates_per_epoch", type=int)
    t.add_argument("--head-hidden", dest="head_hidden", type=int)
    t.add_argument("--head-epochs", dest="head_epochs", type=int)
    t.add_argument("--head-lr", dest="head_lr", type=float)
    t.add_argument("--aug-sigma", dest="aug_sigma", type=float)
    t.add_argument("--aug-dropout", dest="aug_dropout", type=float)
    t.add_argument("--aug-scale-lo", dest="aug_scale_lo", type=float)
    t.add_argument("--aug-scale-hi", dest="aug_scale_hi", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--eval-data", dest="eval_data")
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="kNN / linear-probe evaluation of a checkpoint")
    e.add_argument("--run", default="")
    e.add_argument("--checkpoint", default="")
    e.add_argument("--data", required=True, help="reference (train) dataset")
    e.add_argument("--test", required=True, help="held-out dataset")
    e.add_argument("--knn-k", dest="knn_k", type=int, default=1)
    e.add_argument("--probe", action="store_true")
    e.add_argument("--which", default="target", choices=["target", "online"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int, default=0)
    e.add_argument("--name", default="eval")
    e.add_argument("--out", default="")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="replay a run, probe the constraint, "
                                       "render figures + reports")
    a.add_argument("--run", required=True)
    a.add_argument("--out", default="")
    a.add_argument("--num-queries", dest="num_queries", type=int, default=512)
    a.add_argument("--threads", type=int, default=0)
    a.set_defaults(fn=cmd_analyze)

    f = sub.add_parser("flops", help="training compute accounting")
    f.add_argument("--table9", action="store_true",
                   help="recompute the published comparison table as CSV")
    f.add_argument("--out", default="")
    f.add_argument("--name", default="custom")
    f.add_argument("--unl-fwd", dest="unl_fwd", type=float, default=2)
    f.add_argument("--unl-bwd", dest="unl_bwd", type=float, default=1)
    f.add_argument("--unl-batch", dest="unl_batch", type=float, default=256)
    f.add_argument("--lab-fwd", dest="lab_fwd", type=float, default=0)
    f.add_argument("--lab-bwd", dest="lab_bwd", type=float, default=0)
    f.add_argument("--lab-batch", dest="lab_batch", type=float, default=0)
    f.add_argument("--iters", type=float, default=5004)
    f.add_argument("--epochs", type=float, default=200)
    f.add_argument("--gflops", type=float, default=3.9)
    f.set_defaults(fn=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 2
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # structured runtime failure line
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
