"""Command line: train, certify, cascade-train, predict, estimate-bench, convert-epsilon.

Exit codes: 0 on success, 1 on runtime failure, 2 on invalid flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# flag types -----------------------------------------------------------------------------


def _nonneg_float(name):
    def parse(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {s!r}") from None
        if not v >= 0 or not np.isfinite(v):
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {s}")
        return v
    return parse


def _pos_int(name):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {s!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {s}")
        return v
    return parse


def _int_list(name):
    def parse(s):
        try:
            vals = [int(v) for v in s.split(",") if v]
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a comma-separated list of integers") from None
        if not vals or min(vals) < 1:
            raise argparse.ArgumentTypeError(f"{name} entries must be >= 1")
        return vals
    return parse


def _mode(s):
    if s == "exact":
        return ("exact",)
    kind, _, arg = s.partition(":")
    try:
        if kind == "median":
            r = int(arg)
            if r < 1:
                raise ValueError
            return ("median", r)
        if kind == "highprob":
            d, m = arg.split(",")
            d, m = float(d), int(m)
            if not 0 < d < 1 or m < 1:
                raise ValueError
            return ("highprob", d, m)
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"--mode must be exact, median:R or highprob:DELTA,M, got {s!r}")


def _arch(s):
    name, _, arg = s.partition(":")
    try:
        if name == "mlp":
            sizes = [int(v) for v in arg.split("-")]
            ok = len(sizes) >= 2 and min(sizes) >= 1
        elif name in ("conv-small", "conv-large"):
            ok = not arg
        elif name in ("wide", "deep", "res"):
            ok = int(arg) >= 1
        else:
            ok = False
    except ValueError:
        ok = False
    if not ok:
        raise argparse.ArgumentTypeError(f"unknown or malformed architecture {s!r}")
    return s


# parser ----------------------------------------------------------------------------------


def _common_train(p):
    p.add_argument("--arch", type=_arch, required=True, help="mlp:784-100-10, conv-small, wide:K, deep:K, res:K")
    p.add_argument("--data", required=True, help="dataset spec (IDX dir, idx:IMG,LAB, csv:PATH, blobs:N, two-cluster:N)")
    p.add_argument("--test-data", default=None, help="held-out dataset spec for per-epoch metrics")
    p.add_argument("--epsilon", type=_nonneg_float("--epsilon"), required=True)
    p.add_argument("--eps-start", type=_nonneg_float("--eps-start"), default=None)
    p.add_argument("--warmup", type=_pos_int("--warmup"), default=1, help="epochs of linear epsilon ramp")
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--projection", type=_pos_int("--projection"), default=None, metavar="R")
    g.add_argument("--exact", action="store_true")
    p.add_argument("--epochs", type=_pos_int("--epochs"), default=10)
    p.add_argument("--lr", type=_nonneg_float("--lr"), default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--batch-size", type=_pos_int("--batch-size"), default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-limit", type=_pos_int("--eval-limit"), default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustdual", description="Provable robustness bounds and certified training")
    ap.add_argument("--threads", type=_pos_int("--threads"), default=None, help="BLAS threads (default: all cores)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="robust training")
    _common_train(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--metrics", default=None, help="metrics CSV (default: OUT with .metrics.csv)")

    p = sub.add_parser("certify", help="certify a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", type=_nonneg_float("--epsilon"), required=True)
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    p.add_argument("--mode", type=_mode, default=("exact",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=_pos_int("--limit"), default=None, help="certify only the first N examples")
    p.add_argument("--out", default=None, help="certificate file")

    p = sub.add_parser("cascade-train", help="train a cascade of robust models")
    _common_train(p)
    p.add_argument("--stages", type=_pos_int("--stages"), default=2)
    p.add_argument("--out", required=True, help="cascade directory to write")

    p = sub.add_parser("predict", help="certified prediction for one input")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--cascade")
    p.add_argument("--input", required=True, help=".npy file or CSV line of features")
    p.add_argument("--epsilon", type=_nonneg_float("--epsilon"), default=None,
                   help="radius (default: the trained radius stored with the model)")
    p.add_argument("--norm", choices=("linf", "l2"), default=None)

    p = sub.add_parser("estimate-bench", help="median estimator accuracy and cost")
    p.add_argument("--r", type=_int_list("--r"), default=[10, 50, 100])
    p.add_argument("--trials", type=_pos_int("--trials"), default=20)
    p.add_argument("--sizes", type=_int_list("--sizes"), default=[8, 12, 16])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert-epsilon", help="l2 radius matching the volume of an linf ball")
    p.add_argument("--dim", type=_pos_int("--dim"), required=True)
    p.add_argument("--epsilon-inf", type=_nonneg_float("--epsilon-inf"), required=True)
    return ap


# helpers ----------------------------------------------------------------------------------


def _dataset(spec, net_shape=None, seed=0, eps=0.1):
    from .io import load_dataset
    ds = load_dataset(spec, seed, eps)
    if net_shape is not None and len(ds) and tuple(ds.feature_shape) != tuple(net_shape):
        if int(np.prod(ds.feature_shape)) != int(np.prod(net_shape)):
            raise ValueError(f"dataset features {ds.feature_shape} do not fit network input {tuple(net_shape)}")
        ds = ds.reshape(net_shape)
    return ds


def _input_shape_for(arch, ds):
    if arch.startswith("mlp"):
        return (int(arch.partition(":")[2].split("-")[0]),)
    shape = ds.feature_shape
    if len(shape) == 1:
        side = int(round(np.sqrt(shape[0])))
        if side * side != shape[0]:
            raise ValueError(f"cannot view {shape[0]} features as a square image")
        return (1, side, side)
    return shape


def _net_for(args, ds, seed):
    from .archs import build_arch
    shape = _input_shape_for(args.arch, ds)
    net = build_arch(args.arch, input_shape=shape, n_classes=int(ds.n_classes), seed=seed)
    if int(np.prod(net.input_shape)) != int(np.prod(ds.feature_shape)):
        raise ValueError(f"architecture input {net.input_shape} does not fit dataset features {ds.feature_shape}")
    if net.output_dim < int(ds.n_classes):
        raise ValueError(f"architecture has {net.output_dim} outputs but the dataset has {ds.n_classes} classes")
    return net


def _train_cfg(args):
    from .trainer import TrainConfig
    proj = None if args.exact else (args.projection if args.projection is not None else 10)
    start = args.epsilon if args.eps_start is None else min(args.eps_start, args.epsilon)
    return TrainConfig(optimizer=args.optimizer, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       eps_start=start, eps_end=args.epsilon, eps_warmup_epochs=args.warmup,
                       projection=proj, norm=args.norm, seed=args.seed, eval_limit=args.eval_limit)


def _meta(args, cfg):
    return {"norm": cfg.norm, "epsilon": cfg.eps_end, "seed": cfg.seed, "arch": args.arch,
            "projection": cfg.projection if cfg.projection is not None else "exact", "epochs": cfg.epochs}


def _ensure_parent(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise FileNotFoundError(f"output directory {d} does not exist")


# commands --------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .io import save_model
    from .trainer import train
    _ensure_parent(args.out)
    cfg = _train_cfg(args)
    ds = _dataset(args.data, seed=args.seed, eps=args.epsilon)
    net = _net_for(args, ds, args.seed)
    ds = _dataset(args.data, net.input_shape, args.seed, args.epsilon)
    test = _dataset(args.test_data, net.input_shape, args.seed, args.epsilon) if args.test_data else None
    metrics = args.metrics or os.path.splitext(args.out)[0] + ".metrics.csv"
    res = train(net, ds.X, ds.y, cfg, None if test is None else test.X, None if test is None else test.y,
                metrics_path=metrics)
    save_model(res.net, args.out, _meta(args, cfg))
    last = res.metrics[-1] if res.metrics else {}
    print(f"trained {args.arch} for {cfg.epochs} epochs: train_robust_error={last.get('train_robust_error', float('nan')):.4f} "
          f"model={args.out} metrics={metrics}")
    return EXIT_OK


def cmd_certify(args) -> int:
    from .io import load_model, write_certificates
    from .certifier import robust_error, high_prob_plan, certify_high_prob, BallSpec
    from .projest import ProjectionPlan
    net = load_model(args.model)
    ds = _dataset(args.data, net.input_shape, args.seed, args.epsilon)
    X, y = ds.X, ds.y
    if args.limit is not None:
        X, y = X[:args.limit], y[:args.limit]
    if len(X) == 0:
        raise ValueError("dataset is empty")
    kind = args.mode[0]
    if kind == "highprob":
        delta, m = args.mode[1], args.mode[2]
        tail = high_prob_plan(net, delta, m)
        print(f"tail_plan {tail.describe()} delta={delta}")
        certs = []
        for i, (xi, yi) in enumerate(zip(X, y)):
            certs.append(certify_high_prob(net, BallSpec(args.norm, args.epsilon, xi), None, delta, m,
                                           args.seed, tail, example_id=i, label=int(yi)))
        wrong = np.array([c.predicted != c.label for c in certs])
        ok = np.array([c.certified for c in certs])
        robust, std, n = float(np.mean(wrong | ~ok)), float(np.mean(wrong)), len(certs)
    else:
        mode = "exact" if kind == "exact" else ProjectionPlan(args.mode[1], seed=args.seed)
        rep = robust_error(net, X, y, args.epsilon, args.norm, mode)
        certs, robust, std, n = rep.certificates, rep.robust, rep.standard, rep.n
    if args.out:
        write_certificates(certs, args.out)
    print(f"robust_error={robust:.6f} standard_error={std:.6f} n={n}")
    return EXIT_OK


def cmd_cascade(args) -> int:
    from .io import save_model
    from .trainer import cascade_train
    from .archs import build_arch
    cfg = _train_cfg(args)
    ds = _dataset(args.data, seed=args.seed, eps=args.epsilon)
    net0 = _net_for(args, ds, args.seed)
    ds = _dataset(args.data, net0.input_shape, args.seed, args.epsilon)
    test = _dataset(args.test_data, net0.input_shape, args.seed, args.epsilon) if args.test_data else None
    os.makedirs(args.out, exist_ok=True)
    stages = [net0] + [build_arch(args.arch, net0.input_shape, int(ds.n_classes), args.seed + i)
                       for i in range(1, args.stages)]
    cas = cascade_train(stages, ds.X, ds.y, cfg, None if test is None else test.X,
                        None if test is None else test.y,
                        metrics_prefix=os.path.join(args.out, "metrics_stage"))
    manifest = {"version": 1, "norm": cas.norm, "stages": []}
    for i, (net, st) in enumerate(zip(cas.stages, cas.stats)):
        name = f"stage{i + 1}.json"
        save_model(net, os.path.join(args.out, name), {**_meta(args, cfg), "stage": i + 1})
        manifest["stages"].append({"file": name, "epsilon": cas.eps[i], "trained_on": st["trained_on"],
                                   "certified": st["certified"]})
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"cascade with {len(cas)} stages written to {args.out}")
    for s in manifest["stages"]:
        print(f"  {s['file']}: trained_on={s['trained_on']} certified={s['certified']}")
    return EXIT_OK


def load_cascade(path):
    from .io import load_model
    from .trainer import Cascade
    with open(os.path.join(path, "manifest.json")) as fh:
        man = json.load(fh)
    nets = [load_model(os.path.join(path, s["file"])) for s in man["stages"]]
    return Cascade(nets, [float(s["epsilon"]) for s in man["stages"]], man.get("norm", "linf"),
                   [dict(s) for s in man["stages"]])


def _read_input(path, shape):
    if path.endswith(".npy"):
        x = np.load(path)
    else:
        with open(path) as fh:
            x = np.array([float(v) for v in fh.read().replace("\n", ",").split(",") if v.strip()])
    if x.size != int(np.prod(shape)):
        raise ValueError(f"input has {x.size} values, network expects {int(np.prod(shape))}")
    return x.reshape(shape)


def cmd_predict(args) -> int:
    from .io import load_model
    from .trainer import Cascade, NO_CERTIFICATE, cascade_predict
    if args.cascade:
        cas = load_cascade(args.cascade)
    else:
        net, meta = load_model(args.model, return_metadata=True)
        cas = Cascade([net], [float(meta.get("epsilon", 0.0))], meta.get("norm", "linf"))
    if args.epsilon is not None:
        cas.eps = [args.epsilon] * len(cas.stages)
    if args.norm is not None:
        cas.norm = args.norm
    x = _read_input(args.input, cas.stages[0].input_shape)
    label = int(cascade_predict(cas, x))
    print("NO_CERTIFICATE" if label == NO_CERTIFICATE else label)
    return EXIT_OK


def cmd_estimate_bench(args) -> int:
    from .bench import estimator_bench
    _ensure_parent(args.out)
    rows = estimator_bench(args.r, args.sizes, args.trials, args.seed)
    fields = ["r", "size", "hidden_units", "n_errors", "p5", "p50", "p95", "p50_abs", "time_s", "peak_mb"]
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    for r in rows:
        print(f"r={r['r']} size={r['size']} p50_abs={r['p50_abs']:.4f} time_s={r['time_s']:.4g}")
    return EXIT_OK


def cmd_convert_epsilon(args) -> int:
    from .certifier import epsilon_l2_equivalent
    print(f"{epsilon_l2_equivalent(args.dim, args.epsilon_inf):.6g}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "cascade-train": cmd_cascade, "predict": cmd_predict,
            "estimate-bench": cmd_estimate_bench, "convert-epsilon": cmd_convert_epsilon}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
