"""Command-line entry point: ``cfpf generate|solve|train|eval|bench``.

Every command takes ``--config`` (a JSON file or a preset name such as
``desk`` or ``full``) and writes ``resolved_config.json`` into its output
directory.  ``CFPF_SEED`` overrides the config seed.

Output files
------------
generate  dataset.cfpf, manifest.json
solve     solve_<seed>.json
train     checkpoint.cfnn, curve.csv (epoch,lr,train_rmse,val_rmse)
eval      summary.json, samples.csv, cdf.csv (method,value,quantile),
          histogram.csv (bin_left,bin_right,solver,network)
bench     bench.json
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import kernels
from .channel import drop_network
from .dataset import DatasetFile, generate
from .metrics import jain, net_se, summarize
from .pipeline import benchmark, evaluate, splits, train_model
from .rdn import PowerRDN
from .solver import solve_alternating


def _g(x) -> str:
    return format(float(x), ".17g")


def _outdir(args, cfg) -> Path:
    out = Path(args.out or cfg.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.to_json() + "\n")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_generate(args, cfg) -> int:
    count = args.count if args.count is not None else cfg.data.count
    if count < 1:
        raise ValueError("count must be >= 1")
    out = _outdir(args, cfg)
    data, report = generate(cfg.network, count, cfg.seed, cfg.solver, jobs=args.jobs,
                            encoding=cfg.data.encoding_flag)
    path = out / "dataset.cfpf"
    data.write(path)
    back = DatasetFile.read(path)
    if len(back) != count or back.records.tobytes() != data.records.tobytes():
        raise RuntimeError("dataset verification after write failed")
    manifest = {
        "config_sha256": cfg.digest(),
        "master_seed": cfg.seed,
        "count": count,
        "jobs": args.jobs,
        "solver": report.summary(),
    }
    _write_json(out / "manifest.json", manifest)
    s = report.summary()
    print(f"wrote {count} samples to {path} in {report.wall_time:.2f} s "
          f"({s['converged']}/{count} converged, backend={report.backend})")
    return 0


def solve_document(cfg, seed: int) -> tuple[dict, float]:
    real = drop_network(cfg.network, seed)
    res = solve_alternating(real, cfg.solver)
    net = net_se(res.rates, real.tau, cfg.network.tau_c)
    doc = {
        "seed": seed,
        "M": real.M,
        "K": real.K,
        "tau": real.tau,
        "pilots": real.mu.tolist(),
        "trace": [float(v) for v in res.trace],
        "objective": res.objective,
        "powers": res.p.tolist(),
        "rates": res.rates.tolist(),
        "net_rates": net.tolist(),
        "sum_net_se": float(net.sum()),
        "jain": jain(net),
        "outer_iterations": res.outer_iterations,
        "converged": res.converged,
        "backend": res.backend,
    }
    return doc, res.wall_time


def cmd_solve(args, cfg) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    doc, wall = solve_document(cfg, seed)
    out = _outdir(args, cfg)
    _write_json(out / f"solve_{seed}.json", doc)
    print(f"seed {seed}: M={doc['M']} K={doc['K']} tau={doc['tau']}")
    print("objective trace: " + " ".join(f"{v:.6f}" for v in doc["trace"]))
    print("net rates (bits/s/Hz): " + " ".join(f"{v:.4f}" for v in doc["net_rates"]))
    print(f"sum net SE {doc['sum_net_se']:.4f}  Jain {doc['jain']:.5f}  "
          f"outer iterations {doc['outer_iterations']}  converged {doc['converged']}  "
          f"wall {wall * 1e3:.3f} ms")
    return 0


def cmd_train(args, cfg) -> int:
    data = DatasetFile.read(args.data)
    out = _outdir(args, cfg)
    model, result = train_model(cfg, data)
    ckpt = out / "checkpoint.cfnn"
    model.save(ckpt)
    if PowerRDN.load(ckpt).to_bytes() != model.to_bytes():
        raise RuntimeError("checkpoint verification after write failed")
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_rmse", "val_rmse"])
        for epoch, lr, tr, va in result.curve:
            w.writerow([epoch, _g(lr), _g(tr), _g(va)])
    last = result.curve[-1]
    print(f"trained {len(result.curve)} epochs; final train RMSE {last[2]:.5f}, "
          f"val RMSE {last[3]:.5f}; best epoch {result.best_epoch}; wrote {ckpt}")
    return 0


def cmd_eval(args, cfg) -> int:
    data = DatasetFile.read(args.data)
    model = None if args.use_labels else PowerRDN.load(args.checkpoint)
    out = _outdir(args, cfg)
    records, rows = evaluate(cfg, data, model, use_labels=args.use_labels)
    summary = summarize(records, bins=args.bins)
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "seed", "solver_sum_se", "network_sum_se", "solver_jain",
                    "network_jain", "solver_time", "network_time"])
        for r in rows:
            w.writerow([r[0], r[1], *(_g(v) for v in r[2:])])
    with open(out / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "value", "quantile"])
        for method, pts in summary["cdf"].items():
            for v, q in pts:
                w.writerow([method, _g(v), _g(q)])
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "solver", "network"])
        h = summary["histogram"]
        e = h["edges"]
        for b in range(len(e) - 1):
            w.writerow([_g(e[b]), _g(e[b + 1]), h["counts"]["solver"][b], h["counts"]["network"][b]])
    table = {k: v for k, v in summary.items() if k not in ("cdf", "histogram")}
    _write_json(out / "summary.json", table)
    s, n, r = summary["methods"]["solver"], summary["methods"]["network"], summary["ratios"]
    print(f"{'':14s}{'network':>14s}{'solver':>14s}{'ratio':>10s}")
    print(f"{'sum net SE':14s}{n['mean_sum_se']:14.4f}{s['mean_sum_se']:14.4f}{r['mean_sum_se']:10.2%}")
    print(f"{'Jain index':14s}{n['mean_jain']:14.5f}{s['mean_jain']:14.5f}{r['mean_jain']:10.2%}")
    print(f"{'time (s)':14s}{n['mean_time']:14.6f}{s['mean_time']:14.6f}{r['mean_time']:10.2%}")
    return 0


def cmd_bench(args, cfg) -> int:
    data = DatasetFile.read(args.data)
    model = PowerRDN.load(args.checkpoint)
    names = sorted(kernels.BACKENDS) if args.backend == "all" else [args.backend or kernels.ACTIVE]
    out = _outdir(args, cfg)
    idx = None
    if args.instances:
        idx = splits(cfg, data)[2][: args.instances]
    report = benchmark(cfg, data, model, indices=idx, backends=names, repeat=args.repeat)
    _write_json(out / "bench.json", report)
    for name, r in report.items():
        print(f"[{name}] solver median {r['solver_median_us']:.3f} us, mean {r['solver_mean_us']:.3f} us; "
              f"network median {r['network_median_us']:.3f} us, mean {r['network_mean_us']:.3f} us; "
              f"ratio {r['ratio_mean']:.4f} (speedup {r['speedup_mean']:.1f}x)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfpf", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file or preset name")
        p.add_argument("--out", help="output directory (default: paths.out)")

    p = sub.add_parser("generate", help="generate a labeled dataset")
    common(p)
    p.add_argument("--count", type=int, help="number of samples (default: data.count)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="drop one network and solve it")
    common(p)
    p.add_argument("--seed", type=int, help="realization seed (default: config seed)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train the power network")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare network and solver on the test split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--use-labels", action="store_true",
                   help="use stored labels as predictions (pipeline identity check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time solver versus network inference")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--backend", help="native, python or all (default: active backend)")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--instances", type=int, help="limit to the first N test samples")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate" and args.count is not None and args.count < 1:
        parser.error("--count must be >= 1")
    if args.command == "generate" and args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if args.command == "eval" and not args.use_labels and not args.checkpoint:
        parser.error("--checkpoint is required unless --use-labels is given")
    try:
        cfg = config_mod.load(args.config)
        return args.func(args, cfg)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"cfpf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
