"""Command line driver.

``mvica run --config c.cfg`` runs the whole pipeline; the other subcommands
run one stage each and write the same files, so ``generate``, ``train`` and
``evaluate`` in sequence reproduce ``run``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, aggregate, contrastive, darmois, evalkit, pipeline, sdvcheck, synthgen, tables

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _out_dir(args, cfg):
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# pipeline stages


def cmd_run(args):
    man = pipeline.run_experiment(args.config, args.out)
    print(json.dumps({"status": man.status, "config_hash": man.config_hash, "outputs": sorted(man.outputs)}))


def cmd_generate(args):
    cfg = pipeline.ExperimentConfig.load(args.config)
    out = _out_dir(args, cfg)
    _, paths = pipeline.stage_generate(cfg, out)
    for p in paths:
        print(p)


def cmd_train(args):
    cfg = pipeline.ExperimentConfig.load(args.config)
    out = _out_dir(args, cfg)
    ds = pipeline.load_data(cfg, args.data or os.path.join(out, "data"))
    res, paths = pipeline.stage_train(cfg, ds, out)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for p in paths:
        print(p)
    print(f"final_loss={res.final_loss:.17g} heldout_loss={res.heldout_loss:.17g}")


def cmd_evaluate(args):
    cfg = pipeline.ExperimentConfig.load(args.config)
    out = _out_dir(args, cfg)
    ds = pipeline.load_data(cfg, args.data or os.path.join(out, "data"))
    model = contrastive.RegressionModel.load(args.model or os.path.join(out, "model.params"))
    test_rows = pipeline._heldout_rows(out)
    summary, paths, _ = pipeline.stage_evaluate(cfg, ds, model, test_rows, out)
    for p in paths:
        print(p)
    for k in sorted(summary):
        if k.startswith("mean_mcc"):
            print(f"{k}={summary[k]:.17g}")


# ---------------------------------------------------------------------------
# module tools


def _read_y(text, dim):
    if os.path.isfile(text):
        _, header, rows = tables.read_table(text)
        vals = [float(v) for v in rows[0]]
    else:
        vals = _floats(text)
    if len(vals) == 1:
        vals = vals * dim
    if len(vals) != dim:
        raise ValueError(f"--y has {len(vals)} values for dimension {dim}")
    return np.array(vals)


def _table_family(path, mode):
    """CSV with columns ``component,y,t,alpha`` on a full (y, t) grid."""
    _, header, rows = tables.read_table(path)
    if [h.strip() for h in header] != ["component", "y", "t", "alpha"]:
        raise ValueError(f"{path}: expected header component,y,t,alpha")
    arr = np.array([[float(v) for v in r] for r in rows])
    comps = np.unique(arr[:, 0]).astype(int)
    ys, ts = np.unique(arr[:, 1]), np.unique(arr[:, 2])
    values = np.full((comps.size, ys.size, ts.size), np.nan)
    values[arr[:, 0].astype(int), np.searchsorted(ys, arr[:, 1]), np.searchsorted(ts, arr[:, 2])] = arr[:, 3]
    return sdvcheck.table_family(ys, ts, values, mode=mode)


def cmd_sdv_check(args):
    mode = args.mode
    if args.family == "gaussian":
        fam = sdvcheck.gaussian_family(args.dim, mode=mode or "closed-form")
    elif args.family == "quartic":
        fam = sdvcheck.quartic_family(args.dim, mode=mode or "closed-form")
    elif args.table:
        fam = _table_family(args.table, mode or "closed-form")
        if fam.dim != args.dim:
            raise ValueError(f"table has {fam.dim} components, --dim is {args.dim}")
    elif args.noise:
        fam = sdvcheck.additive_noise_family(args.noise, args.dim, args.noise_scale, mode=mode or "central-difference")
    else:
        raise ValueError("--family numeric needs --table or --noise")
    y = _read_y(args.y, args.dim)
    rep = sdvcheck.check_sdv(fam, y, budget=args.budget, seed=args.seed, slot=args.differentiate_slot)
    text = rep.to_text()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_aggregate(args):
    cfg = pipeline.ExperimentConfig.load(args.config)
    opts = cfg.aggregate_options()
    if opts is None:
        raise ValueError("config has no [aggregate] section")
    feats = [tables.read_matrix(p)[1] for p in args.features]
    truth = tables.read_matrix(args.truth)[1] if args.truth else None
    seed = pipeline.stage_seed(cfg.seed, "aggregate")
    res, _ = pipeline.aggregate_features(feats, opts, truth=truth, gauges=args.gauges, seed=seed)
    out = _out_dir(args, cfg)
    for p in pipeline.write_aggregation(res, out, seed):
        print(p)
    for name, verdict, p in res.condition_rows():
        print(f"{name},{verdict},{p}")


def cmd_low_noise_sweep(args):
    cfg = pipeline.ExperimentConfig.load(args.config)
    spec = cfg.data_spec()
    kw = cfg.model_kwargs()
    kw.pop("form")
    rows = aggregate.low_noise_sweep(spec, scales=_floats(args.scales), n_samples=cfg.n_samples(),
                                     train_config=cfg.train_config(), model_kw=kw, seed=cfg.seeds()["train"])
    out = _out_dir(args, cfg)
    path = tables.write_table(os.path.join(out, "sweep.csv"), ("scale", "mcc", "status"),
                              [(r.scale, r.mcc, r.status) for r in rows], cfg.seeds()["train"])
    print(path)
    ok = aggregate.trend_ok([r.scale for r in rows], [r.mcc for r in rows])
    print(f"trend_ok={str(ok).lower()}")
    if any(r.status != "ok" for r in rows):
        raise RuntimeError("some sweep runs failed; see the status column")


def darmois_data(dim, rho, n, kind, mixing, seed):
    """Sources and observations for the demo.

    ``linear`` mixes with the symmetric square root of the equicorrelation
    matrix (correlation ``rho``); ``fold`` is the two-layer non-monotone
    mixing of :func:`~mvica.darmois.fold_mixing_weights` (D=2 only).
    Gaussian sources go with the gaussian kind, unit-variance uniform ones
    with knn.
    """
    dist = "gaussian(0, 1)" if kind == "gaussian" else "uniform(-1.7320508075688772, 1.7320508075688772)"
    s = synthgen.sample_sources(synthgen.SourceSpec.iid(dim, dist), n, seed)
    if mixing == "fold":
        if dim != 2:
            raise ValueError("the fold mixing is two-dimensional")
        return s, synthgen.MixingSpec(2, 2, slope=0.1, weights=darmois.fold_mixing_weights()).apply(s)
    if not -1.0 / max(dim - 1, 1) < rho < 1.0:
        raise ValueError(f"--rho {rho} does not give a positive-definite equicorrelation matrix")
    corr = np.full((dim, dim), rho) + (1 - rho) * np.eye(dim)
    ev, vec = np.linalg.eigh(corr)
    return s, s @ (vec * np.sqrt(ev)) @ vec.T


def cmd_darmois_demo(args):
    mixing = args.mixing or ("linear" if args.kind == "gaussian" else "fold")
    s, X = darmois_data(args.dim, args.rho, args.n, args.kind, mixing, args.seed)
    stack = darmois.fit_darmois(X, args.kind, k=args.k, adjust=args.adjust)
    Y = darmois.apply_darmois(stack, X)
    rows = []
    for j in range(args.dim):
        stat, p = evalkit.ks_uniformity(Y[:, j])
        rows.append(("ks_uniformity", str(j), stat, p))
    sub = np.random.default_rng(args.seed).permutation(args.n)[:min(args.n, args.max_rows)]
    for i in range(args.dim):
        for j in range(i + 1, args.dim):
            rep = evalkit.dcor_test(Y[sub, i], Y[sub, j], args.n_perm, seed=args.seed)
            rows.append(("dcor_independence", f"{i}-{j}", rep.statistic, rep.p_value))
    rep = evalkit.mcc(Y, s)
    lines = [",".join(map(str, r)) for r in rows]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = tables.write_table(os.path.join(args.out, "darmois.csv"), ("test", "columns", "statistic", "p_value"),
                                  rows, args.seed)
        with open(path, "a") as fh:
            fh.write(f"# {rep.summary()}\n")
        evalkit.write_mcc_report(os.path.join(args.out, "mcc.csv"), rep, args.seed)
        print(path)
    print("test,columns,statistic,p_value")
    print("\n".join(lines))
    print(rep.summary())


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="mvica", description="Multi-view nonlinear ICA laboratory.")
    p.add_argument("--version", action="version", version=f"mvica {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def with_config(sp, out_help="output directory (default: [experiment].output_dir)"):
        sp.add_argument("--config", required=True, help="experiment config (INI)")
        sp.add_argument("--out", help=out_help)
        return sp

    sp = with_config(sub.add_parser("run", help="generate, train, evaluate (and aggregate) from one config"))
    sp.set_defaults(func=cmd_run)

    sp = with_config(sub.add_parser("generate", help="sample a paired dataset into <out>/data"))
    sp.set_defaults(func=cmd_generate)

    sp = with_config(sub.add_parser("train", help="train the contrastive model; writes loss.csv and model.params"))
    sp.add_argument("--data", help="dataset directory (default: <out>/data)")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("evaluate", help="score a trained model; writes mcc.csv and alignment.csv"))
    sp.add_argument("--data", help="dataset directory (default: <out>/data)")
    sp.add_argument("--model", help="parameter snapshot (default: <out>/model.params)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sdv-check", help="test sufficiently distinct views for a conditional log-density family")
    sp.add_argument("--family", choices=sdvcheck.FAMILIES, required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--y", default="1.0", help="probe point: comma-separated values or a CSV file (default 1.0)")
    sp.add_argument("--budget", type=int, default=256, help="number of probes t_j")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--differentiate-slot", type=int, choices=(1, 2), default=2,
                    help="differentiate alpha in its first (y) or second (t) argument")
    sp.add_argument("--mode", choices=sdvcheck.MODES, help="derivative mode")
    sp.add_argument("--table", help="numeric family: CSV component,y,t,alpha on a grid")
    sp.add_argument("--noise", choices=("gaussian", "laplace", "logistic"),
                    help="numeric family: additive noise of this kind")
    sp.add_argument("--noise-scale", type=float, default=1.0)
    sp.add_argument("--out", help="also write the report to this file")
    sp.set_defaults(func=cmd_sdv_check)

    sp = with_config(sub.add_parser("aggregate", help="aggregate per-view features and check the gauge conditions"))
    sp.add_argument("--features", nargs="+", required=True, help="one feature CSV (row,c0..) per view")
    sp.add_argument("--truth", help="sources CSV for the evaluation-mode checks")
    sp.add_argument("--gauges", choices=("search", "identity"), default="search")
    sp.set_defaults(func=cmd_aggregate)

    sp = with_config(sub.add_parser("low-noise-sweep", help="MCC against the sources as view-1 noise shrinks"))
    sp.add_argument("--scales", default="1,0.5,0.25,0.125,0", help="noise multipliers")
    sp.set_defaults(func=cmd_low_noise_sweep)

    sp = sub.add_parser("darmois-demo", help="independent uniform outputs without source recovery")
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--rho", type=float, default=0.8, help="correlation of the linear mixing")
    sp.add_argument("--n", type=int, default=5000)
    sp.add_argument("--kind", choices=darmois.KINDS, default="gaussian")
    sp.add_argument("--mixing", choices=("linear", "fold"), help="default: linear for gaussian, fold for knn")
    sp.add_argument("--k", type=int, help="knn neighbourhood size (default ceil(sqrt(n)))")
    sp.add_argument("--adjust", choices=darmois.ADJUSTMENTS, default="none")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-perm", type=int, default=200)
    sp.add_argument("--max-rows", type=int, default=2000, help="rows used by the dCor tests")
    sp.add_argument("--out", help="directory for darmois.csv and mcc.csv")
    sp.set_defaults(func=cmd_darmois_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
