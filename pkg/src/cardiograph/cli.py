"""Command-line front end: ``cardiograph <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, config as rc, epds
from .exceptions import CardiographError, ConfigError, ShapeMismatch


# ---------------------------------------------------------------- helpers

def _run_config(args) -> dict:
    cfg = rc.load(args.config) if getattr(args, "config", None) else rc.resolve()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "grid", None) is not None:
        dims = list(cfg["geometry"]["dims"])
        dims[0] = dims[1] = args.grid
        cfg["geometry"]["dims"] = dims
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    elif os.environ.get("CARDIOGRAPH_THREADS"):
        try:
            cfg["threads"] = int(os.environ["CARDIOGRAPH_THREADS"])
        except ValueError:
            raise ConfigError("CARDIOGRAPH_THREADS must be an integer") from None
    if getattr(args, "deterministic", False):
        cfg["deterministic"] = True
    if getattr(args, "kernel", None):
        cfg["kol"]["kernel"] = args.kernel
    if getattr(args, "epochs", None) is not None:
        cfg["fno"]["epochs"] = args.epochs
    if getattr(args, "target", None):
        cfg["kol"]["target"] = cfg["fno"]["target"] = args.target
    if getattr(args, "out_dir", None):
        cfg["paths"]["out_dir"] = args.out_dir
    return cfg


def _threads(cfg) -> int | None:
    return 1 if cfg["deterministic"] else cfg["threads"]


@contextlib.contextmanager
def _thread_limit(cfg):
    n = _threads(cfg)
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _stamp(cfg) -> dict:
    return {"config_hash": rc.config_hash(cfg), "seed": cfg["seed"], "tool_version": __version__}


def _content_config(cfg) -> dict:
    """The config minus output locations, which do not affect results."""
    return {k: v for k, v in cfg.items() if k != "paths"}


def _out_file(path) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def _out_dir(cfg) -> str:
    d = cfg["paths"]["out_dir"]
    os.makedirs(d, exist_ok=True)
    return d


def _append_metrics(cfg, row):
    from .metrics import append_csv

    path = os.path.join(_out_dir(cfg), "metrics.csv")
    full = {"config_hash": rc.config_hash(cfg), "seed": cfg["seed"],
            "tool_version": __version__}
    full.update(row)
    if os.path.exists(path) and os.path.getsize(path) > 0:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), [])
        if header != list(full):
            path = os.path.join(_out_dir(cfg), f"metrics_{row.get('command', 'run')}.csv")
    append_csv(path, full)


def _dataset(path):
    from . import dataset as ds

    return ds.load(path)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    from . import dataset as ds

    cfg = _run_config(args)
    geometry = rc.build_geometry(cfg)
    cond = rc.build_conductivity(cfg, geometry)
    mcfg = rc.build_monodomain(cfg)
    scfg = rc.build_stimulus(cfg)
    n_jobs = _threads(cfg) or 1
    t0 = time.perf_counter()
    with _thread_limit(cfg):
        data = ds.generate(args.n, geometry, cond, mcfg, cfg["seed"], scfg, n_jobs=n_jobs,
                           meta=dict(_stamp(cfg), config=_content_config(cfg)))
    elapsed = time.perf_counter() - t0
    ds.save(data, _out_file(args.out))
    if args.dump_vtk:
        _dump_vtk(args.dump_vtk, data, cond, mcfg, scfg, cfg["seed"])
    print(f"wrote {args.out}: {data.n_samples} samples x {geometry.n_nodes} nodes "
          f"in {elapsed:.1f} s (config {rc.config_hash(cfg)})")
    return 0


def _dump_vtk(directory, data, cond, mcfg, scfg, seed):
    from .dataset import sample_stimulus
    from .monodomain import MonodomainSolver
    from .vtk import write_vtk

    os.makedirs(directory, exist_ok=True)
    g = data.geometry
    for i in range(data.n_samples):
        write_vtk(os.path.join(directory, f"maps_{i:04d}.vtk"), g,
                  {"stimulus": data.inputs[i], "activation": data.activation[i],
                   "repolarization": data.repolarization[i]})
    solver = MonodomainSolver(g, cond, mcfg)
    stim = sample_stimulus(seed, 0, g, scfg).stimulus
    every = max(1, int(round(5.0 / mcfg.dt)))

    def snap(t, v, w):
        write_vtk(os.path.join(directory, f"v_0000_t{t:07.2f}.vtk"), g, {"v": v, "w": w})

    solver.simulate(stim, callback=snap, callback_every=every)


def _split(data, cfg):
    from .dataset import split_80_20

    return split_80_20(data, cfg["seed"])


def cmd_train(args) -> int:
    from .metrics import MetricReport, write_hist, write_per_sample

    cfg = _run_config(args)
    data = _dataset(args.dataset)
    block = cfg[args.family]
    target = block["target"]
    y = data.target(target)
    if np.isnan(y).any():
        raise ConfigError(f"dataset has invalid {target} entries; regenerate with a longer t_end")
    split = _split(data, cfg)
    Xtr, ytr = data.inputs[split.train], y[split.train]
    Xte, yte = data.inputs[split.test], y[split.test]
    with _thread_limit(cfg):
        t0 = time.perf_counter()
        if args.family == "kol":
            from .kol import KernelOperatorRegressor, save_model

            model = KernelOperatorRegressor(block["kernel"], block["reg"], data.geometry,
                                            block["cholesky"]).fit(Xtr, ytr)
            label = model.spec_.preset_name or model.spec_.family
        else:
            from .fno import FourierNeuralOperatorRegressor, save_model

            model = FourierNeuralOperatorRegressor(
                data.geometry, block["layers"], block["width"], block["modes"],
                block["q_hidden"], block["activation"], block["lr0"], block["batch_size"],
                block["epochs"], block["plateau_factor"], block["min_lr"], cfg["seed"],
                verbose=args.verbose).fit(Xtr, ytr, Xte, yte)
            label = f"fno-w{model.config_.width}"
        fit_time = time.perf_counter() - t0
        t0 = time.perf_counter()
        model.predict(Xte[:1])
        single = time.perf_counter() - t0
        pred_tr = model.predict(Xtr)
        pred_te = model.predict(Xte)
    save_model(model, _out_file(args.out), dict(_stamp(cfg), target=target, dataset=os.path.abspath(args.dataset)))
    out = _out_dir(cfg)
    ev = cfg["eval"]
    rows = {}
    for name, P, T in (("train", pred_tr, ytr), ("test", pred_te, yte)):
        rep = MetricReport.compute(P, T, ev["bin_count"], ev["threshold"],
                                   {"fit": fit_time, "predict_single": single})
        rows[name] = rep
        _append_metrics(cfg, rep.row(command="train", model=args.family, kernel=label,
                                     target=target, split=name, n=len(T)))
    write_per_sample(os.path.join(out, "per_sample.csv"), rows["test"].per_sample)
    write_hist(os.path.join(out, "hist.csv"), rows["test"].distribution)
    if args.family == "fno":
        model.history_.write_csv(os.path.join(out, "loss_history.csv"))
    print(f"{args.family} [{label}] target={target} train rel-L2 {rows['train'].mean_rel_l2:.3e} "
          f"test rel-L2 {rows['test'].mean_rel_l2:.3e} fit {fit_time:.2f} s -> {args.out}")
    return 0


def _load_model(path):
    meta, _ = epds.read(path)
    kind = meta.get("type")
    if kind == "kol":
        from .kol import load_model
    elif kind == "fno":
        from .fno import load_model
    else:
        raise ConfigError(f"{path} is not a model file (type={kind!r})")
    return load_model(path)


def _indices(data, split_name, cfg):
    if split_name == "all":
        return np.arange(data.n_samples)
    split = _split(data, cfg)
    return split.train if split_name == "train" else split.test


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.model)
    data = _dataset(args.dataset)
    idx = _indices(data, args.split, cfg)
    X = data.inputs[idx]
    kw = {"geometry": data.geometry} if model.meta_["type"] == "fno" else {}
    if model.meta_["type"] == "kol" and model.geometry.n_nodes != data.geometry.n_nodes:
        from .exceptions import GeometryMismatch

        raise GeometryMismatch("KOL models predict on their training geometry only")
    with _thread_limit(cfg):
        t0 = time.perf_counter()
        model.predict(X[:1], **kw)
        single = time.perf_counter() - t0
        t0 = time.perf_counter()
        P = model.predict(X, **kw)
        total = time.perf_counter() - t0
    target = model.meta_.get("target", "activation")
    meta = dict(_stamp(cfg), type="predictions", target=target, split=args.split,
                model=os.path.abspath(args.model), dataset=os.path.abspath(args.dataset),
                geometry=data.geometry.describe())
    epds.write(_out_file(args.out), meta, {"predictions": P, "indices": idx.astype(float)})
    _append_metrics(cfg, {"command": "predict", "model": model.meta_["type"], "split": args.split,
                          "n": len(idx), "time_predict_single": single,
                          "time_predict_total": total})
    print(f"wrote {args.out}: {P.shape[0]} predictions; single prediction {single * 1e3:.2f} ms")
    return 0


def _rows_from(path, target=None, indices=None):
    meta, arrays = epds.read(path)
    kind = meta.get("type")
    if kind == "predictions":
        return arrays["predictions"], arrays["indices"].astype(int), meta.get("target")
    if kind == "dataset":
        name = target or "activation"
        arr = arrays["activation" if name in ("activation", "acti") else "repolarization"]
        idx = np.arange(arr.shape[0]) if indices is None else indices
        return arr[idx], idx, name
    raise ConfigError(f"{path}: cannot evaluate a file of type {kind!r}")


def cmd_evaluate(args) -> int:
    from .metrics import MetricReport, write_hist, write_per_sample

    cfg = _run_config(args)
    P, idx, target = _rows_from(args.predictions, args.target)
    T, _, _ = _rows_from(args.truth, args.target or target, idx)
    if P.shape != T.shape:
        raise ShapeMismatch(f"predictions {P.shape} vs truth {T.shape}")
    ev = cfg["eval"]
    rep = MetricReport.compute(P, T, ev["bin_count"], ev["threshold"])
    out = _out_dir(cfg)
    _append_metrics(cfg, rep.row(command="evaluate", target=target, n=len(T)))
    write_per_sample(os.path.join(out, "per_sample.csv"), rep.per_sample)
    write_hist(os.path.join(out, "hist.csv"), rep.distribution)
    print(f"mean rel-L2 {rep.mean_rel_l2:.6e}  Pearson dissimilarity {rep.pearson_dissimilarity:.6e}  "
          f"above {ev['threshold']:g}: {rep.distribution.fraction_above:.1%}")
    return 0


def cmd_bench(args) -> int:
    from .dataset import sample_stimulus
    from .metrics import bench
    from .monodomain import MonodomainSolver

    cfg = _run_config(args)
    model = _load_model(args.model)
    g = model.geometry
    mcfg = rc.build_monodomain(cfg)
    cond = rc.build_conductivity(cfg, g)
    stim = sample_stimulus(cfg["seed"], 0, g, rc.build_stimulus(cfg)).stimulus
    mask = stim.mask.astype(float)[None]
    repeats = args.repeats or cfg["eval"]["repeats"]
    with _thread_limit(cfg):
        solver = MonodomainSolver(g, cond, mcfg)
        solve = bench(lambda: solver.simulate(stim), repeats=args.solver_repeats)
        model.predict(mask)
        surrogate = bench(lambda: model.predict(mask), repeats=repeats)
    ratio = solve.median / surrogate.median
    _append_metrics(cfg, {"command": "bench", "model": model.meta_["type"],
                          "solver_median_s": solve.median, "surrogate_median_s": surrogate.median,
                          "surrogate_min_s": surrogate.min, "surrogate_max_s": surrogate.max,
                          "speedup": ratio, "peak_rss_mb": surrogate.peak_rss_mb})
    print(f"monodomain solve {solve.median:.3f} s, {model.meta_['type']} predict "
          f"{surrogate.median * 1e3:.3f} ms, speedup {ratio:.0f}x "
          f"(peak RSS ~{surrogate.peak_rss_mb:.0f} MB)")
    return 0


def cmd_inspect(args) -> int:
    meta, arrays, offsets = epds.read(args.path, with_offsets=True)
    print(f"EPDS v{epds.VERSION}  {args.path}")
    for key in ("type", "config_hash", "seed", "tool_version"):
        value = meta.get(key, meta.get("info", {}).get(key))
        print(f"  {key}: {value}")
    if args.meta:
        print(json.dumps(meta, indent=2, sort_keys=True))
    for name, arr in arrays.items():
        print(f"  [{offsets[name]:>10d}] {name}: {'x'.join(map(str, arr.shape)) or 'scalar'} f64")
    return 0


def cmd_export_csv(args) -> int:
    _, arrays = epds.read(args.path)
    if args.array not in arrays:
        raise ConfigError(f"no array '{args.array}' (have: {', '.join(arrays)})")
    arr = np.atleast_2d(arrays[args.array])
    arr = arr.reshape(arr.shape[0], -1)
    with open(_out_file(args.out), "w", newline="") as fh:
        w = csv.writer(fh)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])
    print(f"wrote {args.out}: {arr.shape[0]} rows x {arr.shape[1]} columns")
    return 0


# ---------------------------------------------------------------- parser

def _common(p, seed=True):
    p.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (default: $CARDIOGRAPH_THREADS)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fixed-order reductions")
    p.add_argument("--out-dir", help="directory for CSV outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardiograph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset of random stimuli")
    _common(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--grid", type=int, help="nodes per in-plane axis")
    p.add_argument("--out", default="dataset.epds")
    p.add_argument("--dump-vtk", metavar="DIR", help="write VTK maps and v snapshots")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a surrogate on the 80%% split")
    p.add_argument("family", choices=["kol", "fno"])
    p.add_argument("dataset")
    _common(p)
    p.add_argument("--out", default="model.epds")
    p.add_argument("--kernel", help="KOL preset (iq1..iq5, rbf1..rbf3, ntk1..ntk3)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--target", choices=["activation", "repolarization"])
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a model on a dataset split")
    p.add_argument("model")
    p.add_argument("dataset")
    _common(p)
    p.add_argument("--split", choices=["all", "train", "test"], default="test")
    p.add_argument("--out", default="predictions.epds")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics of predictions against truth")
    p.add_argument("predictions")
    p.add_argument("truth", help="dataset or predictions file")
    _common(p, seed=False)
    p.add_argument("--target", choices=["activation", "repolarization"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="monodomain solve vs surrogate predict timing")
    p.add_argument("model")
    _common(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--solver-repeats", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print EPDS header and verify checksums")
    p.add_argument("path")
    p.add_argument("--meta", action="store_true", help="dump full metadata JSON")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-csv", help="write one EPDS array as CSV")
    p.add_argument("path")
    p.add_argument("array")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_csv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CardiographError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
