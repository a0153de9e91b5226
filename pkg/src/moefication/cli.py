"""Command-line surface: train-toy, profile, split, train-router, eval,
calibrate, pipeline, and sweep subcommands.

All report files are JSON/CSV with sorted keys and no timestamps, so a
rerun with the same config and seeds is byte-identical. The environment
variable MOEF_SEED overrides the configured seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import modelio
from .engine import calibrate, evaluate, moefy
from .ffn import FfnWeights, ffn_forward
from .modelio import Dataset, gen_synthetic, load_dataset_csv, load_model, save_model
from .profiling import record_trace, sparsity_report
from .routers import ROUTERS, load_router, save_router
from .splitters import SPLITTERS, ExpertPartition, materialize_experts

DEFAULTS = {
    "d_model": 64,
    "d_ff": 512,
    "k": 16,
    "n": 4,  # 20% budget
    "method": "coact",
    "router": "learn",
    "quantile": 0.8,
    "seed": 0,
    "dataset": {"kind": "sparse_regression", "n": 2000},
    "train": {"epochs": 60, "lr": 0.05, "batch": 64},
    "router_train": {"lr": 1e-2, "epochs": 30, "batch": 512},
    "calibrate": {"lr": 5e-3, "epochs": 20},
}


class CliError(SystemExit):
    def __init__(self, msg: str, code: int = 2):
        print(f"error: {msg}", file=sys.stderr)
        super().__init__(code)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_dataset(spec, seed: int, d_model: int) -> Dataset:
    """Dataset spec: a CSV path, or 'synthetic:kind:n' shorthand, or a dict."""
    if isinstance(spec, dict):
        return gen_synthetic(spec.get("kind", "sparse_regression"), spec.get("n", 2000),
                             spec.get("d_model", d_model), spec.get("seed", seed))
    if isinstance(spec, str) and spec.startswith("synthetic:"):
        parts = spec.split(":")
        kind, n = parts[1], int(parts[2]) if len(parts) > 2 else 2000
        return gen_synthetic(kind, n, d_model, seed)
    return load_dataset_csv(spec)


def _effective_seed(seed: int) -> int:
    env = os.environ.get("MOEF_SEED")
    return int(env) if env else seed


# --------------------------------------------------------------------------
# subcommands

def cmd_train_toy(args) -> int:
    seed = _effective_seed(args.seed)
    d = _load_dataset(args.dataset, seed, args.d_model)
    w = modelio.train_toy_ffn(d, args.d_ff, args.epochs, args.lr, seed, args.batch)
    save_model(args.out, w)
    print(f"wrote {args.out}")
    return 0


def cmd_profile(args) -> int:
    w = load_model(args.model)
    d = _load_dataset(args.dataset, _effective_seed(args.seed), w.d_model)
    rep = sparsity_report(record_trace(w, d))
    _write_json(Path(args.out_json), rep.to_dict())
    with open(args.out_csv, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ratio", "cum_fraction"])
        for r, c in rep.cdf:
            wr.writerow([repr(r), repr(c)])
    print(f"negative_ratio={rep.negative_ratio:.4f}")
    return 0


def cmd_split(args) -> int:
    w = load_model(args.model)
    seed = _effective_seed(args.seed)
    if w.d_ff % args.experts != 0:
        raise CliError(f"--experts {args.experts} must divide d_ff={w.d_ff}")
    kwargs = {"k": args.experts, "seed": seed}
    if args.method == "coact":
        kwargs["quantile"] = args.quantile
    splitter = SPLITTERS[args.method](**kwargs)
    trace = None
    if args.method == "coact":
        if not args.dataset:
            raise CliError("--dataset is required for the coact method")
        trace = record_trace(w, _load_dataset(args.dataset, seed, w.d_model))
    splitter.fit(w, trace)
    Path(args.out).write_text(splitter.partition_.to_json() + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_train_router(args) -> int:
    w = load_model(args.model)
    p = ExpertPartition.from_json(Path(args.partition).read_text())
    seed = _effective_seed(args.seed)
    cls = ROUTERS[args.router]
    if args.router == "learn":
        router = cls(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=seed)
        d = _load_dataset(args.dataset, seed, w.d_model)
        router.fit(w, p, trace=record_trace(w, d), inputs=d.inputs)
    else:
        router = cls().fit(w, p)
    save_router(args.out, router)
    print(f"wrote {args.out}")
    return 0


def _eval_report(model, partition, router_path, dataset, budget, seed):
    w = load_model(model)
    p = ExpertPartition.from_json(Path(partition).read_text())
    router = load_router(router_path, p)
    d = _load_dataset(dataset, seed, w.d_model)
    m = moefy(w, p, router, budget)
    return evaluate(m, w, d)


def cmd_eval(args) -> int:
    rep = _eval_report(args.model, args.partition, args.router, args.dataset,
                       args.budget, _effective_seed(args.seed))
    _write_json(Path(args.out_json), rep.to_dict())
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            keys = sorted(rep.to_dict())
            wr.writerow(keys)
            wr.writerow([repr(rep.to_dict()[k]) for k in keys])
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def cmd_calibrate(args) -> int:
    bundle = Path(args.bundle)
    w = load_model(bundle / "model.moef")
    p = ExpertPartition.from_json((bundle / "partition.json").read_text())
    router = load_router(bundle / "router.json", p)
    seed = _effective_seed(args.seed)
    d = _load_dataset(args.dataset, seed, w.d_model)
    m = moefy(w, p, router, args.budget)
    m2 = calibrate(m, d, lr=args.lr, epochs=args.epochs, seed=seed, w_original=w)
    # fold the permuted second layer back into original neuron order
    w2 = m2.experts.w2p[p.permutation, :]
    save_model(bundle / "model_calibrated.moef",
               FfnWeights(w.w1, w.b1, w2, m2.experts.b2))
    print(f"wrote {bundle / 'model_calibrated.moef'}")
    return 0


# --------------------------------------------------------------------------
# pipeline and sweep

def _merge_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path:
        user = json.loads(Path(path).read_text())
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    cfg["seed"] = _effective_seed(cfg["seed"])
    return cfg


def _prepare_outdir(out: str, force: bool) -> Path:
    outdir = Path(out)
    if outdir.exists() and any(outdir.iterdir()) and not force:
        raise CliError(f"output directory {outdir} exists; pass --force to overwrite")
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def run_pipeline(cfg: dict, outdir: Path) -> dict:
    """train-toy -> profile -> split -> train-router -> eval -> calibrate
    -> eval, recording one manifest entry per stage."""
    seed = cfg["seed"]
    manifest = {"config": cfg, "stages": []}
    artifacts: dict[str, Path] = {}

    class StageFailed(Exception):
        pass

    def stage(name, fn):
        entry = {"name": name, "status": "ok", "outputs": {}}
        try:
            produced = fn() or []
            for f in produced:
                entry["outputs"][f.name] = _sha256(f)
        except Exception as exc:  # record and stop; partial artifacts remain
            entry["status"] = "failed"
            entry["error"] = str(exc)
            manifest["stages"].append(entry)
            raise StageFailed(name) from exc
        manifest["stages"].append(entry)

    if cfg["k"] < 1 or cfg["d_ff"] % cfg["k"] != 0:
        raise CliError(f"k={cfg['k']} must divide d_ff={cfg['d_ff']}")
    if not (1 <= cfg["n"] <= cfg["k"]):
        raise CliError(f"n={cfg['n']} must lie in [1, k={cfg['k']}]")

    d = _load_dataset(cfg["dataset"], seed, cfg["d_model"])
    holdout = max(1, len(d) // 10)
    d_train = Dataset(d.inputs[:-holdout], d.targets[:-holdout], d.name)
    d_eval = Dataset(d.inputs[-holdout:], d.targets[-holdout:], d.name + "-held")
    state = {}

    def s_train():
        if cfg.get("model"):
            state["w"] = load_model(cfg["model"])
        else:
            tr = cfg["train"]
            state["w"] = modelio.train_toy_ffn(
                d_train, cfg["d_ff"], tr["epochs"], tr["lr"], seed, tr["batch"])
        path = outdir / "model.moef"
        save_model(path, state["w"])
        return [path]

    def s_profile():
        state["trace"] = record_trace(state["w"], d_train)
        rep = sparsity_report(state["trace"])
        path = outdir / "profile.json"
        _write_json(path, rep.to_dict())
        return [path]

    def s_split():
        kwargs = {"k": cfg["k"], "seed": seed}
        if cfg["method"] == "coact":
            kwargs["quantile"] = cfg["quantile"]
        splitter = SPLITTERS[cfg["method"]](**kwargs).fit(state["w"], state["trace"])
        state["p"] = splitter.partition_
        path = outdir / "partition.json"
        path.write_text(state["p"].to_json() + "\n")
        return [path]

    def s_router():
        cls = ROUTERS[cfg["router"]]
        if cfg["router"] == "learn":
            rt = cfg["router_train"]
            router = cls(lr=rt["lr"], epochs=rt["epochs"], batch=rt["batch"], seed=seed)
            router.fit(state["w"], state["p"], trace=state["trace"], inputs=d_train.inputs)
        else:
            router = cls().fit(state["w"], state["p"])
        state["router"] = router
        path = outdir / "router.json"
        save_router(path, router)
        return [path]

    def s_eval(tag, calibrated):
        m = state["m_cal"] if calibrated else moefy(state["w"], state["p"],
                                                    state["router"], cfg["n"])
        rep = evaluate(m, state["w"], d_eval)
        path = outdir / f"eval_{tag}.json"
        _write_json(path, rep.to_dict())
        return [path]

    def s_calibrate():
        cal = cfg["calibrate"]
        m = moefy(state["w"], state["p"], state["router"], cfg["n"])
        state["m_cal"] = calibrate(m, d_train, lr=cal["lr"], epochs=cal["epochs"],
                                   seed=seed, w_original=state["w"])
        w2 = state["m_cal"].experts.w2p[state["p"].permutation, :]
        state["w_cal"] = FfnWeights(state["w"].w1, state["w"].b1, w2,
                                    state["m_cal"].experts.b2)
        path = outdir / "model_calibrated.moef"
        save_model(path, state["w_cal"])
        return [path]

    try:
        stage("train-toy", s_train)
        stage("profile", s_profile)
        stage("split", s_split)
        stage("train-router", s_router)
        stage("eval", lambda: s_eval("pre", False))
        stage("calibrate", s_calibrate)
        stage("eval-calibrated", lambda: s_eval("post", True))
        ok = True
    except StageFailed:
        ok = False
    return manifest, ok


def cmd_pipeline(args) -> int:
    cfg = _merge_config(args.config)
    outdir = _prepare_outdir(args.out, args.force)
    manifest_path = outdir / "manifest.json"
    manifest, ok = run_pipeline(cfg, outdir)
    _write_json(manifest_path, manifest)
    if not ok:
        failed = [s["name"] for s in manifest["stages"] if s["status"] == "failed"]
        print(f"pipeline failed at stage {failed[0]}: {manifest_path}", file=sys.stderr)
        return 1
    print(f"pipeline ok: {manifest_path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _merge_config(args.config)
    outdir = _prepare_outdir(args.out, args.force)
    seed = cfg["seed"]
    d = _load_dataset(cfg["dataset"], seed, cfg["d_model"])
    holdout = max(1, len(d) // 10)
    d_train = Dataset(d.inputs[:-holdout], d.targets[:-holdout], d.name)
    d_eval = Dataset(d.inputs[-holdout:], d.targets[-holdout:], d.name)
    tr = cfg["train"]
    w = modelio.train_toy_ffn(d_train, cfg["d_ff"], tr["epochs"], tr["lr"], seed, tr["batch"])
    trace = record_trace(w, d_train)
    rows = []
    for method in ("random", "cluster", "coact"):
        kwargs = {"k": cfg["k"], "seed": seed}
        if method == "coact":
            kwargs["quantile"] = cfg["quantile"]
        p = SPLITTERS[method](**kwargs).fit(w, trace).partition_
        for rname in ("gt", "random", "param", "learn"):
            row = {"split": method, "router": rname}
            try:
                cls = ROUTERS[rname]
                if rname == "learn":
                    rt = cfg["router_train"]
                    router = cls(lr=rt["lr"], epochs=rt["epochs"],
                                 batch=rt["batch"], seed=seed)
                    router.fit(w, p, trace=trace, inputs=d_train.inputs)
                else:
                    router = cls().fit(w, p)
                rep = evaluate(moefy(w, p, router, cfg["n"]), w, d_eval)
                row.update({k: repr(v) for k, v in rep.to_dict().items()})
                row["status"] = "ok"
            except Exception as exc:
                row["status"] = f"failed: {exc}"
            rows.append(row)
    path = outdir / "sweep.csv"
    fields = ["split", "router", "status", "coverage", "mean_output_mse",
              "selection_overlap", "task_metric", "flop_ratio"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, restval="")
        wr.writeheader()
        wr.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moefication",
                                 description="MoEfy trained ReLU FFN layers")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-toy", help="train a toy FFN on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--d-model", type=int, default=DEFAULTS["d_model"])
    p.add_argument("--d-ff", type=int, default=DEFAULTS["d_ff"])
    p.add_argument("--epochs", type=int, default=DEFAULTS["train"]["epochs"])
    p.add_argument("--lr", type=float, default=DEFAULTS["train"]["lr"])
    p.add_argument("--batch", type=int, default=DEFAULTS["train"]["batch"])
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("profile", help="sparsity statistics of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-csv", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("split", help="build an expert partition")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=sorted(SPLITTERS), default="coact")
    p.add_argument("--experts", type=int, default=DEFAULTS["k"])
    p.add_argument("--quantile", type=float, default=DEFAULTS["quantile"])
    p.add_argument("--dataset")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train-router", help="fit an expert router")
    p.add_argument("--model", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--router", choices=sorted(ROUTERS), default="learn")
    p.add_argument("--lr", type=float, default=DEFAULTS["router_train"]["lr"])
    p.add_argument("--epochs", type=int, default=DEFAULTS["router_train"]["epochs"])
    p.add_argument("--batch", type=int, default=DEFAULTS["router_train"]["batch"])
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=cmd_train_router)

    p = sub.add_parser("eval", help="compare MoEfied against original outputs")
    p.add_argument("--model", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--budget", type=int, default=DEFAULTS["n"])
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-csv")
    add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("calibrate", help="fine-tune W2/b2 of a bundle dir")
    p.add_argument("--bundle", required=True,
                   help="directory holding model.moef, partition.json, router.json")
    p.add_argument("--dataset", required=True)
    p.add_argument("--budget", type=int, default=DEFAULTS["n"])
    p.add_argument("--lr", type=float, default=DEFAULTS["calibrate"]["lr"])
    p.add_argument("--epochs", type=int, default=DEFAULTS["calibrate"]["epochs"])
    add_common(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("pipeline", help="run the full pipeline into a directory")
    p.add_argument("--config", help="JSON config overriding the defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("sweep", help="grid over split methods x router types")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (ValueError, FileNotFoundError, modelio.FormatError) as exc:
        raise CliError(str(exc))


if __name__ == "__main__":
    sys.exit(main())
