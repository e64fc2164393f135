"""Command-line entry point: ``magnets {gen,train,eval,explain,repro}``.

Exit codes: 0 success, 2 bad input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .data import DATASETS, DatasetFormatError, GeneratorConfig, load_dataset, make_splits, \
    save_dataset
from .model import CheckpointError, MagnetsModel, explain
from .training import TrainConfig, TrainingDiverged, prepare

EXIT_OK, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("magnets")


class BadInput(Exception):
    pass


def default_out() -> Path:
    return Path(os.environ.get("MAGNETS_OUT", "magnets_out"))


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _atomic_dir(path: Path) -> Path:
    """Create ``path`` (and parents); stage into a temp sibling first when new."""
    if path.exists():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        os.rename(tmp, path)
    except OSError:
        tmp.rmdir()
    return path


def _dataset_paths(spec: str, out: Path) -> tuple[Path, Path]:
    """``spec`` is a dataset name (looked up under ``out``) or a ``*_train.mgts`` path."""
    if spec in DATASETS:
        train = out / f"{spec}_train.mgts"
    else:
        train = Path(spec)
    if not train.name.endswith("_train.mgts"):
        raise BadInput(f"expected a *_train.mgts file or a dataset name, got {spec!r}")
    test = train.with_name(train.name.replace("_train.mgts", "_test.mgts"))
    for p in (train, test):
        if not p.exists():
            raise BadInput(f"missing dataset file {p} (run `magnets gen` first)")
    return train, test


def _load_test(spec: str, out: Path):
    p = Path(spec)
    if p.suffix == ".mgts":
        if not p.exists():
            raise BadInput(f"missing dataset file {p}")
        return load_dataset(p)
    return load_dataset(_dataset_paths(spec, out)[1])


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    if args.dataset not in DATASETS:
        raise BadInput(f"unknown dataset {args.dataset!r}; choose from {', '.join(DATASETS)}")
    out = _atomic_dir(Path(args.out))
    cfg = GeneratorConfig.scaled(args.scale, seed=args.seed)
    tr, te = make_splits(args.dataset, cfg)
    paths = {}
    for ds in (tr, te):
        p = out / f"{args.dataset}_{ds.split}.mgts"
        save_dataset(ds, p)
        paths[ds.split] = str(p)
    payload = {"dataset": args.dataset, "seed": args.seed, "n_train": tr.n, "n_test": te.n,
               "channels": tr.c, "length": tr.t, "y_mean": float(tr.y.mean()),
               "y_std": float(tr.y.std()), "files": paths}
    _emit(args, payload, f"{args.dataset}: {tr.n} train / {te.n} test, C={tr.c}, T={tr.t}, "
                         f"train y mean {tr.y.mean():.4f} std {tr.y.std():.4f}\n"
                         f"  {paths['train']}\n  {paths['test']}")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)


def _magnets_cfg(args) -> dict:
    return {"masks": args.masks, "concepts": args.concepts, "tau": args.tau,
            "lambda_spars": args.lspars, "lambda_ortho": args.lortho, "noise": args.noise,
            "aggregate": args.aggregate}


def _report_text(rep) -> str:
    d = rep.to_dict()
    lines = [f"{d['model']} on {d['dataset']}: RMSE {d['rmse_raw']:.5f}  R2 {d['r2']:.5f}"]
    if "expl_auc_mean" in d:
        lines.append(f"  explanations: AUC {d['expl_auc_mean']:.4f}  F1 {d['expl_f1_mean']:.4f}  "
                     f"({d['n_evaluated']} evaluated, {d['n_skipped']} skipped)")
    return "\n".join(lines)


def cmd_train(args) -> int:
    out = Path(args.out)
    train_path, test_path = _dataset_paths(args.dataset, out)
    tr, te = load_dataset(train_path), load_dataset(test_path)
    run_dir = _atomic_dir(out / "runs" / f"{args.model}_{tr.name}_s{args.seed}")
    ckpt = run_dir / "model.ckpt"
    runlog = run_dir / "runlog.jsonl"
    t0 = time.perf_counter()
    model, scaler, _ = pipeline.fit(
        args.model, tr, te, _train_cfg(args), magnets_cfg=_magnets_cfg(args), widths=args.widths,
        lam=args.lam, log_path=runlog if args.model in ("magnets", "cnn") else None,
        checkpoint_path=ckpt if args.model in ("magnets", "cnn") else None, progress=args.verbose)
    pipeline.save(args.model, model, scaler, ckpt, {"dataset": tr.name, "seed": args.seed})
    rep = pipeline.evaluate(args.model, model, scaler, te, mask_pool=args.mask_pool,
                            ig_steps=args.ig_steps, ig_samples=args.ig_samples, seed=args.seed)
    rep.extra["train_wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
    (run_dir / "metrics.json").write_text(rep.to_json() + "\n")
    payload = rep.to_dict()
    payload["checkpoint"] = str(ckpt)
    _emit(args, payload, _report_text(rep) + f"\n  checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    kind, model, scaler, extra = _load_checkpoint(args.checkpoint)
    te = _load_test(args.dataset, Path(args.out))
    pipeline.check_compatible(kind, model, te)
    rep = pipeline.evaluate(kind, model, scaler, te, mask_pool=args.mask_pool,
                            ig_steps=args.ig_steps, ig_samples=args.ig_samples,
                            seed=extra.get("seed", args.seed))
    _emit(args, rep.to_dict(), _report_text(rep))
    return EXIT_OK


def _load_checkpoint(path):
    if not Path(path).exists():
        raise BadInput(f"missing checkpoint {path}")
    return pipeline.load(path)


# ---------------------------------------------------------------- explain


def write_explanation(model: MagnetsModel, x_std: np.ndarray, valid: int, out: Path) -> dict:
    """Write the four explanation files for one standardized, padded sample [C, T]."""
    e = explain(model, x_std, valid)
    C, M, K = model.beta.shape
    with open(out / "bottleneck_weights.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "m", "k", "beta"])
        for c in range(C):
            for m in range(M):
                for k in range(K):
                    w.writerow([c, m, k, repr(float(model.beta[c, m, k]))])
    with open(out / "masks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "m", "t", "mask", "relaxed"])
        for c in range(C):
            for m in range(M):
                for t in range(valid):
                    w.writerow([c, m, t, int(e.masks[c, m, t]), repr(float(e.relaxed[c, m, t]))])
    concepts = {
        "c_k": e.concepts.tolist(),
        "w_k": model.params["w"].data.tolist(),
        "b_k": model.params["b"].data.tolist(),
        "contributions": e.contributions.tolist(),
        "y_hat": e.y_hat,
        "w0": e.w0,
        "z": e.z.tolist(),
    }
    (out / "concepts.json").write_text(json.dumps(concepts, indent=2) + "\n")
    with open(out / "feature_weights.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "m", "weight"])
        fw = e.feature_weights
        for c in range(C):
            for m in range(M):
                w.writerow([c, m, repr(float(fw[c, m]))])
    return concepts


def reconstruct_from_files(out: Path) -> float:
    """Recompute the scaled prediction from the exported weights CSV and concepts JSON."""
    concepts = json.loads((out / "concepts.json").read_text())
    beta = {}
    with open(out / "bottleneck_weights.csv") as fh:
        for row in csv.DictReader(fh):
            beta[int(row["c"]), int(row["m"]), int(row["k"])] = float(row["beta"])
    z = np.array(concepts["z"])
    C, M = z.shape
    K = len(concepts["w_k"])
    B = np.array([[[beta[c, m, k] for k in range(K)] for m in range(M)] for c in range(C)])
    c_k = z.reshape(-1) @ B.reshape(-1, K) + np.array(concepts["b_k"])
    return float(concepts["w0"] + c_k @ np.array(concepts["w_k"]))


def cmd_explain(args) -> int:
    kind, model, scaler, _ = _load_checkpoint(args.checkpoint)
    if kind != "magnets":
        raise BadInput(f"explain needs a magnets checkpoint, got {kind!r}")
    te = _load_test(args.dataset, Path(args.out))
    pipeline.check_compatible(kind, model, te)
    if not 0 <= args.sample < te.n:
        raise BadInput(f"sample id {args.sample} out of range [0, {te.n})")
    data = prepare(te.subset([args.sample]), scaler)
    dest = _atomic_dir(Path(args.dest) if args.dest else
                       Path(args.out) / "explain" / f"{te.name}_{args.sample}")
    concepts = write_explanation(model, data.x[0], data.valid, dest)
    payload = {"sample": args.sample, "dir": str(dest), "y_hat_scaled": concepts["y_hat"],
               "y_hat_raw": float(scaler.inverse_y(np.array([concepts["y_hat"]]))[0]),
               "y_true": float(te.y[args.sample])}
    _emit(args, payload, f"explanation for sample {args.sample} written to {dest}\n"
                         f"  prediction {payload['y_hat_raw']:.4f} (target {payload['y_true']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------- repro


def repro_settings(args) -> dict:
    return {"scale": args.scale, "epochs": args.epochs, "batch": args.batch, "lr": args.lr,
            "masks": args.masks, "concepts": args.concepts, "tau": args.tau, "noise": args.noise,
            "aggregate": args.aggregate, "widths": list(args.widths), "lam": args.lam,
            "mask_pool": args.mask_pool, "ig_steps": args.ig_steps, "ig_samples": args.ig_samples}


def cmd_repro(args) -> int:
    datasets = args.datasets or list(DATASETS)
    for name in datasets:
        if name not in DATASETS:
            raise BadInput(f"unknown dataset {name!r}")
    labels = ["magnets_l1"] + (["magnets_l0"] if args.with_l0 else []) + \
        ["cnn", "mean", "ols", "ridge", "lasso"]
    cells = [(d, lab, s) for d in datasets for s in range(args.seeds) for lab in labels]
    out = _atomic_dir(Path(args.out))
    rows = pipeline.run_grid(cells, repro_settings(args), cache_dir=out / "repro_cache",
                             progress=lambda d, lab, s: log.info("repro %s %s seed %d", d, lab, s))
    table = summarize(rows)
    (out / "repro.json").write_text(json.dumps({"rows": rows, "summary": table}, indent=2) + "\n")
    _emit(args, {"summary": table}, format_table(table))
    return EXIT_OK


def summarize(rows: list[dict]) -> list[dict]:
    """Seed-average each (dataset, model) pair and attach the reference numbers."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["model"]), []).append(r)
    out = []
    for (name, label), rs in groups.items():
        entry = {"dataset": name, "model": label, "seeds": len(rs),
                 "r2": float(np.mean([r["r2"] for r in rs])),
                 "rmse_raw": float(np.mean([r["rmse_raw"] for r in rs])),
                 "ref_r2": pipeline.REFERENCE_R2.get(label, {}).get(name)}
        if "expl_auc_mean" in rs[0]:
            entry["auc"] = float(np.nanmean([r["expl_auc_mean"] for r in rs]))
            entry["f1"] = float(np.mean([r["expl_f1_mean"] for r in rs]))
            ref = pipeline.REFERENCE_EXPL.get(label, {}).get(name)
            entry["ref_auc"], entry["ref_f1"] = ref if ref else (None, None)
        out.append(entry)
    return out


def format_table(table: list[dict]) -> str:
    def f(v):
        return "   -  " if v is None else f"{v:6.4f}"

    head = f"{'dataset':<12} {'model':<11} {'R2':>6} {'ref':>6}  {'AUC':>6} {'ref':>6}  " \
           f"{'F1':>6} {'ref':>6}"
    lines = [head, "-" * len(head)]
    for e in table:
        lines.append(f"{e['dataset']:<12} {e['model']:<11} {f(e['r2'])} {f(e['ref_r2'])}  "
                     f"{f(e.get('auc'))} {f(e.get('ref_auc'))}  {f(e.get('f1'))} "
                     f"{f(e.get('ref_f1'))}")
    return "\n".join(lines)


# ---------------------------------------------------------------- parser


def _widths(text: str) -> list[int]:
    try:
        ws = [int(w) for w in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be three integers, got {text!r}")
    if len(ws) != 3 or min(ws) < 1:
        raise argparse.ArgumentTypeError(f"widths must be three positive integers, got {text!r}")
    return ws


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output directory (default $MAGNETS_OUT or ./magnets_out)")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--epochs", type=int, default=100)
    hyper.add_argument("--batch", type=int, default=8)
    hyper.add_argument("--lr", type=float, default=1e-3)
    hyper.add_argument("--lspars", type=float, default=0.0)
    hyper.add_argument("--lortho", type=float, default=0.0)
    hyper.add_argument("--masks", type=int, default=10)
    hyper.add_argument("--concepts", type=int, default=3)
    hyper.add_argument("--tau", type=float, default=1.0)
    hyper.add_argument("--noise", choices=["gumbel", "logistic"], default="logistic")
    hyper.add_argument("--aggregate", choices=["raw", "standardized"], default="raw")
    hyper.add_argument("--widths", type=_widths, default=[32, 64, 128],
                       help="encoder widths, e.g. 32,64,128")
    hyper.add_argument("--lam", type=float, default=1.0, help="ridge/lasso penalty")

    expl = argparse.ArgumentParser(add_help=False)
    expl.add_argument("--mask-pool", choices=["weighted", "union"], default="weighted")
    expl.add_argument("--ig-steps", type=int, default=50)
    expl.add_argument("--ig-samples", type=int, default=None,
                      help="limit integrated-gradients scoring to the first N test samples")

    p = argparse.ArgumentParser(prog="magnets", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("dataset")
    g.add_argument("--scale", type=float, default=1.0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common, hyper, expl], help="train a model")
    t.add_argument("model", choices=pipeline.MODEL_KINDS)
    t.add_argument("dataset", help="dataset name under --out, or a *_train.mgts path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, expl], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="dataset name, *_train.mgts or *_test.mgts path")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", parents=[common], help="export one MAGNETS explanation")
    x.add_argument("checkpoint")
    x.add_argument("dataset")
    x.add_argument("--sample", type=int, default=0)
    x.add_argument("--dest", default=None, help="directory for the exported files")
    x.set_defaults(func=cmd_explain)

    r = sub.add_parser("repro", parents=[common, hyper, expl],
                       help="desk-scale comparison against the reference tables")
    r.add_argument("--scale", type=float, default=0.1)
    r.add_argument("--seeds", type=int, default=3)
    r.add_argument("--datasets", nargs="*", default=None)
    r.add_argument("--with-l0", action="store_true", help="also train the unregularized model")
    r.set_defaults(func=cmd_repro, epochs=50)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = str(default_out())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (BadInput, DatasetFormatError, CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
