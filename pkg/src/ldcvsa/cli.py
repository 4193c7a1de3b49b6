"""Command line interface: ``ldc <command> [flags]``.

Every command writes its artifacts (CSV / JSON / model files) under ``--out``.
Exit status is 1 for configuration errors and 2 for data errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import deploy, teacher as teacher_mod
from .core import LDCModel
from .dataio import DATASETS, DatasetError, load_dataset
from .trainer import (ConfigError, QATConfig, TrainConfig, evaluate, first_misclassified,
                      gradient_snapshot, train_ldc, write_histograms)

log = logging.getLogger("ldcvsa")

DATA_ERRORS = (FileNotFoundError, DatasetError, teacher_mod.LogitsFormatError,
               deploy.ModelFormatError)
GRIDS = {
    "gamma": ("gamma", float, "0,0.2,0.4,0.6,0.8,1.0"),
    "temperature": ("temperature", float, "0.5,2,4,8,10,20"),
    "batch_size": ("batch_size", int, "32,64,128,256,512"),
    "smoothing": ("label_smoothing", float, "0,0.5,1.0"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from exc


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------
# shared flag groups
# --------------------------------------------------------------------------


def _add_data_flags(p):
    p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p.add_argument("--data-dir", default=None, help="dataset root (default $LDC_DATA_DIR)")
    p.add_argument("--levels", type=int, default=256, help="discretization levels M")
    p.add_argument("--train-subset", type=int, default=None,
                   help="train on the first N training samples only")


def _add_train_flags(p):
    _add_data_flags(p)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--value-dim", type=int, default=16)
    p.add_argument("--norm", default="batch", choices=["none", "batch", "layer", "rms"])
    p.add_argument("--loss", default="ce", choices=["ce", "kd_kl", "kd_js", "hard_label_teacher"])
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--T", "--temperature", dest="temperature", type=float, default=4.0)
    p.add_argument("--smoothing", type=float, default=None, help="label smoothing factor f")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--alpha-multiplier", type=float, default=1.0)
    p.add_argument("--no-qat", action="store_true")
    p.add_argument("--qat-threshold", type=float, default=0.02)
    p.add_argument("--qat-momentum", type=float, default=0.01)
    p.add_argument("--qat-start", type=int, default=15)
    p.add_argument("--teacher-logits", default=None, help="LDCT file aligned with the train split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _config(args, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        dim=args.dim, value_dim=args.value_dim, n_levels=args.levels, batch_size=args.batch_size,
        epochs=args.epochs, lr0=args.lr, clip=args.clip, gamma=args.gamma,
        temperature=args.temperature, loss_kind=args.loss, normalizer=args.norm,
        delta=args.delta, alpha_multiplier=args.alpha_multiplier,
        label_smoothing=args.smoothing,
        qat=QATConfig(enabled=not args.no_qat, momentum=args.qat_momentum,
                      threshold=args.qat_threshold, start_epoch=args.qat_start),
        seed=args.seed)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def _load(args):
    train, test = load_dataset(args.dataset, root=args.data_dir, n_levels=args.levels)
    if args.train_subset is not None:
        train = train.subset(args.train_subset)
    return train, test


def _teacher(args, n_train, n_classes):
    if args.teacher_logits is None:
        return None
    t = teacher_mod.import_logits(args.teacher_logits)
    if t.logits.shape[1] != n_classes:
        raise teacher_mod.LogitsFormatError(
            f"teacher logits have {t.logits.shape[1]} classes, dataset has {n_classes}")
    if t.logits.shape[0] < n_train:
        raise teacher_mod.LogitsFormatError(
            f"teacher logits have {t.logits.shape[0]} rows, training split has {n_train}")
    return t.logits[:n_train]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    train, test = _load(args)
    zt = _teacher(args, len(train), train.n_classes)
    cfg = _config(args)
    out = Path(args.out)
    snapshot_epochs = tuple(args.snapshot_epochs or ())
    finals = []
    for r in range(args.repeats):
        cfg.seed = args.seed + r
        run_dir = out if args.repeats == 1 else out / f"run{r}"
        run_dir.mkdir(parents=True, exist_ok=True)
        model, report = train_ldc(cfg, train, test, teacher=zt, snapshot_epochs=snapshot_epochs)
        model.save(run_dir / "model.npz")
        report.to_json(run_dir / "report.json")
        report.to_csv(run_dir / "epochs.csv")
        for snap in report.snapshots:
            write_histograms(snap, run_dir / "snapshots", f"epoch{snap['epoch']}")
        finals.append(report.final)
        print(f"seed {cfg.seed}: accuracy {report.final['accuracy']:.4f}")
    if args.repeats > 1:
        acc = np.array([f["accuracy"] for f in finals])
        _write_json(out / "summary.json", {"accuracy_mean": float(acc.mean()),
                                           "accuracy_std": float(acc.std(ddof=1)),
                                           "accuracies": acc.tolist(), "runs": finals})
    return 0


def cmd_distill_teacher(args) -> int:
    train, test = _load(args)
    members, history = [], []
    for g in range(args.members):
        model, hist = teacher_mod.train_teacher(train, tuple(args.hidden), args.epochs, args.lr,
                                                args.batch_size, args.seed + g, test)
        members.append(model)
        history.append(hist)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"members": []}
    for split, data in (("train", train), ("test", test)):
        logits = [m.logits(data.features) for m in members]
        z = logits[0] if len(logits) == 1 else teacher_mod.ensemble_logits(logits)
        teacher_mod.export_logits(z, out / f"teacher_{split}.ldct")
        report[f"{split}_accuracy"] = float(np.mean(np.argmax(z, axis=1) == data.labels))
    for m, hist in zip(members, history):
        report["members"].append({"test_accuracy": float(np.mean(m.predict(test.features) == test.labels)),
                                  "history": hist})
    _write_json(out / "teacher_report.json", report)
    print(f"teacher test accuracy {report['test_accuracy']:.4f}")
    return 0


def _estimates(pm) -> dict:
    bits = deploy.memory_bits(pm.dims, pm.has_thresholds)
    total = sum(bits.values())
    return {"dims": pm.dims, "has_thresholds": pm.has_thresholds,
            "memory_kb": total / 8192, "memory_bits": bits,
            "threshold_overhead": (bits["threshold"] + bits["flags"]) / total,
            "cdc": deploy.cdc_estimate(pm)}


def cmd_export(args) -> int:
    model = LDCModel.load(args.checkpoint)
    pm = deploy.pack_model(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    deploy.save_packed(pm, out / "model.ldcv")
    _write_json(out / "hardware.json", _estimates(pm))
    print(f"wrote {out / 'model.ldcv'} ({deploy.memory_footprint(pm):.2f} KB)")
    return 0


def _read_samples(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path) as fh:
        first = fh.readline()
    try:
        X = np.loadtxt(path, delimiter="," if "," in first else None, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    if not np.all(X == np.round(X)):
        raise DatasetError(f"{path}: feature levels must be integers")
    return X.astype(np.int64)


def cmd_infer(args) -> int:
    pm = deploy.load_packed(args.model)
    X = _read_samples(args.input)
    if X.shape[1] != pm.dims["N"]:
        raise DatasetError(f"input has {X.shape[1]} columns, model expects {pm.dims['N']}")
    if X.min() < 0 or X.max() >= pm.dims["M"]:
        raise DatasetError(f"feature levels outside [0, {pm.dims['M'] - 1}]")
    labels, z = deploy.infer_packed(pm, X)
    rows = [[int(lab), " ".join(str(int(v)) for v in zz)] for lab, zz in zip(labels, z)]
    for lab, zs in rows:
        print(f"{lab}\t{zs}")
    if args.out:
        _write_csv(Path(args.out) / "predictions.csv", ["label", "z"], rows)
    return 0


def cmd_bench(args) -> int:
    pm = deploy.load_packed(args.model)
    if args.dataset:
        _, test = load_dataset(args.dataset, root=args.data_dir, n_levels=pm.dims["M"])
        X = test.features[:args.samples]
    else:
        rng = np.random.Generator(np.random.Philox(key=args.seed))
        X = rng.integers(0, pm.dims["M"], size=(args.samples, pm.dims["N"]))
    pm.predict(X[:2])  # warm-up
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        pm.predict(X, batch_size=args.batch_size)
        times.append(time.perf_counter() - t0)
    best = min(times)
    result = {"samples": int(X.shape[0]), "repeats": args.repeats, "seconds_best": best,
              "seconds_all": times, "samples_per_second": X.shape[0] / best,
              "us_per_sample": 1e6 * best / X.shape[0], **_estimates(pm)}
    _write_json(Path(args.out) / "bench.json", result)
    print(f"{result['samples_per_second']:.0f} samples/s")
    return 0


def cmd_robustness(args) -> int:
    pm = deploy.load_packed(args.model)
    _, test = load_dataset(args.dataset, root=args.data_dir, n_levels=pm.dims["M"])
    rows = []
    for p in args.rates:
        accs = []
        for s in range(args.seeds):
            noisy = deploy.inject_bit_errors(pm, p, args.seed + s)
            accs.append(float(np.mean(noisy.predict(test.features) == test.labels)))
        rows.append([repr(p), repr(float(np.mean(accs))), repr(float(np.std(accs))),
                     " ".join(repr(a) for a in accs)])
        print(f"p={p}: accuracy {np.mean(accs):.4f}")
    _write_csv(Path(args.out) / "robustness.csv", ["rate", "accuracy_mean", "accuracy_std",
                                                  "accuracies"], rows)
    return 0


def cmd_sweep(args) -> int:
    field, cast, default = GRIDS[args.grid]
    values = [cast(v) for v in (args.values or default).split(",") if v.strip()]
    train, test = _load(args)
    zt = _teacher(args, len(train), train.n_classes)
    rows = []
    for v in values:
        cfg = _config(args, **{field: v})
        model, report = train_ldc(cfg, train, test, teacher=zt)
        f = report.final
        rows.append([repr(v), repr(f["accuracy"]), repr(f["entropy_correct"]),
                     repr(f["entropy_wrong"])])
        print(f"{args.grid}={v}: accuracy {f['accuracy']:.4f}")
    _write_csv(Path(args.out) / f"sweep_{args.grid}.csv",
               [args.grid, "accuracy", "entropy_correct", "entropy_wrong"], rows)
    return 0


def cmd_snapshot(args) -> int:
    model = LDCModel.load(args.checkpoint)
    _, test = load_dataset(args.dataset, root=args.data_dir, n_levels=model.n_levels)
    index = args.index if args.index is not None else first_misclassified(model, test)
    if index is None:
        raise ConfigError("no misclassified test sample; pass --index")
    snap = gradient_snapshot(model, test.features[index], int(test.labels[index]), bins=args.bins)
    out = Path(args.out)
    write_histograms(snap, out, f"sample{index}")
    _write_json(out / "snapshot.json", {"sample": index, **{k: snap[k] for k in (
        "zero_grad_fraction", "var_pre_activation", "grad_F_range")}})
    print(f"sample {index}: zero-gradient fraction {snap['zero_grad_fraction']:.4f}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an LDC model")
    _add_train_flags(p)
    p.add_argument("--repeats", type=int, default=1, help="independent runs with seeds seed..seed+R-1")
    p.add_argument("--snapshot-epochs", type=_ints, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill-teacher", help="train the MLP teacher and export its logits")
    _add_data_flags(p)
    p.add_argument("--hidden", type=_ints, default=[256, 128])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--members", type=int, default=1, help="ensemble size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill_teacher)

    p = sub.add_parser("export", help="fold BN and write a packed model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="packed inference on samples from a file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="delimited integer levels, one sample per row")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="packed inference throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", default=None, choices=sorted(DATASETS))
    p.add_argument("--data-dir", default=None)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("robustness", help="accuracy under random bit errors")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p.add_argument("--data-dir", default=None)
    p.add_argument("--rates", type=_floats, default=[0.0, 1e-3, 1e-2, 5e-2, 1e-1])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("sweep", help="train over a hyperparameter grid")
    _add_train_flags(p)
    p.add_argument("--grid", required=True, choices=sorted(GRIDS))
    p.add_argument("--values", default=None, help="comma-separated grid values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("snapshot", help="gradient histograms for one test sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p.add_argument("--data-dir", default=None)
    p.add_argument("--index", type=int, default=None, help="default: first misclassified")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_snapshot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, deploy.FoldError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
