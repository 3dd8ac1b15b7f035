"""``edrl`` command line: generate-data, train, eval, sweep, export.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import experiments, plotting
from .config import VARIANTS, EdrlConfig, Regime
from .container import DataFormatError
from .tensor import RngState
from .train import DivergenceError, apply_regime, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _regime(text: str) -> str:
    try:
        return str(Regime.parse(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _load_config(path: str | None) -> EdrlConfig:
    if path is None:
        return EdrlConfig()
    try:
        return EdrlConfig.load(path)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad config {path}: {exc}") from exc


def _load_spec(path: str | None) -> datamod.SyntheticSpec:
    if path is None:
        return datamod.SyntheticSpec()
    try:
        spec = datamod.SyntheticSpec.from_dict(json.loads(Path(path).read_text()))
        spec.validate()
        return spec
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad synthetic spec {path}: {exc}") from exc


def _load_split(path: str, split: str) -> datamod.SampleBatch:
    batches, _ = datamod.load(path)
    if split not in batches:
        raise DataFormatError(f"{path} has no split {split!r} (found {sorted(batches)})")
    return batches[split]


def _check_width(cfg: EdrlConfig, batch: datamod.SampleBatch) -> None:
    got = (batch.m1.shape[-1], batch.m2.shape[-1], batch.m1.shape[1])
    want = (cfg.raw_width_m1, cfg.raw_width_m2, cfg.tokens)
    if got != want:
        raise DataFormatError(f"dataset geometry (W1, W2, T) = {got} does not match config {want}")


def _report(cfg: EdrlConfig, rep, epoch: int) -> dict:
    return {
        "config": cfg.to_dict(),
        "regime": rep.regime,
        "acc": rep.accuracy,
        "auc": rep.auc,
        "f1": rep.f1,
        "per_class": rep.per_class,
        "seed": cfg.seed,
        "epoch": epoch,
    }


def cmd_generate(args) -> int:
    spec = _load_spec(args.spec)
    if args.seed is not None:
        spec = datamod.SyntheticSpec.from_dict(spec.to_dict() | {"seed": args.seed})
    train_set, test_set = datamod.generate(spec)
    datamod.save(args.out, {"train": train_set, "test": test_set}, spec)
    print(f"wrote {args.out}: {len(train_set)} train / {len(test_set)} test samples")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {"regime": args.regime}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.fixed_regime:
        overrides["fixed_regime"] = True
    if args.variant:
        eprl, dilr = VARIANTS[args.variant]
        overrides.update(eprl_on=eprl, dilr_on=dilr)
    cfg = cfg.replace(**overrides)
    cfg.validate()
    batches, _ = datamod.load(args.data)
    train_set, test_set = batches.get("train"), batches.get("test")
    if train_set is None:
        raise DataFormatError(f"{args.data} has no train split")
    _check_width(cfg, train_set)
    result = train(cfg, train_set, test_set)
    save_checkpoint(args.out, result.model, result.rng, result.epoch)
    print(f"wrote {args.out} after {result.epoch} epochs")
    if result.history:
        base = Path(args.history) if args.history else Path(args.out).with_suffix(".history.csv")
        _write_csv(base, ["epoch", "regime", "acc", "auc", "f1"],
                   [[r.epoch, r.regime, r.accuracy, r.auc, r.f1] for r in result.history])
        plotting.regime_curves(result.history, base.with_suffix(".png"))
        final = result.final(cfg.regime)
        print(json.dumps({"regime": final.regime, "acc": final.accuracy, "auc": final.auc, "f1": final.f1}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    batch = _load_split(args.data, args.split)
    _check_width(model.cfg, batch)
    rep = evaluate(model, batch, args.regime, int(meta.get("epoch", 0)))
    text = json.dumps(_report(model.cfg, rep, int(meta.get("epoch", 0))), sort_keys=True, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    spec = _load_spec(args.spec)
    rows = experiments.sweep(cfg, spec, args.param, args.values, args.seeds, args.regime)
    header = [args.param, "seed", "acc", "auc", "f1"]
    if args.out:
        _write_csv(args.out, header, [r.as_list() for r in rows])
        plotting.sweep_plot(rows, Path(args.out).with_suffix(".png"), args.param)
        print(f"wrote {args.out} ({len(rows)} rows)")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r.as_list()])
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    batch = _load_split(args.data, args.split)
    _check_width(model.cfg, batch)
    if args.regime != "complete":
        batch = apply_regime(batch, Regime.parse(args.regime), RngState(model.cfg.seed).child(99))
    out = Path(args.out)
    if args.what == "correlation":
        if not model.cfg.dilr_on:
            raise DataFormatError("correlation export needs a checkpoint trained with DiLR on")
        c = experiments.correlation_on(model, batch)
        if args.format == "csv":
            _write_csv_matrix(out, c)
        else:
            plotting.correlation_heatmap(c, model.split.common, out)
    else:
        x = experiments.embeddings(model, batch)
        if args.format == "csv":
            header = ["label"] + [f"f{i}" for i in range(x.shape[1])]
            _write_csv(out, header, [[int(lbl), *row] for lbl, row in zip(batch.labels, x)])
        else:
            plotting.embedding_scatter(x, batch.labels, out)
    print(f"wrote {out}")
    return EXIT_OK


def _write_csv_matrix(path, c: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in c:
            w.writerow([_fmt(v) for v in row])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edrl", description="Essence-point and disentangled multimodal learning on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="draw a synthetic two-modality dataset")
    g.add_argument("--spec", help="JSON synthetic spec (defaults if omitted)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON config (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--regime", type=_regime, default="complete")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--fixed-regime", action="store_true", help="train the degraded pipeline on --regime only")
    t.add_argument("--history", help="per-epoch metrics CSV (a PNG is written next to it)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under a regime")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--regime", type=_regime, default="complete")
    e.add_argument("--report", help="write the JSON report here as well as stdout")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="accuracy across values of p or the evaluation noise variance")
    s.add_argument("--param", required=True, choices=experiments.SWEEP_PARAMS)
    s.add_argument("--values", required=True, type=_float_list)
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.add_argument("--config")
    s.add_argument("--spec")
    s.add_argument("--epochs", type=int)
    s.add_argument("--regime", help="scoring regime for p; noisy modality (M1|M2) for noise_var")
    s.add_argument("--out", help="CSV path (a PNG is written next to it); stdout if omitted")
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export", help="dump embeddings or the correlation matrix")
    x.add_argument("--what", required=True, choices=("embeddings", "correlation"))
    x.add_argument("--format", default="csv", choices=("csv", "png"))
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test")
    x.add_argument("--regime", type=_regime, default="complete")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep" and args.param == "noise_var" and args.regime not in (None, "M1", "M2"):
        print("edrl sweep: --regime must be M1 or M2 for noise_var", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "sweep" and args.param == "p" and args.regime is not None:
        try:
            args.regime = _regime(args.regime)
        except argparse.ArgumentTypeError as exc:
            print(f"edrl sweep: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"edrl: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataFormatError, OSError, ValueError) as exc:
        print(f"edrl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
