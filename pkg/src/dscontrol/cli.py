"""``dsc`` command-line entry point.

Every subcommand prints a JSON summary object as its last stdout line.
Exit codes: 0 success, 1 validation error, 2 runtime failure, 64 unknown
subcommand.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .grid import GridError, ParseError, ValidationError, load_system

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64
COMMANDS = ("gen", "encode", "train", "finetune", "eval", "risk", "cdr", "report")
PATH_KEYS = ("system", "data", "model")

WINDOWS_FILE = "windows.dsc"
VOLUMES_FILE = "volumes.dsc"
MANIFEST_FILE = "dataset.json"
MODEL_FILE = "model.dscm"


class UsageError(Exception):
    pass


class ArgError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgError(message)


# --------------------------------------------------------------------------
# config


def read_config(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment. ``seed`` is required."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: config file not found")
    out = {}
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    if "seed" not in out:
        raise ValidationError(f"{path}: config must set seed")
    for key in PATH_KEYS:
        if key in out and not Path(out[key]).exists():
            raise ValidationError(f"{path}: {key} path {out[key]} does not exist")
    return out


def _apply_config(parser: argparse.ArgumentParser, cfg: dict) -> None:
    types = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in cfg.items():
        act = types.get(key)
        if act is None:
            continue
        if isinstance(act, (argparse._StoreTrueAction,)):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = act.type(value) if act.type else value
    parser.set_defaults(**defaults)


def _percent_grid(text: str) -> list[float]:
    vals = [float(v) / 100 for v in str(text).split(",") if v.strip()]
    if not vals:
        raise ValueError("empty shed grid")
    return vals


# --------------------------------------------------------------------------
# parser


def build_parser() -> dict[str, argparse.ArgumentParser]:
    def base(name, help_):
        p = _Parser(prog=f"dsc {name}", description=help_)
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--seed", type=int, default=0)
        return p

    ps = {}
    p = ps["gen"] = base("gen", "simulate fault scenarios and write raw feature windows")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", default="dataset")
    p.add_argument("--system", help="directory with buses.csv, lines.csv, gens.csv")
    p.add_argument("--horizon", type=float, default=7.0)
    p.add_argument("--asr", type=float, help="DR threshold (default: mean R-hat of the batch)")
    p.add_argument("--stratified", action="store_true", help="equal scenario counts per line")
    p.add_argument("--no-fault", action="store_true")

    p = ps["encode"] = base("encode", "build 5-channel blurred intensity volumes")
    p.add_argument("--data", default="dataset")
    p.add_argument("--out")
    p.add_argument("--png", type=int, default=0, help="export this many intensity PNGs")

    p = ps["train"] = base("train", "cross-validated classifier training")
    p.add_argument("--data", default="dataset")
    p.add_argument("--out", default="model")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--regressor", action="store_true", help="also fit the participation regressor")
    p.add_argument("--reg-epochs", type=int, default=200)
    p.add_argument("--asr", type=float)

    p = ps["finetune"] = base("finetune", "transfer to DR labels and build the voting ensemble")
    p.add_argument("--data", default="dataset")
    p.add_argument("--model", default=f"model/{MODEL_FILE}")
    p.add_argument("--out", default="model")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.2)

    p = ps["eval"] = base("eval", "classify a dataset with a trained model")
    p.add_argument("--data", default="dataset")
    p.add_argument("--model", default=f"model/{MODEL_FILE}")
    p.add_argument("--out")

    p = ps["risk"] = base("risk", "system failure index and Monte Carlo check")
    p.add_argument("--asr", type=float, default=0.48)
    p.add_argument("--alpha", type=float, default=0.75)
    p.add_argument("--beta", type=float, default=1.5)
    p.add_argument("--mc", type=int, default=100_000, help="samples per grid point (0 disables)")
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--estimate-asr", type=int, default=0, help="sample this many scenarios for ASR")
    p.add_argument("--out")

    p = ps["cdr"] = base("cdr", "screen critical lines and evaluate the shedding policy")
    p.add_argument("--asr", type=float, default=0.48)
    p.add_argument("--shed", type=float, default=5.0, help="shed percentage")
    p.add_argument("--shed-grid", default="0,1,2,3,4,5,6,7,8,9,10")
    p.add_argument("--screen", action="store_true")
    p.add_argument("--top", type=int, default=30)
    p.add_argument("--data")
    p.add_argument("--system")
    p.add_argument("--out", default="cdr")

    p = ps["report"] = base("report", "render maps, tables and a summary")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--out", default="report")
    p.add_argument("--asr", type=float, default=0.48)
    p.add_argument("--png", type=int, default=8)
    return ps


def usage() -> str:
    return (f"dsc {__version__}\nusage: dsc <command> [options]\n\ncommands: "
            + ", ".join(COMMANDS) + "\nrun 'dsc <command> --help' for options\n")


# --------------------------------------------------------------------------
# helpers


def _system(args):
    return load_system(getattr(args, "system", None))


def _load_windows(data_dir):
    from .io import read_dataset

    path = Path(data_dir) / WINDOWS_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path}: dataset not found (run 'dsc gen' first)")
    data, meta = read_dataset(path)
    return data[:, 0].astype(np.float64), meta, path


def _manifest(data_dir) -> dict:
    p = Path(data_dir) / MANIFEST_FILE
    return json.loads(p.read_text()) if p.exists() else {}


def _write_csv(path, header, rows):
    from .io import atomic_write_text

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    atomic_write_text(path, buf.getvalue())
    return str(path)


def _write_json(path, obj):
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return str(path)


def _meta_dicts(meta):
    return [dict(k=m.k, duration=m.duration, location=m.location) for m in meta]


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    from .io import RecordMeta, write_dataset
    from .cdr import label_dr_class
    from .scenarios import run_batch
    from .sim import SimConfig

    if args.n < 1:
        raise ValidationError(f"--n must be at least 1, got {args.n}")
    sys_ = _system(args)
    cfg = SimConfig(horizon=args.horizon)
    items = run_batch(sys_, args.n, args.seed, cfg, no_fault=args.no_fault, stratified=args.stratified)
    ok = [it for it in items if it.error is None]
    failed = [it for it in items if it.error is not None]
    if not ok:
        raise RuntimeError("every scenario failed to simulate")
    asr = args.asr if args.asr is not None else float(np.mean([it.window.r_hat for it in ok]))
    meta = [RecordMeta.from_window(it.window, label_dr_class(it.window.r_hat, asr)) for it in ok]
    data = np.stack([it.window.matrix for it in ok])[:, None].astype(np.float32)
    out = Path(args.out)
    outputs = [str(write_dataset(out / WINDOWS_FILE, data, meta)), str(out / "windows.csv")]
    outputs.append(_write_csv(out / "failures.csv", ("uid", "error"),
                              [(it.scenario.uid, it.error) for it in failed]))
    outputs.append(_write_json(out / MANIFEST_FILE, dict(
        n_requested=args.n, n_written=len(ok), seed=args.seed, asr=asr, horizon=args.horizon,
        unstable=int(sum(m.tis for m in meta)), dr_class1=int(sum(m.dr_label for m in meta)))))
    return outputs, dict(n=len(ok), failed=len(failed), unstable=int(sum(m.tis for m in meta)), asr=asr)


def cmd_encode(args):
    from .encoding import NormStats, build_intensity_map, encode_matrices, save_png
    from .io import write_dataset

    mats, meta, _ = _load_windows(args.data)
    stats = NormStats.fit(mats)
    out = Path(args.out or args.data)
    vols = encode_matrices(mats, stats, np.float32)
    outputs = [str(write_dataset(out / VOLUMES_FILE, vols, meta)), str(out / "volumes.csv")]
    outputs.append(_write_csv(out / "norm_stats.csv", ("row", "min", "max"),
                              [(i, float(a), float(b)) for i, (a, b) in
                               enumerate(zip(stats.row_min, stats.row_max))]))
    for m, rec in list(zip(mats, meta))[: args.png]:
        p = out / "png" / f"scenario_{rec.uid:05d}.png"
        save_png(build_intensity_map(m, stats), p)
        outputs.append(str(p))
    return outputs, dict(n=len(meta), shape=list(vols.shape[1:]))


def cmd_train(args):
    from .cdr import participation_target
    from .nn.checkpoint import save_checkpoint
    from .nn.train import TrainConfig, regressor_features, train_classifier, train_regressor

    mats, meta, _ = _load_windows(args.data)
    labels = np.array([m.tis for m in meta])
    cfg = TrainConfig(lr=args.lr, batch=args.batch, folds=args.folds, epochs=args.epochs, seed=args.seed)
    res = train_classifier(mats, labels, cfg)
    out = Path(args.out)
    folds = [{k: v for k, v in m.items()} for m in res.fold_metrics]
    save_checkpoint(out / MODEL_FILE, res.model, res.stats,
                    extra=dict(fold_metrics=folds, lr=cfg.lr, batch=cfg.batch, epochs=cfg.epochs,
                               seed=cfg.seed, history=res.history))
    outputs = [str(out / MODEL_FILE)]
    outputs.append(_write_csv(out / "fold_metrics.csv", ("fold", "n", "accuracy", "precision", "recall"),
                              [(f["fold"], f["n"], f["accuracy"], f["precision"], f["recall"]) for f in folds]))
    extra = dict(mean_accuracy=res.mean("accuracy"), folds=len(folds))
    if args.regressor:
        asr = args.asr if args.asr is not None else _manifest(args.data).get(
            "asr", float(np.mean([m.r_hat for m in meta])))
        targets = np.array([participation_target(m.r_hat, asr, m.tis) for m in meta])
        feats = regressor_features(mats, res.stats, _meta_dicts(meta))
        rcfg = TrainConfig(lr=1e-3, batch=32, epochs=args.reg_epochs, seed=args.seed)
        reg, rmse = train_regressor(feats, targets, rcfg)
        save_checkpoint(out / "regressor.dscm", reg, res.stats, extra=dict(rmse=rmse, asr=asr))
        outputs.append(str(out / "regressor.dscm"))
        extra["regressor_rmse"] = rmse
    return outputs, extra


def cmd_finetune(args):
    from .nn.checkpoint import load_checkpoint, save_checkpoint
    from .nn.ensemble import (CentroidMember, CnnAttMember, LogisticMember, WmvEnsemble,
                              member_precision)
    from .nn.train import TrainConfig, classification_metrics, fine_tune, holdout_split

    mats, meta, _ = _load_windows(args.data)
    model, stats, _ = load_checkpoint(args.model)
    if stats is None:
        raise ValidationError(f"{args.model}: checkpoint lacks normalization statistics")
    labels = np.array([m.dr_label for m in meta])
    if np.any(labels < 0):
        raise ValidationError("dataset records lack DR labels")
    if np.unique(labels).size < 2:
        raise ValidationError("DR labels contain a single class")
    train, val = holdout_split(labels, args.val_fraction, args.seed)
    cfg = TrainConfig(lr=args.lr, batch=args.batch, epochs=args.epochs, seed=args.seed)
    ft, metrics = fine_tune(model, mats, labels, stats, cfg, train, val)
    members = [CnnAttMember(ft, stats),
               LogisticMember(stats, seed=args.seed).fit(mats[train], labels[train]),
               CentroidMember(stats).fit(mats[train], labels[train])]
    precisions = [member_precision(m, mats[val], labels[val]) for m in members]
    out = Path(args.out)
    save_checkpoint(out / "finetuned.dscm", ft, stats, extra=dict(metrics={k: v for k, v in metrics.items()}))
    outputs = [str(out / "finetuned.dscm")]
    ens_metrics = {}
    try:
        ens = WmvEnsemble(members, precisions)
        weights = ens.weights
        ens_metrics = classification_metrics(labels[val], ens.predict(mats[val]))
    except ValueError:
        weights = np.zeros(len(members))
    outputs.append(_write_csv(out / "wmv.csv", ("member", "precision", "weight"),
                              [(m.name, float(p), float(w)) for m, p, w in zip(members, precisions, weights)]))
    metrics.pop("history", None)
    return outputs, dict(finetune=metrics, ensemble=ens_metrics)


def cmd_eval(args):
    from .encoding import encode_matrices
    from .nn.checkpoint import load_checkpoint
    from .nn.train import classification_metrics

    mats, meta, _ = _load_windows(args.data)
    model, stats, _ = load_checkpoint(args.model)
    labels = np.array([m.tis for m in meta])
    pred = np.concatenate([model.predict(encode_matrices(mats[i:i + 32], stats, model.dtype))
                           for i in range(0, len(mats), 32)])
    metrics = classification_metrics(labels, pred)
    outputs = []
    if args.out:
        outputs.append(_write_csv(Path(args.out) / "predictions.csv", ("uid", "tis", "predicted"),
                                  [(m.uid, m.tis, int(p)) for m, p in zip(meta, pred)]))
    return outputs, metrics


def cmd_risk(args):
    from .risk import LoadingBounds, mc_density_estimate, product_density, sample_r_hat, sfi

    bounds = LoadingBounds(args.alpha, args.beta)
    value = sfi(args.asr, bounds)
    print(f"SFI {value:.4f}")
    lo, hi = bounds.support
    rows = []
    for r in np.linspace(lo, hi, args.grid + 2)[1:-1]:
        row = [float(r), product_density(float(r), bounds)]
        if args.mc:
            est = mc_density_estimate(args.mc, float(r), bounds, seed=args.seed)
            row += [est.density, est.stderr]
        rows.append(row)
    header = ["r", "closed_form"] + (["mc", "stderr"] if args.mc else [])
    print(",".join(header))
    for row in rows:
        print(",".join(f"{v:.6f}" for v in row))
    extra = dict(sfi=value, asr=args.asr, alpha=bounds.alpha, beta=bounds.beta)
    if args.estimate_asr:
        samples = sample_r_hat(args.estimate_asr, args.seed)
        extra["asr_estimate"] = float(samples.mean())
    outputs = []
    if args.out:
        outputs.append(_write_csv(Path(args.out) / "risk.csv", header, rows))
    return outputs, extra


def cmd_cdr(args):
    from .cdr import CdrPolicy, aggregate_cdr, dispatch_dr, evaluate_policy, screen_critical
    from .risk import BASE_BOUNDS

    out = Path(args.out)
    shed = args.shed / 100
    curve = evaluate_policy(args.asr, BASE_BOUNDS, _percent_grid(args.shed_grid))
    outputs = [_write_csv(out / "policy_curve.csv", ("shed_fraction", "alpha", "beta", "sfi"),
                          [(c.shed_fraction, c.alpha, c.beta, c.sfi) for c in curve])]
    extra = dict(asr=args.asr, shed_fraction=shed)
    summary = [f"ASR {args.asr:.6g}", f"shed fraction {shed:.2%}"]
    summary += [f"s={c.shed_fraction:.2f} bounds=[{c.alpha:.4f}, {c.beta:.4f}] SFI={c.sfi:.4f}" for c in curve]
    if args.screen or args.data:
        sys_ = _system(args)
        scr = screen_critical(sys_, top=args.top)
        crit = set(scr.critical_lines)
        outputs.append(_write_csv(out / "critical_lines.csv", ("line", "tis", "lambda_max", "critical"),
                                  [(r.line, r.tis, float(r.lambda_max), int(r.line in crit)) for r in scr.results]))
        policy = CdrPolicy.from_system(sys_, scr.critical_lines, shed, args.asr)
        outputs.append(_write_csv(out / "critical_loads.csv", ("bus", "mw"),
                                  [(b, float(policy.load_mw.get(b, 0.0))) for b in policy.critical_loads]))
        extra.update(critical_lines=len(scr.critical_lines), critical_loads=len(policy.critical_loads))
        summary.append(f"critical lines ({len(scr.critical_lines)}): {scr.critical_lines}")
        summary.append(f"critical loads: {policy.critical_loads}")
        if scr.empty:
            summary.append("WARNING: no unstable line found; critical set empty")
        if args.data:
            _, meta, _ = _load_windows(args.data)
            disp = [dispatch_dr(m, policy, k=m.k) for m in meta]
            outputs.append(_write_csv(out / "dispatch.csv",
                                      ("uid", "label", "x1", "x2", "dr_effective", "affected_mw", "shed_mw"),
                                      [(d.uid, d.label, d.x1, d.x2, d.dr_effective, d.affected_mw,
                                        d.total_shed_mw) for d in disp]))
            extra["cdr"] = aggregate_cdr(disp)
            summary.append(f"CDR {extra['cdr']:.4f} over {len(disp)} scenarios")
    from .io import atomic_write_text

    atomic_write_text(out / "summary.txt", "\n".join(summary) + "\n")
    outputs.append(str(out / "summary.txt"))
    return outputs, extra


def cmd_report(args):
    from .report import build_report

    if args.data and not Path(args.data).exists():
        raise FileNotFoundError(f"{args.data}: dataset directory not found")
    res = build_report(args.out, args.data, args.model, args.asr, n_png=args.png)
    for w in res["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return res["outputs"], dict(warnings=res["warnings"])


HANDLERS = dict(gen=cmd_gen, encode=cmd_encode, train=cmd_train, finetune=cmd_finetune,
                eval=cmd_eval, risk=cmd_risk, cdr=cmd_cdr, report=cmd_report)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(usage())
        return EXIT_OK if argv else EXIT_USAGE
    command, rest = argv[0], argv[1:]
    if command not in HANDLERS:
        sys.stderr.write(f"unknown command: {command}\n{usage()}")
        return EXIT_USAGE
    t0 = time.perf_counter()
    summary = dict(command=command, seed=None, elapsed=0.0, outputs=[])
    code = EXIT_OK
    try:
        parser = build_parser()[command]
        pre, _ = parser.parse_known_args(rest)
        if pre.config:
            _apply_config(parser, read_config(pre.config))
        args = parser.parse_args(rest)
        summary["seed"] = args.seed
        outputs, extra = HANDLERS[command](args)
        summary["outputs"] = outputs
        summary.update(extra)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ArgError, ValidationError, ParseError, ValueError, FileNotFoundError) as exc:
        code = EXIT_VALIDATION
        summary["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
    except (GridError, Exception) as exc:  # noqa: BLE001 - runtime failures are reported, not raised
        code = EXIT_RUNTIME
        summary["error"] = f"{type(exc).__name__}: {exc}"
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
    summary["status"] = code
    summary["elapsed"] = round(time.perf_counter() - t0, 3)
    print(json.dumps(summary, sort_keys=True, default=_json_default))
    return code


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())
