"""Report bundle: intensity PNGs, CSV tables and a plain-text summary."""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np

from .cdr import evaluate_policy
from .encoding import NormStats, build_intensity_map, encode_matrices, save_png
from .io import atomic_write_text, read_dataset
from .risk import BASE_BOUNDS, DEFAULT_ASR

WINDOWS_FILE = "windows.dsc"


def _csv(rows, header) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def build_report(out_dir, data_dir=None, model_path=None, asr: float = DEFAULT_ASR,
                 n_png: int = 8, max_interpret: int = 32) -> dict:
    """Write the bundle into ``out_dir``; returns {"outputs": [...], "warnings": [...]}."""
    from .nn.checkpoint import load_checkpoint
    from .nn.train import interpret

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs, warnings, summary = [], [], []

    curve = evaluate_policy(asr, BASE_BOUNDS)
    p = out / "sfi_curve.csv"
    atomic_write_text(p, _csv([(c.shed_fraction, c.alpha, c.beta, c.sfi) for c in curve],
                              ("shed_fraction", "alpha", "beta", "sfi")))
    outputs.append(p)
    summary.append(f"ASR used: {asr:.6g}")
    summary.append(f"SFI at base bounds: {curve[0].sfi:.4f}")
    summary.append(f"SFI at {curve[-1].shed_fraction:.0%} shedding: {curve[-1].sfi:.4f}")

    data = meta = None
    if data_dir is not None:
        path = Path(data_dir) / WINDOWS_FILE
        if not path.exists():
            raise FileNotFoundError(f"{path}: dataset not found")
        data, meta = read_dataset(path)
        mats = data[:, 0].astype(np.float64)
        summary.append(f"Records: {len(meta)} (unstable: {sum(m.tis for m in meta)})")

    model = stats = None
    extra = {}
    if model_path is not None and Path(model_path).exists():
        model, stats, extra = load_checkpoint(model_path)
    else:
        warnings.append("no trained model supplied: interpretability and fold metrics skipped")

    if data is not None:
        stats_png = stats if stats is not None and stats.row_min.size == mats.shape[1] else NormStats.fit(mats)
        png_dir = out / "png"
        for m, rec in list(zip(mats, meta))[:n_png]:
            target = png_dir / f"scenario_{rec.uid:05d}.png"
            save_png(build_intensity_map(m, stats_png), target)
            outputs.append(target)

    if model is not None:
        folds = extra.get("fold_metrics", [])
        p = out / "fold_metrics.csv"
        atomic_write_text(p, _csv([(int(f["fold"]), int(f["n"]), float(f["accuracy"]),
                                    float(f["precision"]), float(f["recall"])) for f in folds],
                                  ("fold", "n", "accuracy", "precision", "recall")))
        outputs.append(p)
        if folds:
            summary.append(f"Mean fold accuracy: {np.mean([f['accuracy'] for f in folds]):.4f}")
        if data is not None:
            vols = encode_matrices(mats[:max_interpret], stats, model.dtype)
            it = interpret(model, vols)
            p = out / "anw.csv"
            atomic_write_text(p, _csv([(f"{k}x{k}", float(w)) for k, w in zip(it.kernel_sizes, it.kernel_anw)],
                                      ("kernel", "anw")))
            outputs.append(p)
            p = out / "attention_indices.csv"
            rows = [(h + 1, int(i1), int(i2), float(it.head_mass[h, i1]), float(it.head_mass[h, i2]))
                    for h, (i1, i2) in enumerate(it.head_top_indices)]
            atomic_write_text(p, _csv(rows, ("head", "index_1", "index_2", "mass_1", "mass_2")))
            outputs.append(p)
            dom = it.kernel_sizes[int(np.argmax(it.kernel_anw))]
            summary.append(f"Dominant kernel: {dom}x{dom}")
        else:
            warnings.append("no dataset supplied: interpretability skipped")

    for w in warnings:
        summary.append(f"WARNING: {w}")
    p = out / "summary.txt"
    atomic_write_text(p, "\n".join(summary) + "\n")
    outputs.append(p)
    return {"outputs": [str(o) for o in outputs], "warnings": warnings}
