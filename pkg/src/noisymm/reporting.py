"""Run-directory outputs and cross-run merging.

Every CSV written here starts with ``schema_version`` and ``config_hash``
columns; :data:`CSV_SCHEMAS` documents the remaining columns and is written
next to the outputs as ``schema.json``.
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path

import numpy as np


CSV_VERSION = 1

_EPOCH_DOC = {
    "epoch": "0-based epoch index (warm-up epochs included in the count)",
    "gamma": "weight on corrected labels used in this epoch (0 during warm-up)",
    "l_ins": "mean instance-level contrastive loss over batches",
    "l_cat": "mean category-level contrastive loss over full batches",
    "l_c": "l_ins + l_cat",
    "l_s": "mean supervised (hybrid) loss over batches",
    "train_top1": "accuracy against observed (noisy) training labels",
    "test_top1": "top-1 accuracy on the clean test split",
    "test_top5": "top-5 accuracy on the clean test split (1.0 when K <= 5)",
    "corrected_acc": "KNN-corrected label accuracy against true labels",
    "observed_acc": "observed label accuracy against true labels",
    "omega_v_clean": "mean visual weight over correctly corresponding samples",
    "omega_v_mismatched": "mean visual weight over mismatched samples",
    "omega_a_clean": "mean audio weight over correctly corresponding samples",
    "omega_a_mismatched": "mean audio weight over mismatched samples",
    "ce_clean_label": "mean per-sample CE (observed labels) over clean-labelled samples",
    "ce_noisy_label": "mean per-sample CE (observed labels) over noisy-labelled samples",
}

_RUN_DOC = {
    "schema_version": "CSV schema version",
    "config_hash": "hash of the resolved experiment config",
    "label": "run label from the config",
    "method": "baseline (plain CE) or contrastive variant: none, ins-only, cat-only, full",
    "seed": "training seed",
    "label_mode": "label noise mode",
    "label_rate": "requested label noise rate",
    "correspondence_rate": "requested correspondence noise rate",
}

CSV_SCHEMAS = {
    "report.csv": {**_RUN_DOC, "phase": "warmup or iterative", **_EPOCH_DOC},
    "weights.csv": {"schema_version": _RUN_DOC["schema_version"],
                    "config_hash": _RUN_DOC["config_hash"],
                    "id": "sample id", "omega_v": "visual correspondence weight (final epoch)",
                    "omega_a": "audio correspondence weight (final epoch)",
                    "correspondence_clean": "1 if the audio belongs to the sample",
                    "label_noisy": "1 if the observed label differs from the true label",
                    "corrected_label": "final KNN-corrected label"},
    "ce_trace.csv": {"schema_version": _RUN_DOC["schema_version"],
                     "config_hash": _RUN_DOC["config_hash"],
                     "method": _RUN_DOC["method"], "epoch": "epoch index",
                     "id": "sample id", "ce": "cross-entropy against the observed label",
                     "label_noisy": "1 if the observed label is wrong"},
    "summary.csv": {**_RUN_DOC, "sweep": "swept quantity (gamma, label-rate, correspondence-rate, "
                    "ablation) or empty", "value": "swept value",
                    "gamma_initial": "initial gamma", "gamma_final": "final gamma",
                    "test_top1": "final clean test top-1", "test_top5": "final clean test top-5",
                    "corrected_acc": "final corrected-label accuracy"},
    "grid.csv": {"schema_version": "CSV schema version", "config_hashes": "';'-joined config hashes",
                 "label_mode": "label noise mode", "label_rate": "label noise rate",
                 "correspondence_rate": "correspondence noise rate", "method": _RUN_DOC["method"],
                 "sweep": "sweep name", "value": "sweep value", "n_runs": "number of seeds merged",
                 "top1_mean": "mean final top-1", "top1_std": "population std of final top-1",
                 "top5_mean": "mean final top-5", "top5_std": "population std of final top-5"},
    "epoch_series.csv": {"schema_version": "CSV schema version", "config_hash": "run config hash",
                         "run": "run directory", "method": _RUN_DOC["method"], "epoch": "epoch",
                         "train_top1": "accuracy on noisy training labels",
                         "test_top1": "clean test top-1"},
    "weight_hist.csv": {"schema_version": "CSV schema version", "config_hashes": "merged hashes",
                        "modality": "v or a", "bin_lo": "bin lower edge", "bin_hi": "bin upper edge",
                        "clean": "count of correctly corresponding samples",
                        "mismatched": "count of mismatched samples"},
}


class ReportError(ValueError):
    pass


def write_schema(directory) -> None:
    Path(directory, "schema.json").write_text(
        json.dumps({"csv_version": CSV_VERSION, "files": CSV_SCHEMAS}, indent=2, sort_keys=True) + "\n")


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _runs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "report.csv").is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.rglob("report.csv")))
        else:
            raise ReportError(f"{p}: no report.csv found")
    if not found:
        raise ReportError("no runs found")
    return sorted(set(found))


def _check_version(rows, path):
    versions = {r.get("schema_version") for r in rows}
    if versions != {str(CSV_VERSION)}:
        raise ReportError(f"{path}: schema_version {sorted(v or '?' for v in versions)}, "
                          f"expected {CSV_VERSION}")


def merge(run_dirs, out_dir, bins: int = 20) -> dict[str, Path]:
    """Merge runs into ``grid.csv``, ``epoch_series.csv`` and ``weight_hist.csv``.

    Runs are grouped by noise setting, method and sweep point; each group's
    final top-1/top-5 are summarised as mean and population std over seeds.
    """
    runs = _runs(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[tuple[str, float, float]]] = defaultdict(list)
    series = []
    hist_v = {True: np.zeros(bins, int), False: np.zeros(bins, int)}
    hist_a = {True: np.zeros(bins, int), False: np.zeros(bins, int)}
    hashes = set()
    edges = np.linspace(0.0, 1.0, bins + 1)
    for run in runs:
        rows = read_csv(run / "report.csv")
        _check_version(rows, run / "report.csv")
        meta = json.loads((run / "run.json").read_text()) if (run / "run.json").exists() else {}
        by_method: dict[str, list[dict]] = defaultdict(list)
        for r in rows:
            by_method[r["method"]].append(r)
            hashes.add(r["config_hash"])
            series.append([CSV_VERSION, r["config_hash"], str(run), r["method"], r["epoch"],
                           r["train_top1"], r["test_top1"]])
        for method, mrows in by_method.items():
            last = mrows[-1]
            key = (last["label_mode"], last["label_rate"], last["correspondence_rate"], method,
                   meta.get("sweep", ""), meta.get("value", ""))
            groups[key].append((last["config_hash"], float(last["test_top1"]), float(last["test_top5"])))
        wpath = run / "weights.csv"
        if wpath.exists():
            wrows = read_csv(wpath)
            _check_version(wrows, wpath)
            for r in wrows:
                clean = r["correspondence_clean"] == "1"
                for hist, col in ((hist_v, "omega_v"), (hist_a, "omega_a")):
                    b = min(int(np.searchsorted(edges, float(r[col]), side="right")) - 1, bins - 1)
                    hist[clean][max(b, 0)] += 1
    grid_rows = []
    for key in sorted(groups):
        vals = groups[key]
        t1 = np.array([v[1] for v in vals])
        t5 = np.array([v[2] for v in vals])
        grid_rows.append([CSV_VERSION, ";".join(sorted({v[0] for v in vals})), *key, len(vals),
                          repr(float(t1.mean())), repr(float(t1.std())),
                          repr(float(t5.mean())), repr(float(t5.std()))])
    files = {
        "grid.csv": csv_text(list(CSV_SCHEMAS["grid.csv"]), grid_rows),
        "epoch_series.csv": csv_text(list(CSV_SCHEMAS["epoch_series.csv"]), series),
    }
    joined = ";".join(sorted(hashes))
    hist_rows = []
    for modality, hist in (("v", hist_v), ("a", hist_a)):
        for b in range(bins):
            hist_rows.append([CSV_VERSION, joined, modality, repr(float(edges[b])),
                              repr(float(edges[b + 1])), int(hist[True][b]), int(hist[False][b])])
    files["weight_hist.csv"] = csv_text(list(CSV_SCHEMAS["weight_hist.csv"]), hist_rows)
    written = {}
    for name, text in files.items():
        (out / name).write_text(text)
        written[name] = out / name
    write_schema(out)
    return written
