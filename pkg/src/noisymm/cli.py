"""Command line front end: ``noisymm generate | train | report``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import reporting as R
from . import synthdata as S
from . import trainer as TR
from .model import save_checkpoint

log = logging.getLogger("noisymm")

GAMMA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
LABEL_RATE_GRID = (0.2, 0.4, 0.6, 0.8)
CORRESPONDENCE_RATE_GRID = (0.1, 0.2, 0.3, 0.4)
RUN_COLUMNS = ["schema_version", "config_hash", "label", "method", "seed",
               "label_mode", "label_rate", "correspondence_rate"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="noisymm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write train/test dataset files and a noise audit")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override generator and noise seeds")
    g.add_argument("--sweep", choices=["label-rate", "correspondence-rate"],
                   help="write one dataset directory per rate on the standard grid")

    t = sub.add_parser("train", help="run the iterative training procedure")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--sweep", choices=["gamma", "label-rate", "correspondence-rate"])
    t.add_argument("--ablate", action="store_true", help="run none / ins-only / cat-only / full")
    t.add_argument("--variant", choices=TR.VARIANTS)
    t.add_argument("--no-baseline", action="store_true", help="skip the plain cross-entropy run")

    r = sub.add_parser("report", help="merge run directories into comparison tables")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--bins", type=int, default=20)
    return p


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _write_dataset_dir(cfg: C.ExperimentConfig, out: Path, config_text: str) -> dict:
    splits = S.generate(cfg.generator)
    train = S.apply_noise(splits.train, cfg.noise)
    out.mkdir(parents=True, exist_ok=True)
    S.save_splits(S.Splits(train, splits.test, cfg.generator), out)
    audit = {"schema_version": R.CSV_VERSION, "config_hash": cfg.hash(), **S.noise_audit(train)}
    (out / "audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    (out / "config.yaml").write_text(config_text)
    (out / "resolved_config.yaml").write_text(cfg.dump())
    return audit


def cmd_generate(args) -> int:
    cfg, text = C.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed, data=True)
    out = Path(args.out)
    if args.sweep is None:
        audit = _write_dataset_dir(cfg, out, text)
        print(f"wrote {out}: label rate {audit['label_rate_achieved']:.3f}, "
              f"correspondence rate {audit['correspondence_rate_achieved']:.3f}")
        return 0
    for cfg_i, name, _ in _noise_sweep(cfg, args.sweep):
        audit = _write_dataset_dir(cfg_i, out / name, text)
        print(f"wrote {out / name}: label rate {audit['label_rate_achieved']:.3f}, "
              f"correspondence rate {audit['correspondence_rate_achieved']:.3f}")
    return 0


def _noise_sweep(cfg: C.ExperimentConfig, sweep: str):
    if sweep == "label-rate":
        mode = cfg.noise.label_mode if cfg.noise.label_mode != "none" else "symmetric"
        for rate in LABEL_RATE_GRID:
            noise = dataclasses.replace(cfg.noise, label_mode=mode, label_rate=rate)
            yield dataclasses.replace(cfg, noise=noise), f"label_{rate:.2f}", rate
    elif sweep == "correspondence-rate":
        for rate in CORRESPONDENCE_RATE_GRID:
            noise = dataclasses.replace(cfg.noise, correspondence_rate=rate)
            yield dataclasses.replace(cfg, noise=noise), f"corr_{rate:.2f}", rate
    else:
        raise UsageError(f"unknown noise sweep {sweep!r}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_data(cfg: C.ExperimentConfig) -> S.Splits:
    if cfg.data_dir:
        d = Path(cfg.data_dir)
        if not (d / "train.nmm").is_file() or not (d / "test.nmm").is_file():
            raise FileNotFoundError(f"dataset not found in {d} (expected train.nmm and test.nmm)")
        return S.load_splits(d)
    splits = S.generate(cfg.generator)
    return S.Splits(S.apply_noise(splits.train, cfg.noise), splits.test, cfg.generator)


def _run_columns(cfg: C.ExperimentConfig, method: str, train: S.MultimodalDataset) -> dict:
    ln = train.label_noise or {}
    cn = train.correspondence_noise or {}
    return dict(zip(RUN_COLUMNS, [R.CSV_VERSION, cfg.hash(), cfg.label, method, cfg.train.seed,
                                  ln.get("mode", "none"), ln.get("rate", 0.0), cn.get("rate", 0.0)]))


def run_experiment(cfg: C.ExperimentConfig, out: Path, config_text: str,
                   methods: list[str], meta: dict | None = None) -> list[dict]:
    """Train every method in ``methods`` ("baseline" or a variant) and write one run directory."""
    splits = _load_data(cfg)
    train, test = splits.train, splits.test
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    csv_parts, jsonl, ce_rows, summary = [], [], [], []
    final_model, final_report = None, None
    for method in methods:
        if method == "baseline":
            model, report = TR.baseline(train, cfg.train, test)
        else:
            tcfg = dataclasses.replace(cfg.train, variant=method)
            model, report = TR.run(TR.build_model(train, tcfg), train, tcfg, test)
            final_model, final_report = model, report
        extra = _run_columns(cfg, method, train)
        text = report.to_csv(extra, include_warmup=True)
        csv_parts.append(text if not csv_parts else text.split("\n", 1)[1])
        jsonl.append(report.to_jsonl(extra))
        records = report.rows(include_warmup=True)
        for rec, ce in zip(records, report.ce_trace):
            noisy = train.label_noisy
            ce_rows.extend([R.CSV_VERSION, h, method, rec.epoch, int(i), repr(float(c)), int(n)]
                           for i, c, n in zip(train.ids, ce, noisy))
        fin = report.final
        summary.append({**extra, "gamma_initial": cfg.train.gamma_initial,
                        "gamma_final": cfg.train.gamma_final, "test_top1": fin.test_top1,
                        "test_top5": fin.test_top5, "corrected_acc": fin.corrected_acc})
    (out / "report.csv").write_text("".join(csv_parts))
    (out / "report.jsonl").write_text("".join(jsonl))
    (out / "ce_trace.csv").write_text(R.csv_text(list(R.CSV_SCHEMAS["ce_trace.csv"]), ce_rows))
    if final_report is not None and final_report.omega_a is not None:
        wrows = [[R.CSV_VERSION, h, int(i), repr(float(wv)), repr(float(wa)), int(c), int(n), int(y)]
                 for i, wv, wa, c, n, y in zip(train.ids, final_report.omega_v, final_report.omega_a,
                                              train.correspondence_clean, train.label_noisy,
                                              final_report.corrected)]
        (out / "weights.csv").write_text(R.csv_text(list(R.CSV_SCHEMAS["weights.csv"]), wrows))
    if final_model is not None:
        save_checkpoint(final_model, out / "checkpoint.nmm",
                        meta={"config_hash": h, "schema_version": R.CSV_VERSION})
    (out / "config.yaml").write_text(config_text)
    (out / "resolved_config.yaml").write_text(cfg.dump())
    (out / "run.json").write_text(json.dumps({"schema_version": R.CSV_VERSION, "config_hash": h,
                                              "methods": methods, **(meta or {})},
                                             indent=2, sort_keys=True) + "\n")
    R.write_schema(out)
    return summary


def _write_summary(out: Path, rows: list[dict]) -> None:
    cols = list(R.CSV_SCHEMAS["summary.csv"])
    body = [[_cell(r.get(c, "")) for c in cols] for r in rows]
    (out / "summary.csv").write_text(R.csv_text(cols, body))


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def cmd_train(args) -> int:
    cfg, text = C.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.variant:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, variant=args.variant))
    if args.ablate and args.sweep:
        raise UsageError("--ablate and --sweep are mutually exclusive")
    if args.sweep in ("label-rate", "correspondence-rate") and cfg.data_dir:
        raise UsageError("noise-rate sweeps regenerate data; remove data_dir from the config")
    out = Path(args.out)
    base = [] if args.no_baseline else ["baseline"]
    rows: list[dict] = []
    if args.ablate:
        for variant in TR.VARIANTS:
            rows += [dict(r, sweep="ablation", value=variant) for r in
                     run_experiment(cfg, out / variant, text, [variant],
                                    {"sweep": "ablation", "value": variant})]
        if base:
            rows += [dict(r, sweep="ablation", value="baseline") for r in
                     run_experiment(cfg, out / "baseline", text, base,
                                    {"sweep": "ablation", "value": "baseline"})]
        _write_summary(out, rows)
        (out / "ablation.csv").write_text((out / "summary.csv").read_text())
    elif args.sweep == "gamma":
        for g in GAMMA_GRID:
            cfg_g = dataclasses.replace(cfg, train=dataclasses.replace(
                cfg.train, gamma_initial=g, gamma_final=g))
            rows += [dict(r, sweep="gamma", value=g) for r in
                     run_experiment(cfg_g, out / f"gamma_{g:.1f}", text, [cfg.train.variant],
                                    {"sweep": "gamma", "value": g})]
        if base:
            rows += [dict(r, sweep="gamma", value="baseline") for r in
                     run_experiment(cfg, out / "baseline", text, base, {"sweep": "gamma",
                                                                        "value": "baseline"})]
        _write_summary(out, rows)
        (out / "gamma_sweep.csv").write_text((out / "summary.csv").read_text())
    elif args.sweep:
        for cfg_i, name, rate in _noise_sweep(cfg, args.sweep):
            rows += [dict(r, sweep=args.sweep, value=rate) for r in
                     run_experiment(cfg_i, out / name, text, base + [cfg.train.variant],
                                    {"sweep": args.sweep, "value": rate})]
        _write_summary(out, rows)
    else:
        rows = run_experiment(cfg, out, text, base + [cfg.train.variant])
        _write_summary(out, rows)
    R.write_schema(out)
    for r in rows:
        print(f"{r.get('value', '')!s:>9} {r['method']:>9}  top1={r['test_top1']:.4f}  "
              f"top5={r['test_top5']:.4f}")
    return 0


def cmd_report(args) -> int:
    written = R.merge(args.runs, args.out, bins=args.bins)
    for name, path in written.items():
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"generate": cmd_generate, "train": cmd_train, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except UsageError as err:
        print(f"noisymm: error: {err}", file=sys.stderr)
        return 1
    except (C.ConfigError, R.ReportError, S.NoiseError, FileNotFoundError, OSError,
            TR.TrainingDiverged, ValueError) as err:
        print(f"noisymm: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
