"""Command line: simulate, train, evaluate, compare.

Verbosity comes from the ``GLUCOCRNN_LOG`` environment variable
(``WARNING`` by default).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import baselines, cohort, metrics
from .config import RunConfig
from .datapipe import load_series, make_windows
from .experiment import (METHODS, ArxPredictor, NetworkPredictor, evaluate_predictor,
                         fit_method, prepare, run_cell)
from .model import load as load_model, save as save_model
from .modelfile import ModelFileError, read_container
from .plot import overlay_svg

log = logging.getLogger("glucocrnn")

TRACE_HEADER = ["time", "reference", "prediction", "masked"]


class CommandError(RuntimeError):
    pass


def _csv_list(text: str, cast=str) -> list:
    return [cast(v.strip()) for v in text.split(",") if v.strip()]


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _prepare_out(path, force: bool = True) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, cfg: RunConfig):
    return load_series(path, sigma_steps=cfg.smooth_sigma, max_jump=cfg.max_jump, max_gap=cfg.max_gap)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, force=args.force)
    paths = cohort.generate_cohort(args.subjects, args.days, args.seed, out,
                                   cgm_noise_sd=cfg.cgm_noise_sd, cgm_noise_ar=cfg.cgm_noise_ar)
    cfg.dump(out / "config.json")
    print(f"wrote {len(paths)} subject files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args).updated(ph_min=args.ph, variant=args.variant)
    out = _prepare_out(args.out)
    series = _load(args.data, cfg)
    data = prepare(series, cfg.ph_steps, cfg.window, cfg.train_fraction, cfg.train_days)
    predictor = fit_method(cfg.variant, data, cfg)
    if isinstance(predictor, ArxPredictor):
        path = out / "model.arx"
        baselines.save_arx(predictor.model, path)
        n_params = predictor.model.coef.size
    else:
        path = out / "model.gcm"
        save_model(predictor.model, path)
        predictor.history.to_csv(out / "history.csv")
        n_params = predictor.model.count_params()
    cfg.dump(out / "config.json")
    print(f"{cfg.variant}: {n_params} parameters, {len(data.train)} training windows -> {path}")
    return 0


def _load_predictor(path):
    try:
        header, _ = read_container(path)
    except OSError as exc:
        raise CommandError(str(exc)) from exc
    if header["kind"] == "arx":
        model = baselines.load_arx(path)
        return ArxPredictor(model), model.ph_steps, None, None
    model = load_model(path)
    return NetworkPredictor(model, method=model.spec.variant), model.spec.ph_steps, model.norm, model.spec.window


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    predictor, ph_steps, norm, window = _load_predictor(args.model)
    if args.ph is not None and args.ph != 5 * ph_steps:
        raise CommandError(f"model predicts {5 * ph_steps} min ahead, --ph asked for {args.ph}")
    cfg = cfg.updated(ph_min=5 * ph_steps, window=window or cfg.window)
    out = _prepare_out(args.out)
    series = _load(args.data, cfg)
    data = prepare(series, ph_steps, cfg.window, cfg.train_fraction, cfg.train_days)
    if norm is not None:
        # windows must be normalized with the statistics the network was trained on
        samples = make_windows(series, norm, cfg.window, ph_steps)
        data.stats = norm
        data.test = [x for x in samples if x.t_index >= data.test_start]
    row, trace = evaluate_predictor(predictor, data, cfg, subject=Path(args.data).stem)
    preds = predictor.predict(data, data.test)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for x, p in zip(data.test, preds):
            k = x.t_index + ph_steps
            ts = datetime.fromtimestamp(series.start_time + k * series.step, tz=timezone.utc)
            masked = not trace.eval_mask[k - data.test_start]
            w.writerow([ts.isoformat(), repr(float(series.glucose[k])), repr(float(p)), int(masked)])
    metrics.write_report_csv([row], out / "report.csv")
    if args.svg:
        day = slice(0, min(288, len(trace.reference)))
        overlay_svg(trace.reference[day], np.where(trace.eval_mask, trace.prediction, np.nan)[day],
                    out / "overlay.svg", title=f"{row['subject']} {row['method']} PH {row['ph_min']} min")
    cfg.dump(out / "config.json")
    print(f"{row['subject']} {row['method']} PH {row['ph_min']} min: RMSE {row['rmse']:.2f} mg/dL, "
          f"MARD {row['mard']:.2f} %, MCC hyper {row['mcc_hyper']:.2f}, MCC hypo {row['mcc_hypo']:.2f}, "
          f"PH_eff {row['ph_eff_min']:.0f} min; {row['n_eval']} evaluated, {row['n_masked']} masked")
    return 0


def _cohort_files(cohort_dir: Path) -> list[tuple[str, Path]]:
    manifest = cohort_dir / "manifest.json"
    if manifest.exists():
        subjects = json.loads(manifest.read_text())["subjects"]
        return [(name, cohort_dir / info["file"]) for name, info in sorted(subjects.items())]
    files = sorted(cohort_dir.glob("*.csv"))
    return [(p.stem, p) for p in files]


def _compare_cell(job):
    name, path, method, cfg_dict, label = job
    cfg = RunConfig.from_dict(cfg_dict)
    series = _load(path, cfg)
    res = run_cell(series, method, cfg, subject=name)
    res.row["method"] = label
    return res.row, res.error


def compare_jobs(files, methods, phs, months, cfg: RunConfig) -> list[tuple]:
    jobs = []
    for ph in phs:
        for m in months:
            for method in methods:
                label = method if m is None else f"{method}@{m:g}mo"
                cell_cfg = cfg.updated(ph_min=ph, train_months=m)
                for name, path in files:
                    jobs.append((name, str(path), method, vars(cell_cfg).copy(), label))
    return jobs


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    methods = _csv_list(args.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise CommandError(f"unknown methods {bad}; choose from {list(METHODS)}")
    phs = _csv_list(args.ph, int)
    months = _csv_list(args.train_months, float) if args.train_months else [cfg.train_months]
    files = _cohort_files(Path(args.cohort))
    if not files:
        raise CommandError(f"no subject files in {args.cohort}")
    out = _prepare_out(args.out)
    jobs = compare_jobs(files, methods, phs, months, cfg)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_compare_cell, jobs))
    else:
        results = [_compare_cell(j) for j in jobs]
    rows = [r for r, _ in results]
    failures = {f"{r['subject']}/{r['method']}/{r['ph_min']}": e for r, e in results if e}
    metrics.write_report_csv(rows, out / "report.csv")
    summary = metrics.summarize(rows)
    metrics.write_summary_csv(summary, out / "summary.csv")
    table = metrics.render_table(summary)
    (out / "summary.txt").write_text(table)
    (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    cfg.dump(out / "config.json")
    print(table)
    if failures:
        print(f"{len(failures)} of {len(rows)} cells failed; see {out / 'failures.json'}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glucocrnn", description="CRNN glucose forecasting workflow")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    s.add_argument("--subjects", type=int, required=True)
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one model on one subject")
    t.add_argument("--data", required=True)
    t.add_argument("--ph", type=int, choices=(30, 60), default=None)
    t.add_argument("--variant", choices=METHODS, default=None)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a model on a subject's test half")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ph", type=int, choices=(30, 60), default=None)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--svg", action="store_true", help="write a one-day overlay plot")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="train and evaluate every (subject, method, PH) cell")
    c.add_argument("--cohort", required=True)
    c.add_argument("--methods", default="crnn,arx")
    c.add_argument("--ph", default="30")
    c.add_argument("--train-months", default=None, help="comma list, e.g. 1,2,3")
    c.add_argument("--config")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GLUCOCRNN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and args.subjects < 1:
        parser.error("--subjects must be >= 1")
    if args.command == "simulate" and args.days < 1:
        parser.error("--days must be >= 1")
    try:
        return args.func(args)
    except (CommandError, ModelFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
