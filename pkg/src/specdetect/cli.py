"""Command-line pipeline: gen, train, baseline, inject, detect, eval, rerun.

Each command writes its artifacts plus one ``run_manifest.json`` holding the
resolved arguments; ``specdetect rerun <manifest>`` replays it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, baseline_ls, lstm_core, pipeline, synthgen, training
from .core_types import (
    FORMAT_VERSION, NormalizationParams, NumericalError, ValidationError,
    read_dataset, read_pass, write_dataset, write_pass,
)
from .detection import (
    DetectionConfig, DetectionEvent, EventKind, InterferenceSpec, event_matches, exact_match,
    ground_truth_events, inject, precision_recall, thresholds,
)

log = logging.getLogger("specdetect")

MANIFEST = "run_manifest.json"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
PATH_ARGS = ("out", "data", "config", "model", "pass_dir", "inject", "spec", "ground_truth")


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x: float) -> str:
    return f"{x:.10g}"


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc


def _interferers(path) -> list[InterferenceSpec]:
    doc = _load_json(path)
    if isinstance(doc, dict) and "interferers" in doc:
        if doc.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format_version")
        doc = doc["interferers"]
    items = doc if isinstance(doc, list) else [doc]
    try:
        return [InterferenceSpec(**item) for item in items]
    except TypeError as exc:
        raise ValidationError(f"{path}: bad interferer entry ({exc})") from exc


def _gt_entry(p, specs, L) -> dict:
    return {"interferers": [dataclasses.asdict(s) for s in specs],
            "events": [e.to_json() for e in ground_truth_events(p, specs, L)]}


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> dict:
    cfg = synthgen.SynthConfig(seed=args.seed)
    if args.config:
        cfg = synthgen.with_overrides(cfg, _load_json(args.config))
        if args.seed_given:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    ds = synthgen.gen_dataset(cfg)
    write_dataset(ds, args.out)
    return {"config": {"seed": cfg.seed, "n_train": list(cfg.n_train), "n_test": list(cfg.n_test),
                       "pass_length_range": list(cfg.pass_length_range)},
            "seeds": {"dataset": cfg.seed}}


def cmd_train(args) -> dict:
    cfg = training.TrainConfig(learning_rate=args.lr, predictor_epochs=args.epochs,
                               classifier_epochs=args.classifier_epochs, loss=args.loss,
                               truncation_span=args.truncation_span, seed=args.seed, h=args.hidden,
                               loss_scale=args.loss_scale)
    ds = read_dataset(args.data, splits=("train",))
    norm = NormalizationParams()
    params, pred_report, cls_report = training.train(ds.train_passes, cfg, norm)
    out = Path(args.out)
    lstm_core.save_model(params, out / "model.json", norm)
    _write_csv(out / "loss_report.csv", ["epoch", "loss"],
               ((k, repr(v)) for k, v in enumerate(pred_report.losses)))
    _write_csv(out / "classifier_loss_report.csv", ["epoch", "loss"],
               ((k, repr(v)) for k, v in enumerate(cls_report.losses)))
    log.info("predictor loss %.6g -> %.6g, classifier loss %.6g -> %.6g",
             pred_report.initial, pred_report.final, cls_report.initial, cls_report.final)
    return {"config": dataclasses.asdict(cfg), "seeds": {"init": cfg.seed},
            "timings": {"predictor_s": pred_report.duration_s,
                        "classifier_s": cls_report.duration_s}}


def cmd_baseline(args) -> dict:
    ds = read_dataset(args.data, splits=("train",))
    norm = NormalizationParams()
    basis = baseline_ls.compute_basis(ds.train_passes, norm)
    baseline_ls.save_basis(basis, Path(args.out) / "basis.json", norm)
    return {"config": {"counts": list(basis.counts)}}


def cmd_inject(args) -> dict:
    specs = _interferers(args.spec)
    out = Path(args.out)
    if args.pass_dir:
        p = read_pass(args.pass_dir)
        for s in specs:
            p = inject(p, s)
        write_pass(p, out)
        truth = {p.id: _gt_entry(p, specs, args.window)}
    else:
        ds = read_dataset(args.data)
        injected = []
        for p in ds.test_passes:
            for s in specs:
                p = inject(p, s)
            injected.append(p)
        write_dataset(dataclasses.replace(ds, test_passes=injected), out)
        truth = {p.id: _gt_entry(p, specs, args.window) for p in injected}
    _dump(out / "ground_truth_events.json",
          {"format_version": FORMAT_VERSION, "window_length": args.window, "passes": truth})
    return {"config": {"interferers": [dataclasses.asdict(s) for s in specs]},
            "seeds": {"noise": [s.noise_seed for s in specs]}}


def _detection_cfg(args) -> DetectionConfig:
    return DetectionConfig(k_int=args.k_int, spike_factor=args.spike_factor,
                           max_spike_width=args.max_spike_width,
                           warmup_steps=args.warmup_steps, spike_gap=args.spike_gap)


def cmd_detect(args) -> dict:
    pred = pipeline.load_predictor(args.model, args.predictor)
    p = read_pass(args.pass_dir)
    specs = _interferers(args.inject) if args.inject else []
    for s in specs:
        p = inject(p, s)
    cfg = _detection_cfg(args)
    res = pipeline.run_pass(pred, p, args.window, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr = res.trace
    _write_csv(out / "trace.csv", ["t", "mmse", "argmax_window"],
               ((int(t), _g(m), int(j)) for t, m, j in zip(tr.t, tr.mmse, tr.argmax_window)))
    _dump(out / "events.json", [e.to_json() for e in res.events])
    theta_int, theta_spike = thresholds(tr.mmse[cfg.warmup_steps:], cfg)
    kinds = [e.kind.value for e in res.events]
    report = {"pass_id": p.id, "predictor": args.predictor, "window_length": args.window,
              "theta_int": theta_int, "theta_spike": theta_spike,
              "median_mmse": float(np.median(tr.mmse[cfg.warmup_steps:])),
              "num_interference": kinds.count("INTERFERENCE"),
              "num_transition_spike": kinds.count("TRANSITION_SPIKE"),
              "p_error": res.p_error}
    if specs:
        truth = ground_truth_events(p, specs, args.window)
        report["exact_match"] = exact_match(res.events, truth)
        _dump(out / "ground_truth_events.json",
              {"format_version": FORMAT_VERSION, "window_length": args.window,
               "passes": {p.id: _gt_entry(p, specs, args.window)}})
    _dump(out / "report.json", report)
    if args.save_predictions:
        y_db = res.y_hat * pred.norm.b + pred.norm.a
        _write_csv(out / "predictions.csv", ["t", "class"] + [f"bin_{n:04d}" for n in range(pred.d)],
                   ([t + 1, int(c)] + [_g(v) for v in row]
                    for t, (c, row) in enumerate(zip(res.classes, y_db))))
    return {"config": {"detection": dataclasses.asdict(cfg),
                       "interferers": [dataclasses.asdict(s) for s in specs]}}


def cmd_eval(args) -> dict:
    pred = pipeline.load_predictor(args.model, args.predictor)
    gt_doc = _load_json(args.ground_truth)
    L = int(gt_doc.get("window_length", args.window))
    truth_by_pass = gt_doc.get("passes", {})
    ds = read_dataset(args.data, splits=("test",))
    cfg = _detection_cfg(args)
    per_pass = {}
    counts = np.zeros(4, dtype=int)  # matched found, found, matched truth, truth
    for p in ds.test_passes:
        if p.id not in truth_by_pass:
            raise ValidationError(f"ground truth has no entry for pass {p.id}")
        truth = [DetectionEvent.from_json(e) for e in truth_by_pass[p.id]["events"]]
        res = pipeline.run_pass(pred, p, L, cfg)
        counts += _interference_counts(res.events, truth)
        prec, rec = precision_recall(res.events, truth)
        per_pass[p.id] = {"p_error": res.p_error, "exact_match": exact_match(res.events, truth),
                          "precision": prec, "recall": rec,
                          "events": [e.to_json() for e in res.events]}
    metrics = {"predictor": args.predictor, "window_length": L,
               "p_error_max": max(v["p_error"] for v in per_pass.values()),
               "p_error_mean": float(np.mean([v["p_error"] for v in per_pass.values()])),
               "precision": counts[0] / counts[1] if counts[1] else 1.0,
               "recall": counts[2] / counts[3] if counts[3] else 1.0,
               "passes": per_pass}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "metrics.json", metrics)
    if args.predictor == "lstm":
        lat = pipeline.step_latencies(pred.model, ds.test_passes, pred.norm, args.latency_steps)
        _dump(out / "latency.json", {"steps": len(lat), "median_ms": 1e3 * float(np.median(lat)),
                                     "p99_ms": 1e3 * float(np.percentile(lat, 99))})
    return {"config": {"detection": dataclasses.asdict(cfg)}}


def _interference_counts(found, truth) -> np.ndarray:
    f = [e for e in found if e.kind is EventKind.INTERFERENCE]
    g = [e for e in truth if e.kind is EventKind.INTERFERENCE]
    return np.array([sum(any(event_matches(e, t) for t in g) for e in f), len(f),
                     sum(any(event_matches(e, t) for e in f) for t in g), len(g)])


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "baseline": cmd_baseline, "inject": cmd_inject,
            "detect": cmd_detect, "eval": cmd_eval}


# -- argument parsing ------------------------------------------------------------

def _detection_flags(sp) -> None:
    sp.add_argument("--window", type=int, default=64, help="frequency window length L in bins")
    sp.add_argument("--k-int", type=float, default=10.0,
                    help="interference threshold = median + k_int * MAD")
    sp.add_argument("--spike-factor", type=float, default=20.0,
                    help="spike threshold as a multiple of the interference threshold")
    sp.add_argument("--max-spike-width", type=int, default=2,
                    help="most steps above the spike threshold a transition spike may have")
    sp.add_argument("--warmup-steps", type=int, default=2,
                    help="leading trace steps left out of thresholds and events")
    sp.add_argument("--spike-gap", type=int, default=1,
                    help="steps below threshold a transition spike's settling tail may skip")
    sp.add_argument("--predictor", choices=("lstm", "baseline"), default="lstm",
                    help="model kind behind --model")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specdetect", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    sp.add_argument("--out", required=True, help="dataset directory to create")
    sp.add_argument("--seed", type=int, default=None, help="dataset seed (default 0)")
    sp.add_argument("--config", help="JSON file of generator overrides")

    sp = sub.add_parser("train", parents=[common], help="train the LSTM predictor and classifier")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--epochs", type=int, default=6000, help="predictor epochs")
    sp.add_argument("--classifier-epochs", type=int, default=3000, help="classifier epochs")
    sp.add_argument("--lr", type=float, default=0.02, help="learning rate")
    sp.add_argument("--loss", choices=("abs", "mse"), default="abs", help="prediction loss")
    sp.add_argument("--seed", type=int, default=0, help="initialization seed")
    sp.add_argument("--truncation-span", type=int, default=1, help="backprop span in steps")
    sp.add_argument("--hidden", type=int, default=20, help="LSTM state size h")
    sp.add_argument("--loss-scale", type=float, default=256.0,
                    help="factor on the per-bin loss before differentiating")

    sp = sub.add_parser("baseline", parents=[common],
                        help="fit the least-squares basis on the train split")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("inject", parents=[common],
                        help="add parabolic interferers to a pass or a test split")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--pass", dest="pass_dir", help="single pass directory")
    src.add_argument("--data", help="dataset directory (test split is injected)")
    sp.add_argument("--spec", required=True, help="JSON interferer spec or list of specs")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--window", type=int, default=64, help="window length for ground truth")

    sp = sub.add_parser("detect", parents=[common], help="score one pass and detect events")
    sp.add_argument("--model", required=True, help="model.json or basis.json")
    sp.add_argument("--pass", dest="pass_dir", required=True, help="pass directory")
    sp.add_argument("--inject", help="optional interferer spec applied before scoring")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--save-predictions", action="store_true",
                    help="also write predictions.csv (dB)")
    _detection_flags(sp)

    sp = sub.add_parser("eval", parents=[common],
                        help="P_error, event precision/recall and latency on a test split")
    sp.add_argument("--model", required=True, help="model.json or basis.json")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--ground-truth", required=True, help="ground_truth_events.json")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--latency-steps", type=int, default=1000,
                    help="minimum number of timed single steps")
    _detection_flags(sp)

    sp = sub.add_parser("rerun", parents=[common], help="replay a run manifest")
    sp.add_argument("manifest", help="run_manifest.json of an earlier run")
    sp.add_argument("--out", help="write to this directory instead of the original one")
    return ap


def _resolve(args) -> argparse.Namespace:
    """Absolute paths, explicit defaults: the form stored in the manifest."""
    ns = argparse.Namespace(**vars(args))
    for key in PATH_ARGS:
        if getattr(ns, key, None):
            setattr(ns, key, str(Path(getattr(ns, key)).resolve()))
    if ns.command == "gen":
        ns.seed_given = ns.seed is not None
        ns.seed = 0 if ns.seed is None else ns.seed
    return ns


def execute(ns: argparse.Namespace) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    extra = COMMANDS[ns.command](ns) or {}
    args_doc = {k: v for k, v in vars(ns).items() if k not in ("verbose",)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "tool": "specdetect",
        "version": __version__,
        "command": ns.command,
        "args": args_doc,
        "config": extra.get("config", {}),
        "seeds": extra.get("seeds", {}),
        "inputs": {k: args_doc[k] for k in PATH_ARGS if k != "out" and args_doc.get(k)},
        "outputs": sorted(str(p.relative_to(out)) for p in out.rglob("*")
                          if p.is_file() and p.name != MANIFEST),
        "timings": {"wall_s": time.perf_counter() - start, **extra.get("timings", {})},
    }
    _dump(out / MANIFEST, manifest)
    return out


def rerun(manifest_path, out=None) -> Path:
    doc = _load_json(manifest_path)
    if doc.get("tool") != "specdetect" or doc.get("command") not in COMMANDS:
        raise ValidationError(f"{manifest_path} is not a specdetect run manifest")
    ns = argparse.Namespace(**doc["args"], verbose=False)
    if out:
        ns.out = str(Path(out).resolve())
    return execute(ns)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            out = rerun(args.manifest, args.out)
        else:
            out = execute(_resolve(args))
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ValidationError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
