"""Command-line entry point.

Subcommands: synth, ingest, defend, encode, attack, eval, run.  A single
JSON experiment config plus one seed drives the ``run`` command; stage
seeds derive from the master seed, so reruns are byte-identical.  Exit
codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from trafficbench import defense as defense_mod
from trafficbench import evaluation, imaging, ingest
from trafficbench.attack import pipeline as pipe
from trafficbench.ingest import ContractError, TraceFormatError

log = logging.getLogger("trafficbench")

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TRAFFICBENCH_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, TraceFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic home")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--duration", type=int, default=7200)
    p.add_argument("--events", type=int, default=35)
    p.add_argument("--activities", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse and canonicalize trace/label CSVs")
    p.add_argument("--traces", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--granularity", type=int, default=1)
    p.add_argument("--impute-k", type=int, default=3)
    p.add_argument("--background-cap", type=float, default=2000.0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("defend", help="reshape a trace store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--method", default="identity")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--rate", type=float, default=12.0)
    p.add_argument("--bernoulli-p", type=float, default=0.5)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("encode", help="encode labeled windows to images")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--representations", default="line_chart,heat_map,scatter,gaf")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("attack", help="train and run one attack on a store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--kind", default="random_forest")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--method", default="identity", help="defense applied in-pipeline")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="metrics from a predictions file")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline from a JSON experiment config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)
    return parser


def cmd_synth(args) -> int:
    traces, labels = ingest.synth_home(
        args.seed, args.devices, args.duration, args.events, n_activities=args.activities
    )
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "traces.csv").write_text(ingest.serialize_trace(traces))
    (args.out / "labels.csv").write_text(ingest.serialize_labels(labels))
    print(f"wrote {len(traces)} traces, {len(labels)} labels to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    if not args.traces.exists():
        raise FileNotFoundError(f"trace file not found: {args.traces}")
    traces = ingest.parse_trace(args.traces.read_bytes())
    out_traces = []
    for tr in traces:
        if tr.n_missing:
            tr = ingest.impute_knn(tr, args.impute_k)
        tr, clipped = ingest.background_filter(tr, args.background_cap)
        if clipped:
            log.info("%s/%s: clipped %d samples", tr.device_id, tr.direction, clipped)
        if args.granularity > 1:
            tr = ingest.resample(tr, args.granularity)
        out_traces.append(tr)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "traces.csv").write_text(ingest.serialize_trace(out_traces))
    if args.labels:
        if not args.labels.exists():
            raise FileNotFoundError(f"label file not found: {args.labels}")
        labels = ingest.parse_labels(args.labels.read_bytes())
        (args.out / "labels.csv").write_text(ingest.serialize_labels(labels))
    print(f"ingested {len(out_traces)} traces into {args.out}")
    return 0


def _load_store(store: Path):
    tf = store / "traces.csv"
    if not tf.exists():
        raise FileNotFoundError(f"trace store missing {tf}")
    traces = ingest.parse_trace(tf.read_bytes())
    lf = store / "labels.csv"
    labels = ingest.parse_labels(lf.read_bytes()) if lf.exists() else []
    return traces, labels


def cmd_defend(args) -> int:
    traces, labels = _load_store(args.store)
    agg_in, agg_out = ingest.aggregate_home(traces)
    dataset = pipe.WindowDataset(agg_in, agg_out, labels)
    cfg = defense_mod.DefenseConfig(
        method=args.method,
        flatten_threshold_kb_s=args.threshold,
        injection_rate_per_hour=args.rate,
        bernoulli_p=args.bernoulli_p,
        seed=args.seed,
    )
    defended, outcomes = pipe.apply_defense_to_home(dataset, cfg, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "traces.csv").write_text(
        ingest.serialize_trace([defended.trace_in, defended.trace_out])
    )
    if labels:
        (args.out / "labels.csv").write_text(ingest.serialize_labels(labels))
    ledger = {name: o.ledger() for name, o in outcomes.items()}
    (args.out / "ledger.json").write_text(json.dumps(ledger, indent=2, sort_keys=True) + "\n")
    print(f"defended store written to {args.out} (method={args.method})")
    return 0


def cmd_encode(args) -> int:
    traces, labels = _load_store(args.store)
    if not labels:
        raise ContractError("encode requires a labeled store")
    agg_in, agg_out = ingest.aggregate_home(traces)
    cfg = pipe.PipelineConfig(
        image_size=args.size,
        representations=tuple(args.representations.split(",")),
    )
    dataset = pipe.WindowDataset(agg_in, agg_out, labels)
    centers, acts = dataset.window_centers(cfg)
    # drop windows with no motifs at all: nothing to learn from
    kept, dropped = [], 0
    half = cfg.window_len // 2
    from trafficbench.motif import extract_motifs

    for i, c in enumerate(centers):
        win = agg_in.rates[c - half:c + half]
        sub = ingest.RateTrace("home", "in", agg_in.granularity_s, 0, win)
        if extract_motifs(sub, cfg.motif_threshold, cfg.window_half_n):
            kept.append(i)
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d motif-less segments", dropped)
    kept = np.asarray(kept, dtype=int)
    args.out.mkdir(parents=True, exist_ok=True)
    index = []
    if len(kept):
        images = pipe.window_images(agg_in, agg_out, centers[kept], cfg)
        for rep, batch in images.items():
            for j, px in enumerate(batch):
                name = f"{rep}_{j:05d}.ppm"
                imaging.export_raster(imaging.ImageTensor(px, rep), args.out / name)
                index.append({"file": name, "representation": rep,
                              "window": int(centers[kept][j]), "activity": int(acts[kept][j])})
    (args.out / "index.json").write_text(json.dumps(
        {"dropped_segments": dropped, "images": index}, indent=2, sort_keys=True) + "\n")
    print(f"encoded {len(index)} images ({dropped} segments dropped) to {args.out}")
    return 0


def cmd_attack(args) -> int:
    traces, labels = _load_store(args.store)
    if not labels:
        raise ContractError("attack requires a labeled store")
    agg_in, agg_out = ingest.aggregate_home(traces)
    dataset = pipe.WindowDataset(agg_in, agg_out, labels)
    dcfg = defense_mod.DefenseConfig(method=args.method, seed=args.seed)
    ranked, report = pipe.attack_pipeline(dataset, dcfg, args.kind, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    preds_doc = {
        "schema": "trafficbench-predictions/1",
        "ranked": np.asarray(ranked).tolist(),
        "labels": _test_labels(dataset, args.seed).tolist(),
        "metadata": report.metadata,
    }
    (args.out / "predictions.json").write_text(
        json.dumps(preds_doc, indent=2, sort_keys=True) + "\n")
    evaluation.emit_report([report], args.out / "report.json")
    print(f"attack {args.kind}: top1={report.top1:.4f} mcc={report.mcc:.4f}")
    return 0


def _test_labels(dataset, seed):
    cfg = pipe.PipelineConfig()
    centers, acts = dataset.window_centers(cfg)
    split = ingest.split_dataset(len(centers), pipe.derive_seed(seed, "split"), labels=acts)
    return acts[split.test]


def cmd_eval(args) -> int:
    if not args.predictions.exists():
        raise FileNotFoundError(f"predictions file not found: {args.predictions}")
    doc = json.loads(args.predictions.read_text())
    if doc.get("schema") != "trafficbench-predictions/1":
        raise ContractError(f"unsupported predictions schema {doc.get('schema')!r}")
    ranked = np.asarray(doc["ranked"])
    labels = np.asarray(doc["labels"])
    report = evaluation.evaluate_predictions(ranked, labels, metadata=doc.get("metadata", {}))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.emit_report([report], args.out)
    print(f"top1={report.top1:.4f} mcc={report.mcc:.4f}")
    return 0


def load_experiment_config(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = json.loads(path.read_text())
    if "seed" not in doc:
        raise ContractError("experiment config must set a seed")
    for key in ("traces", "labels"):
        if key in doc and not Path(doc[key]).exists():
            raise ContractError(f"config path for {key!r} does not exist: {doc[key]}")
    return doc


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    doc = load_experiment_config(args.config)
    seed = int(doc["seed"])
    out = Path(args.out or doc.get("out", "runs/out"))
    out.mkdir(parents=True, exist_ok=True)

    if "traces" in doc:
        traces = ingest.parse_trace(Path(doc["traces"]).read_bytes())
        labels = ingest.parse_labels(Path(doc["labels"]).read_bytes())
    else:
        synth = doc.get("synth", {})
        traces, labels = ingest.synth_home(
            seed=synth.get("seed", seed),
            n_devices=synth.get("devices", 4),
            duration_s=synth.get("duration_s", 7200),
            events_per_device=synth.get("events_per_device", 35),
            n_activities=synth.get("activities", 14),
        )
    agg_in, agg_out = ingest.aggregate_home(traces)
    dataset = pipe.WindowDataset(agg_in, agg_out, labels)

    dcfg_doc = doc.get("defense", {})
    dcfg = defense_mod.DefenseConfig(
        method=dcfg_doc.get("method", "identity"),
        flatten_threshold_kb_s=dcfg_doc.get("flatten_threshold_kb_s"),
        injection_rate_per_hour=dcfg_doc.get("injection_rate_per_hour", 12.0),
        bernoulli_p=dcfg_doc.get("bernoulli_p", 0.5),
        hmm_states=dcfg_doc.get("hmm_states", 2),
        seed=seed,
    )
    pcfg = pipe.PipelineConfig(
        motif_threshold=doc.get("motif", {}).get("threshold", 5.0),
        window_half_n=doc.get("motif", {}).get("window_half_n", 30),
        image_size=doc.get("image_size", 32),
        representations=tuple(doc.get("representations",
                                      ["line_chart", "heat_map", "scatter", "gaf"])),
        fusion_epochs=doc.get("fusion", {}).get("epochs", 30),
        fusion_lr=doc.get("fusion", {}).get("lr", 0.02),
    )
    attack_kind = doc.get("attack", "random_forest")
    ranked, report = pipe.attack_pipeline(dataset, dcfg, attack_kind, seed=seed, cfg=pcfg)
    report.epsilon_security = report.top1

    evaluation.emit_report([report], out / "report.json",
                           wall_seconds=time.perf_counter() - t0)
    levels = doc.get("eval", {}).get("knowledge_levels")
    if levels:
        curve = _run_ac_sweep(dataset, dcfg, pcfg, levels, seed)
        with open(out / "ac_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "mcc"])
            for q, m in zip(curve.levels, curve.mcc):
                w.writerow([q, f"{m:.12g}"])
    print(f"run complete: top1={report.top1:.4f} mcc={report.mcc:.4f} -> {out}")
    return 0


def _run_ac_sweep(dataset, dcfg, pcfg, levels, seed):
    from trafficbench.attack import classifiers as clf

    defended, _ = pipe.apply_defense_to_home(
        dataset, dcfg, seed, pcfg.motif_threshold, pcfg.window_half_n)
    centers, acts = defended.window_centers(pcfg)
    feats = pipe.window_features(defended.trace_in, defended.trace_out, centers, pcfg)
    split = ingest.split_dataset(len(centers), pipe.derive_seed(seed, "split"), labels=acts)
    tr = np.concatenate([split.train, split.validation])
    return evaluation.adversary_confidence_sweep(
        lambda x, y, s: clf.train_classifier("k_nearest", x, y, {"k": 1}, seed=s),
        lambda m, x, y: evaluation.evaluate_predictions(clf.predict_topk(m, x, 1), y),
        feats[tr], acts[tr], feats[split.test], acts[split.test],
        levels, pipe.derive_seed(seed, "ac"),
    )


if __name__ == "__main__":
    sys.exit(main())
