"""End-to-end orchestration: defend, window, featurize/encode, train,
predict, evaluate.  All stage randomness derives from one master seed."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from trafficbench import defense as defense_mod
from trafficbench import evaluation, imaging
from trafficbench.attack import classifiers as clf
from trafficbench.attack import fusion as fusion_mod
from trafficbench.ingest import ActivityLabel, ContractError, RateTrace, split_dataset
from trafficbench.motif import compute_features, extract_motifs


def derive_seed(master: int, stage: str) -> int:
    """Counter-free stage seed expansion: sha256(master || stage)."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class PipelineConfig:
    motif_threshold: float = 5.0
    window_half_n: int = 30
    window_len: int = 60
    image_size: int = 32
    representations: tuple = ("line_chart", "heat_map", "scatter", "gaf")
    gaf: imaging.GafConfig = field(default_factory=lambda: imaging.GafConfig(4, (1, 2, 4, 8)))
    classifier_hyper: dict = field(default_factory=dict)
    fusion_epochs: int = 120
    fusion_lr: float = 0.3
    fusion_batch: int = 32
    topk: tuple = (1, 5)


@dataclass
class WindowDataset:
    """Whole-home in/out traces plus labeled activity windows."""

    trace_in: RateTrace
    trace_out: RateTrace
    labels: list  # of ActivityLabel

    def window_centers(self, cfg: PipelineConfig):
        """(centers, activity_ids), dropping windows too close to an edge
        for the coarsest GAF granularity."""
        margin = cfg.window_len // 2 * max(cfg.gaf.granularity_multipliers)
        n = min(len(self.trace_in.rates), len(self.trace_out.rates))
        centers, acts = [], []
        for lab in self.labels:
            c = (lab.start_epoch_s + lab.end_epoch_s) // 2 - self.trace_in.start_epoch_s
            c //= self.trace_in.granularity_s
            if margin <= c < n - margin:
                centers.append(int(c))
                acts.append(lab.activity_id)
        return np.asarray(centers), np.asarray(acts)


def window_features(
    trace_in: RateTrace, trace_out: RateTrace, centers, cfg: PipelineConfig
) -> np.ndarray:
    """Per-window feature rows: the statistics of the motif nearest the
    window center for each direction, zeros when a direction has no motif."""
    rows = []
    half = cfg.window_len // 2
    for c in centers:
        row = []
        for tr in (trace_in, trace_out):
            a, b = max(0, c - half), min(len(tr.rates), c + half)
            sub = replace(tr, rates=tr.rates[a:b])
            motifs = extract_motifs(sub, cfg.motif_threshold, cfg.window_half_n)
            if motifs:
                nearest = int(np.argmin([abs(m.center_index - half) for m in motifs]))
                row.append(compute_features(motifs[nearest]))
            else:
                row.append(np.zeros(12))
        rows.append(np.concatenate(row))
    return np.vstack(rows) if rows else np.empty((0, 24))


def window_images(
    trace_in: RateTrace, trace_out: RateTrace, centers, cfg: PipelineConfig
) -> dict:
    """Aligned image batches per representation, ordered by window index."""
    half = cfg.window_len // 2
    out = {rep: [] for rep in cfg.representations}
    for c in centers:
        win_in = trace_in.rates[c - half:c + half]
        win_out = trace_out.rates[c - half:c + half]
        for rep in cfg.representations:
            img = imaging.encode_window(
                rep, win_in, win_out, cfg.image_size,
                trace=trace_in, center=int(c), gaf_cfg=cfg.gaf,
            )
            out[rep].append(img.pixels)
    return {rep: np.stack(v) if v else np.empty((0, cfg.image_size, cfg.image_size, 3)) for rep, v in out.items()}


def rank_classes(proba: np.ndarray, classes: np.ndarray, k: int) -> np.ndarray:
    """Classes ranked by probability, deterministic tie-break by class id."""
    order = np.lexsort((np.tile(np.arange(proba.shape[1]), (len(proba), 1)), -proba), axis=1)
    return np.asarray(classes)[order[:, :k]]


def apply_defense_to_home(
    dataset: WindowDataset,
    cfg: defense_mod.DefenseConfig,
    seed: int,
    motif_threshold: float = 5.0,
    window_half_n: int = 30,
) -> tuple[WindowDataset, dict]:
    """Reshape both aggregate directions; returns the defended dataset and
    the per-direction outcome ledgers."""
    bank = None
    model = None
    if cfg.method != "identity":
        bank = defense_mod.build_motif_bank(
            [dataset.trace_in, dataset.trace_out], motif_threshold, window_half_n
        )
    if cfg.method == "htr":
        model = defense_mod.fit_markov_model(dataset.labels, bank, cfg.hmm_states)
    outcomes = {}
    traces = {}
    for name, tr in (("in", dataset.trace_in), ("out", dataset.trace_out)):
        run_cfg = replace(cfg, seed=derive_seed(seed, f"defense/{cfg.method}/{name}"))
        if cfg.flatten_threshold_kb_s is None:
            if cfg.method == "rtp":
                # padding-only: the cap must cover the genuine peak
                run_cfg = replace(run_cfg, flatten_threshold_kb_s=float(tr.rates.max()) or 1.0)
            elif cfg.method == "htr":
                run_cfg = replace(
                    run_cfg, flatten_threshold_kb_s=defense_mod.default_flatten_threshold(tr)
                )
        outcome = defense_mod.apply_defense(tr, run_cfg, bank=bank, model=model)
        outcomes[name] = outcome
        traces[name] = outcome.reshaped
    return WindowDataset(traces["in"], traces["out"], dataset.labels), outcomes


def attack_pipeline(
    dataset: WindowDataset,
    defense_cfg: defense_mod.DefenseConfig,
    attack_kind: str,
    representations=None,
    seed: int = 0,
    cfg: PipelineConfig | None = None,
):
    """Run the full chain and return (ranked predictions, EvalReport).

    ``attack_kind`` is a classical classifier kind or ``"fusion"``.
    The defense is applied uniformly before the split, so train/val/test
    all see reshaped traffic.
    """
    cfg = cfg or PipelineConfig()
    if representations:
        cfg = replace(cfg, representations=tuple(representations))
    try:
        defended, outcomes = apply_defense_to_home(
            dataset, defense_cfg, seed, cfg.motif_threshold, cfg.window_half_n
        )
    except Exception as exc:
        raise type(exc)(f"defend stage: {exc}") from exc
    centers, acts = defended.window_centers(cfg)
    if len(centers) < 3:
        raise ContractError("window stage: fewer than 3 usable windows")
    split = split_dataset(len(centers), derive_seed(seed, "split"), labels=acts)
    train_idx = np.concatenate([split.train, split.validation])
    test_idx = split.test

    overhead = float(np.mean([o.overhead_pct for o in outcomes.values()]))
    meta = {
        "seed": seed,
        "defense": defense_cfg.method,
        "attack": attack_kind,
        "representations": list(cfg.representations) if attack_kind == "fusion" else [],
    }

    if attack_kind == "fusion":
        images = window_images(defended.trace_in, defended.trace_out, centers, cfg)
        classes, encoded = np.unique(acts, return_inverse=True)
        net = fusion_mod.build_fusion_net(
            cfg.representations, len(classes), image_size=cfg.image_size,
            seed=derive_seed(seed, "fusion/init"), dtype=np.float32,
        )
        hyper = fusion_mod.FusionHyper(
            epochs=cfg.fusion_epochs, batch_size=cfg.fusion_batch, lr=cfg.fusion_lr
        )
        fusion_mod.train_fusion(
            net,
            {rep: arr[train_idx] for rep, arr in images.items()},
            encoded[train_idx],
            hyper,
            seed=derive_seed(seed, "fusion/train"),
        )
        proba = net.forward({rep: arr[test_idx].astype(net.dtype) for rep, arr in images.items()})
        ranked = rank_classes(proba, classes, min(max(cfg.topk), len(classes)))
    else:
        feats = window_features(defended.trace_in, defended.trace_out, centers, cfg)
        model = clf.train_classifier(
            attack_kind, feats[train_idx], acts[train_idx],
            hyper=cfg.classifier_hyper, seed=derive_seed(seed, f"clf/{attack_kind}"),
        )
        k = min(max(cfg.topk), len(model.classes_))
        ranked = clf.predict_topk(model, feats[test_idx], k)

    report = evaluation.evaluate_predictions(ranked, acts[test_idx], metadata=meta)
    report.overhead_pct = overhead
    return ranked, report
