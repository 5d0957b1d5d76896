"""Generalized traffic-reshaping defenses with byte-exact overhead ledgers.

Three built-in reshapers plus a plugin registry:

- PTI (pure traffic injection): superpose historical motifs at Poisson
  arrival times thinned by a Bernoulli draw.
- RTP (random traffic padding): pad active runs up to a flattening
  threshold and fill randomly chosen idle slots with fake motifs scaled to
  peak exactly at the threshold; padding only, never lowers a rate.
- HTR (hybrid traffic reshaping): buffer-and-cap genuine bursts at the
  threshold (volume conserving) and inject fake motifs at times sampled
  from a Markov user-behavior model.

All methods are deterministic given (trace, config seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from trafficbench import kernels
from trafficbench.ingest import ActivityLabel, ContractError, RateTrace
from trafficbench.motif import Motif, extract_motifs

METHODS = ("pti", "rtp", "htr", "identity")


class EmptyBankError(ValueError):
    """No motifs could be harvested; injection defenses must fail loudly."""


class PluginError(ValueError):
    """Plugin registration or output-validation failure."""


@dataclass(frozen=True)
class DefenseConfig:
    method: str = "identity"
    flatten_threshold_kb_s: float | None = None  # None: 95th pct of the trace
    injection_rate_per_hour: float = 120.0
    bernoulli_p: float = 0.5
    hmm_states: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.bernoulli_p <= 1.0:
            raise ContractError("bernoulli_p must be in [0, 1]")
        if self.injection_rate_per_hour < 0:
            raise ContractError("injection rate must be >= 0")
        if self.flatten_threshold_kb_s is not None and self.flatten_threshold_kb_s <= 0:
            raise ContractError("flatten threshold must be positive")
        if self.hmm_states < 2:
            raise ContractError("hmm_states must be >= 2")


@dataclass(frozen=True)
class MotifBank:
    """Historical motifs harvested from clean traces, indexed by device."""

    motifs: tuple
    start_epochs: tuple  # absolute epoch of each motif's first sample
    by_device: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.motifs)


@dataclass(frozen=True)
class DefenseOutcome:
    reshaped: RateTrace
    genuine_bytes: float  # KB
    injected_bytes: float
    padded_bytes: float
    overhead_pct: float
    injected_windows: tuple  # of (start, stop) index ranges, disjoint

    def ledger(self) -> dict:
        return {
            "genuine_kb": self.genuine_bytes,
            "injected_kb": self.injected_bytes,
            "padded_kb": self.padded_bytes,
            "overhead_pct": self.overhead_pct,
            "n_injected_windows": len(self.injected_windows),
        }


@dataclass(frozen=True)
class MarkovUserModel:
    """First-order activity-cluster chain with motif emission catalogs."""

    n_states: int
    transition: np.ndarray  # row-stochastic
    emissions: tuple  # per state: tuple of bank motif indices
    dwell_mean_s: np.ndarray  # per-state mean activity duration
    gap_mean_s: float  # mean gap between consecutive activity starts

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (self.n_states, self.n_states):
            raise ContractError("transition matrix shape mismatch")
        if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-9:
            raise ContractError("transition matrix must be row-stochastic")
        object.__setattr__(self, "transition", t)


def build_motif_bank(traces: list[RateTrace], threshold: float, window_half_n: int) -> MotifBank:
    """Harvest every motif from the given traces; errors on an empty crop."""
    if not traces:
        raise ContractError("traces must be non-empty")
    motifs, epochs = [], []
    by_device: dict[str, list[int]] = {}
    for tr in traces:
        for m in extract_motifs(tr, threshold, window_half_n):
            by_device.setdefault(tr.device_id, []).append(len(motifs))
            motifs.append(m)
            epochs.append(tr.start_epoch_s + m.start_index * tr.granularity_s)
    if not motifs:
        raise EmptyBankError(
            f"no motifs above threshold {threshold} in {len(traces)} traces"
        )
    return MotifBank(tuple(motifs), tuple(epochs), {k: tuple(v) for k, v in by_device.items()})


def default_flatten_threshold(trace: RateTrace) -> float:
    """95th percentile of the trace's rates, the default cap."""
    return float(np.percentile(trace.rates, 95.0))


def apply_pti(trace: RateTrace, bank: MotifBank, cfg: DefenseConfig) -> DefenseOutcome:
    """Superpose bank motifs at Poisson times thinned by Bernoulli draws."""
    if cfg.method != "pti":
        raise ContractError(f"config method is {cfg.method!r}, expected 'pti'")
    _require_bank(bank)
    rng = np.random.default_rng(np.uint64(cfg.seed))
    n = len(trace.rates)
    reshaped = trace.rates.copy()
    windows = []
    duration_h = n * trace.granularity_s / 3600.0
    if cfg.injection_rate_per_hour > 0 and duration_h > 0:
        t = 0.0
        horizon = n * trace.granularity_s
        mean_gap = 3600.0 / cfg.injection_rate_per_hour
        while True:
            t += rng.exponential(mean_gap)
            if t >= horizon:
                break
            keep = rng.random() < cfg.bernoulli_p
            motif = bank.motifs[int(rng.integers(len(bank)))]
            if not keep:
                continue
            start = int(t // trace.granularity_s)
            seg = motif.samples[: n - start]
            reshaped[start:start + len(seg)] += seg
            windows.append((start, start + len(seg)))
    return _ledger_outcome(trace, reshaped, windows, padded_bytes=0.0)


def apply_rtp(trace: RateTrace, bank: MotifBank, cfg: DefenseConfig) -> DefenseOutcome:
    """Pad active runs to the flattening threshold and fill random idle
    slots with threshold-peaked fake motifs.  Padding only: never lowers."""
    if cfg.method != "rtp":
        raise ContractError(f"config method is {cfg.method!r}, expected 'rtp'")
    _require_bank(bank)
    cap = cfg.flatten_threshold_kb_s or default_flatten_threshold(trace)
    x = trace.rates
    if x.size and x.max() > cap:
        raise ContractError(
            f"flatten threshold {cap} is below the trace maximum {x.max():.3f}; "
            "a padding-only shaper cannot hide peaks above the threshold"
        )
    rng = np.random.default_rng(np.uint64(cfg.seed))
    reshaped = x.copy()
    padded = 0.0
    injected = 0.0
    windows = []
    slot_len = max(3, int(np.median([len(m.samples) for m in bank.motifs])))
    active = x > 0
    for start, stop in _runs(active, True):
        reshaped[start:stop] = cap
    for start, stop in _runs(active, False):
        for s in range(start, stop, slot_len):
            e = min(s + slot_len, stop)
            if rng.random() >= cfg.bernoulli_p:
                continue
            motif = bank.motifs[int(rng.integers(len(bank)))]
            peak = motif.samples.max()
            fake = motif.samples * (cap / peak) if peak > 0 else motif.samples
            seg = fake[: e - s]
            base = reshaped[s:s + len(seg)].copy()
            lifted = np.maximum(base, seg)
            injected += float(np.sum(lifted - base)) * trace.granularity_s
            reshaped[s:s + len(seg)] = lifted
            reshaped[s:e] = cap  # chosen idle slots end flat at the cap
            windows.append((s, e))
    dt = trace.granularity_s
    total_extra = float(np.sum(reshaped - x)) * dt
    padded = total_extra - injected
    genuine = float(np.sum(x)) * dt
    return DefenseOutcome(
        reshaped=replace(trace, rates=reshaped),
        genuine_bytes=genuine,
        injected_bytes=injected,
        padded_bytes=padded,
        overhead_pct=100.0 * total_extra / genuine if genuine > 0 else 0.0,
        injected_windows=tuple(_merge_windows(windows)),
    )


def fit_markov_model(
    labels: list[ActivityLabel], bank: MotifBank, n_states: int
) -> MarkovUserModel:
    """Cluster activities on (start hour, duration) and fit an add-one
    smoothed transition matrix over the chronological state sequence."""
    if n_states < 2:
        raise ContractError("need at least 2 states")
    distinct = {lab.activity_id for lab in labels}
    if len(distinct) < 2:
        raise ContractError("need at least 2 distinct activities")
    if len(distinct) < n_states:
        raise ContractError(
            f"{len(distinct)} distinct activities cannot fill {n_states} states"
        )
    ordered = sorted(labels, key=lambda lab: (lab.start_epoch_s, lab.activity_id))
    pts = np.array(
        [
            [(lab.start_epoch_s % 86400) / 3600.0, lab.end_epoch_s - lab.start_epoch_s]
            for lab in ordered
        ],
        dtype=np.float64,
    )
    states = _kmeans_labels(pts, n_states, seed=len(ordered))
    counts = np.ones((n_states, n_states))  # add-one smoothing
    for a, b in zip(states[:-1], states[1:]):
        counts[a, b] += 1
    transition = counts / counts.sum(axis=1, keepdims=True)
    emissions: list[list[int]] = [[] for _ in range(n_states)]
    for lab, st in zip(ordered, states):
        for i, (motif, epoch) in enumerate(zip(bank.motifs, bank.start_epochs)):
            end = epoch + motif.duration_s
            if epoch < lab.end_epoch_s and end > lab.start_epoch_s:
                emissions[st].append(i)
    all_idx = tuple(range(len(bank)))
    dwell = np.zeros(n_states)
    for s in range(n_states):
        mine = pts[states == s, 1]
        dwell[s] = float(mine.mean()) if mine.size else float(pts[:, 1].mean())
    gaps = np.diff([lab.start_epoch_s for lab in ordered])
    gap_mean = float(gaps.mean()) if gaps.size else 60.0
    return MarkovUserModel(
        n_states=n_states,
        transition=transition,
        emissions=tuple(tuple(sorted(set(e))) or all_idx for e in emissions),
        dwell_mean_s=dwell,
        gap_mean_s=max(1.0, gap_mean),
    )


def apply_htr(
    trace: RateTrace, model: MarkovUserModel, cfg: DefenseConfig, bank: MotifBank
) -> DefenseOutcome:
    """Buffer-and-cap genuine traffic at the threshold, then inject fake
    motifs (scaled to peak at the threshold) at Markov-simulated times.

    Genuine byte volume is conserved: excess above the cap is carried to
    later samples until drained, extending the trace if the buffer is
    still non-empty at the end.
    """
    if cfg.method != "htr":
        raise ContractError(f"config method is {cfg.method!r}, expected 'htr'")
    _require_bank(bank)
    cap = cfg.flatten_threshold_kb_s or default_flatten_threshold(trace)
    flat, carry = kernels.buffered_flatten(np.ascontiguousarray(trace.rates), float(cap))
    if carry > 0:
        extra = []
        while carry > 0:
            take = min(cap, carry)
            extra.append(take)
            carry -= take
        flat = np.concatenate([flat, extra])
    rng = np.random.default_rng(np.uint64(cfg.seed))
    n = len(flat)
    reshaped = flat.copy()
    windows = []
    horizon = n * trace.granularity_s
    state = int(rng.integers(model.n_states))
    t = 0.0
    while True:
        t += rng.exponential(model.gap_mean_s)
        if t >= horizon:
            break
        cat = model.emissions[state]
        motif = bank.motifs[cat[int(rng.integers(len(cat)))]]
        peak = motif.samples.max()
        fake = motif.samples * (cap / peak) if peak > 0 else motif.samples
        start = int(t // trace.granularity_s)
        seg = fake[: n - start]
        base = reshaped[start:start + len(seg)]
        reshaped[start:start + len(seg)] = np.maximum(base, seg)
        windows.append((start, start + len(seg)))
        state = int(rng.choice(model.n_states, p=model.transition[state]))
    dt = trace.granularity_s
    genuine = float(np.sum(trace.rates)) * dt
    injected = float(np.sum(reshaped - flat)) * dt
    return DefenseOutcome(
        reshaped=replace(trace, rates=reshaped),
        genuine_bytes=genuine,
        injected_bytes=injected,
        padded_bytes=float(np.sum(flat)) * dt - genuine,  # 0 up to rounding
        overhead_pct=100.0 * injected / genuine if genuine > 0 else 0.0,
        injected_windows=tuple(_merge_windows(windows)),
    )


_PLUGINS: dict = {}


def register_defense_plugin(name: str, transform) -> None:
    """Register an external reshaper callable(trace, cfg) -> RateTrace.

    Outcomes are wrapped with a recomputed ledger and validated against the
    DefenseOutcome invariants.
    """
    if name in _PLUGINS or name in METHODS:
        raise PluginError(f"defense name {name!r} already registered")
    _PLUGINS[name] = transform


def registered_plugins() -> tuple:
    return tuple(sorted(_PLUGINS))


def clear_plugins() -> None:
    _PLUGINS.clear()


def apply_defense(
    trace: RateTrace,
    cfg: DefenseConfig,
    bank: MotifBank | None = None,
    model: MarkovUserModel | None = None,
) -> DefenseOutcome:
    """Dispatch to a built-in method or a registered plugin."""
    if cfg.method == "identity":
        return _ledger_outcome(trace, trace.rates.copy(), [], padded_bytes=0.0)
    if cfg.method == "pti":
        return apply_pti(trace, bank, cfg)
    if cfg.method == "rtp":
        return apply_rtp(trace, bank, cfg)
    if cfg.method == "htr":
        if model is None:
            raise ContractError("htr requires a fitted MarkovUserModel")
        return apply_htr(trace, model, cfg, bank)
    if cfg.method in _PLUGINS:
        reshaped = _PLUGINS[cfg.method](trace, cfg)
        return _validate_plugin_outcome(trace, reshaped)
    raise ContractError(f"unknown defense method {cfg.method!r}")


def compute_overhead(original: RateTrace, outcome: DefenseOutcome) -> float:
    """Independent overhead recomputation; must agree with the ledger."""
    resh = outcome.reshaped
    if (
        resh.start_epoch_s != original.start_epoch_s
        or resh.granularity_s != original.granularity_s
        or len(resh.rates) != len(original.rates)
    ):
        raise ContractError("original and reshaped traces are not aligned")
    total_orig = float(np.sum(original.rates))
    total_resh = float(np.sum(resh.rates))
    if total_orig <= 0:
        return 0.0
    pct = 100.0 * (total_resh - total_orig) / total_orig
    if abs(pct - outcome.overhead_pct) > 1e-9 * max(1.0, abs(pct)):
        raise ContractError(
            f"ledger mismatch: recomputed {pct} vs outcome {outcome.overhead_pct}"
        )
    return pct


def _require_bank(bank: MotifBank | None) -> None:
    if bank is None or len(bank) == 0:
        raise EmptyBankError("injection defense requires a non-empty motif bank")


def _runs(mask: np.ndarray, value: bool):
    """Maximal runs [start, stop) where mask == value."""
    idx = np.flatnonzero(np.diff(np.concatenate([[0], mask.view(np.int8), [0]])))
    runs = idx.reshape(-1, 2)
    if not value:
        full = []
        prev = 0
        for a, b in runs:
            if prev < a:
                full.append((prev, a))
            prev = b
        if prev < len(mask):
            full.append((prev, len(mask)))
        return full
    return [tuple(r) for r in runs]


def _merge_windows(windows):
    if not windows:
        return []
    windows = sorted(windows)
    merged = [list(windows[0])]
    for a, b in windows[1:]:
        if a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [tuple(w) for w in merged]


def _ledger_outcome(trace, reshaped, windows, padded_bytes):
    dt = trace.granularity_s
    genuine = float(np.sum(trace.rates)) * dt
    injected = float(np.sum(reshaped - trace.rates)) * dt - padded_bytes
    extra = injected + padded_bytes
    return DefenseOutcome(
        reshaped=replace(trace, rates=reshaped),
        genuine_bytes=genuine,
        injected_bytes=injected,
        padded_bytes=padded_bytes,
        overhead_pct=100.0 * extra / genuine if genuine > 0 else 0.0,
        injected_windows=tuple(_merge_windows(windows)),
    )


def _validate_plugin_outcome(original: RateTrace, reshaped) -> DefenseOutcome:
    if not isinstance(reshaped, RateTrace):
        raise PluginError("plugin must return a RateTrace")
    try:
        rates = np.asarray(reshaped.rates, dtype=np.float64)
    except Exception as exc:  # pragma: no cover
        raise PluginError(f"plugin output rates invalid: {exc}") from exc
    if np.isnan(rates).any() or (rates < 0).any():
        raise PluginError("plugin produced negative or missing rates")
    if len(rates) != len(original.rates) or reshaped.granularity_s != original.granularity_s:
        raise PluginError("plugin output is misaligned with its input")
    injected = float(np.sum(rates - original.rates)) * original.granularity_s
    if injected < -1e-9:
        raise PluginError("plugin removed genuine traffic; injected bytes must be non-negative")
    return _ledger_outcome(original, rates, [], padded_bytes=0.0)


def _kmeans_labels(pts: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Small deterministic Lloyd's k-means on standardized points."""
    scale = pts.std(axis=0)
    scale[scale == 0] = 1.0
    z = (pts - pts.mean(axis=0)) / scale
    rng = np.random.default_rng(np.uint64(seed))
    centers = z[rng.choice(len(z), size=k, replace=False)]
    labels = np.full(len(z), -1, dtype=np.int64)
    for _ in range(100):
        d = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mine = z[labels == j]
            if len(mine):
                centers[j] = mine.mean(axis=0)
    # guarantee every state is populated: move nearest points into empties
    for j in range(k):
        if not (labels == j).any():
            d = ((z - centers[j]) ** 2).sum(axis=1)
            labels[np.argmin(d)] = j
    return labels
