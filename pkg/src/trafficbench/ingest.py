"""Traffic-rate trace ingestion: parsing, resampling, imputation, splits,
and the seeded synthetic home generator used by tests and demos.

All rates are KB/s stored as float64; missing samples are NaN until
imputation.  The CSV contract is ``epoch_s,device_id,direction,bytes``
(direction in {in,out}, rows in any order) for traces and
``activity_id,start_epoch_s,end_epoch_s,device_ids`` for labels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

STANDARD_GRANULARITIES = (1, 60, 180, 300, 600)
_KB = 1000.0


class TraceFormatError(ValueError):
    """Malformed trace or label CSV input."""


class ContractError(ValueError):
    """An operation precondition was violated."""


@dataclass(frozen=True)
class RateTrace:
    """Per-device, per-direction traffic-rate time series in KB/s."""

    device_id: str
    direction: str  # "in" | "out"
    granularity_s: int
    start_epoch_s: int
    rates: np.ndarray  # float64; NaN marks a missing sample
    nonstandard_granularity: bool = False

    def __post_init__(self):
        if self.direction not in ("in", "out"):
            raise ContractError(f"direction must be 'in' or 'out', got {self.direction!r}")
        if self.granularity_s < 1:
            raise ContractError("granularity_s must be a positive integer")
        rates = np.ascontiguousarray(np.asarray(self.rates, dtype=np.float64))
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        if self.granularity_s not in STANDARD_GRANULARITIES and not self.nonstandard_granularity:
            object.__setattr__(self, "nonstandard_granularity", True)
        present = rates[~np.isnan(rates)]
        if present.size and present.min() < 0:
            raise ContractError(f"negative rate in trace {self.device_id}/{self.direction}")

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.rates).sum())

    def byte_volume_kb(self) -> float:
        """Total volume in KB (rate x interval), ignoring missing samples."""
        return float(np.nansum(self.rates) * self.granularity_s)

    def end_epoch_s(self) -> int:
        return self.start_epoch_s + len(self.rates) * self.granularity_s


@dataclass(frozen=True)
class ActivityLabel:
    """Ground-truth activity window covering one or more devices."""

    activity_id: int
    device_events: frozenset  # of (device_id, direction)
    start_epoch_s: int
    end_epoch_s: int

    def __post_init__(self):
        if self.end_epoch_s <= self.start_epoch_s:
            raise ContractError("label window must have positive length")


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint 70/15/15 train/validation/test index sets."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def parse_trace(csv_source) -> list[RateTrace]:
    """Parse the trace CSV into one RateTrace per (device_id, direction).

    ``csv_source`` is a byte stream, text stream, or str/bytes payload.
    Rows with unparseable timestamps are rejected with their row numbers;
    negative byte counts are a validation error naming the row.  Seconds
    with no row for a device become NaN (absent) samples.
    """
    text = _as_text(csv_source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TraceFormatError("empty trace CSV") from None
    if [h.strip() for h in header] != ["epoch_s", "device_id", "direction", "bytes"]:
        raise TraceFormatError(
            f"bad trace header {header!r}; expected epoch_s,device_id,direction,bytes"
        )

    per_key: dict[tuple[str, str], dict[int, float]] = {}
    bad_rows = []
    for row_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise TraceFormatError(f"row {row_no}: expected 4 fields, got {len(row)}")
        ts_s, device_id, direction, nbytes_s = (f.strip() for f in row)
        try:
            epoch = int(ts_s)
        except ValueError:
            bad_rows.append(row_no)
            continue
        if direction not in ("in", "out"):
            raise TraceFormatError(f"row {row_no}: direction must be in|out, got {direction!r}")
        try:
            nbytes = float(nbytes_s)
        except ValueError:
            raise TraceFormatError(f"row {row_no}: unparseable byte count {nbytes_s!r}") from None
        if nbytes < 0:
            raise TraceFormatError(f"row {row_no}: negative byte count {nbytes_s}")
        per_key.setdefault((device_id, direction), {}).setdefault(epoch, 0.0)
        per_key[(device_id, direction)][epoch] += nbytes
    if bad_rows:
        raise TraceFormatError(f"unparseable timestamps at rows {bad_rows}")

    traces = []
    for (device_id, direction), samples in sorted(per_key.items()):
        epochs = sorted(samples)
        start, end = epochs[0], epochs[-1]
        rates = np.full(end - start + 1, np.nan)
        for e in epochs:
            rates[e - start] = samples[e] / _KB  # bytes per 1 s slot -> KB/s
        traces.append(RateTrace(device_id, direction, 1, start, rates))
    return traces


def serialize_trace(traces: list[RateTrace]) -> str:
    """Inverse of parse_trace for traces without absent samples."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["epoch_s", "device_id", "direction", "bytes"])
    for tr in traces:
        for i, r in enumerate(tr.rates):
            if np.isnan(r):
                continue
            epoch = tr.start_epoch_s + i * tr.granularity_s
            writer.writerow([epoch, tr.device_id, tr.direction, repr(float(r * _KB * tr.granularity_s))])
    return out.getvalue()


def parse_labels(csv_source) -> list[ActivityLabel]:
    """Parse the label CSV (device_ids is a ';'-separated list)."""
    text = _as_text(csv_source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TraceFormatError("empty label CSV") from None
    if [h.strip() for h in header] != ["activity_id", "start_epoch_s", "end_epoch_s", "device_ids"]:
        raise TraceFormatError(f"bad label header {header!r}")
    labels = []
    for row_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise TraceFormatError(f"label row {row_no}: expected 4 fields")
        try:
            activity_id = int(row[0])
            start = int(row[1])
            end = int(row[2])
        except ValueError:
            raise TraceFormatError(f"label row {row_no}: unparseable integer field") from None
        devices = frozenset(
            (d, dirn) for d in row[3].split(";") if d for dirn in ("in", "out")
        )
        labels.append(ActivityLabel(activity_id, devices, start, end))
    return labels


def serialize_labels(labels: list[ActivityLabel]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["activity_id", "start_epoch_s", "end_epoch_s", "device_ids"])
    for lab in labels:
        devices = ";".join(sorted({d for d, _ in lab.device_events}))
        writer.writerow([lab.activity_id, lab.start_epoch_s, lab.end_epoch_s, devices])
    return out.getvalue()


def resample(trace: RateTrace, new_granularity_s: int) -> RateTrace:
    """Mean-aggregate a trace to a coarser granularity.

    The new granularity must be an integer multiple of the old one; each
    output sample is the mean of its covered input samples, so byte volume
    is conserved.  A trailing partial bucket averages over the samples it
    actually covers.
    """
    if new_granularity_s < trace.granularity_s or new_granularity_s % trace.granularity_s:
        raise ContractError(
            f"new granularity {new_granularity_s} is not a multiple of {trace.granularity_s}"
        )
    factor = new_granularity_s // trace.granularity_s
    if factor == 1:
        return trace
    n = len(trace.rates)
    n_out = -(-n // factor)
    padded = np.full(n_out * factor, np.nan)
    padded[:n] = trace.rates
    grouped = padded.reshape(n_out, factor)
    with np.errstate(invalid="ignore"):
        means = np.nanmean(grouped, axis=1)
    # a trailing partial bucket must conserve volume, not average over pad
    if n % factor:
        tail = trace.rates[(n_out - 1) * factor:]
        means[-1] = np.nansum(tail) / factor if not np.all(np.isnan(tail)) else np.nan
    return replace(
        trace,
        granularity_s=new_granularity_s,
        rates=means,
        nonstandard_granularity=new_granularity_s not in STANDARD_GRANULARITIES,
    )


def impute_knn(trace: RateTrace, k: int) -> RateTrace:
    """Fill absent samples with the mean of the k temporally-nearest
    present samples (ties broken toward earlier samples)."""
    if k < 1:
        raise ContractError("k must be positive")
    rates = trace.rates
    missing = np.flatnonzero(np.isnan(rates))
    if missing.size == 0:
        return trace
    present = np.flatnonzero(~np.isnan(rates))
    if present.size < k:
        raise ContractError(f"need at least k={k} present samples, have {present.size}")
    out = rates.copy()
    for idx in missing:
        dist = np.abs(present - idx)
        # stable sort on (distance, index) puts earlier samples first on ties
        order = np.lexsort((present, dist))[:k]
        out[idx] = rates[present[order]].mean()
    return replace(trace, rates=out)


def background_filter(trace: RateTrace, cap_kb_s: float) -> tuple[RateTrace, int]:
    """Clip samples above ``cap_kb_s``; returns (trace, clipped count)."""
    if cap_kb_s <= 0:
        raise ContractError("cap must be positive")
    clipped = int(np.sum(trace.rates > cap_kb_s))
    if clipped == 0:
        return trace, 0
    return replace(trace, rates=np.minimum(trace.rates, cap_kb_s)), clipped


def split_dataset(n_items: int, seed: int, labels=None) -> DatasetSplit:
    """Deterministic 70/15/15 split, stratified per class when labels given."""
    if n_items < 3:
        raise ContractError("need at least 3 items to split")
    rng = np.random.default_rng(np.uint64(seed))
    if labels is None:
        groups = [np.arange(n_items, dtype=np.int64)]
    else:
        labels = np.asarray(labels)
        if len(labels) != n_items:
            raise ContractError("labels length must equal n_items")
        groups = [np.flatnonzero(labels == c).astype(np.int64) for c in np.unique(labels)]
    train, val, test = [], [], []
    for g in groups:
        perm = g[rng.permutation(len(g))]
        n_train = int(round(0.70 * len(g)))
        n_val = int(round(0.15 * len(g)))
        # rounding can leave the test share empty (e.g. 5 items -> 4/1/0);
        # every group of 3+ items must reach all three partitions
        if len(g) >= 3 and n_train + n_val >= len(g):
            n_train = len(g) - n_val - 1
        train.append(perm[:n_train])
        val.append(perm[n_train:n_train + n_val])
        test.append(perm[n_train + n_val:])
    return DatasetSplit(
        np.sort(np.concatenate(train)),
        np.sort(np.concatenate(val)),
        np.sort(np.concatenate(test)),
        seed,
    )


@dataclass(frozen=True)
class BurstShape:
    """Parametric device activity: a train of identical bursts.

    Each burst is a triangular ramp up, plateau, ramp down; the burst
    count and inter-burst spacing form the activity's temporal signature.
    """

    amplitude_kb_s: float
    ramp_s: int
    plateau_s: int
    out_in_ratio: float  # outbound amplitude as a fraction of inbound
    n_bursts: int = 1
    spacing_s: int = 0

    @property
    def burst_s(self) -> int:
        return 2 * self.ramp_s + self.plateau_s

    @property
    def duration_s(self) -> int:
        return self.n_bursts * self.burst_s + (self.n_bursts - 1) * self.spacing_s

    def profile(self) -> np.ndarray:
        up = np.linspace(0.0, 1.0, self.ramp_s + 1)[1:]
        burst = np.concatenate([up, np.ones(self.plateau_s), up[::-1]])
        parts = [burst]
        for _ in range(self.n_bursts - 1):
            parts.append(np.zeros(self.spacing_s))
            parts.append(burst)
        return self.amplitude_kb_s * np.concatenate(parts)


def synth_home(
    seed: int,
    n_devices: int,
    duration_s: int,
    events_per_device: int,
    n_activities: int | None = None,
) -> tuple[list[RateTrace], list[ActivityLabel]]:
    """Generate a seeded synthetic smart home at 1 s granularity.

    Each device owns a disjoint set of activity ids (round-robin over
    ``n_activities``, default one per device); each activity has a
    distinctive burst shape.  Devices emit ``events_per_device`` events,
    cycling through their activities, on a low noise floor.  Returns
    per-device in/out traces plus ground-truth activity windows.
    """
    if min(seed, n_devices, duration_s, events_per_device) < 1:
        raise ContractError("all synth_home arguments must be positive")
    if n_activities is None:
        n_activities = n_devices
    rng = np.random.default_rng(np.uint64(seed))

    shapes = {}
    half = (n_activities + 1) // 2
    target_volume = 260.0  # KB per burst, roughly equal across activities
    for act in range(n_activities):
        # amplitude grows geometrically (clean rate-level signal) while the
        # per-burst volume stays near-constant; burst count and spacing give
        # each activity a distinctive temporal pattern
        amp = 55.0 * 1.11**act * float(rng.uniform(0.98, 1.02))
        n_bursts = 2 + act // half
        idx = act % half
        spacing = 12 + (4 if n_bursts == 2 else 2) * idx
        shapes[act] = BurstShape(
            amplitude_kb_s=amp,
            ramp_s=1,
            plateau_s=max(1, round(target_volume / amp) - 2),
            out_in_ratio=0.35,
            n_bursts=n_bursts,
            spacing_s=spacing,
        )
    device_activities = {
        d: [a for a in range(n_activities) if a % n_devices == d] for d in range(n_devices)
    }
    for d, acts in device_activities.items():
        if not acts:
            raise ContractError("more devices than activities")

    traces, labels = [], []
    for d in range(n_devices):
        dev = f"dev{d:02d}"
        rates_in = rng.uniform(0.0, 0.4, duration_s)
        rates_out = rng.uniform(0.0, 0.2, duration_s)
        acts = device_activities[d]
        slot = duration_s / events_per_device
        for e in range(events_per_device):
            act = acts[e % len(acts)]
            shape = shapes[act]
            # phase-offset devices within each slot so bursts rarely collide
            base = int(e * slot + d * slot / max(1, n_devices))
            jitter = int(rng.integers(0, max(1, int(slot / (2 * n_devices)))))
            start = min(base + jitter, duration_s - shape.duration_s - 1)
            prof = shape.profile() * float(rng.uniform(0.92, 1.08))
            rates_in[start:start + len(prof)] += prof
            # per-event outbound ratio noise keeps the reverse direction
            # from simply mirroring the activity's rate level
            rates_out[start:start + len(prof)] += prof * float(rng.uniform(0.2, 0.5))
            labels.append(
                ActivityLabel(
                    activity_id=act,
                    device_events=frozenset({(dev, "in"), (dev, "out")}),
                    start_epoch_s=start,
                    end_epoch_s=start + shape.duration_s,
                )
            )
        traces.append(RateTrace(dev, "in", 1, 0, rates_in))
        traces.append(RateTrace(dev, "out", 1, 0, rates_out))
    labels.sort(key=lambda lab: (lab.start_epoch_s, lab.activity_id))
    return traces, labels


def aggregate_home(traces: list[RateTrace]) -> tuple[RateTrace, RateTrace]:
    """Sum per-device traces into whole-home in/out aggregate traces,
    the on-path adversary's view."""
    if not traces:
        raise ContractError("no traces to aggregate")
    gran = traces[0].granularity_s
    start = min(t.start_epoch_s for t in traces)
    end = max(t.end_epoch_s() for t in traces)
    n = (end - start) // gran
    out = {}
    for direction in ("in", "out"):
        total = np.zeros(n)
        for t in traces:
            if t.direction != direction:
                continue
            if t.granularity_s != gran:
                raise ContractError("aggregate requires a single granularity")
            off = (t.start_epoch_s - start) // gran
            total[off:off + len(t.rates)] += np.nan_to_num(t.rates)
        out[direction] = RateTrace("home", direction, gran, start, total)
    return out["in"], out["out"]


def _as_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data
