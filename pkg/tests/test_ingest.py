import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.conftest import make_trace
from trafficbench.ingest import (
    ActivityLabel,
    ContractError,
    RateTrace,
    TraceFormatError,
    aggregate_home,
    background_filter,
    impute_knn,
    parse_labels,
    parse_trace,
    resample,
    serialize_labels,
    serialize_trace,
    split_dataset,
    synth_home,
)

TRACE_CSV = (
    "epoch_s,device_id,direction,bytes\n"
    "100,cam,in,2000\n"
    "101,cam,in,500\n"
    "103,cam,in,1000\n"
    "100,cam,out,250\n"
)


class TestParseTrace:
    def test_rates_are_kb_per_s(self):
        traces = parse_trace(TRACE_CSV)
        cam_in = next(t for t in traces if t.direction == "in")
        assert cam_in.start_epoch_s == 100
        np.testing.assert_allclose(cam_in.rates[[0, 1, 3]], [2.0, 0.5, 1.0])

    def test_gap_seconds_are_nan(self):
        cam_in = next(t for t in parse_trace(TRACE_CSV) if t.direction == "in")
        assert np.isnan(cam_in.rates[2])
        assert cam_in.n_missing == 1

    def test_one_trace_per_device_direction(self):
        traces = parse_trace(TRACE_CSV)
        assert {(t.device_id, t.direction) for t in traces} == {("cam", "in"), ("cam", "out")}

    def test_duplicate_seconds_accumulate(self):
        csv = "epoch_s,device_id,direction,bytes\n5,d,in,100\n5,d,in,400\n"
        (t,) = parse_trace(csv)
        assert t.rates[0] == pytest.approx(0.5)

    def test_bad_header_rejected(self):
        with pytest.raises(TraceFormatError, match="header"):
            parse_trace("time,dev,dir,bytes\n")

    def test_unparseable_timestamp_names_row(self):
        csv = "epoch_s,device_id,direction,bytes\nxx,d,in,1\n"
        with pytest.raises(TraceFormatError, match="rows \\[2\\]"):
            parse_trace(csv)

    def test_negative_bytes_rejected(self):
        csv = "epoch_s,device_id,direction,bytes\n1,d,in,-5\n"
        with pytest.raises(TraceFormatError, match="row 2"):
            parse_trace(csv)

    def test_bad_direction_rejected(self):
        csv = "epoch_s,device_id,direction,bytes\n1,d,sideways,5\n"
        with pytest.raises(TraceFormatError, match="direction"):
            parse_trace(csv)

    def test_round_trip(self):
        traces = parse_trace("epoch_s,device_id,direction,bytes\n7,d,in,123\n8,d,in,456\n")
        again = parse_trace(serialize_trace(traces))
        np.testing.assert_array_equal(again[0].rates, traces[0].rates)
        assert again[0].start_epoch_s == traces[0].start_epoch_s


class TestRateTrace:
    def test_negative_rate_rejected(self):
        with pytest.raises(ContractError, match="negative"):
            make_trace([1.0, -0.1])

    def test_rates_are_write_locked(self):
        t = make_trace([1.0, 2.0])
        with pytest.raises(ValueError):
            t.rates[0] = 5.0

    def test_byte_volume(self):
        t = make_trace([1.0, 2.0, np.nan], granularity_s=1)
        assert t.byte_volume_kb() == pytest.approx(3.0)

    def test_bad_direction(self):
        with pytest.raises(ContractError):
            RateTrace("d", "up", 1, 0, np.ones(3))


class TestLabels:
    def test_parse_and_round_trip(self):
        csv = "activity_id,start_epoch_s,end_epoch_s,device_ids\n3,10,40,cam;tv\n"
        (lab,) = parse_labels(csv)
        assert lab.activity_id == 3
        assert ("cam", "in") in lab.device_events and ("tv", "out") in lab.device_events
        (again,) = parse_labels(serialize_labels([lab]))
        assert again == lab

    def test_empty_window_rejected(self):
        with pytest.raises(ContractError):
            ActivityLabel(1, frozenset(), 10, 10)

    def test_bad_header(self):
        with pytest.raises(TraceFormatError):
            parse_labels("a,b,c,d\n")


class TestResample:
    def test_mean_aggregation(self):
        t = make_trace([1.0, 3.0, 5.0, 7.0])
        r = resample(t, 2)
        np.testing.assert_allclose(r.rates, [2.0, 6.0])

    def test_non_multiple_rejected(self):
        with pytest.raises(ContractError):
            resample(make_trace([1.0, 2.0], granularity_s=2), 3)

    @given(
        st.lists(st.floats(0, 1e4), min_size=1, max_size=60),
        st.integers(2, 9),
    )
    @settings(max_examples=60, deadline=None)
    def test_volume_conserved(self, values, factor):
        t = make_trace(values)
        r = resample(t, factor)
        assert r.byte_volume_kb() == pytest.approx(t.byte_volume_kb(), rel=1e-9, abs=1e-9)


class TestImputeKnn:
    def test_fills_with_nearest_mean(self):
        t = make_trace([2.0, np.nan, 4.0])
        out = impute_knn(t, 2)
        assert out.rates[1] == pytest.approx(3.0)

    def test_tie_breaks_toward_earlier(self):
        t = make_trace([10.0, np.nan, 20.0])
        out = impute_knn(t, 1)
        assert out.rates[1] == pytest.approx(10.0)

    def test_needs_k_present(self):
        with pytest.raises(ContractError):
            impute_knn(make_trace([1.0, np.nan]), 2)

    def test_no_missing_is_identity(self):
        t = make_trace([1.0, 2.0])
        assert impute_knn(t, 1) is t


class TestBackgroundFilter:
    def test_clips_and_counts(self):
        t, n = background_filter(make_trace([1.0, 9.0, 3.0]), 5.0)
        assert n == 1
        np.testing.assert_allclose(t.rates, [1.0, 5.0, 3.0])

    def test_noop_below_cap(self):
        t = make_trace([1.0, 2.0])
        out, n = background_filter(t, 5.0)
        assert n == 0 and out is t


class TestSplitDataset:
    def test_partitions_disjoint_and_complete(self):
        sp = split_dataset(100, seed=5)
        all_idx = np.concatenate([sp.train, sp.validation, sp.test])
        assert sorted(all_idx.tolist()) == list(range(100))
        assert len(sp.train) == 70 and len(sp.validation) == 15

    def test_same_seed_same_split(self):
        a, b = split_dataset(50, 3), split_dataset(50, 3)
        np.testing.assert_array_equal(a.train, b.train)

    def test_stratified_by_label(self):
        labels = np.repeat([0, 1], 20)
        sp = split_dataset(40, seed=1, labels=labels)
        assert np.sum(labels[sp.train] == 0) == 14
        assert np.sum(labels[sp.test] == 1) == 3

    def test_too_small_rejected(self):
        with pytest.raises(ContractError):
            split_dataset(2, 1)


class TestSynthHome:
    def test_deterministic(self):
        a, la = synth_home(7, 2, 600, 4)
        b, lb = synth_home(7, 2, 600, 4)
        np.testing.assert_array_equal(a[0].rates, b[0].rates)
        assert la == lb

    def test_labels_cover_events(self, small_home):
        traces, labels, _, _ = small_home
        assert len(labels) == 2 * 8
        for lab in labels:
            assert 0 <= lab.start_epoch_s < lab.end_epoch_s <= 1800

    def test_activity_signatures_differ(self):
        traces, labels = synth_home(3, 1, 1800, 4, n_activities=4)
        tin = next(t for t in traces if t.direction == "in")
        # each activity's labeled window should contain its burst pattern
        peaks = {}
        for lab in labels:
            seg = tin.rates[lab.start_epoch_s:lab.end_epoch_s]
            peaks.setdefault(lab.activity_id, []).append(seg.max())
        means = sorted(np.mean(v) for v in peaks.values())
        assert all(b > a * 1.05 for a, b in zip(means, means[1:]))

    def test_invalid_args(self):
        with pytest.raises(ContractError):
            synth_home(0, 1, 100, 1)


class TestAggregateHome:
    def test_sums_by_direction(self):
        t1 = make_trace([1.0, 2.0], device_id="a")
        t2 = make_trace([3.0, 4.0], device_id="b")
        o1 = make_trace([1.0, 1.0], device_id="a", direction="out")
        tin, tout = aggregate_home([t1, t2, o1])
        np.testing.assert_allclose(tin.rates, [4.0, 6.0])
        np.testing.assert_allclose(tout.rates, [1.0, 1.0])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            aggregate_home([])
