"""Pipeline tests: seed derivation, windowing, ranking, end-to-end smoke."""

import numpy as np
import pytest

from trafficbench.attack.pipeline import (
    PipelineConfig,
    WindowDataset,
    apply_defense_to_home,
    attack_pipeline,
    derive_seed,
    rank_classes,
    window_features,
    window_images,
)
from trafficbench.defense import DefenseConfig
from trafficbench.ingest import ContractError, aggregate_home, synth_home


@pytest.fixture(scope="module")
def home():
    traces, labels = synth_home(
        seed=4, n_devices=2, duration_s=3600, events_per_device=12, n_activities=4
    )
    agg_in, agg_out = aggregate_home(traces)
    return WindowDataset(agg_in, agg_out, labels)


class TestSeedDerivation:
    def test_deterministic(self):
        assert derive_seed(42, "split") == derive_seed(42, "split")

    def test_stage_separation(self):
        assert derive_seed(42, "split") != derive_seed(42, "fusion/init")

    def test_master_separation(self):
        assert derive_seed(1, "split") != derive_seed(2, "split")

    def test_fits_in_uint64(self):
        assert 0 <= derive_seed(123456789, "x") < 2**64


class TestWindowing:
    def test_centers_respect_margin(self, home):
        cfg = PipelineConfig()
        centers, acts = home.window_centers(cfg)
        margin = cfg.window_len // 2 * max(cfg.gaf.granularity_multipliers)
        n = len(home.trace_in.rates)
        assert len(centers) == len(acts) > 0
        assert centers.min() >= margin and centers.max() < n - margin

    def test_tight_margin_keeps_more_windows(self, home):
        import trafficbench.imaging as imaging

        wide = PipelineConfig()
        tight = PipelineConfig(gaf=imaging.GafConfig(1, (1,)))
        assert len(home.window_centers(tight)[0]) >= len(home.window_centers(wide)[0])

    def test_features_shape(self, home):
        cfg = PipelineConfig()
        centers, _ = home.window_centers(cfg)
        feats = window_features(home.trace_in, home.trace_out, centers[:5], cfg)
        assert feats.shape == (5, 24)  # 12 motif features per direction
        assert np.isfinite(feats).all()

    def test_features_empty_centers(self, home):
        cfg = PipelineConfig()
        assert window_features(home.trace_in, home.trace_out, [], cfg).shape == (0, 24)

    def test_images_aligned(self, home):
        cfg = PipelineConfig(image_size=16)
        centers, _ = home.window_centers(cfg)
        images = window_images(home.trace_in, home.trace_out, centers[:4], cfg)
        assert set(images) == set(cfg.representations)
        for arr in images.values():
            assert arr.shape == (4, 16, 16, 3)
            assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestRankClasses:
    def test_orders_by_probability(self):
        proba = np.array([[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]])
        ranked = rank_classes(proba, np.array(["a", "b", "c"]), 3)
        assert list(ranked[0]) == ["b", "c", "a"]
        assert list(ranked[1]) == ["a", "c", "b"]

    def test_tie_breaks_by_class_id(self):
        proba = np.array([[0.4, 0.4, 0.2]])
        ranked = rank_classes(proba, np.array([10, 20, 30]), 2)
        assert list(ranked[0]) == [10, 20]


class TestDefendedHome:
    def test_identity_defense_is_passthrough(self, home):
        defended, outcomes = apply_defense_to_home(
            home, DefenseConfig(method="identity"), seed=1
        )
        assert np.array_equal(defended.trace_in.rates, home.trace_in.rates)
        assert all(o.overhead_pct == 0.0 for o in outcomes.values())

    def test_rtp_defaults_cap_to_peak(self, home):
        defended, outcomes = apply_defense_to_home(
            home, DefenseConfig(method="rtp"), seed=2
        )
        for name, tr in (("in", home.trace_in), ("out", home.trace_out)):
            reshaped = defended.trace_in if name == "in" else defended.trace_out
            assert reshaped.rates.max() <= tr.rates.max() + 1e-9
            assert np.all(reshaped.rates >= tr.rates - 1e-12)

    def test_defense_deterministic(self, home):
        cfg = DefenseConfig(method="pti")
        a, _ = apply_defense_to_home(home, cfg, seed=3)
        b, _ = apply_defense_to_home(home, cfg, seed=3)
        assert np.array_equal(a.trace_in.rates, b.trace_in.rates)


class TestEndToEnd:
    def test_classifier_smoke(self, home):
        cfg = PipelineConfig(image_size=16)
        ranked, report = attack_pipeline(
            home, DefenseConfig(method="identity"), "random_forest", seed=5, cfg=cfg
        )
        assert ranked.ndim == 2
        assert 0.0 <= report.top1 <= 1.0
        assert -1.0 <= report.mcc <= 1.0
        assert report.metadata["attack"] == "random_forest"

    def test_fusion_smoke(self, home):
        cfg = PipelineConfig(
            image_size=16, representations=("line_chart",), fusion_epochs=2
        )
        ranked, report = attack_pipeline(
            home, DefenseConfig(method="identity"), "fusion", seed=6, cfg=cfg
        )
        assert report.metadata["representations"] == ["line_chart"]
        assert 0.0 <= report.top1 <= 1.0

    def test_pipeline_deterministic(self, home):
        cfg = PipelineConfig(image_size=16)
        r1 = attack_pipeline(home, DefenseConfig(method="pti"), "k_nearest", seed=7, cfg=cfg)
        r2 = attack_pipeline(home, DefenseConfig(method="pti"), "k_nearest", seed=7, cfg=cfg)
        assert np.array_equal(r1[0], r2[0])
        import json

        from trafficbench.evaluation import report_to_dict

        assert json.dumps(report_to_dict(r1[1]), sort_keys=True) == json.dumps(
            report_to_dict(r2[1]), sort_keys=True
        )

    def test_stage_errors_are_labeled(self, home):
        short = WindowDataset(home.trace_in, home.trace_out, home.labels[:1])
        with pytest.raises(ContractError, match="window stage"):
            attack_pipeline(short, DefenseConfig(method="identity"), "k_nearest", seed=8)
