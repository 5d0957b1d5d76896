import numpy as np
import pytest

from trafficbench.ingest import RateTrace, aggregate_home, synth_home


@pytest.fixture(scope="session")
def small_home():
    """A small seeded home: per-device traces, labels, and aggregates."""
    traces, labels = synth_home(
        seed=1, n_devices=2, duration_s=1800, events_per_device=8, n_activities=4
    )
    tin, tout = aggregate_home(traces)
    return traces, labels, tin, tout


def make_trace(rates, device_id="dev00", direction="in", granularity_s=1, start=0):
    return RateTrace(device_id, direction, granularity_s, start, np.asarray(rates, dtype=float))
