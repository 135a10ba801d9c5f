import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from pulsedrf.correlators import integrated_total
from pulsedrf.counting import detector_rate
from pulsedrf.model import make_model
from pulsedrf.trajectories import (
    MAX_JUMPS,
    CountingHistogram,
    TrajectoryRecord,
    bare_unraveling,
    estimate_probabilities,
    filter_unraveling,
    make_unraveling,
    run_ensemble,
    run_trajectory,
    sensor_unraveling,
    trajectory_uniforms,
)

PI = make_model(math.pi)


def test_zero_area_never_clicks():
    ens = run_ensemble(bare_unraveling(make_model(0.0)), 200, seed=4)
    assert ens.n_jumps.sum() == 0
    h = estimate_probabilities(ens, 0.5)
    assert h.counts == {(0, 0): 200}
    assert h.p((0, 0)) == 1.0


def test_free_decay_waiting_times_are_exponential():
    unr = dataclasses.replace(bare_unraveling(make_model(0.0)),
                              psi0=np.array([0.0, 1.0], dtype=complex))
    ens = run_ensemble(unr, 4000, seed=11)
    assert np.all(ens.n_jumps == 1)
    res = stats.kstest(ens.times[:, 0], "expon")
    assert res.pvalue > 1e-3


def test_mean_clicks_match_emitted_flux():
    ens = run_ensemble(bare_unraveling(PI), 20000, seed=7)
    mean, se = ens.mean_clicks()
    res = integrated_total(PI, (0, 0))
    flux = detector_rate(PI, 0) * res.populations[0][-1]
    assert abs(mean - flux) < 4 * se


def test_streams_are_deterministic_and_distinct():
    a = trajectory_uniforms(5, 17)
    b = trajectory_uniforms(5, 17)
    c = trajectory_uniforms(5, 18)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])
    assert np.all(a[0] > 0)


def test_ensemble_independent_of_chunks_and_workers():
    unr = bare_unraveling(make_model(3 * math.pi))
    ref = run_ensemble(unr, 300, seed=9, chunk=100)
    parallel = run_ensemble(unr, 300, seed=9, chunk=100, workers=2)
    np.testing.assert_array_equal(np.nan_to_num(parallel.times, nan=-1),
                                  np.nan_to_num(ref.times, nan=-1))
    # a different batching only moves crossings within the time tolerance
    other = run_ensemble(unr, 300, seed=9, chunk=70)
    np.testing.assert_array_equal(other.n_jumps, ref.n_jumps)
    np.testing.assert_array_equal(other.channels, ref.channels)
    np.testing.assert_allclose(np.nan_to_num(other.times, nan=-1),
                               np.nan_to_num(ref.times, nan=-1), atol=1e-9)


def test_adaptive_and_batched_trajectories_agree():
    ens = run_ensemble(bare_unraveling(PI), 15, seed=3)
    for i in range(15):
        single = run_trajectory(PI, 3, i)
        batch = ens.record(i)
        assert len(single.jumps) == len(batch.jumps)
        for (t1, c1), (t2, c2) in zip(single.jumps, batch.jumps):
            assert c1 == c2
            assert t1 == pytest.approx(t2, abs=1e-7)


def test_histograms_sum_to_one():
    unr = filter_unraveling(make_model(3 * math.pi), 2.0)
    ens = run_ensemble(unr, 2000, seed=2)
    for T in (0.5, 1.0):
        h = estimate_probabilities(ens, T)
        assert sum(p for p, _ in h.probabilities().values()) == pytest.approx(1.0)
        assert sum(h.pn().values()) == pytest.approx(1.0)
    # records and arrays give the same histogram
    from_records = estimate_probabilities(ens.records(), 0.6, channels=unr.detected)
    assert from_records.counts == estimate_probabilities(ens, 0.6).counts


def test_per_channel_keys():
    m = make_model(3 * math.pi, sensors=[(0.0, 2.0), (0.0, 2.0)], coupling=0.02)
    unr = sensor_unraveling(m)
    ens = run_ensemble(unr, 300, seed=1)
    h = estimate_probabilities(ens, 0.6, per_channel=True)
    assert all(len(k) == 4 for k in h.counts)
    with pytest.raises(ValueError):
        estimate_probabilities(ens.records(), 0.6, per_channel=True)


def test_no_jumps_histogram_from_records():
    recs = [TrajectoryRecord(0, i, ()) for i in range(10)]
    h = estimate_probabilities(recs, 1.0, channels=(0,))
    assert h.p((0, 0)) == 1.0
    assert h.se((1, 0)) > 0


def test_overflowing_trajectories_are_flagged():
    unr = bare_unraveling(make_model(300 * math.pi, tau_d=20.0))
    ens = run_ensemble(unr, 2, seed=1)
    assert ens.overflow.all() and np.all(ens.n_jumps == MAX_JUMPS)
    h = estimate_probabilities(ens, 100.0)
    assert h.overflowed == 2 and h.n_traj == 0


def test_invalid_unravelings():
    with pytest.raises(ValueError):
        make_unraveling(PI, "nonsense")
    with pytest.raises(ValueError):
        filter_unraveling(PI, 0.0)
    with pytest.raises(ValueError):
        sensor_unraveling(PI)
    with pytest.raises(ValueError):
        run_ensemble(bare_unraveling(PI), 0)


def test_histogram_errors():
    h = CountingHistogram(0.5, {(1, 0): 30, (0, 1): 70}, 100)
    assert h.se((1, 0)) == pytest.approx(math.sqrt(0.3 * 0.7 / 100))
    assert h.probabilities()[(0, 1)][0] == 0.7
