from __future__ import annotations

import numpy as np
import pytest

from tierann import profiler
from tierann.core import UsageError
from tierann.dataset import brute_force_topk, generate_synthetic
from tierann.graph import build_graph, min_beam_for_recall
from tierann.profiler import (DensityProbe, UnreachableTarget, measure_cost_at_density,
                              profile_vectors, select_balanced_density)


@pytest.fixture(scope="module")
def sample():
    ds = generate_synthetic(3000, 12, 30, 0.1, seed=31)
    q = generate_synthetic(60, 12, 30, 0.1, seed=32).vectors
    return ds, q, brute_force_topk(ds, q, 5)


def test_density_one_is_graph_cost(sample):
    ds, q, gt = sample
    probe = measure_cost_at_density(ds, 1.0, q, gt, 0.9, seed=0)
    g = build_graph(ds.ids, ds.vectors, seed=0)
    beam, rec, cost = min_beam_for_recall(g, q, gt.ids[:, :5], 5, 0.9)
    assert probe.probe_count == beam
    assert probe.accessed_vectors == pytest.approx(cost)
    assert probe.recall == rec


def test_single_partition_costs_n(sample):
    ds, q, gt = sample
    probe = measure_cost_at_density(ds, 1 / len(ds), q, gt, 0.9)
    assert probe.probe_count == 1
    # one centroid distance plus a full scan
    assert probe.accessed_vectors == pytest.approx(len(ds) + 1)
    assert probe.recall == 1.0


def test_probe_count_is_minimal(sample):
    ds, q, gt = sample
    probe = measure_cost_at_density(ds, 0.05, q, gt, 0.9, seed=2)
    assert probe.recall >= 0.9
    assert probe.accessed_vectors >= probe.probe_count
    if probe.probe_count > 1:
        worse = profiler.measure_cost_at_density(ds, 0.05, q, gt, 0.9999, seed=2)
        assert worse.probe_count >= probe.probe_count


def test_measure_errors(sample):
    ds, q, gt = sample
    with pytest.raises(UsageError):
        measure_cost_at_density(ds, 0.1, q, gt, 0.0)
    with pytest.raises(UsageError):
        measure_cost_at_density(ds, 0.1, q, brute_force_topk(ds, q, 3), 0.9)


def test_unreachable_target_carries_best_recall():
    ds = generate_synthetic(200, 4, 4, 0.3, seed=1)
    q = ds.vectors[:10] + 0.01
    gt = brute_force_topk(ds, q, 5)
    gt.ids[:, :] = 10**6  # no scan can ever find these
    with pytest.raises(UnreachableTarget) as err:
        measure_cost_at_density(ds, 0.1, q, gt, 0.5)
    assert err.value.best_recall == 0.0


def _fake_measure(curve):
    def measure(sample, d, queries, truth, target, seed, k, R, build_beam):
        return DensityProbe(d, curve(d), 1, 1.0, max(1, round(d * len(sample))))
    return measure


def test_selection_on_constructed_curve(monkeypatch, sample):
    ds, q, gt = sample
    big = ds.__class__(np.tile(ds.vectors, (40, 1)), np.arange(40 * len(ds)))  # 120k rows so 0.001 still differs from 1/n

    def curve(d):
        return 100.0 if d >= 0.1 else 100.0 * 2.0 ** np.log2(0.1 / d)

    monkeypatch.setattr(profiler, "measure_cost_at_density", _fake_measure(curve))
    prof = select_balanced_density(big, q, gt, cost_ratio=2.0)
    assert 0.05 <= prof.chosen <= 0.125
    assert prof.baseline_cost == 100.0
    assert prof.probes[0].density == 1.0
    assert [p.density for p in prof.probes] == sorted((p.density for p in prof.probes), reverse=True)
    assert prof.chosen in [p.density for p in prof.probes]
    for p in prof.probes:
        if p.density < prof.chosen:
            assert p.accessed_vectors > 2.0 * prof.baseline_cost


def test_infinite_ratio_reaches_floor(monkeypatch, sample):
    ds, q, gt = sample
    big = ds.__class__(np.tile(ds.vectors, (40, 1)), np.arange(40 * len(ds)))
    monkeypatch.setattr(profiler, "measure_cost_at_density", _fake_measure(lambda d: 1.0 / d))
    prof = select_balanced_density(big, q, gt, cost_ratio=1e300)
    assert prof.chosen == 0.001


def test_cost_ratio_must_exceed_one(sample):
    ds, q, gt = sample
    with pytest.raises(UsageError):
        select_balanced_density(ds, q, gt, cost_ratio=1.0)


def test_real_selection_rule_and_determinism(sample):
    ds, q, gt = sample
    a = select_balanced_density(ds, q, gt, seed=4)
    b = select_balanced_density(ds, q, gt, seed=4)
    assert a == b
    assert a.probe_at(1.0).accessed_vectors == a.baseline_cost
    if not a.fallback:
        ok = [p.density for p in a.probes if p.accessed_vectors <= 2.0 * a.baseline_cost]
        assert a.chosen == min(ok)


def test_profile_vectors_small_falls_back():
    ds = generate_synthetic(300, 6, 5, 0.2, seed=2)
    prof = profile_vectors(ds.ids, ds.vectors, ds.metric, n_queries=20, seed=1)
    assert prof.chosen in [p.density for p in prof.probes] or prof.fallback
