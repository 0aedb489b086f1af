from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tierann.clustering import kmeans
from tierann.core import FormatError, Metric, UsageError
from tierann.dataset import (Dataset, GroundTruth, brute_force_topk, format_vecs, generate_synthetic,
                             load_manifest_dataset, load_vectors, parse_vecs, read_groundtruth, read_vecs,
                             rng_for, sample, write_groundtruth, write_manifest, write_vecs)


def test_fvecs_example_bytes(tmp_path):
    raw = bytes.fromhex("02000000 0000803F 00000040".replace(" ", ""))
    f = tmp_path / "one.fvecs"
    f.write_bytes(raw)
    ds = load_vectors(f)
    assert ds.dim == 2 and len(ds) == 1
    assert ds.vectors.tolist() == [[1.0, 2.0]]
    assert ds.ids.tolist() == [0]


def test_empty_file(tmp_path):
    f = tmp_path / "empty.fvecs"
    f.write_bytes(b"")
    ds = load_vectors(f)
    assert len(ds) == 0 and ds.dim is None


def test_truncated_record_names_offset():
    raw = struct.pack("<i2f", 4, 1.0, 2.0)
    with pytest.raises(FormatError) as err:
        parse_vecs(raw, "fvecs")
    # the record runs out of bytes at offset 12 (4-byte header + 2 floats)
    assert err.value.offset == 12
    assert "offset 12" in str(err.value)


def test_bad_dimension_and_inconsistent_records():
    with pytest.raises(FormatError):
        parse_vecs(struct.pack("<i", 0), "fvecs")
    raw = struct.pack("<i2f", 2, 1.0, 2.0) + struct.pack("<i3f", 3, 1.0, 2.0, 3.0)
    with pytest.raises(FormatError) as err:
        parse_vecs(raw, "fvecs")
    assert err.value.offset == 12


def test_bvecs_widen_without_scaling():
    raw = struct.pack("<i3B", 3, 0, 7, 255)
    assert parse_vecs(raw, "bvecs").astype(np.float32).tolist() == [[0.0, 7.0, 255.0]]


@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)))
def test_fvecs_round_trip_bytes(x):
    raw = format_vecs(x, "fvecs")
    if x.shape[0]:
        assert format_vecs(parse_vecs(raw, "fvecs"), "fvecs") == raw
    else:
        assert raw == b""


@given(arrays(np.int32, st.tuples(st.integers(1, 6), st.integers(1, 5))),
       arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 5))))
def test_ivecs_and_bvecs_round_trip(iv, bv):
    assert format_vecs(parse_vecs(format_vecs(iv, "ivecs"), "ivecs"), "ivecs") == format_vecs(iv, "ivecs")
    assert format_vecs(parse_vecs(format_vecs(bv, "bvecs"), "bvecs"), "bvecs") == format_vecs(bv, "bvecs")


def test_file_round_trip(tmp_path):
    x = generate_synthetic(50, 7, 3, 0.2, seed=1).vectors
    f = tmp_path / "x.fvecs"
    write_vecs(f, x)
    raw = f.read_bytes()
    write_vecs(tmp_path / "y.fvecs", read_vecs(f))
    assert (tmp_path / "y.fvecs").read_bytes() == raw


def test_manifest_dataset(tmp_path):
    x = generate_synthetic(20, 4, 2, 0.1, seed=2).vectors
    write_vecs(tmp_path / "base.fvecs", x)
    write_manifest(tmp_path / "ds.txt", {"path": "base.fvecs", "format": "fvecs", "metric": "cosine", "dim": 4})
    ds = load_manifest_dataset(tmp_path / "ds.txt")
    assert ds.metric is Metric.COSINE and np.array_equal(ds.vectors, x)
    write_manifest(tmp_path / "bad.txt", {"path": "base.fvecs", "dim": 5})
    with pytest.raises(FormatError):
        load_manifest_dataset(tmp_path / "bad.txt")


def test_sample_properties():
    ds = generate_synthetic(40, 3, 2, 0.3, seed=4)
    full = sample(ds, 40, seed=9)
    assert sorted(full.source_ids.tolist()) == list(range(40))
    assert full.ids.tolist() == list(range(40))
    assert np.array_equal(ds.vectors[full.source_ids.astype(np.int64)], full.vectors)
    assert len(sample(ds, 0, seed=1)) == 0
    a, b = sample(ds, 10, seed=5), sample(ds, 10, seed=5)
    assert np.array_equal(a.vectors, b.vectors) and np.array_equal(a.source_ids, b.source_ids)
    with pytest.raises(UsageError):
        sample(ds, 41, seed=1)


def test_rng_golden():
    # pins the generator family (PCG64 seeded directly with the integer seed)
    assert rng_for(7).integers(0, 1000, 5).tolist() == [944, 625, 684, 897, 578]
    src = sample(generate_synthetic(10, 2, 1, 0.0, seed=1), 4, seed=3).source_ids
    assert src.tolist() == [9, 6, 0, 2]


def test_generate_synthetic_golden_and_determinism():
    x = generate_synthetic(4, 3, 2, 0.1, seed=42).vectors
    assert x[0].tolist() == pytest.approx([0.0040847063, 1.0308487415, 0.7601161003], abs=1e-9)
    assert x[3].tolist() == pytest.approx([0.1302354932, 0.8194873929, 0.7142963409], abs=1e-9)
    assert np.array_equal(x, generate_synthetic(4, 3, 2, 0.1, seed=42).vectors)


def test_generate_synthetic_degenerate():
    x = generate_synthetic(12, 5, 1, 0.0, seed=3).vectors
    assert (x == x[0]).all()
    with pytest.raises(UsageError):
        generate_synthetic(0, 5, 1, 0.0, seed=3)


def test_kmeans_recovers_generator_centers():
    ds, centers = generate_synthetic(100_000, 8, 16, 0.02, seed=21, return_centers=True)
    found, _ = kmeans(ds.vectors, 16, seed=0)
    d = np.sqrt(((centers[:, None, :] - found[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert int((d <= 0.05).sum()) >= 15


def _exhaustive(base, ids, q, k, metric):
    # independent oracle: float64 arithmetic, python sort with (distance, id) keys
    out = []
    b = base.astype(np.float64)
    for row in q.astype(np.float64):
        if metric is Metric.SQUARED_L2:
            d = ((b - row) ** 2).sum(1)
        elif metric is Metric.NEG_INNER_PRODUCT:
            d = -(b @ row)
        else:
            d = 1 - (b @ row) / (np.linalg.norm(b, axis=1) * np.linalg.norm(row))
        out.append([i for _, i in sorted(zip(d.tolist(), ids.tolist()))[:k]])
    return np.array(out, dtype=np.uint64)


@pytest.mark.parametrize("metric", list(Metric))
def test_brute_force_matches_independent_scan(metric):
    ds = generate_synthetic(1000, 12, 8, 0.1, seed=6, metric=metric)
    q = generate_synthetic(25, 12, 8, 0.1, seed=7).vectors
    gt = brute_force_topk(ds, q, 10, block=7)
    assert np.array_equal(gt.ids, _exhaustive(ds.vectors, ds.ids, q, 10, metric))
    assert (np.diff(gt.distances, axis=1) >= 0).all()


def test_brute_force_examples():
    ds = Dataset.from_array([[0, 0], [3, 4], [1, 1]])
    gt = brute_force_topk(ds, [[3, 4]], 1)
    assert gt.ids.tolist() == [[1]] and gt.distances.tolist() == [[0.0]]
    gt = brute_force_topk(ds, [[0, 0]], 3)
    assert gt.ids.tolist() == [[0, 2, 1]]
    with pytest.raises(UsageError):
        brute_force_topk(ds, [[0, 0, 0]], 1)
    with pytest.raises(UsageError):
        brute_force_topk(ds, [[0, 0]], 4)


def test_brute_force_ties_by_ascending_id():
    ds = Dataset.from_array([[1, 0], [0, 1], [-1, 0], [0, -1]])
    assert brute_force_topk(ds, [[0, 0]], 4).ids.tolist() == [[0, 1, 2, 3]]


def test_groundtruth_files_round_trip(tmp_path):
    gt = GroundTruth(np.array([[3, 1], [0, 2]], dtype=np.uint64), np.array([[0.5, 1.0], [0, 2]], np.float32))
    write_groundtruth(tmp_path / "gt", gt)
    back = read_groundtruth(tmp_path / "gt")
    assert np.array_equal(back.ids, gt.ids) and back.distances.tobytes() == gt.distances.tobytes()


def test_sift_like_golden():
    from tierann.dataset import generate_sift_like

    d = generate_sift_like(5, dim=6, seed=1)
    assert d.vectors[0].tolist() == [0.0, 0.0, 492.27099609375, 0.0, 14.084583282470703, 88.83111572265625]
    assert float(d.vectors.sum(dtype=np.float64)) == pytest.approx(2973.476043701172, rel=1e-9)
    assert d.ids.tolist() == [0, 1, 2, 3, 4] and (d.vectors >= 0).all()
