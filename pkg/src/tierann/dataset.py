"""Vector datasets: fvecs/bvecs/ivecs I/O, sampling, synthetic data and the
exact brute-force oracle behind every recall number.

Record layout for all three formats: a 4-byte little-endian int32 dimension
``d`` followed by ``d`` elements (float32 for fvecs, uint8 for bvecs, int32
for ivecs). All records in one file share ``d``.

Random draws use ``numpy.random.Generator(PCG64(seed))``; a golden test pins
its output so sampling stays reproducible across releases.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FormatError, Metric, UsageError, as_matrix, distances_to

_ELEMENT = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


@dataclass
class Dataset:
    vectors: np.ndarray
    ids: np.ndarray
    metric: Metric = Metric.SQUARED_L2
    source_ids: np.ndarray | None = None  # original ids after sample()

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise UsageError("vectors must be a 2-d array")
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if self.ids.shape[0] != self.vectors.shape[0]:
            raise UsageError("ids and vectors differ in length")
        self.metric = Metric.parse(self.metric)

    @classmethod
    def from_array(cls, x, metric: Metric | str = Metric.SQUARED_L2) -> "Dataset":
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        return cls(x, np.arange(x.shape[0], dtype=np.uint64), metric)

    @property
    def dim(self) -> int | None:
        return self.vectors.shape[1] or None

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class GroundTruth:
    """Exact top-k per query, ascending by distance (ties by ascending id)."""

    ids: np.ndarray        # (nq, k) uint64
    distances: np.ndarray  # (nq, k) float32

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]


# -- file formats ---------------------------------------------------------

def read_vecs(path: str | os.PathLike, fmt: str | None = None) -> np.ndarray:
    """Parse an fvecs/bvecs/ivecs file into an (n, d) array.

    Raises :class:`FormatError` naming the byte offset of the first bad record.
    An empty file yields a (0, 0) array.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt not in _ELEMENT:
        raise UsageError(f"unknown vector format {fmt!r} for {path}")
    raw = path.read_bytes()
    return parse_vecs(raw, fmt, name=str(path))


def parse_vecs(raw: bytes, fmt: str, name: str = "<bytes>") -> np.ndarray:
    elem = _ELEMENT[fmt]
    if not raw:
        return np.zeros((0, 0), dtype=elem)
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated dimension header", 0)
    d = int.from_bytes(raw[:4], "little", signed=True)
    if d <= 0:
        raise FormatError(f"{name}: non-positive dimension {d}", 0)
    rec = 4 + d * elem.itemsize
    n, rem = divmod(len(raw), rec)
    buf = np.frombuffer(raw, dtype=np.uint8, count=n * rec).reshape(n, rec)
    heads = buf[:, :4].copy().view("<i4").ravel()
    bad = np.nonzero(heads != d)[0]
    if bad.size:
        off = int(bad[0]) * rec
        raise FormatError(f"{name}: record dimension {int(heads[bad[0]])} != {d}", off)
    if rem:
        off = n * rec
        tail_d = int.from_bytes(raw[off:off + 4], "little", signed=True) if rem >= 4 else d
        if rem >= 4 and tail_d != d:
            raise FormatError(f"{name}: record dimension {tail_d} != {d}", off)
        raise FormatError(f"{name}: truncated record (need {rec} bytes, have {rem})", len(raw))
    return buf[:, 4:].copy().view(elem).reshape(n, d)


def write_vecs(path: str | os.PathLike, x: np.ndarray, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    path.write_bytes(format_vecs(x, fmt))


def format_vecs(x: np.ndarray, fmt: str) -> bytes:
    elem = _ELEMENT[fmt]
    x = np.asarray(x)
    if x.size == 0:
        return b""
    if x.ndim == 1:
        x = x.reshape(1, -1)
    n, d = x.shape
    rec = np.empty((n, 4 + d * elem.itemsize), dtype=np.uint8)
    rec[:, :4] = np.frombuffer(np.int32(d).astype("<i4").tobytes(), dtype=np.uint8)
    rec[:, 4:] = np.ascontiguousarray(x.astype(elem)).view(np.uint8).reshape(n, -1)
    return rec.tobytes()


def load_vectors(path: str | os.PathLike, fmt: str | None = None,
                 metric: Metric | str = Metric.SQUARED_L2) -> Dataset:
    """Load a vector file as a Dataset with ids 0..n-1.

    bvecs bytes widen to float32 unscaled.
    """
    x = read_vecs(path, fmt)
    return Dataset(x.astype(np.float32), np.arange(x.shape[0], dtype=np.uint64), metric)


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    """Plain ``key=value`` text; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_manifest(path: str | os.PathLike, entries: dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def load_manifest_dataset(path: str | os.PathLike) -> Dataset:
    """Load the dataset a manifest (path, format, metric, dim) points at."""
    path = Path(path)
    meta = read_manifest(path)
    if "path" not in meta:
        raise FormatError(f"{path}: manifest lacks 'path'")
    data_path = Path(meta["path"])
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    ds = load_vectors(data_path, meta.get("format"), meta.get("metric", "l2"))
    if "dim" in meta and len(ds) and int(meta["dim"]) != ds.vectors.shape[1]:
        raise FormatError(f"{path}: manifest dim {meta['dim']} != file dim {ds.vectors.shape[1]}")
    return ds


# -- sampling and generation ----------------------------------------------

def sample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample without replacement, re-labelled 0..n-1.

    The original ids are kept in ``source_ids``.
    """
    if n > len(ds):
        raise UsageError(f"cannot sample {n} of {len(ds)} vectors")
    if n < 0:
        raise UsageError("sample size must be non-negative")
    pick = rng_for(seed).permutation(len(ds))[:n]
    src = ds.ids[pick] if ds.source_ids is None else ds.source_ids[pick]
    return Dataset(ds.vectors[pick], np.arange(n, dtype=np.uint64), ds.metric, source_ids=src)


def generate_synthetic(n: int, dim: int, clusters: int, spread: float, seed: int,
                       metric: Metric | str = Metric.SQUARED_L2,
                       return_centers: bool = False):
    """Gaussian mixture: centers uniform in [0, 1]^dim, each point drawn around a
    uniformly chosen center with standard deviation ``spread``."""
    if min(n, dim, clusters) < 1:
        raise UsageError("n, dim and clusters must be >= 1")
    rng = rng_for(seed)
    centers = rng.random((clusters, dim), dtype=np.float32)
    which = rng.integers(0, clusters, size=n)
    x = centers[which]
    if spread:
        x = x + np.float32(spread) * rng.standard_normal((n, dim), dtype=np.float32)
    ds = Dataset(x, np.arange(n, dtype=np.uint64), metric)
    return (ds, centers) if return_centers else ds


def generate_sift_like(n: int, dim: int = 128, clusters: int = 16, latent_dim: int = 24,
                       seed: int = 0, noise: float = 0.05) -> Dataset:
    """Clustered data with low intrinsic dimension, as a stand-in for SIFT.

    Each cluster is a Gaussian living in its own random ``latent_dim``-dim
    subspace, plus a little isotropic noise; values are shifted non-negative
    and scaled to roughly SIFT's 0..255 range. The exact recipe is pinned by
    a golden test.
    """
    rng = rng_for(seed)
    centers = rng.random((clusters, dim), dtype=np.float32)
    bases = rng.standard_normal((clusters, latent_dim, dim), dtype=np.float32)
    bases /= np.sqrt(np.float32(dim))
    scales = (0.5 + rng.random(clusters, dtype=np.float32)).astype(np.float32)
    which = rng.integers(0, clusters, size=n)
    z = rng.standard_normal((n, latent_dim), dtype=np.float32)
    x = np.empty((n, dim), dtype=np.float32)
    for c in range(clusters):
        rows = np.nonzero(which == c)[0]
        x[rows] = centers[c] + scales[c] * (z[rows] @ bases[c])
    x += np.float32(noise) * rng.standard_normal((n, dim), dtype=np.float32)
    x = np.clip(x, 0.0, None) * np.float32(100.0)
    return Dataset(x.astype(np.float32), np.arange(n, dtype=np.uint64))


# -- brute-force oracle ----------------------------------------------------

def _block_scores(base: np.ndarray, q: np.ndarray, metric: Metric, base_sq: np.ndarray | None):
    dots = q @ base.T
    if metric == Metric.SQUARED_L2:
        return base_sq[None, :] - 2.0 * dots
    if metric == Metric.NEG_INNER_PRODUCT:
        return -dots
    qn = np.linalg.norm(q, axis=1)
    return -dots / np.maximum(np.outer(qn, base_sq), 1e-30)


def brute_force_topk(ds: Dataset, queries, k: int, block: int | None = None) -> GroundTruth:
    """Exact k nearest neighbours per query under ``ds.metric``.

    Candidates come from a BLAS pass; the final top-k is re-ranked with the
    same row-wise distance used by every search path, so reported distances
    match them bit for bit. Ties break by ascending id. ``block`` queries
    are scored at a time; by default it keeps the score matrix near 128 MB.
    """
    q = as_matrix(queries)
    n = len(ds)
    if k > n:
        raise UsageError(f"k={k} exceeds dataset size {n}")
    if k < 1:
        raise UsageError("k must be positive")
    if q.shape[0] and q.shape[1] != ds.vectors.shape[1]:
        raise UsageError(f"dimension mismatch: queries {q.shape[1]} vs data {ds.vectors.shape[1]}")
    base = ds.vectors
    metric = ds.metric
    if metric == Metric.SQUARED_L2:
        aux = np.einsum("ij,ij->i", base, base, dtype=np.float64).astype(np.float32)
    elif metric == Metric.COSINE:
        aux = np.linalg.norm(base, axis=1)
    else:
        aux = None
    block = block or max(1, min(1024, (1 << 25) // max(n, 1)))
    slack = min(n, max(2 * k, k + 32))
    out_ids = np.empty((q.shape[0], k), dtype=np.uint64)
    out_d = np.empty((q.shape[0], k), dtype=np.float32)
    for s in range(0, q.shape[0], block):
        qb = q[s:s + block]
        scores = _block_scores(base, qb, metric, aux)
        if slack < n:
            cand = np.argpartition(scores, slack - 1, axis=1)[:, :slack]
        else:
            cand = np.broadcast_to(np.arange(n), (qb.shape[0], n))
        for j in range(qb.shape[0]):
            rows = cand[j]
            d = distances_to(base[rows], qb[j], metric)
            ids = ds.ids[rows]
            order = np.lexsort((ids, d))[:k]
            out_ids[s + j] = ids[order]
            out_d[s + j] = d[order]
    return GroundTruth(out_ids, out_d)


def write_groundtruth(prefix: str | os.PathLike, gt: GroundTruth) -> tuple[Path, Path]:
    """Write ``<prefix>.ivecs`` (ids) and ``<prefix>.fvecs`` (distances)."""
    prefix = Path(prefix)
    ids_path = prefix.with_suffix(".ivecs")
    d_path = prefix.with_suffix(".fvecs")
    if gt.ids.size and int(gt.ids.max()) > np.iinfo(np.int32).max:
        raise UsageError("ids exceed the int32 range of ivecs")
    write_vecs(ids_path, gt.ids.astype(np.int32), "ivecs")
    write_vecs(d_path, gt.distances, "fvecs")
    return ids_path, d_path


def read_groundtruth(prefix: str | os.PathLike) -> GroundTruth:
    prefix = Path(prefix)
    ids = read_vecs(prefix.with_suffix(".ivecs"), "ivecs").astype(np.uint64)
    d = read_vecs(prefix.with_suffix(".fvecs"), "fvecs")
    return GroundTruth(ids, d)
