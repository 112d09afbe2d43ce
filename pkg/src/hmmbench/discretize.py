"""K-means quantization of continuous observations.

Two strategies turn a continuous :class:`~hmmbench.data.SequenceDataset`
into symbols: *pooled* (one codebook over every observation of every
sequence) and *per-slice* (an independent codebook per time index, for
templates whose node distributions change over time).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import SequenceDataset
from .errors import InvalidInputError

_log = logging.getLogger(__name__)

#: Silhouette is quadratic in the number of points; larger inputs are subsampled.
SILHOUETTE_MAX_POINTS = 2000


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 300
    num_restarts: int = 10
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self):
        if int(self.k) < 1:
            raise InvalidInputError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1 or self.num_restarts < 1:
            raise InvalidInputError("max_iters and num_restarts must be positive")
        if self.tol < 0:
            raise InvalidInputError("tol must be nonnegative")


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    sse: float
    #: SSE after every assignment step of the winning restart.
    sse_trace: tuple = ()
    restart: int = 0


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("points must be a nonempty n x D array")
    return x


def _sq_dists(x, centroids):
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest_centroid(points, centroids) -> np.ndarray:
    """Index of the closest centroid for each point; ties go to the lower index."""
    x = _as_points(points)
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, x.shape[1])
    return np.argmin(_sq_dists(x, c), axis=1)


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", x - centers[0], x - centers[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # only reachable with fewer distinct points than k
            raise InvalidInputError("not enough distinct points for k-means++ seeding")
        idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        diff = x - centers[j]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return centers


def _lloyd(x, centroids, max_iters, tol):
    k = centroids.shape[0]
    trace = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        assign = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(len(x)), assign].sum()))
        counts = np.bincount(assign, minlength=k)
        new = centroids.copy()
        nonempty = counts > 0
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            own = x - new[assign]
            far = int(np.argmax(np.einsum("nd,nd->n", own, own)))
            new[j] = x[far]
            assign[far] = j
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift <= tol and nonempty.all():
            break
    d2 = _sq_dists(x, centroids)
    assign = np.argmin(d2, axis=1)
    sse = float(d2[np.arange(len(x)), assign].sum())
    trace.append(sse)
    return centroids, assign, sse, trace


def kmeans_fit(points, config: KMeansConfig) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds, best of ``num_restarts``.

    Empty clusters are re-seeded at the point farthest from its current
    centroid. The restart with the lowest SSE wins, ties going to the
    earlier restart.
    """
    x = _as_points(points)
    k = int(config.k)
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise InvalidInputError(f"k={k} exceeds the number of distinct points ({n_distinct})")

    best = None
    for r, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.num_restarts)):
        rng = np.random.default_rng(child)
        seeds = _kmeanspp(x, k, rng)
        centroids, assign, sse, trace = _lloyd(x, seeds, config.max_iters, config.tol)
        if best is None or sse < best.sse:
            best = KMeansResult(centroids, assign, sse, tuple(trace), r)
    return best


def silhouette_samples(points, assignments) -> np.ndarray:
    """Per-point silhouette coefficient (b - a) / max(a, b).

    ``a`` is the mean distance to the other members of the point's own
    cluster, ``b`` the smallest mean distance to another cluster. Points
    in singleton clusters score 0.
    """
    x = _as_points(points)
    labels = np.asarray(assignments).reshape(-1)
    if len(labels) != len(x):
        raise InvalidInputError("assignments must align with points")
    uniq, lab = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise InvalidInputError("silhouette needs at least two clusters")
    dist = np.sqrt(np.maximum(_sq_dists(x, x), 0.0))
    n_clusters = len(uniq)
    onehot = np.zeros((len(x), n_clusters))
    onehot[np.arange(len(x)), lab] = 1.0
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # n x clusters, distance totals per cluster
    own = sizes[lab]
    a = np.where(own > 1, sums[np.arange(len(x)), lab] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(len(x)), lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def silhouette_score(points, assignments, sample_size: int | None = SILHOUETTE_MAX_POINTS,
                     seed: int = 0) -> float:
    """Mean silhouette coefficient, on a seeded subsample for large inputs."""
    x = _as_points(points)
    labels = np.asarray(assignments).reshape(-1)
    if sample_size is not None and len(x) > sample_size:
        idx = np.sort(np.random.default_rng(seed).choice(len(x), sample_size, replace=False))
        x, labels = x[idx], labels[idx]
    return float(silhouette_samples(x, labels).mean())


@dataclass(frozen=True)
class KSelection:
    k: int
    ks: tuple
    #: SSE per k for the elbow rule, silhouette score per k otherwise.
    scores: tuple


def elbow_from_curve(ks, sse) -> int:
    """Pick the knee of a decreasing SSE curve.

    Both axes are rescaled to [0, 1] and the interior k farthest below the
    chord joining the first and last points wins; ties go to the smaller
    k. A straight-line curve therefore returns the first interior k.
    """
    ks = [int(k) for k in ks]
    y = np.asarray(sse, dtype=np.float64)
    if len(ks) < 3:
        raise InvalidInputError("elbow selection needs at least three k values")
    x = (np.asarray(ks, dtype=np.float64) - ks[0]) / (ks[-1] - ks[0])
    span = y[0] - y[-1]
    yn = (y - y[-1]) / span if span > 0 else np.zeros_like(y)
    # distance below the chord from (0, 1) to (1, 0)
    gap = 1.0 - x - yn
    interior = gap[1:-1]
    best = interior.max()
    tie = 1e-12 * max(1.0, abs(best))
    return ks[1 + int(np.flatnonzero(interior >= best - tie)[0])]


def _check_range(k_range, minimum):
    ks = sorted({int(k) for k in k_range})
    if list(ks) != [int(k) for k in k_range]:
        raise InvalidInputError("k_range must be strictly ascending")
    if ks[0] < minimum:
        raise InvalidInputError(f"k values must be >= {minimum}")
    return ks


def select_k_elbow(points, k_range, seed: int = 0, num_restarts: int = 10) -> KSelection:
    ks = _check_range(k_range, 1)
    if len(ks) < 3:
        raise InvalidInputError("k_range needs at least three values")
    sse = [kmeans_fit(points, KMeansConfig(k, num_restarts=num_restarts, seed=seed)).sse
           for k in ks]
    return KSelection(elbow_from_curve(ks, sse), tuple(ks), tuple(sse))


def select_k_silhouette(points, k_range, seed: int = 0, num_restarts: int = 10,
                        sample_size: int | None = SILHOUETTE_MAX_POINTS) -> KSelection:
    ks = _check_range(k_range, 2)
    scores = []
    for k in ks:
        fit = kmeans_fit(points, KMeansConfig(k, num_restarts=num_restarts, seed=seed))
        scores.append(silhouette_score(points, fit.assignments, sample_size, seed))
    best = int(np.argmax(scores))  # first maximum -> smaller k
    return KSelection(ks[best], tuple(ks), tuple(scores))


# -- codebooks --------------------------------------------------------------

POOLED = "pooled"
PER_SLICE = "per_slice"


def _canonical_order(centroids):
    order = np.lexsort(centroids.T[::-1])
    return centroids[order]


@dataclass(frozen=True)
class Codebook:
    """Fitted centroid sets mapping observations to symbols.

    ``centroids`` holds one ``k x D`` array for a pooled codebook and one
    per time index for a per-slice codebook. Centroids are kept in
    lexicographic order so that, for 1-D data, symbols are ordinal.
    """

    mode: str
    centroids: tuple
    fitted_T: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (POOLED, PER_SLICE):
            raise InvalidInputError(f"unknown codebook mode {self.mode!r}")
        if not self.centroids or any(len(c) == 0 for c in self.centroids):
            raise InvalidInputError("every centroid set must be nonempty")
        if self.mode == POOLED and len(self.centroids) != 1:
            raise InvalidInputError("a pooled codebook has exactly one centroid set")
        if self.mode == PER_SLICE and len(self.centroids) != self.fitted_T:
            raise InvalidInputError("per-slice codebook must cover every time index")

    @property
    def k(self):
        ks = [len(c) for c in self.centroids]
        return ks[0] if len(set(ks)) == 1 else ks

    @property
    def n_symbols(self) -> int:
        return max(len(c) for c in self.centroids)

    @property
    def dim(self) -> int:
        return int(self.centroids[0].shape[1])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "centroids": [c.tolist() for c in self.centroids],
            "fitted_T": self.fitted_T,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Codebook":
        cents = tuple(np.asarray(c, dtype=np.float64).reshape(len(c), -1)
                      for c in doc["centroids"])
        return cls(doc["mode"], cents, doc.get("fitted_T"), dict(doc.get("meta") or {}))


def _require_continuous(dataset):
    if dataset.is_symbolic:
        raise InvalidInputError("discretization needs continuous observations")


def discretize_pooled(dataset: SequenceDataset, k: int, seed: int = 0,
                      num_restarts: int = 10):
    """Quantize every observation with one codebook fitted on all of them."""
    _require_continuous(dataset)
    fit = kmeans_fit(dataset.pooled_observations(),
                     KMeansConfig(int(k), num_restarts=num_restarts, seed=seed))
    book = Codebook(POOLED, (_canonical_order(fit.centroids),), None, {"sse": fit.sse})
    return apply_codebook(book, dataset), book


def discretize_per_slice(dataset: SequenceDataset, k, seed: int = 0,
                         num_restarts: int = 10):
    """Fit an independent codebook on the N values at each time index."""
    _require_continuous(dataset)
    if not dataset.equal_length:
        raise InvalidInputError("per-slice discretization needs equal-length sequences")
    stacked = dataset.stacked_observations()
    T = stacked.shape[1]
    ks = [int(k)] * T if np.isscalar(k) else [int(v) for v in k]
    if len(ks) != T:
        raise InvalidInputError(f"expected {T} per-slice k values, got {len(ks)}")
    cents = []
    sse = []
    for t, ((kt), child) in enumerate(zip(ks, np.random.SeedSequence(seed).spawn(T))):
        slice_seed = int(child.generate_state(1)[0])
        fit = kmeans_fit(stacked[:, t, :],
                         KMeansConfig(kt, num_restarts=num_restarts, seed=slice_seed))
        cents.append(_canonical_order(fit.centroids))
        sse.append(fit.sse)
    book = Codebook(PER_SLICE, tuple(cents), T, {"sse": sse})
    return apply_codebook(book, dataset), book


def apply_codebook(codebook: Codebook, dataset: SequenceDataset) -> SequenceDataset:
    """Replace each observation with its nearest centroid index; never refits."""
    _require_continuous(dataset)
    if dataset.dim != codebook.dim:
        raise InvalidInputError(
            f"codebook dimension {codebook.dim} does not match data dimension {dataset.dim}")
    if codebook.mode == POOLED:
        symbols = [nearest_centroid(o, codebook.centroids[0]) for o in dataset.observations]
    else:
        if not dataset.equal_length or dataset.T != codebook.fitted_T:
            raise InvalidInputError(
                f"per-slice codebook fitted on T={codebook.fitted_T} cannot encode this data")
        stacked = dataset.stacked_observations()
        cols = [nearest_centroid(stacked[:, t, :], c) for t, c in enumerate(codebook.centroids)]
        symbols = list(np.stack(cols, axis=1))
    out = SequenceDataset.from_arrays(
        [np.asarray(s, dtype=np.int64) for s in symbols], dataset.states, dataset.inputs,
        dict(dataset.provenance), symbolic=True)
    prov = dict(out.provenance)
    prov["n_symbols"] = codebook.n_symbols
    prov["codebook_mode"] = codebook.mode
    return SequenceDataset(out.observations, out.states, out.inputs, prov)
