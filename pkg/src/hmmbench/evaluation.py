"""Train/test protocol: training-ratio sweeps, state mapping and diagnostics."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components

from . import hmm
from .data import SequenceDataset
from .discretize import (PER_SLICE, POOLED, apply_codebook, discretize_per_slice,
                         discretize_pooled, select_k_silhouette)
from .errors import InvalidInputError, NumericalUnderflowError

_log = logging.getLogger(__name__)


def _pooled_labels(labels) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        return labels.reshape(-1).astype(np.int64)
    items = list(labels)
    if items and np.ndim(items[0]) > 0:
        return np.concatenate([np.asarray(s, dtype=np.int64).reshape(-1) for s in items])
    return np.asarray(items, dtype=np.int64)


def accuracy(true_labels, predicted_labels) -> float:
    """Percentage of matching positions, pooled over all sequences and steps."""
    t = _pooled_labels(true_labels)
    p = _pooled_labels(predicted_labels)
    if t.shape != p.shape:
        raise InvalidInputError(f"label lengths differ ({t.size} vs {p.size})")
    if t.size == 0:
        raise InvalidInputError("no labels to score")
    return 100.0 * float(np.count_nonzero(t == p)) / t.size


def confusion_matrix(true_labels, predicted_labels, num_states: int) -> np.ndarray:
    """``C[p, t]`` counts positions predicted ``p`` whose true label is ``t``."""
    t = _pooled_labels(true_labels)
    p = _pooled_labels(predicted_labels)
    if t.shape != p.shape:
        raise InvalidInputError(f"label lengths differ ({t.size} vs {p.size})")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_states):
            raise InvalidInputError(f"{name} label outside [0, {num_states})")
    conf = np.zeros((num_states, num_states), dtype=np.int64)
    np.add.at(conf, (p, t), 1)
    return conf


def _assignment_value(conf, rows, cols):
    if not rows:
        return 0
    sub = conf[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    return int(sub[r, c].sum())


def map_states(true_labels, predicted_labels, num_states: int):
    """Bijection of predicted onto true labels maximizing agreement.

    Returns ``(perm, accuracy_pct)`` where ``perm[p]`` is the true label
    assigned to predicted label ``p``. Among optimal bijections the
    lexicographically smallest ``perm`` is returned.
    """
    M = int(num_states)
    conf = confusion_matrix(true_labels, predicted_labels, M)
    total = int(conf.sum())
    if total == 0:
        raise InvalidInputError("no labels to map")
    best = _assignment_value(conf, list(range(M)), list(range(M)))
    perm: list[int] = []
    fixed = 0
    for p in range(M):
        rows = list(range(p + 1, M))
        for t in range(M):
            if t in perm:
                continue
            cols = [c for c in range(M) if c not in perm and c != t]
            if fixed + conf[p, t] + _assignment_value(conf, rows, cols) == best:
                perm.append(t)
                fixed += int(conf[p, t])
                break
    return tuple(perm), 100.0 * best / total


def apply_mapping(perm, labels):
    table = np.asarray(perm, dtype=np.int64)
    if isinstance(labels, np.ndarray) or (labels and np.ndim(labels[0]) == 0):
        return table[np.asarray(labels, dtype=np.int64)]
    return [table[np.asarray(s, dtype=np.int64)] for s in labels]


# -- multi-feature handling ---------------------------------------------------


@dataclass(frozen=True)
class FeatureGroups:
    groups: tuple
    correlation: np.ndarray | None = None
    #: features with zero variance; each sits alone in its own group
    zero_variance: tuple = ()

    @property
    def warning(self) -> bool:
        return bool(self.zero_variance)


def correlation_grouping(dataset: SequenceDataset) -> FeatureGroups:
    """Group features that are positively correlated.

    Pearson correlation is computed over every pooled (sequence, time)
    point; features are linked when their correlation is positive and the
    groups are the connected components of that graph.
    """
    if dataset.is_symbolic:
        raise InvalidInputError("feature grouping needs continuous observations")
    x = dataset.pooled_observations()
    D = x.shape[1]
    if D == 1:
        return FeatureGroups(((0,),), np.ones((1, 1)))
    std = x.std(axis=0)
    flat = tuple(int(d) for d in np.flatnonzero(std == 0))
    live = [d for d in range(D) if d not in flat]
    corr = np.full((D, D), np.nan)
    adj = np.zeros((D, D), dtype=bool)
    if live:
        sub = np.atleast_2d(np.corrcoef(x[:, live], rowvar=False))
        corr[np.ix_(live, live)] = sub
        adj[np.ix_(live, live)] = sub > 0
    np.fill_diagonal(adj, False)
    _, comp = connected_components(adj, directed=False)
    groups: dict[int, list[int]] = {}
    for d in range(D):
        groups.setdefault(int(comp[d]), []).append(d)
    ordered = sorted((tuple(g) for g in groups.values()), key=lambda g: g[0])
    if flat:
        _log.warning("zero-variance features %s placed in singleton groups", flat)
    return FeatureGroups(tuple(ordered), corr, flat)


def pool_posteriors(posteriors, weights=None) -> np.ndarray:
    """Weighted log-linear pooling of per-group T x M posteriors."""
    mats = [np.asarray(g, dtype=np.float64) for g in posteriors]
    if not mats:
        raise InvalidInputError("need at least one posterior matrix")
    shape = mats[0].shape
    if any(m.shape != shape or m.ndim != 2 for m in mats):
        raise InvalidInputError("posterior matrices must share one T x M shape")
    if weights is None:
        w = np.full(len(mats), 1.0 / len(mats))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(mats),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("weights must be nonnegative, one per group, summing to 1")
    logp = np.zeros(shape)
    with np.errstate(divide="ignore"):
        for wg, g in zip(w, mats):
            if wg > 0:
                logp = logp + wg * np.log(g)
    top = logp.max(axis=1, keepdims=True)
    dead = ~np.isfinite(top[:, 0])
    out = np.exp(logp - np.where(np.isfinite(top), top, 0.0))
    out[dead] = 1.0
    return out / out.sum(axis=1, keepdims=True)


def combine_predictions(posteriors, weights=None) -> np.ndarray:
    """State path from log-linear pooled posteriors; ties go to the lowest state."""
    return np.argmax(pool_posteriors(posteriors, weights), axis=1)


# -- model selection -----------------------------------------------------------


@dataclass(frozen=True)
class MixtureSelection:
    n_mix: int
    bic: dict
    log_likelihood: dict


def _chmm_kind(n_mix):
    return hmm.GAUSSIAN if n_mix == 1 else hmm.GMM


def select_mixture_components(dataset: SequenceDataset, num_states: int, candidates=(1, 2, 3),
                              config: hmm.EmTrainConfig | None = None) -> MixtureSelection:
    """Choose the mixture size with the lowest BIC.

    BIC = -2 log L + p ln(n) with ``p`` from :func:`hmm.count_params_chmm`
    and ``n`` the total number of observations. Ties favour fewer
    components.
    """
    if dataset.is_symbolic:
        raise InvalidInputError("mixture selection needs continuous observations")
    cands = sorted({int(c) for c in candidates})
    if not cands or cands[0] < 1:
        raise InvalidInputError("candidates must be positive integers")
    n = dataset.n_observations
    bic, ll = {}, {}
    for c in cands:
        model, _ = hmm.baum_welch(dataset, num_states, _chmm_kind(c), config,
                                  n_mix=c if c > 1 else None)
        ll[c] = model.meta["final_log_likelihood"]
        bic[c] = -2.0 * ll[c] + hmm.count_params_chmm(num_states, c, dataset.dim) * math.log(n)
    best = min(cands, key=lambda c: (bic[c], c))
    return MixtureSelection(best, bic, ll)


# -- Markov diagnostic ----------------------------------------------------------


@dataclass(frozen=True)
class CmiResult:
    value: float
    n_triples: int
    low_sample: bool


def cmi_markov_check(state_sequences, min_triples: int = 100) -> CmiResult:
    """Plug-in estimate of I(S_t+1; S_t-1 | S_t) in nats.

    Counts of consecutive triples are pooled over every sequence and
    position. Fewer than ``min_triples`` triples sets ``low_sample``.
    """
    seqs = [np.asarray(s).reshape(-1) for s in
            (state_sequences if not isinstance(state_sequences, np.ndarray)
             or state_sequences.ndim > 1 else [state_sequences])]
    seqs = [s for s in seqs if len(s) >= 3]
    if not seqs:
        raise InvalidInputError("need at least one sequence with three or more steps")
    _, codes = np.unique(np.concatenate(seqs), return_inverse=True)
    K = int(codes.max()) + 1
    triples = []
    start = 0
    for s in seqs:
        c = codes[start:start + len(s)]
        start += len(s)
        triples.append(c[:-2] * K * K + c[1:-1] * K + c[2:])
    flat = np.concatenate(triples)
    n = flat.size
    joint = np.bincount(flat, minlength=K ** 3).reshape(K, K, K) / n
    p_ab = joint.sum(axis=2)
    p_bc = joint.sum(axis=0)
    p_b = joint.sum(axis=(0, 2))
    nz = joint > 0
    a, b, c = np.nonzero(nz)
    value = float(np.sum(joint[nz] * (np.log(joint[nz]) + np.log(p_b[b])
                                      - np.log(p_ab[a, b]) - np.log(p_bc[b, c]))))
    if n < min_triples:
        _log.warning("only %d triples; CMI estimate is unreliable", n)
    return CmiResult(max(value, 0.0), int(n), n < min_triples)


# -- sweep harness -------------------------------------------------------------------

SUPERVISED_DHMM = "supervised-dhmm"
UNSUPERVISED_DHMM = "unsupervised-dhmm"
UNSUPERVISED_CHMM = "unsupervised-chmm"
MODEL_KINDS = (SUPERVISED_DHMM, UNSUPERVISED_DHMM, UNSUPERVISED_CHMM)
DEFAULT_RATIOS = (0.8, 0.3, 0.1, 0.005, 0.001)

DEFAULT_HYPERPARAMS = {
    SUPERVISED_DHMM: {"n_symbols": None, "discretization": POOLED, "pseudo_count": 1.0,
                      "k_range": [2, 3, 4, 5, 6, 7, 8]},
    UNSUPERVISED_DHMM: {"n_symbols": None, "discretization": POOLED,
                        "k_range": [2, 3, 4, 5, 6, 7, 8],
                        "num_restarts": 10, "max_iters": 500, "rel_tol": 1e-6},
    UNSUPERVISED_CHMM: {"n_mix": 1, "n_mix_candidates": [1, 2, 3],
                        "num_restarts": 10, "max_iters": 500, "rel_tol": 1e-6},
}


@dataclass(frozen=True)
class SweepConfig:
    training_ratios: tuple = DEFAULT_RATIOS
    kinds: tuple = MODEL_KINDS
    #: per-kind overrides of :data:`DEFAULT_HYPERPARAMS`
    hyperparams: dict = field(default_factory=dict)
    split_seed: int = 0
    train_seed: int = 0
    group_features: bool = True
    num_states: int | None = None
    record_timing: bool = True

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.training_ratios)
        if not ratios or any(not 0 < r < 1 for r in ratios):
            raise InvalidInputError("training ratios must lie in (0, 1)")
        if any(b >= a for a, b in zip(ratios, ratios[1:])):
            raise InvalidInputError("training ratios must be strictly descending")
        kinds = tuple(self.kinds)
        if not kinds:
            raise InvalidInputError("at least one model kind is required")
        unknown = [k for k in kinds if k not in MODEL_KINDS]
        if unknown:
            raise InvalidInputError(f"unknown model kinds {unknown}; valid: {MODEL_KINDS}")
        for k in self.hyperparams:
            if k not in MODEL_KINDS:
                raise InvalidInputError(f"hyperparameters given for unknown kind {k!r}")
        object.__setattr__(self, "training_ratios", ratios)
        object.__setattr__(self, "kinds", kinds)

    def params_for(self, kind) -> dict:
        merged = dict(DEFAULT_HYPERPARAMS[kind])
        merged.update(self.hyperparams.get(kind, {}))
        return merged


@dataclass
class SweepRow:
    model_kind: str
    training_ratio: float
    n_train_sequences: int
    n_train_samples: int
    n_test_sequences: int
    n_params: int | None
    accuracy_pct: float | None
    wall_ms: float | None = None
    #: best-restart log-likelihood trace per feature group (unsupervised kinds)
    log_likelihood_traces: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    warning: str | None = None

    @property
    def skipped(self) -> bool:
        return self.accuracy_pct is None


CSV_COLUMNS = ("model_kind", "training_ratio", "n_train_samples", "n_params",
               "accuracy_pct", "wall_ms")

_KIND_LABELS = {SUPERVISED_DHMM: "Supervised DHMM", UNSUPERVISED_DHMM: "Unsupervised DHMM",
                UNSUPERVISED_CHMM: "Unsupervised CHMM"}


@dataclass
class SweepResult:
    rows: list
    config: SweepConfig

    def row(self, kind, ratio) -> SweepRow:
        for r in self.rows:
            if r.model_kind == kind and r.training_ratio == float(ratio):
                return r
        raise KeyError((kind, ratio))

    def table(self, include_timing: bool = False) -> list:
        cols = CSV_COLUMNS if include_timing else CSV_COLUMNS[:-1]
        return [tuple(getattr(r, c) for c in cols) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.model_kind,
                repr(r.training_ratio),
                r.n_train_samples,
                "" if r.n_params is None else r.n_params,
                "" if r.accuracy_pct is None else f"{r.accuracy_pct:.4f}",
                "" if r.wall_ms is None else f"{r.wall_ms:.1f}",
            ])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| Model Type | Number of Parameters | Training Ratio | "
                 "Number of Training Sample | Accuracy(%) |",
                 "|---|---|---|---|---|"]
        for r in self.rows:
            acc = "skipped" if r.accuracy_pct is None else f"{r.accuracy_pct:.2f}"
            n_params = "" if r.n_params is None else str(r.n_params)
            lines.append(f"| {_KIND_LABELS[r.model_kind]} | {n_params} | {r.training_ratio:g} | "
                         f"{r.n_train_samples} | {acc} |")
        return "\n".join(lines) + "\n"


def split_indices(n_sequences: int, ratio: float, seed: int):
    """Seeded shuffle; the first ceil(ratio * N) sequences train, the rest test."""
    order = np.random.default_rng(seed).permutation(n_sequences)
    n_train = math.ceil(ratio * n_sequences - 1e-9)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _em_config(params, seed):
    return hmm.EmTrainConfig(max_iters=int(params["max_iters"]), rel_tol=float(params["rel_tol"]),
                             num_restarts=int(params["num_restarts"]), seed=seed)


def _discretize(train, test, params, default_k, seed):
    k = params.get("n_symbols") or default_k
    if k == "auto":
        k = select_k_silhouette(train.pooled_observations(), params["k_range"], seed=seed).k
    mode = params.get("discretization", POOLED)
    if mode == POOLED:
        train_sym, book = discretize_pooled(train, int(k), seed=seed)
    elif mode == PER_SLICE:
        train_sym, book = discretize_per_slice(train, int(k), seed=seed)
    else:
        raise InvalidInputError(f"unknown discretization mode {mode!r}")
    return train_sym, apply_codebook(book, test), book


def _permute_columns(gamma, perm):
    out = np.zeros_like(gamma)
    out[:, list(perm)] = gamma
    return out


def _fit_group(kind, params, train, test, M, seed):
    """Train one model on one feature group.

    Returns (model, test_view, mapping, details, trace) where ``mapping``
    is None for supervised kinds.
    """
    details = {}
    if kind in (SUPERVISED_DHMM, UNSUPERVISED_DHMM):
        if train.is_symbolic:
            train_v, test_v = train, test
        else:
            train_v, test_v, book = _discretize(train, test, params, M, seed)
            details["codebook_k"] = book.k
        n_symbols = max(train_v.n_symbols, test_v.n_symbols)
        details["n_symbols"] = n_symbols
        if kind == SUPERVISED_DHMM:
            model = hmm.fit_supervised(train_v, M, hmm.DISCRETE,
                                       pseudo_count=float(params["pseudo_count"]),
                                       n_symbols=n_symbols)
            return model, test_v, None, details, []
        model, history = hmm.baum_welch(train_v, M, hmm.DISCRETE, _em_config(params, seed),
                                        n_symbols=n_symbols)
    else:
        if train.is_symbolic:
            raise InvalidInputError("a continuous HMM cannot be trained on symbolic data")
        test_v = test
        n_mix = params.get("n_mix", 1)
        if n_mix == "auto":
            n_mix = select_mixture_components(train, M, params["n_mix_candidates"],
                                              _em_config(params, seed)).n_mix
        n_mix = int(n_mix)
        details["n_mix"] = n_mix
        model, history = hmm.baum_welch(train, M, _chmm_kind(n_mix), _em_config(params, seed),
                                        n_mix=n_mix if n_mix > 1 else None)
        train_v = train
    train_pred = hmm.decode(model, train_v)
    perm, _ = map_states(train_v.states, train_pred, M)
    details["state_mapping"] = list(perm)
    return model, test_v, perm, details, list(history.best.log_likelihoods)


def _run_cell(dataset, kind, params, ratio_index, kind_index, train_idx, test_idx, M, config):
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)
    if dataset.is_symbolic or not config.group_features:
        groups = (None,)
    else:
        groups = correlation_grouping(train).groups
    models, views, perms, traces, details = [], [], [], [], {"groups": []}
    for g_index, group in enumerate(groups):
        tr = train if group is None else train.select_features(group)
        te = test if group is None else test.select_features(group)
        seed = _derived_seed(config.train_seed, kind_index, ratio_index, g_index)
        model, test_v, perm, info, trace = _fit_group(kind, params, tr, te, M, seed)
        models.append(model)
        views.append(test_v)
        perms.append(perm)
        traces.append(trace)
        details["groups"].append({"features": None if group is None else list(group), **info})

    if len(models) == 1:
        paths = hmm.decode(models[0], views[0])
        if perms[0] is not None:
            paths = apply_mapping(perms[0], paths)
    else:
        per_group = []
        for model, view, perm in zip(models, views, perms):
            gammas = hmm.posterior_batch(model, view)
            if perm is not None:
                gammas = [_permute_columns(g, perm) for g in gammas]
            per_group.append(gammas)
        paths = [combine_predictions([pg[n] for pg in per_group])
                 for n in range(test.n_sequences)]
    acc = accuracy(test.states, paths)
    n_params = int(sum(m.n_params for m in models))
    return acc, n_params, traces, details


def run_sweep(dataset: SequenceDataset, config: SweepConfig | None = None) -> SweepResult:
    """Evaluate every (model kind, training ratio) cell.

    For each ratio the sequences are split whole: the first
    ``ceil(ratio * N)`` of a seeded shuffle train and the remainder test.
    Unsupervised models are aligned with the true labels by a state
    mapping fitted on the training predictions and then frozen for test
    scoring. Multi-feature continuous data is split into positively
    correlated groups (one model each) whose posteriors are pooled.
    """
    config = config or SweepConfig()
    if not dataset.has_states:
        raise InvalidInputError("sweeps need state labels for scoring")
    M = int(config.num_states or dataset.n_states)
    rows = []
    for kind_index, kind in enumerate(config.kinds):
        params = config.params_for(kind)
        for ratio_index, ratio in enumerate(config.training_ratios):
            train_idx, test_idx = split_indices(dataset.n_sequences, ratio, config.split_seed)
            n_train_samples = int(sum(dataset.lengths[i] for i in train_idx))
            row = SweepRow(kind, ratio, len(train_idx), n_train_samples, len(test_idx),
                           None, None)
            if len(train_idx) < 1 or len(test_idx) < 1:
                row.warning = "training or test split is empty"
                _log.warning("skipping %s at ratio %g: %s", kind, ratio, row.warning)
                rows.append(row)
                continue
            start = time.perf_counter()
            try:
                acc, n_params, traces, details = _run_cell(
                    dataset, kind, params, ratio_index, kind_index, train_idx, test_idx, M,
                    config)
            except NumericalUnderflowError as err:
                row.warning = f"numerical failure: {err}"
                _log.warning("%s at ratio %g failed: %s", kind, ratio, err)
                rows.append(row)
                continue
            elapsed = 1000.0 * (time.perf_counter() - start)
            row.accuracy_pct = acc
            row.n_params = n_params
            row.log_likelihood_traces = traces
            row.details = details
            row.wall_ms = elapsed if config.record_timing else None
            rows.append(row)
            _log.info("%s ratio=%g acc=%.2f params=%d", kind, ratio, acc, n_params)
    return SweepResult(rows, config)
