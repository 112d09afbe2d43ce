"""Hidden Markov models with discrete, Gaussian and Gaussian-mixture emissions.

Inference uses the scaled forward-backward recursion (one normaliser per
step, log-likelihood accumulated as the sum of log normalisers) and a
log-space Viterbi decoder. All routines run batched over equal-length
sequences; datasets with ragged lengths are processed one length group
at a time.

Models are immutable: every array is stored read-only and training
returns new instances.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .data import SequenceDataset
from .discretize import KMeansConfig, kmeans_fit
from .errors import InvalidInputError, NumericalUnderflowError

_log = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-9
DEFAULT_VARIANCE_FLOOR = 1e-6
#: Expected state occupancy below which EM re-randomizes a state's emission.
ZERO_OCCUPANCY = 1e-10
_LOG_2PI = np.log(2.0 * np.pi)

DISCRETE = "discrete"
GAUSSIAN = "gaussian"
GMM = "gmm"
EMISSION_KINDS = (DISCRETE, GAUSSIAN, GMM)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_stochastic(mat, what):
    if np.any(~np.isfinite(mat)) or np.any(mat < 0) or np.any(mat > 1):
        raise InvalidInputError(f"{what} entries must lie in [0, 1]")
    sums = mat.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > STOCHASTIC_TOL):
        raise InvalidInputError(f"{what} rows must sum to 1 (got {sums.ravel()})")


def _check_variances(var, floor):
    if np.any(~np.isfinite(var)) or np.any(var <= 0):
        raise InvalidInputError("variances must be positive and finite")
    if floor is not None and np.any(var < floor * (1 - 1e-12)):
        raise InvalidInputError(f"variances must be >= the floor {floor}")


# -- emission models ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteEmission:
    """``probs[i, k]`` = P(symbol k | state i)."""

    probs: np.ndarray
    kind = DISCRETE

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidInputError("discrete emission table must be M x K")
        _check_stochastic(p, "emission")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.probs.shape[1]

    def check_obs(self, obs) -> np.ndarray:
        o = np.asarray(obs)
        if not np.issubdtype(o.dtype, np.integer):
            raise InvalidInputError(
                f"discrete model expects integer symbols, got {o.dtype} observations")
        if o.ndim != 1:
            raise InvalidInputError("discrete model expects a 1-D symbol sequence")
        if o.size and (o.min() < 0 or o.max() >= self.n_symbols):
            raise InvalidInputError(
                f"symbol out of range [0, {self.n_symbols}) for this emission model")
        return o.astype(np.int64)

    def log_likelihood(self, obs) -> np.ndarray:
        """``(..., T) -> (..., T, M)`` log emission probabilities."""
        with np.errstate(divide="ignore"):
            logb = np.log(self.probs.T)
        return logb[obs]

    def to_dict(self):
        return {"probs": self.probs.tolist()}

    def sample(self, states, rng):
        cum = np.cumsum(self.probs[states], axis=-1)
        u = rng.random(len(states))
        return np.minimum((cum < u[:, None]).sum(axis=1), self.n_symbols - 1)


def _check_continuous(obs, dim):
    o = np.asarray(obs)
    if o.dtype == object or not np.issubdtype(o.dtype, np.number):
        raise InvalidInputError("continuous model expects numeric observations")
    o = o.astype(np.float64)
    if dim == 1 and o.ndim == 1:
        o = o[:, None]
    if o.ndim < 2 or o.shape[-1] != dim:
        raise InvalidInputError(f"observation shape {o.shape} does not match D={dim}")
    if not np.all(np.isfinite(o)):
        raise InvalidInputError("observations must be finite")
    return o


def _diag_log_pdf(x, means, variances):
    """x: (..., D); means/variances: (S, D) -> (..., S)."""
    diff = x[..., None, :] - means
    return -0.5 * (np.sum(np.log(variances), axis=-1)
                   + np.sum(diff * diff / variances, axis=-1)
                   + means.shape[-1] * _LOG_2PI)


@dataclass(frozen=True, eq=False)
class GaussianEmission:
    """Diagonal-covariance Gaussian per state: ``means``/``variances`` are M x D."""

    means: np.ndarray
    variances: np.ndarray
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR
    kind = GAUSSIAN

    def __post_init__(self):
        m = _frozen(np.atleast_2d(self.means))
        v = _frozen(np.atleast_2d(self.variances))
        if m.shape != v.shape or m.ndim != 2:
            raise InvalidInputError("means and variances must both be M x D")
        _check_variances(v, self.variance_floor)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def check_obs(self, obs):
        return _check_continuous(obs, self.dim)

    def log_likelihood(self, obs):
        return _diag_log_pdf(obs, self.means, self.variances)

    def to_dict(self):
        return {"means": self.means.tolist(), "variances": self.variances.tolist()}

    def sample(self, states, rng):
        z = rng.standard_normal((len(states), self.dim))
        return self.means[states] + np.sqrt(self.variances[states]) * z


@dataclass(frozen=True, eq=False)
class GaussianMixtureEmission:
    """Per-state mixture of diagonal Gaussians.

    ``weights`` is M x C, ``means`` and ``variances`` are M x C x D.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: float | None = DEFAULT_VARIANCE_FLOOR
    kind = GMM

    def __post_init__(self):
        w = _frozen(self.weights)
        m = _frozen(self.means)
        v = _frozen(self.variances)
        if w.ndim != 2 or m.ndim != 3 or m.shape != v.shape or m.shape[:2] != w.shape:
            raise InvalidInputError("mixture shapes must be M x C and M x C x D")
        _check_stochastic(w, "mixture weight")
        _check_variances(v, self.variance_floor)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_states(self) -> int:
        return self.weights.shape[0]

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def check_obs(self, obs):
        return _check_continuous(obs, self.dim)

    def component_log_likelihood(self, obs):
        """(..., D) -> (..., M, C) of log c_im + log N(x; mu_im, var_im)."""
        M, C, D = self.means.shape
        lp = _diag_log_pdf(obs, self.means.reshape(M * C, D), self.variances.reshape(M * C, D))
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return lp.reshape(lp.shape[:-1] + (M, C)) + logw

    def log_likelihood(self, obs):
        return logsumexp(self.component_log_likelihood(obs), axis=-1)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    def sample(self, states, rng):
        cum = np.cumsum(self.weights[states], axis=-1)
        comp = np.minimum((cum < rng.random(len(states))[:, None]).sum(axis=1),
                          self.n_components - 1)
        z = rng.standard_normal((len(states), self.dim))
        return self.means[states, comp] + np.sqrt(self.variances[states, comp]) * z


# -- the model ------------------------------------------------------------------

_KIND_NAMES = {DISCRETE: "dhmm", GAUSSIAN: "chmm-gaussian", GMM: "chmm-gmm"}


@dataclass(frozen=True, eq=False)
class HMM:
    """lambda = (A, B, pi)."""

    transitions: np.ndarray
    initial: np.ndarray
    emission: DiscreteEmission | GaussianEmission | GaussianMixtureEmission
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        A = _frozen(self.transitions)
        pi = _frozen(self.initial)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise InvalidInputError("transition matrix must be M x M with M >= 1")
        _check_stochastic(A, "transition")
        if pi.shape != (A.shape[0],):
            raise InvalidInputError("initial distribution length must equal M")
        _check_stochastic(pi, "initial distribution")
        if self.emission.n_states != A.shape[0]:
            raise InvalidInputError(
                f"emission has {self.emission.n_states} states, transitions have {A.shape[0]}")
        object.__setattr__(self, "transitions", A)
        object.__setattr__(self, "initial", pi)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def kind(self) -> str:
        return _KIND_NAMES[self.emission.kind]

    @property
    def n_params(self) -> int:
        em = self.emission
        if em.kind == DISCRETE:
            return count_params_dhmm(self.n_states, em.n_symbols)
        n_mix = em.n_components if em.kind == GMM else 1
        return count_params_chmm(self.n_states, n_mix, em.dim)

    def with_meta(self, **meta) -> "HMM":
        merged = dict(self.meta)
        merged.update(meta)
        return HMM(self.transitions, self.initial, self.emission, merged)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "transitions": self.transitions.tolist(),
            "initial": self.initial.tolist(),
            "emission": self.emission.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HMM":
        kind = doc.get("kind")
        em = doc["emission"]
        if kind == "dhmm":
            emission = DiscreteEmission(np.asarray(em["probs"]))
        elif kind == "chmm-gaussian":
            emission = GaussianEmission(np.asarray(em["means"]), np.asarray(em["variances"]),
                                        variance_floor=None)
        elif kind == "chmm-gmm":
            emission = GaussianMixtureEmission(np.asarray(em["weights"]), np.asarray(em["means"]),
                                               np.asarray(em["variances"]), variance_floor=None)
        else:
            raise InvalidInputError(f"unknown model kind {kind!r}")
        return cls(np.asarray(doc["transitions"]), np.asarray(doc["initial"]), emission,
                   dict(doc.get("meta") or {}))


def save_model(model: HMM, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> HMM:
    return HMM.from_dict(json.loads(Path(path).read_text()))


# -- batched recursions -------------------------------------------------------


def _log_transitions(model):
    with np.errstate(divide="ignore"):
        return np.log(model.transitions), np.log(model.initial)


def _forward_batch(A, pi, logb):
    """Scaled forward pass over a batch.

    logb: (N, T, M). Returns alpha (N, T, M) with unit row sums and
    log_scaling (N, T) such that log P(O) = log_scaling.sum(-1).
    """
    N, T, M = logb.shape
    alpha = np.empty((N, T, M))
    log_c = np.empty((N, T))
    for t in range(T):
        pred = pi[None, :] if t == 0 else alpha[:, t - 1] @ A
        shift = logb[:, t].max(axis=1)
        bad = ~np.isfinite(shift)
        if bad.any():
            raise NumericalUnderflowError(t, int(np.flatnonzero(bad)[0]))
        a = pred * np.exp(logb[:, t] - shift[:, None])
        c = a.sum(axis=1)
        if np.any(c <= 0):
            raise NumericalUnderflowError(t, int(np.flatnonzero(c <= 0)[0]))
        alpha[:, t] = a / c[:, None]
        log_c[:, t] = np.log(c) + shift
    return alpha, log_c


def _scaled_emissions(logb, log_c):
    with np.errstate(over="ignore"):
        return np.exp(logb - log_c[..., None])


def _backward_batch(A, logb, log_c):
    N, T, M = logb.shape
    beta = np.empty((N, T, M))
    beta[:, T - 1] = 1.0
    eb = _scaled_emissions(logb, log_c)
    for t in range(T - 2, -1, -1):
        beta[:, t] = (eb[:, t + 1] * beta[:, t + 1]) @ A.T
    return beta


def _posteriors(alpha, beta):
    gamma = alpha * beta
    gamma /= gamma.sum(axis=-1, keepdims=True)
    return gamma


_VITERBI_TIE = 1e-12


def _first_max(scores, axis):
    """Argmax that treats values within a relative 1e-12 as tied (lowest index wins)."""
    best = scores.max(axis=axis, keepdims=True)
    tol = _VITERBI_TIE * np.maximum(1.0, np.abs(np.where(np.isfinite(best), best, 0.0)))
    return np.argmax(scores >= best - tol, axis=axis), np.squeeze(best, axis=axis)


def _viterbi_batch(logA, logpi, logb):
    N, T, M = logb.shape
    back = np.zeros((N, T, M), dtype=np.int64)
    delta = logpi[None, :] + logb[:, 0]
    if np.any(np.all(np.isneginf(delta), axis=1)):
        raise NumericalUnderflowError(0, int(np.flatnonzero(np.all(np.isneginf(delta), 1))[0]))
    for t in range(1, T):
        scores = delta[:, :, None] + logA[None, :, :]
        back[:, t], best = _first_max(scores, axis=1)
        delta = best + logb[:, t]
        dead = np.all(np.isneginf(delta), axis=1)
        if dead.any():
            raise NumericalUnderflowError(t, int(np.flatnonzero(dead)[0]))
    path = np.empty((N, T), dtype=np.int64)
    path[:, T - 1], log_joint = _first_max(delta, axis=1)
    rows = np.arange(N)
    for t in range(T - 1, 0, -1):
        path[:, t - 1] = back[rows, t, path[:, t]]
    return path, log_joint


def _length_groups(sequences):
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        groups.setdefault(len(s), []).append(i)
    return groups


def _prepare(model, obs):
    o = model.emission.check_obs(obs)
    if o.shape[0] < 1:
        raise InvalidInputError("observation sequence must have at least one step")
    return o


# -- public inference -----------------------------------------------------------


class ForwardResult(NamedTuple):
    alpha: np.ndarray
    log_scaling: np.ndarray
    log_likelihood: float

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scaling)


@dataclass(frozen=True)
class InferenceResult:
    log_likelihood: float
    alpha: np.ndarray
    beta: np.ndarray
    log_scaling: np.ndarray
    gamma: np.ndarray

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scaling)


def forward(model: HMM, obs) -> ForwardResult:
    """Scaled forward recursion.

    ``alpha[t]`` is the filtering distribution P(s_t | o_1..o_t) and
    ``log_scaling[t]`` the log of the step-t normaliser, so the
    log-likelihood is ``log_scaling.sum()``.

    Raises
    ------
    InvalidInputError
        Observation arity or symbol range does not match the emission model.
    NumericalUnderflowError
        An observation is impossible under the model; ``err.step`` names it.
    """
    o = _prepare(model, obs)
    logb = model.emission.log_likelihood(o)[None]
    alpha, log_c = _forward_batch(model.transitions, model.initial, logb)
    return ForwardResult(alpha[0], log_c[0], float(log_c[0].sum()))


def backward(model: HMM, obs, log_scaling) -> np.ndarray:
    """Backward recursion scaled by the forward pass's ``log_scaling``."""
    o = _prepare(model, obs)
    log_c = np.asarray(log_scaling, dtype=np.float64)
    if log_c.shape != (len(o),):
        raise InvalidInputError("log_scaling must have one entry per observation")
    logb = model.emission.log_likelihood(o)[None]
    return _backward_batch(model.transitions, logb, log_c[None])[0]


def infer(model: HMM, obs) -> InferenceResult:
    o = _prepare(model, obs)
    logb = model.emission.log_likelihood(o)[None]
    alpha, log_c = _forward_batch(model.transitions, model.initial, logb)
    beta = _backward_batch(model.transitions, logb, log_c)
    gamma = _posteriors(alpha, beta)
    return InferenceResult(float(log_c[0].sum()), alpha[0], beta[0], log_c[0], gamma[0])


def posterior_marginals(model: HMM, obs) -> np.ndarray:
    """T x M matrix of P(s_t = i | O)."""
    return infer(model, obs).gamma


def viterbi(model: HMM, obs):
    """Most probable state path and its joint log-probability log P(S, O).

    Back-pointers and the final state prefer the lowest state index when
    scores tie.
    """
    o = _prepare(model, obs)
    logA, logpi = _log_transitions(model)
    path, lj = _viterbi_batch(logA, logpi, model.emission.log_likelihood(o)[None])
    return path[0], float(lj[0])


def log_likelihood(model: HMM, sequences) -> float:
    """Total log-likelihood of a collection of sequences."""
    seqs = _sequences(sequences)
    total = 0.0
    for _, idx in _length_groups(seqs).items():
        batch = np.stack([model.emission.check_obs(seqs[i]) for i in idx])
        logb = model.emission.log_likelihood(batch)
        _, log_c = _forward_batch(model.transitions, model.initial, logb)
        total += float(log_c.sum())
    return total


def decode(model: HMM, sequences) -> list[np.ndarray]:
    """Viterbi path for each sequence, batched by length."""
    seqs = _sequences(sequences)
    logA, logpi = _log_transitions(model)
    out: list = [None] * len(seqs)
    for _, idx in _length_groups(seqs).items():
        batch = np.stack([model.emission.check_obs(seqs[i]) for i in idx])
        try:
            paths, _ = _viterbi_batch(logA, logpi, model.emission.log_likelihood(batch))
        except NumericalUnderflowError as err:
            raise NumericalUnderflowError(err.step, idx[err.sequence]) from None
        for j, i in enumerate(idx):
            out[i] = paths[j]
    return out


def posterior_batch(model: HMM, sequences) -> list[np.ndarray]:
    """Posterior marginals for each sequence, batched by length."""
    seqs = _sequences(sequences)
    out: list = [None] * len(seqs)
    for _, idx in _length_groups(seqs).items():
        batch = np.stack([model.emission.check_obs(seqs[i]) for i in idx])
        logb = model.emission.log_likelihood(batch)
        try:
            alpha, log_c = _forward_batch(model.transitions, model.initial, logb)
        except NumericalUnderflowError as err:
            raise NumericalUnderflowError(err.step, idx[err.sequence]) from None
        gamma = _posteriors(alpha, _backward_batch(model.transitions, logb, log_c))
        for j, i in enumerate(idx):
            out[i] = gamma[j]
    return out


def _sequences(data):
    if isinstance(data, SequenceDataset):
        return list(data.observations)
    if isinstance(data, np.ndarray):
        return [data[i] for i in range(len(data))]
    return list(data)


# -- sampling -------------------------------------------------------------------


def sample(model: HMM, T: int, seed=None):
    """Draw a state path and observations of length ``T``."""
    if int(T) < 1:
        raise InvalidInputError("T must be >= 1")
    rng = np.random.default_rng(seed)
    M = model.n_states
    cumA = np.cumsum(model.transitions, axis=1)
    states = np.empty(T, dtype=np.int64)
    u = rng.random(T)
    states[0] = min(int(np.searchsorted(np.cumsum(model.initial), u[0], side="right")), M - 1)
    for t in range(1, T):
        states[t] = min(int(np.searchsorted(cumA[states[t - 1]], u[t], side="right")), M - 1)
    obs = model.emission.sample(states, rng)
    return states, obs


def sample_dataset(model: HMM, n_sequences: int, T: int, seed=None) -> SequenceDataset:
    children = np.random.SeedSequence(seed).spawn(int(n_sequences))
    pairs = [sample(model, T, c) for c in children]
    return SequenceDataset.from_arrays([p[1] for p in pairs], [p[0] for p in pairs],
                                       symbolic=model.emission.kind == DISCRETE)


# -- parameter counts -------------------------------------------------------------


def _positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def count_params_chmm(M: int, N: int, D: int) -> int:
    """Free parameters of a diagonal-covariance mixture CHMM.

    ``M`` states, ``N`` mixture components per state, dimension ``D``:
    transitions, mixture weights, means, variances and the initial vector.
    """
    M, N, D = _positive_int(M, "M"), _positive_int(N, "N"), _positive_int(D, "D")
    return M * (M - 1) + M * (N - 1) + N * M * D + M * N * D + (M - 1)


def count_params_dhmm(M: int, N: int) -> int:
    """Free parameters of a DHMM with ``M`` states and ``N`` symbols."""
    M, N = _positive_int(M, "M"), _positive_int(N, "N")
    return M * (M - 1) + M * (N - 1) + (M - 1)


# -- training -----------------------------------------------------------------------


@dataclass(frozen=True)
class EmTrainConfig:
    max_iters: int = 500
    rel_tol: float = 1e-6
    num_restarts: int = 10
    seed: int = 0
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        if self.max_iters < 1 or self.num_restarts < 1:
            raise InvalidInputError("max_iters and num_restarts must be positive")
        if not 0 < self.rel_tol < 1:
            raise InvalidInputError("rel_tol must lie in (0, 1)")
        if self.variance_floor <= 0:
            raise InvalidInputError("variance_floor must be positive")
        if self.seed < 0:
            raise InvalidInputError("seed must be unsigned")


@dataclass
class RestartTrace:
    restart: int
    log_likelihoods: list = field(default_factory=list)
    #: (iteration, state) pairs where an empty state was re-randomized.
    reseeded: list = field(default_factory=list)
    converged: bool = False

    @property
    def final(self) -> float:
        return self.log_likelihoods[-1]


@dataclass
class TrainingHistory:
    restarts: list
    best_restart: int

    @property
    def best(self) -> RestartTrace:
        return self.restarts[self.best_restart]

    def to_dict(self):
        return {"best_restart": self.best_restart,
                "restarts": [asdict(r) for r in self.restarts]}


class _Stats(NamedTuple):
    log_likelihood: float
    start: np.ndarray
    trans: np.ndarray
    occupancy: np.ndarray
    emission: tuple


def _e_step(params, kind, batches):
    """Accumulate sufficient statistics over length-grouped batches."""
    A, pi, em = params
    M = A.shape[0]
    ll = 0.0
    start = np.zeros(M)
    trans = np.zeros((M, M))
    occ = np.zeros(M)
    if kind == DISCRETE:
        K = em.n_symbols
        counts = np.zeros((M, K))
    elif kind == GAUSSIAN:
        D = em.dim
        s1 = np.zeros((M, D))
        s2 = np.zeros((M, D))
    else:
        C, D = em.n_components, em.dim
        w0 = np.zeros((M, C))
        s1 = np.zeros((M, C, D))
        s2 = np.zeros((M, C, D))

    for batch in batches:
        if kind == GMM:
            comp = em.component_log_likelihood(batch)  # N, T, M, C
            logb = logsumexp(comp, axis=-1)
        else:
            logb = em.log_likelihood(batch)
        alpha, log_c = _forward_batch(A, pi, logb)
        beta = _backward_batch(A, logb, log_c)
        gamma = _posteriors(alpha, beta)
        ll += float(log_c.sum())
        start += gamma[:, 0].sum(axis=0)
        occ += gamma.reshape(-1, M).sum(axis=0)
        if batch.shape[1] > 1:
            eb = _scaled_emissions(logb, log_c)
            trans += A * np.einsum("nti,ntj->ij", alpha[:, :-1], eb[:, 1:] * beta[:, 1:])
        g = gamma.reshape(-1, M)
        if kind == DISCRETE:
            flat = batch.reshape(-1)
            for i in range(M):
                counts[i] += np.bincount(flat, weights=g[:, i], minlength=K)
        elif kind == GAUSSIAN:
            x = batch.reshape(-1, batch.shape[-1])
            s1 += g.T @ x
            s2 += g.T @ (x * x)
        else:
            x = batch.reshape(-1, batch.shape[-1])
            with np.errstate(invalid="ignore"):
                resp = np.exp(comp - logb[..., None]).reshape(-1, M, C)
            resp = np.nan_to_num(resp) * g[:, :, None]
            w0 += resp.sum(axis=0)
            s1 += np.einsum("nic,nd->icd", resp, x)
            s2 += np.einsum("nic,nd->icd", resp, x * x)

    if kind == DISCRETE:
        em_stats = (counts,)
    elif kind == GAUSSIAN:
        em_stats = (s1, s2)
    else:
        em_stats = (w0, s1, s2)
    return _Stats(ll, start, trans, occ, em_stats)


def _moments(weight, s1, s2, floor):
    mean = s1 / weight[..., None]
    var = s2 / weight[..., None] - mean * mean
    return mean, np.maximum(var, floor)


def _m_step(params, kind, stats, n_seq, pool, rng, floor):
    """Maximize the expected complete-data log-likelihood.

    Returns the new parameters and the states that had to be re-seeded.
    """
    A, pi, em = params
    M = A.shape[0]
    new_pi = stats.start / n_seq
    row = stats.trans.sum(axis=1)
    new_A = A.copy()
    live = row > 0
    new_A[live] = stats.trans[live] / row[live, None]
    new_A /= new_A.sum(axis=1, keepdims=True)
    new_pi /= new_pi.sum()

    empty = [int(i) for i in np.flatnonzero(stats.occupancy < ZERO_OCCUPANCY)]
    full = stats.occupancy >= ZERO_OCCUPANCY
    if kind == DISCRETE:
        (counts,) = stats.emission
        probs = np.array(em.probs)
        probs[full] = counts[full] / counts[full].sum(axis=1, keepdims=True)
        for i in empty:
            probs[i] = rng.dirichlet(np.ones(em.n_symbols))
        new_em = DiscreteEmission(probs)
    elif kind == GAUSSIAN:
        s1, s2 = stats.emission
        means = np.array(em.means)
        var = np.array(em.variances)
        means[full], var[full] = _moments(stats.occupancy[full], s1[full], s2[full], floor)
        for i in empty:
            means[i] = pool[rng.integers(len(pool))]
            var[i] = np.maximum(pool.var(axis=0), floor)
        new_em = GaussianEmission(means, var, floor)
    else:
        w0, s1, s2 = stats.emission
        weights = np.array(em.weights)
        means = np.array(em.means)
        var = np.array(em.variances)
        C = em.n_components
        for i in range(M):
            if i in empty:
                weights[i] = 1.0 / C
                means[i] = pool[rng.integers(len(pool), size=C)]
                var[i] = np.maximum(pool.var(axis=0), floor)
                continue
            weights[i] = w0[i] / w0[i].sum()
            ok = w0[i] >= ZERO_OCCUPANCY
            means[i, ok], var[i, ok] = _moments(w0[i, ok], s1[i, ok], s2[i, ok], floor)
            for c in np.flatnonzero(~ok):
                means[i, c] = pool[rng.integers(len(pool))]
                var[i, c] = np.maximum(pool.var(axis=0), floor)
        new_em = GaussianMixtureEmission(weights, means, var, floor)
    return (new_A, new_pi, new_em), empty


def _init_params(kind, M, rng, pool, n_symbols, n_mix, floor):
    A = rng.dirichlet(np.ones(M), size=M)
    pi = rng.dirichlet(np.ones(M))
    if kind == DISCRETE:
        return A, pi, DiscreteEmission(rng.dirichlet(np.ones(n_symbols), size=M))

    # K-means seeding on a bounded subsample of the pooled observations
    sub = pool
    if len(pool) > 5000:
        sub = pool[rng.choice(len(pool), 5000, replace=False)]
    pooled_var = np.maximum(pool.var(axis=0), floor)
    n_centers = M if kind == GAUSSIAN else M * n_mix
    n_distinct = len(np.unique(sub, axis=0))
    seed = int(rng.integers(2**32))
    if n_distinct >= n_centers:
        centers = kmeans_fit(sub, KMeansConfig(n_centers, num_restarts=1, seed=seed)).centroids
    else:
        centers = sub[rng.integers(len(sub), size=n_centers)]
    centers = centers[rng.permutation(n_centers)]
    if kind == GAUSSIAN:
        return A, pi, GaussianEmission(centers, np.tile(pooled_var, (M, 1)), floor)
    D = pool.shape[1]
    return A, pi, GaussianMixtureEmission(
        np.full((M, n_mix), 1.0 / n_mix), centers.reshape(M, n_mix, D),
        np.tile(pooled_var, (M, n_mix, 1)), floor)


def _training_batches(sequences, kind, n_symbols, dim):
    if not sequences:
        raise InvalidInputError("cannot train on an empty dataset")
    probe = DiscreteEmission(np.full((1, n_symbols), 1.0 / n_symbols)) if kind == DISCRETE \
        else GaussianEmission(np.zeros((1, dim)), np.ones((1, dim)))
    checked = [probe.check_obs(s) for s in sequences]
    if any(len(s) < 1 for s in checked):
        raise InvalidInputError("sequences must have at least one step")
    return [np.stack([checked[i] for i in idx]) for idx in _length_groups(checked).values()]


def _emission_shape(sequences, kind, n_symbols):
    if kind not in EMISSION_KINDS:
        raise InvalidInputError(f"emission_kind must be one of {EMISSION_KINDS}")
    if kind == DISCRETE:
        arrs = [np.asarray(s) for s in sequences]
        if any(not np.issubdtype(a.dtype, np.integer) for a in arrs):
            raise InvalidInputError("discrete training needs integer symbols")
        observed = int(max(a.max() for a in arrs)) + 1
        if n_symbols is None:
            return observed, None
        if n_symbols < observed:
            raise InvalidInputError(f"data contains symbol {observed - 1} >= n_symbols")
        return int(n_symbols), None
    first = np.asarray(sequences[0])
    if not np.issubdtype(first.dtype, np.floating):
        raise InvalidInputError("continuous training needs float observations")
    return None, 1 if first.ndim == 1 else int(first.shape[-1])


def baum_welch(dataset, num_states: int, emission_kind: str = DISCRETE,
               config: EmTrainConfig | None = None, n_mix: int | None = None,
               n_symbols: int | None = None):
    """Unsupervised maximum-likelihood training by EM with random restarts.

    Each restart draws transition and initial rows from a flat Dirichlet;
    Gaussian means start at K-means centroids of the pooled observations
    with the pooled variance. A restart stops once the relative
    log-likelihood gain drops below ``config.rel_tol`` or after
    ``config.max_iters`` E-steps. The restart with the highest final
    log-likelihood is returned (earliest restart on ties).

    Returns
    -------
    model : HMM
        Best model; ``meta`` records the config and final log-likelihood.
    history : TrainingHistory
        Per-restart log-likelihood traces and re-seeding events.
    """
    config = config or EmTrainConfig()
    M = _positive_int(num_states, "num_states")
    seqs = _sequences(dataset)
    if not seqs:
        raise InvalidInputError("cannot train on an empty dataset")
    if isinstance(dataset, SequenceDataset) and dataset.is_symbolic and n_symbols is None:
        n_symbols = dataset.n_symbols
    K, D = _emission_shape(seqs, emission_kind, n_symbols)
    if emission_kind == GMM:
        if n_mix is None:
            raise InvalidInputError("a Gaussian-mixture emission needs n_mix")
        n_mix = _positive_int(n_mix, "n_mix")
    batches = _training_batches(seqs, emission_kind, K, D)
    pool = None
    if emission_kind != DISCRETE:
        pool = np.concatenate([b.reshape(-1, D) for b in batches])
    n_seq = len(seqs)
    floor = config.variance_floor

    traces = []
    best_params = None
    best_index = -1
    for r, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.num_restarts)):
        rng = np.random.default_rng(child)
        params = _init_params(emission_kind, M, rng, pool, K, n_mix, floor)
        trace = RestartTrace(r)
        for it in range(config.max_iters):
            stats = _e_step(params, emission_kind, batches)
            trace.log_likelihoods.append(stats.log_likelihood)
            if it > 0:
                prev = trace.log_likelihoods[-2]
                gain = stats.log_likelihood - prev
                if gain <= config.rel_tol * max(abs(prev), 1e-300):
                    trace.converged = True
                    break
            if it == config.max_iters - 1:
                break
            params, empty = _m_step(params, emission_kind, stats, n_seq, pool, rng, floor)
            trace.reseeded.extend((it, i) for i in empty)
        traces.append(trace)
        if best_params is None or trace.final > traces[best_index].final:
            best_params, best_index = params, r

    A, pi, em = best_params
    history = TrainingHistory(traces, best_index)
    model = HMM(A, pi, em, {
        "training": {"method": "baum_welch", **asdict(config), "n_mix": n_mix,
                     "n_symbols": K},
        "final_log_likelihood": traces[best_index].final,
    })
    return model, history


def _fit_diag_gmm(x, C, rng, floor, max_iters=200, rel_tol=1e-6):
    """Plain EM for a diagonal GMM on one state's samples."""
    n, D = x.shape
    var0 = np.maximum(x.var(axis=0), floor)
    if len(np.unique(x, axis=0)) >= C:
        mu = kmeans_fit(x, KMeansConfig(C, num_restarts=3, seed=int(rng.integers(2**32)))).centroids
    else:
        mu = x[rng.integers(n, size=C)]
    w = np.full(C, 1.0 / C)
    var = np.tile(var0, (C, 1))
    prev = -np.inf
    for _ in range(max_iters):
        lp = _diag_log_pdf(x, mu, var) + np.log(w)
        norm = logsumexp(lp, axis=1)
        ll = float(norm.sum())
        resp = np.exp(lp - norm[:, None])
        nk = resp.sum(axis=0)
        ok = nk >= ZERO_OCCUPANCY
        w = nk / nk.sum()
        mu[ok] = (resp[:, ok].T @ x) / nk[ok, None]
        var[ok] = np.maximum((resp[:, ok].T @ (x * x)) / nk[ok, None] - mu[ok] ** 2, floor)
        if ll - prev <= rel_tol * abs(ll):
            break
        prev = ll
    w = np.maximum(w, 0)
    return w / w.sum(), mu, var


def fit_supervised(dataset: SequenceDataset, num_states: int, emission_kind: str = DISCRETE,
                   pseudo_count: float = 1.0, n_symbols: int | None = None,
                   n_mix: int | None = None, variance_floor: float = DEFAULT_VARIANCE_FLOOR,
                   seed: int = 0) -> HMM:
    """Maximum-likelihood estimates from labeled sequences by counting.

    Every count table (initial, transitions, discrete emissions) receives
    ``pseudo_count`` additive smoothing; rows without any counts become
    uniform. Gaussian emissions use per-state sample moments, falling back
    to the pooled moments for a state that never occurs.
    """
    M = _positive_int(num_states, "num_states")
    if pseudo_count < 0:
        raise InvalidInputError("pseudo_count must be nonnegative")
    if not isinstance(dataset, SequenceDataset) or dataset.states is None:
        raise InvalidInputError("supervised fitting needs a dataset with state labels")
    states = [np.asarray(s) for s in dataset.states]
    for n, s in enumerate(states):
        if s.size and (s.min() < 0 or s.max() >= M):
            raise InvalidInputError(f"sequence {n} has a state label outside [0, {M})")

    def normalize(counts):
        counts = counts + pseudo_count
        sums = counts.sum(axis=-1, keepdims=True)
        width = counts.shape[-1]
        return np.where(sums > 0, counts / np.where(sums > 0, sums, 1.0), 1.0 / width)

    start = np.bincount([s[0] for s in states], minlength=M).astype(float)
    trans = np.zeros((M, M))
    for s in states:
        np.add.at(trans, (s[:-1], s[1:]), 1.0)
    A = normalize(trans)
    pi = normalize(start)

    seqs = list(dataset.observations)
    flat_states = np.concatenate(states)
    if emission_kind == DISCRETE:
        if n_symbols is None and dataset.is_symbolic:
            n_symbols = dataset.n_symbols
        K, _ = _emission_shape(seqs, DISCRETE, n_symbols)
        counts = np.zeros((M, K))
        np.add.at(counts, (flat_states, np.concatenate(seqs)), 1.0)
        emission = DiscreteEmission(normalize(counts))
        meta_extra = {"n_symbols": K}
    elif emission_kind in (GAUSSIAN, GMM):
        _, D = _emission_shape(seqs, emission_kind, None)
        x = np.concatenate([np.asarray(s, dtype=float).reshape(len(s), D) for s in seqs])
        pooled_mean = x.mean(axis=0)
        pooled_var = np.maximum(x.var(axis=0), variance_floor)
        if emission_kind == GAUSSIAN:
            means = np.tile(pooled_mean, (M, 1))
            var = np.tile(pooled_var, (M, 1))
            for i in range(M):
                xi = x[flat_states == i]
                if len(xi):
                    means[i] = xi.mean(axis=0)
                    var[i] = np.maximum(xi.var(axis=0), variance_floor)
            emission = GaussianEmission(means, var, variance_floor)
            meta_extra = {}
        else:
            C = _positive_int(n_mix, "n_mix")
            rng = np.random.default_rng(seed)
            weights = np.full((M, C), 1.0 / C)
            means = np.tile(pooled_mean, (M, C, 1))
            var = np.tile(pooled_var, (M, C, 1))
            for i in range(M):
                xi = x[flat_states == i]
                if len(xi):
                    weights[i], means[i], var[i] = _fit_diag_gmm(xi, C, rng, variance_floor)
            emission = GaussianMixtureEmission(weights, means, var, variance_floor)
            meta_extra = {"n_mix": C}
    else:
        raise InvalidInputError(f"emission_kind must be one of {EMISSION_KINDS}")

    return HMM(A, pi, emission, {"training": {"method": "supervised",
                                              "pseudo_count": pseudo_count, **meta_extra}})
