"""Independent brute-force references used by the test suite."""
from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp

from hmmbench import hmm


def random_discrete_hmm(rng, M, K, sharp=False):
    conc = 0.3 if sharp else 1.0
    A = rng.dirichlet(np.full(M, conc), size=M)
    pi = rng.dirichlet(np.full(M, conc))
    B = rng.dirichlet(np.full(K, conc), size=M)
    return hmm.HMM(A, pi, hmm.DiscreteEmission(B))


def path_log_joints(model, obs):
    """log P(S, O) for every state path, keyed by path tuple."""
    logb = model.emission.log_likelihood(model.emission.check_obs(obs))
    T, M = logb.shape
    with np.errstate(divide="ignore"):
        logA = np.log(model.transitions)
        logpi = np.log(model.initial)
    paths = np.array(list(itertools.product(range(M), repeat=T))).reshape(-1, T)
    steps = np.arange(T)
    v = logpi[paths[:, 0]] + logb[steps, paths].sum(axis=1)
    if T > 1:
        v = v + logA[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return {tuple(p): float(x) for p, x in zip(paths.tolist(), v)}


def brute_log_likelihood(model, obs):
    return float(logsumexp(list(path_log_joints(model, obs).values())))


def brute_posteriors(model, obs):
    joints = path_log_joints(model, obs)
    paths = list(joints)
    w = np.array([joints[p] for p in paths])
    w = np.exp(w - logsumexp(w))
    T = len(paths[0])
    M = model.n_states
    gamma = np.zeros((T, M))
    for p, wp in zip(paths, w):
        gamma[np.arange(T), list(p)] += wp
    return gamma


def brute_viterbi(model, obs, rel_tol=1e-12):
    """Exhaustive max plus the path selected by lowest-index backtracking.

    Backtracking that prefers the lowest state at each step, starting from
    the last step, selects the optimal path that is smallest when compared
    from the final step backwards.
    """
    joints = path_log_joints(model, obs)
    best = max(joints.values())
    tol = rel_tol * max(1.0, abs(best)) * 10
    optimal = [p for p, v in joints.items() if v >= best - tol]
    return np.array(min(optimal, key=lambda p: p[::-1])), best


def brute_partition_sse(points, k):
    """Lowest SSE over every assignment of ``points`` to ``k`` nonempty clusters."""
    x = np.asarray(points, dtype=float).reshape(len(points), -1)
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        if len(set(labels)) != k or labels[0] != 0:
            continue
        lab = np.array(labels)
        sse = sum(((x[lab == c] - x[lab == c].mean(0)) ** 2).sum() for c in range(k))
        best = min(best, sse)
    return best


def brute_map_states(true, pred, M):
    """Best accuracy and lexicographically smallest optimal permutation."""
    true = np.asarray(true)
    pred = np.asarray(pred)
    best, best_perm = -1, None
    for perm in itertools.permutations(range(M)):
        hits = int(np.sum(np.asarray(perm)[pred] == true))
        if hits > best:
            best, best_perm = hits, perm
    return best_perm, 100.0 * best / len(true)
