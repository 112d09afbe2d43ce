import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmmbench import hmm
from hmmbench.data import SequenceDataset
from hmmbench.errors import InvalidInputError, NumericalUnderflowError
from hmmbench.evaluation import map_states

from oracles import (brute_log_likelihood, brute_posteriors, brute_viterbi,
                     random_discrete_hmm)


def _chain():
    return hmm.HMM([[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0],
                   hmm.DiscreteEmission([[1.0, 0.0], [0.0, 1.0]]))


def _uniform(M=3, K=4):
    return hmm.HMM(np.full((M, M), 1 / M), np.full(M, 1 / M),
                   hmm.DiscreteEmission(np.full((M, K), 1 / K)))


def _gauss2(mu=(0.0, 6.0), sd=1.0):
    A = [[0.9, 0.1], [0.2, 0.8]]
    em = hmm.GaussianEmission(np.array(mu)[:, None], np.full((2, 1), sd ** 2))
    return hmm.HMM(A, [0.5, 0.5], em)


# -- validation -------------------------------------------------------------------


def test_rejects_non_stochastic_rows():
    with pytest.raises(InvalidInputError):
        hmm.HMM([[0.5, 0.6], [0.5, 0.5]], [0.5, 0.5], hmm.DiscreteEmission([[1, 0], [0, 1]]))
    with pytest.raises(InvalidInputError):
        hmm.HMM([[1.0]], [1.0], hmm.DiscreteEmission([[1.0], [1.0]]))
    with pytest.raises(InvalidInputError):
        hmm.GaussianEmission([[0.0]], [[1e-9]])


def test_models_are_immutable():
    m = _chain()
    with pytest.raises(ValueError):
        m.transitions[0, 0] = 0.5


# -- forward / backward -------------------------------------------------------------


def test_forward_single_step():
    m = hmm.HMM([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5], hmm.DiscreteEmission([[1, 0], [0, 1]]))
    res = hmm.forward(m, [0])
    assert res.log_likelihood == pytest.approx(math.log(0.5), abs=1e-15)


def test_forward_deterministic_chain():
    res = hmm.forward(_chain(), [0, 0, 0])
    assert res.log_likelihood == 0.0
    np.testing.assert_allclose(hmm.posterior_marginals(_chain(), [0, 0, 0]), [[1, 0]] * 3)


def test_forward_matches_enumeration_m2_t3():
    rng = np.random.default_rng(11)
    m = random_discrete_hmm(rng, 2, 3)
    obs = [2, 0, 1]
    want = brute_log_likelihood(m, obs)
    assert want == pytest.approx(-4.14212051809034, rel=1e-12)  # frozen enumeration value
    assert hmm.forward(m, obs).log_likelihood == pytest.approx(want, rel=1e-10)


def test_scaling_identity_and_alpha_rows():
    rng = np.random.default_rng(3)
    m = random_discrete_hmm(rng, 3, 4)
    obs = rng.integers(0, 4, size=40)
    res = hmm.forward(m, obs)
    assert res.log_likelihood == pytest.approx(np.log(res.scaling).sum(), abs=1e-12)
    np.testing.assert_allclose(res.alpha.sum(axis=1), 1.0, atol=1e-9)


def test_backward_base_case_is_ones():
    m = _uniform()
    res = hmm.forward(m, [1])
    np.testing.assert_array_equal(hmm.backward(m, [1], res.log_scaling), [[1.0, 1.0, 1.0]])


def test_uniform_model_posteriors():
    np.testing.assert_allclose(hmm.posterior_marginals(_uniform(), [0, 3, 2, 1]), 1 / 3,
                               atol=1e-15)


def test_long_sequence_does_not_underflow():
    m = _gauss2()
    _, obs = hmm.sample(m, 20000, seed=5)
    res = hmm.infer(m, obs)
    assert np.isfinite(res.log_likelihood)
    np.testing.assert_allclose(res.gamma.sum(axis=1), 1.0, atol=1e-9)


def test_impossible_observation_names_step():
    with pytest.raises(NumericalUnderflowError) as err:
        hmm.forward(_chain(), [0, 0, 1])
    assert err.value.step == 2
    with pytest.raises(NumericalUnderflowError):
        hmm.viterbi(_chain(), [0, 1])


def test_arity_mismatch():
    with pytest.raises(InvalidInputError):
        hmm.forward(_chain(), [0, 2])
    with pytest.raises(InvalidInputError):
        hmm.forward(_gauss2(), np.zeros((3, 2)))
    with pytest.raises(InvalidInputError):
        hmm.forward(_chain(), [])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 4), K=st.integers(1, 4),
       T=st.integers(1, 5))
def test_forward_backward_match_enumeration(seed, M, K, T):
    rng = np.random.default_rng(seed)
    m = random_discrete_hmm(rng, M, K)
    obs = rng.integers(0, K, size=T)
    res = hmm.infer(m, obs)
    assert res.log_likelihood == pytest.approx(brute_log_likelihood(m, obs), rel=1e-10)
    np.testing.assert_allclose(res.gamma, brute_posteriors(m, obs), atol=1e-10)
    np.testing.assert_allclose(res.gamma.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), T=st.integers(1, 5))
def test_gaussian_forward_matches_enumeration(seed, T):
    rng = np.random.default_rng(seed)
    m = hmm.HMM(rng.dirichlet(np.ones(3), 3), rng.dirichlet(np.ones(3)),
                hmm.GaussianEmission(rng.normal(0, 3, (3, 2)), rng.uniform(0.5, 2, (3, 2))))
    obs = rng.normal(0, 3, (T, 2))
    assert hmm.forward(m, obs).log_likelihood == pytest.approx(brute_log_likelihood(m, obs),
                                                              rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), perm_seed=st.integers(0, 100))
def test_likelihood_invariant_to_state_relabeling(seed, perm_seed):
    rng = np.random.default_rng(seed)
    m = random_discrete_hmm(rng, 3, 3)
    p = np.random.default_rng(perm_seed).permutation(3)
    relabeled = hmm.HMM(m.transitions[np.ix_(p, p)], m.initial[p],
                        hmm.DiscreteEmission(m.emission.probs[p]))
    obs = rng.integers(0, 3, size=8)
    assert hmm.forward(relabeled, obs).log_likelihood == pytest.approx(
        hmm.forward(m, obs).log_likelihood, rel=1e-12)


# -- Viterbi --------------------------------------------------------------------------


def test_viterbi_single_step_is_argmax():
    m = hmm.HMM([[0.5, 0.5], [0.5, 0.5]], [0.3, 0.7], hmm.DiscreteEmission([[0.9, 0.1],
                                                                            [0.2, 0.8]]))
    path, lj = hmm.viterbi(m, [0])
    assert path.tolist() == [0] and lj == pytest.approx(math.log(0.27))


def test_viterbi_deterministic_chain():
    path, lj = hmm.viterbi(_chain(), [0, 0, 0])
    assert path.tolist() == [0, 0, 0] and lj == 0.0


def test_viterbi_all_tied_prefers_state_zero():
    path, lj = hmm.viterbi(_uniform(), [1, 2, 3])
    assert path.tolist() == [0, 0, 0]
    assert lj == pytest.approx(3 * math.log(1 / 12))


def test_viterbi_partial_tie_rule():
    # states 1 and 2 are interchangeable; state 0 never emits symbol 1
    B = [[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]]
    m = hmm.HMM(np.full((3, 3), 1 / 3), [0.0, 0.5, 0.5], hmm.DiscreteEmission(B))
    path, _ = hmm.viterbi(m, [1, 1, 1])
    expected, _ = brute_viterbi(m, [1, 1, 1])
    assert path.tolist() == expected.tolist() == [1, 1, 1]


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 4), K=st.integers(1, 4),
       T=st.integers(1, 5), sharp=st.booleans())
def test_viterbi_matches_exhaustive(seed, M, K, T, sharp):
    rng = np.random.default_rng(seed)
    m = random_discrete_hmm(rng, M, K, sharp)
    obs = rng.integers(0, K, size=T)
    path, lj = hmm.viterbi(m, obs)
    want_path, want = brute_viterbi(m, obs)
    assert lj == pytest.approx(want, abs=1e-10)
    assert path.tolist() == want_path.tolist()


def test_decode_batches_mixed_lengths():
    rng = np.random.default_rng(0)
    m = random_discrete_hmm(rng, 3, 3)
    seqs = [rng.integers(0, 3, size=n) for n in (4, 7, 4, 2)]
    paths = hmm.decode(m, seqs)
    for s, p in zip(seqs, paths):
        assert p.tolist() == hmm.viterbi(m, s)[0].tolist()
    gam = hmm.posterior_batch(m, seqs)
    for s, g in zip(seqs, gam):
        np.testing.assert_allclose(g, hmm.posterior_marginals(m, s), atol=1e-12)
    assert hmm.log_likelihood(m, seqs) == pytest.approx(
        sum(hmm.forward(m, s).log_likelihood for s in seqs), rel=1e-12)


# -- sampling -----------------------------------------------------------------------------


def test_sample_deterministic_chain_and_seed():
    states, obs = hmm.sample(_chain(), 10, seed=1)
    assert states.tolist() == [0] * 10 and obs.tolist() == [0] * 10
    m = _gauss2()
    a = hmm.sample(m, 50, seed=9)
    b = hmm.sample(m, 50, seed=9)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sample_transition_frequencies():
    A = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]])
    m = hmm.HMM(A, [1 / 3] * 3, hmm.DiscreteEmission(np.eye(3)))
    states, _ = hmm.sample(m, 100_001, seed=2)
    counts = np.zeros((3, 3))
    np.add.at(counts, (states[:-1], states[1:]), 1)
    freq = counts / counts.sum(axis=1, keepdims=True)
    assert np.abs(freq - A).max() < 0.01


# -- parameter counts ------------------------------------------------------------------------


@pytest.mark.parametrize("args,want", [((3, 2, 1), 23), ((1, 1, 1), 2), ((3, 1, 2), 20)])
def test_count_params_chmm(args, want):
    assert hmm.count_params_chmm(*args) == want


@pytest.mark.parametrize("args,want", [((4, 5), 31), ((1, 1), 0), ((4, 6), 35)])
def test_count_params_dhmm(args, want):
    assert hmm.count_params_dhmm(*args) == want


@pytest.mark.parametrize("bad", [0, -1, 1.5, True])
def test_count_params_rejects_bad_input(bad):
    with pytest.raises(InvalidInputError):
        hmm.count_params_dhmm(bad, 2)
    with pytest.raises(InvalidInputError):
        hmm.count_params_chmm(2, 2, bad)


def test_model_n_params_matches_formulas():
    assert _chain().n_params == hmm.count_params_dhmm(2, 2)
    assert _gauss2().n_params == hmm.count_params_chmm(2, 1, 1)


# -- supervised fitting -------------------------------------------------------------------------


def test_supervised_counts_without_smoothing():
    ds = SequenceDataset.from_arrays([[0, 1], [0, 1]], [[0, 1], [0, 1]])
    m = hmm.fit_supervised(ds, 2, hmm.DISCRETE, pseudo_count=0.0)
    assert m.transitions[0, 1] == 1.0
    assert m.emission.probs[0, 0] == 1.0
    # state 1 never transitions anywhere, so its row is uniform
    np.testing.assert_array_equal(m.transitions[1], [0.5, 0.5])


def test_supervised_add_one_smoothing():
    ds = SequenceDataset.from_arrays([[0, 0, 1]], [[0, 0, 0]])
    m = hmm.fit_supervised(ds, 2, hmm.DISCRETE)
    np.testing.assert_allclose(m.transitions[0], [3 / 4, 1 / 4])
    np.testing.assert_allclose(m.transitions[1], [0.5, 0.5])
    np.testing.assert_allclose(m.initial, [2 / 3, 1 / 3])
    np.testing.assert_allclose(m.emission.probs[0], [3 / 5, 2 / 5])


def test_supervised_rejects_bad_labels():
    ds = SequenceDataset.from_arrays([[0, 1]], [[0, 2]])
    with pytest.raises(InvalidInputError):
        hmm.fit_supervised(ds, 2)


def test_supervised_round_trip_recovers_parameters():
    A = np.array([[0.8, 0.15, 0.05], [0.1, 0.7, 0.2], [0.3, 0.1, 0.6]])
    pi = np.array([0.5, 0.3, 0.2])
    B = np.array([[0.6, 0.3, 0.1, 0.0], [0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]])
    truth = hmm.HMM(A, pi, hmm.DiscreteEmission(B))
    ds = hmm.sample_dataset(truth, 500, 40, seed=4)
    fit = hmm.fit_supervised(ds, 3, hmm.DISCRETE, n_symbols=4)
    assert np.abs(fit.transitions - A).max() < 0.05
    assert np.abs(fit.initial - pi).max() < 0.05
    assert np.abs(fit.emission.probs - B).max() < 0.05


def test_supervised_gaussian_moments():
    ds = hmm.sample_dataset(_gauss2(), 100, 50, seed=1)
    fit = hmm.fit_supervised(ds, 2, hmm.GAUSSIAN)
    np.testing.assert_allclose(fit.emission.means[:, 0], [0.0, 6.0], atol=0.05)
    np.testing.assert_allclose(fit.emission.variances[:, 0], [1.0, 1.0], atol=0.05)


def test_supervised_gmm_shapes():
    ds = hmm.sample_dataset(_gauss2(), 40, 30, seed=1)
    fit = hmm.fit_supervised(ds, 2, hmm.GMM, n_mix=2)
    assert fit.kind == "chmm-gmm"
    assert fit.emission.means.shape == (2, 2, 1)
    np.testing.assert_allclose(fit.emission.weights.sum(axis=1), 1.0, atol=1e-9)


# -- Baum-Welch -------------------------------------------------------------------------------


def test_baum_welch_recovers_separated_gaussians():
    ds = hmm.sample_dataset(_gauss2(), 200, 50, seed=0)
    model, history = hmm.baum_welch(ds, 2, hmm.GAUSSIAN, hmm.EmTrainConfig(num_restarts=3))
    perm, _ = map_states(ds.states, hmm.decode(model, ds), 2)
    means = np.empty(2)
    means[list(perm)] = model.emission.means[:, 0]
    np.testing.assert_allclose(means, [0.0, 6.0], atol=0.1)
    assert model.meta["final_log_likelihood"] == history.best.log_likelihoods[-1]


def test_baum_welch_single_symbol_degenerate():
    ds = SequenceDataset.from_arrays([[2, 2, 2, 2]], symbolic=True)
    model, _ = hmm.baum_welch(ds, 1, hmm.DISCRETE, hmm.EmTrainConfig(num_restarts=1),
                              n_symbols=3)
    np.testing.assert_array_equal(model.transitions, [[1.0]])
    np.testing.assert_allclose(model.emission.probs, [[0.0, 0.0, 1.0]], atol=1e-12)


def test_baum_welch_rejects_empty():
    with pytest.raises(InvalidInputError):
        hmm.baum_welch([], 2)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_em_traces_non_decreasing(seed):
    rng = np.random.default_rng(seed)
    truth = random_discrete_hmm(rng, 3, 4)
    ds = hmm.sample_dataset(truth, 20, 15, seed=seed)
    _, history = hmm.baum_welch(ds, 3, hmm.DISCRETE,
                                hmm.EmTrainConfig(num_restarts=2, max_iters=60, seed=seed),
                                n_symbols=4)
    for r in history.restarts:
        assert np.all(np.diff(r.log_likelihoods) >= -1e-8)


def test_gmm_em_monotone_and_valid():
    ds = hmm.sample_dataset(_gauss2(), 30, 40, seed=3)
    model, history = hmm.baum_welch(ds, 2, hmm.GMM, hmm.EmTrainConfig(num_restarts=2,
                                                                       max_iters=80), n_mix=2)
    for r in history.restarts:
        assert np.all(np.diff(r.log_likelihoods) >= -1e-8)
    assert np.all(model.emission.variances >= hmm.DEFAULT_VARIANCE_FLOOR)


def test_em_training_is_deterministic():
    ds = hmm.sample_dataset(_gauss2(), 30, 20, seed=2)
    cfg = hmm.EmTrainConfig(num_restarts=3, seed=12)
    a, _ = hmm.baum_welch(ds, 2, hmm.GAUSSIAN, cfg)
    b, _ = hmm.baum_welch(ds, 2, hmm.GAUSSIAN, cfg)
    assert a.to_dict() == b.to_dict()


def test_variance_floor_on_repeated_values():
    ds = SequenceDataset.from_arrays([np.ones((20, 1)), np.full((20, 1), 5.0)])
    model, _ = hmm.baum_welch(ds, 2, hmm.GAUSSIAN, hmm.EmTrainConfig(num_restarts=2))
    assert np.all(model.emission.variances >= hmm.DEFAULT_VARIANCE_FLOOR)
    assert np.all(np.isfinite(model.emission.means))


# -- serialization ------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["dhmm", "gauss", "gmm"])
def test_model_json_round_trip(tmp_path, kind):
    rng = np.random.default_rng(7)
    if kind == "dhmm":
        m = random_discrete_hmm(rng, 3, 5)
    elif kind == "gauss":
        m = hmm.HMM(rng.dirichlet(np.ones(2), 2), rng.dirichlet(np.ones(2)),
                    hmm.GaussianEmission(rng.normal(size=(2, 3)), rng.uniform(0.1, 2, (2, 3))))
    else:
        m = hmm.HMM(rng.dirichlet(np.ones(2), 2), rng.dirichlet(np.ones(2)),
                    hmm.GaussianMixtureEmission(rng.dirichlet(np.ones(3), 2),
                                                rng.normal(size=(2, 3, 1)),
                                                rng.uniform(0.1, 2, (2, 3, 1))))
    m = m.with_meta(note="x")
    path = hmm.save_model(m, tmp_path / "m.json")
    back = hmm.load_model(path)
    assert back.kind == m.kind and back.meta == m.meta
    assert np.abs(back.transitions - m.transitions).max() <= 1e-12
    assert np.abs(back.initial - m.initial).max() <= 1e-12
    for name in ("probs", "means", "variances", "weights"):
        if hasattr(m.emission, name):
            assert np.abs(getattr(back.emission, name) - getattr(m.emission, name)).max() <= 1e-12
    assert set(m.to_dict()) >= {"kind", "transitions", "initial", "emission", "meta"}
