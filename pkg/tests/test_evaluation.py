import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmmbench import hmm
from hmmbench.data import SequenceDataset
from hmmbench.dbn import generate_case
from hmmbench.errors import InvalidInputError
from hmmbench.evaluation import (CSV_COLUMNS, SweepConfig, accuracy, apply_mapping,
                                 cmi_markov_check, combine_predictions, confusion_matrix,
                                 correlation_grouping, map_states, pool_posteriors, run_sweep,
                                 select_mixture_components, split_indices)

from oracles import brute_map_states

FAST = {"unsupervised-dhmm": {"num_restarts": 2, "max_iters": 100},
        "unsupervised-chmm": {"num_restarts": 2, "max_iters": 100}}


# -- accuracy and state mapping ---------------------------------------------------------


def test_accuracy_cases():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 100.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 75.0
    assert accuracy([[0, 1], [1]], [[0, 0], [1]]) == pytest.approx(200 / 3)
    with pytest.raises(InvalidInputError):
        accuracy([0, 1], [0])


def test_confusion_matrix_orientation():
    c = confusion_matrix([0, 1, 1], [1, 1, 0], 2)
    # rows are predicted labels, columns true labels
    np.testing.assert_array_equal(c, [[0, 1], [1, 1]])


def test_map_states_identity_and_shift():
    true = np.array([0, 1, 2, 2, 1, 0])
    perm, acc = map_states(true, true, 3)
    assert perm == (0, 1, 2) and acc == 100.0
    shifted = (true + 1) % 3
    perm, acc = map_states(true, shifted, 3)
    assert perm == (2, 0, 1) and acc == 100.0
    assert apply_mapping(perm, shifted).tolist() == true.tolist()


def test_map_states_tie_is_lexicographically_smallest():
    # every bijection scores 50%
    perm, acc = map_states([0, 1], [0, 0], 2)
    assert perm == (0, 1) and acc == 50.0


def test_map_states_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        map_states([0, 3], [0, 1], 2)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), M=st.integers(1, 5), n=st.integers(1, 40))
def test_map_states_matches_permutation_oracle(seed, M, n):
    rng = np.random.default_rng(seed)
    true = rng.integers(0, M, n)
    pred = rng.integers(0, M, n)
    perm, acc = map_states(true, pred, M)
    want_perm, want_acc = brute_map_states(true, pred, M)
    assert perm == want_perm
    assert acc == pytest.approx(want_acc, abs=1e-12)
    assert acc >= accuracy(true, pred) - 1e-12


# -- feature grouping -------------------------------------------------------------------------


def _gaussian_dataset(cov, n=20000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.multivariate_normal(np.zeros(len(cov)), cov, size=n)
    return SequenceDataset.from_arrays(list(x.reshape(n // 10, 10, len(cov))))


def test_grouping_single_feature():
    g = correlation_grouping(_gaussian_dataset([[1.0]]))
    assert g.groups == ((0,),)


def test_grouping_anticorrelated_pair_splits():
    g = correlation_grouping(_gaussian_dataset([[1.0, -0.8], [-0.8, 1.0]]))
    assert g.groups == ((0,), (1,))


def test_grouping_duplicate_feature_joins():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 5, 1))
    ds = SequenceDataset.from_arrays(list(np.concatenate([x, x], axis=2)))
    assert correlation_grouping(ds).groups == ((0, 1),)


def test_grouping_is_transitive_through_components():
    cov = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.5], [0.0, 0.5, 1.0]])
    cov[0, 2] = cov[2, 0] = -0.2
    assert correlation_grouping(_gaussian_dataset(cov)).groups == ((0, 1, 2),)


def test_grouping_zero_variance_feature_flagged():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(size=(50, 4, 1)), np.ones((50, 4, 1))], axis=2)
    g = correlation_grouping(SequenceDataset.from_arrays(list(x)))
    assert g.warning and g.zero_variance == (1,)
    assert (1,) in g.groups


def test_case_one_features_form_two_groups():
    _, ds = generate_case("I", N=300, seed=0)
    assert correlation_grouping(ds).groups == ((0,), (1,))


# -- posterior pooling ------------------------------------------------------------------------------


def _random_gamma(rng, T=6, M=3):
    return rng.dirichlet(np.ones(M), size=T)


def test_combine_single_group_is_argmax():
    g = _random_gamma(np.random.default_rng(0))
    assert combine_predictions([g]).tolist() == np.argmax(g, axis=1).tolist()


def test_combine_identical_groups():
    g = _random_gamma(np.random.default_rng(1))
    assert combine_predictions([g, g]).tolist() == np.argmax(g, axis=1).tolist()


def test_combine_with_uniform_group_keeps_informative_path():
    g = _random_gamma(np.random.default_rng(2))
    u = np.full_like(g, 1 / 3)
    assert combine_predictions([g, u], [0.3, 0.7]).tolist() == np.argmax(g, axis=1).tolist()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), which=st.integers(0, 2))
def test_combine_all_weight_on_one_group(seed, which):
    rng = np.random.default_rng(seed)
    gs = [_random_gamma(rng) for _ in range(3)]
    w = np.zeros(3)
    w[which] = 1.0
    assert combine_predictions(gs, w).tolist() == np.argmax(gs[which], axis=1).tolist()


def test_pool_posteriors_rows_normalised_and_tie():
    p = pool_posteriors([[[0.5, 0.5], [0.2, 0.8]], [[0.5, 0.5], [0.8, 0.2]]])
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert combine_predictions([[[0.5, 0.5]]]).tolist() == [0]


def test_pool_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        pool_posteriors([np.ones((2, 2)) / 2, np.ones((3, 2)) / 2])
    with pytest.raises(InvalidInputError):
        pool_posteriors([np.ones((2, 2)) / 2], [0.5])


# -- mixture selection ------------------------------------------------------------------------------


def _gauss_hmm(em):
    return hmm.HMM([[0.9, 0.1], [0.1, 0.9]], [0.5, 0.5], em)


def test_bic_prefers_single_gaussian():
    truth = _gauss_hmm(hmm.GaussianEmission([[0.0], [8.0]], [[1.0], [1.0]]))
    ds = hmm.sample_dataset(truth, 40, 50, seed=0)
    sel = select_mixture_components(ds, 2, (1, 2, 3), hmm.EmTrainConfig(num_restarts=2))
    assert sel.n_mix == 1
    for c in (1, 2, 3):
        want = -2 * sel.log_likelihood[c] + hmm.count_params_chmm(2, c, 1) * math.log(2000)
        assert sel.bic[c] == pytest.approx(want)


def test_bic_single_candidate():
    truth = _gauss_hmm(hmm.GaussianEmission([[0.0], [8.0]], [[1.0], [1.0]]))
    ds = hmm.sample_dataset(truth, 5, 20, seed=0)
    assert select_mixture_components(ds, 2, (1,), hmm.EmTrainConfig(num_restarts=1)).n_mix == 1


def test_bic_detects_bimodal_states():
    em = hmm.GaussianMixtureEmission([[0.5, 0.5], [0.5, 0.5]],
                                     [[[-10.0], [10.0]], [[30.0], [50.0]]],
                                     np.ones((2, 2, 1)))
    ds = hmm.sample_dataset(_gauss_hmm(em), 40, 50, seed=1)
    sel = select_mixture_components(ds, 2, (1, 2, 3), hmm.EmTrainConfig(num_restarts=3))
    assert sel.n_mix == 2


# -- Markov diagnostic -------------------------------------------------------------------------------


def test_cmi_first_order_chain_is_small():
    m = hmm.HMM([[0.7, 0.2, 0.1], [0.3, 0.4, 0.3], [0.1, 0.1, 0.8]], [1 / 3] * 3,
                hmm.DiscreteEmission(np.eye(3)))
    ds = hmm.sample_dataset(m, 1000, 102, seed=0)
    res = cmi_markov_check(ds.states)
    assert res.n_triples == 100_000 and res.value < 0.01 and not res.low_sample


def test_cmi_copy_two_back_is_log_ns():
    # S_t+1 = S_t-1 while S_t is an independent uniform draw
    rng = np.random.default_rng(0)
    Ns = 4
    a = rng.integers(0, Ns, 100_000)
    b = rng.integers(0, Ns, 100_000)
    res = cmi_markov_check(np.stack([a, b, a], axis=1))
    assert res.value == pytest.approx(math.log(Ns), abs=0.01)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_cmi_nonnegative_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(0, 3, 30) for _ in range(10)]
    perm = rng.permutation(3)
    a = cmi_markov_check(seqs).value
    b = cmi_markov_check([perm[s] for s in seqs]).value
    assert a >= 0 and a == pytest.approx(b, abs=1e-12)


def test_cmi_low_sample_flag_and_errors():
    assert cmi_markov_check([[0, 1, 0, 1]]).low_sample
    with pytest.raises(InvalidInputError):
        cmi_markov_check([[0, 1]])


def test_cmi_case_one_below_case_two_and_four():
    vals = {}
    for case in ("I", "II", "IV"):
        _, ds = generate_case(case, N=2000, seed=0, T=52)
        vals[case] = cmi_markov_check(ds.states).value
    assert vals["I"] < 0.01
    assert vals["II"] > vals["I"] and vals["IV"] > vals["I"]


# -- sweep --------------------------------------------------------------------------------------------


def test_split_counts_and_determinism():
    tr, te = split_indices(2000, 0.8, 0)
    assert len(tr) == 1600 and len(te) == 400
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(2000))
    tr2, _ = split_indices(2000, 0.8, 0)
    assert list(tr) == list(tr2)
    assert len(split_indices(2000, 0.001, 0)[0]) == 2


def test_sweep_config_validation():
    with pytest.raises(InvalidInputError):
        SweepConfig(training_ratios=(0.3, 0.8))
    with pytest.raises(InvalidInputError):
        SweepConfig(training_ratios=(1.0,))
    with pytest.raises(InvalidInputError):
        SweepConfig(kinds=())
    with pytest.raises(InvalidInputError):
        SweepConfig(kinds=("lstm",))


@pytest.fixture(scope="module")
def case_one_small():
    return generate_case("I", N=60, seed=0, T=20)[1]


def test_sweep_rows_and_counts(case_one_small):
    cfg = SweepConfig(training_ratios=(0.8, 0.3), hyperparams=FAST, record_timing=False)
    res = run_sweep(case_one_small, cfg)
    assert len(res.rows) == 6
    row = res.row("supervised-dhmm", 0.8)
    assert row.n_train_sequences == 48 and row.n_train_samples == 960
    for r in res.rows:
        assert 0 <= r.accuracy_pct <= 100
        # two anticorrelated features -> two single-feature models
        if r.model_kind.endswith("dhmm"):
            want = sum(hmm.count_params_dhmm(3, g["n_symbols"]) for g in r.details["groups"])
        else:
            want = 2 * hmm.count_params_chmm(3, 1, 1)
        assert r.n_params == want
    csv_text = res.to_csv()
    assert csv_text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert "Supervised DHMM" in res.to_markdown()


def test_sweep_single_feature_param_count():
    _, ds = generate_case("II", N=40, seed=1, T=10)
    cfg = SweepConfig(training_ratios=(0.5,), kinds=("supervised-dhmm",),
                      hyperparams={"supervised-dhmm": {"n_symbols": 5}}, record_timing=False)
    row = run_sweep(ds, cfg).rows[0]
    assert row.n_params == hmm.count_params_dhmm(4, 5) == 31


def test_sweep_is_deterministic(case_one_small):
    cfg = SweepConfig(training_ratios=(0.5, 0.1), hyperparams=FAST, record_timing=False)
    assert run_sweep(case_one_small, cfg).to_csv() == run_sweep(case_one_small, cfg).to_csv()


def test_sweep_skips_empty_splits():
    _, ds = generate_case("II", N=3, seed=0, T=5)
    cfg = SweepConfig(training_ratios=(0.5, 1e-10), kinds=("supervised-dhmm",),
                      record_timing=False)
    res = run_sweep(ds, cfg)
    assert res.rows[0].warning is None and res.rows[0].accuracy_pct is not None
    assert res.rows[1].n_train_sequences == 0 and res.rows[1].warning
    assert res.rows[1].accuracy_pct is None
    _, one = generate_case("II", N=1, seed=0, T=5)
    row = run_sweep(one, SweepConfig(training_ratios=(0.8,), kinds=("supervised-dhmm",))).rows[0]
    assert row.n_test_sequences == 0 and row.warning


def test_sweep_needs_labels():
    ds = SequenceDataset.from_arrays([np.zeros((4, 1))])
    with pytest.raises(InvalidInputError):
        run_sweep(ds, SweepConfig())
