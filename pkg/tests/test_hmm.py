"""Gaussian HMM: enumeration oracles, EM behaviour, decoding, descriptors."""

import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from somnium.errors import (DegenerateState, EmptyClass, EmptyInput,
                            NonFiniteEmission)
from somnium.hmm import (FitResult, GaussianHmm, HmmFitSpec, baum_welch,
                         hmm_embed, log_emissions, log_forward, posteriors,
                         prototype_classify, viterbi)


# --- oracles (independent of the implementation) ----------------------------

def density(x, mean, var):
    """Diagonal Gaussian density computed longhand."""
    p = 1.0
    for xi, mi, vi in zip(x, mean, var):
        p *= math.exp(-0.5 * (xi - mi) ** 2 / vi) / math.sqrt(
            2 * math.pi * vi)
    return p


def enumerate_loglik(model, seq):
    """Total probability by summing over every state path explicitly."""
    k = model.n_states
    total = 0.0
    for path in itertools.product(range(k), repeat=len(seq)):
        p = model.pi[path[0]] * density(seq[0], model.means[path[0]],
                                        model.variances[path[0]])
        for t in range(1, len(seq)):
            p *= model.transitions[path[t - 1], path[t]] * density(
                seq[t], model.means[path[t]], model.variances[path[t]])
        total += p
    return math.log(total)


def enumerate_viterbi(model, seq):
    """Best path by explicit enumeration."""
    k = model.n_states
    best, best_logp = None, -np.inf
    for path in itertools.product(range(k), repeat=len(seq)):
        logp = math.log(model.pi[path[0]]) + math.log(
            density(seq[0], model.means[path[0]], model.variances[path[0]]))
        for t in range(1, len(seq)):
            logp += math.log(model.transitions[path[t - 1], path[t]])
            logp += math.log(density(seq[t], model.means[path[t]],
                                     model.variances[path[t]]))
        if logp > best_logp:
            best, best_logp = path, logp
    return np.array(best), best_logp


def random_model(rng, k, d):
    pi = rng.dirichlet(np.ones(k))
    trans = rng.dirichlet(np.ones(k), size=k)
    return GaussianHmm(pi=pi, transitions=trans,
                       means=rng.normal(size=(k, d)),
                       variances=rng.uniform(0.5, 2.0, size=(k, d)))


def sample_from(model, rng, t_len):
    k = model.n_states
    states = np.empty(t_len, dtype=int)
    states[0] = rng.choice(k, p=model.pi)
    for t in range(1, t_len):
        states[t] = rng.choice(k, p=model.transitions[states[t - 1]])
    obs = model.means[states] + rng.normal(size=(t_len,
                                                 model.means.shape[1])) \
        * np.sqrt(model.variances[states])
    return obs, states


# --- forward ----------------------------------------------------------------

def test_forward_matches_enumeration_k2_t4():
    rng = np.random.default_rng(0)
    model = random_model(rng, k=2, d=2)
    seq = rng.normal(size=(4, 2))
    got, _ = log_forward(model, seq)
    assert abs(got - enumerate_loglik(model, seq)) < 1e-10


def test_forward_matches_enumeration_many_cases():
    rng = np.random.default_rng(1)
    for case in range(60):
        k = int(rng.integers(1, 4))
        t_len = int(rng.integers(1, 6))
        d = int(rng.integers(1, 4))
        model = random_model(rng, k, d)
        seq = rng.normal(size=(t_len, d))
        got, _ = log_forward(model, seq)
        assert abs(got - enumerate_loglik(model, seq)) < 1e-10, f"case {case}"


def test_forward_single_state_closed_form():
    model = GaussianHmm(pi=[1.0], transitions=[[1.0]], means=[[0.5]],
                        variances=[[2.0]])
    seq = np.array([[0.0], [1.0], [2.0]])
    expected = sum(
        -0.5 * ((x - 0.5) ** 2 / 2.0 + math.log(2 * math.pi * 2.0))
        for x in (0.0, 1.0, 2.0))
    got, alpha = log_forward(model, seq)
    assert abs(got - expected) < 1e-12
    assert alpha.shape == (3, 1)


def test_unlikely_observation_lowers_loglik():
    rng = np.random.default_rng(2)
    model = random_model(rng, k=2, d=1)
    base = rng.normal(size=(3, 1))
    ll_base, _ = log_forward(model, base)
    ll_out, _ = log_forward(model, np.vstack([base, [[50.0]]]))
    assert ll_out < ll_base


def test_emissions_reject_nonfinite():
    model = GaussianHmm(pi=[1.0], transitions=[[1.0]], means=[[0.0]],
                        variances=[[1.0]])
    with pytest.raises(NonFiniteEmission):
        log_emissions(model, np.array([[np.nan]]))


# --- posteriors -------------------------------------------------------------

def test_posteriors_rows_sum_to_one():
    rng = np.random.default_rng(3)
    model = random_model(rng, k=3, d=2)
    seq = rng.normal(size=(20, 2))
    gamma = posteriors(model, seq)
    assert gamma.shape == (20, 3)
    assert np.all(gamma >= 0)
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-10)


def test_posteriors_match_enumeration():
    # P(s_t = k | x) by summing path probabilities that pass through (t, k).
    rng = np.random.default_rng(4)
    model = random_model(rng, k=2, d=1)
    seq = rng.normal(size=(4, 1))
    total = math.exp(enumerate_loglik(model, seq))
    marg = np.zeros((4, 2))
    for path in itertools.product(range(2), repeat=4):
        p = model.pi[path[0]] * density(seq[0], model.means[path[0]],
                                        model.variances[path[0]])
        for t in range(1, 4):
            p *= model.transitions[path[t - 1], path[t]] * density(
                seq[t], model.means[path[t]], model.variances[path[t]])
        for t, s in enumerate(path):
            marg[t, s] += p
    np.testing.assert_allclose(posteriors(model, seq), marg / total,
                               atol=1e-12)


# --- viterbi ----------------------------------------------------------------

def test_viterbi_matches_enumeration_8_paths():
    rng = np.random.default_rng(5)
    model = random_model(rng, k=2, d=1)
    seq = rng.normal(size=(3, 1))
    path, logp = viterbi(model, seq)
    oracle_path, oracle_logp = enumerate_viterbi(model, seq)
    assert abs(logp - oracle_logp) < 1e-10
    assert np.array_equal(path, oracle_path)


def test_viterbi_many_cases_and_bound():
    rng = np.random.default_rng(6)
    for _ in range(100):
        k = int(rng.integers(1, 4))
        t_len = int(rng.integers(1, 6))
        model = random_model(rng, k, d=2)
        seq = rng.normal(size=(t_len, 2))
        path, logp = viterbi(model, seq)
        loglik, _ = log_forward(model, seq)
        # the single best path cannot beat the sum over all paths
        assert logp <= loglik + 1e-9
        oracle_path, oracle_logp = enumerate_viterbi(model, seq)
        assert abs(logp - oracle_logp) < 1e-9
        assert np.array_equal(path, oracle_path)


def test_viterbi_follows_separated_states():
    model = GaussianHmm(pi=[0.5, 0.5], transitions=[[0.9, 0.1], [0.1, 0.9]],
                        means=[[0.0], [10.0]], variances=[[1.0], [1.0]])
    seq = np.array([[0.1], [-0.2], [9.8], [10.2], [0.0]])
    path, _ = viterbi(model, seq)
    assert np.array_equal(path, [0, 0, 1, 1, 0])


# --- fitting ----------------------------------------------------------------

def two_cluster_sequences(rng, n_seq=10, t_len=40):
    seqs = []
    for _ in range(n_seq):
        obs, _ = sample_from(truth_model(), rng, t_len)
        seqs.append(obs)
    return seqs


def truth_model():
    return GaussianHmm(pi=[0.6, 0.4],
                       transitions=[[0.9, 0.1], [0.2, 0.8]],
                       means=[[0.0, 0.0], [10.0, 10.0]],
                       variances=[[1.0, 1.0], [1.0, 1.0]])


def test_loglik_monotone_over_20_seeds():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        seqs = [rng.normal(size=(30, 2)) +
                (0 if i % 2 else 3) for i in range(6)]
        spec = HmmFitSpec(n_states=2, max_iterations=40, seed=seed)
        result = baum_welch(seqs, spec)
        deltas = np.diff(result.log_likelihoods)
        assert np.all(deltas >= -1e-8), f"seed {seed}: {deltas.min()}"


def test_one_iteration_from_truth_does_not_decrease():
    rng = np.random.default_rng(7)
    seqs = two_cluster_sequences(rng)
    spec = HmmFitSpec(n_states=2, max_iterations=2, seed=0)
    result = baum_welch(seqs, spec, initial_model=truth_model())
    assert len(result.log_likelihoods) == 2
    assert result.log_likelihoods[1] - result.log_likelihoods[0] >= -1e-8


def test_generate_and_fit_recovers_means():
    rng = np.random.default_rng(8)
    seqs = [sample_from(truth_model(), rng, 100)[0] for _ in range(50)]
    result = baum_welch(seqs, HmmFitSpec(n_states=2, max_iterations=200,
                                         seed=0))
    true_means = truth_model().means
    cost = np.linalg.norm(result.model.means[:, None, :]
                          - true_means[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    assert cost[rows, cols].max() < 0.1
    assert result.converged


def test_convergence_stop_rule():
    rng = np.random.default_rng(9)
    seqs = two_cluster_sequences(rng)
    spec = HmmFitSpec(n_states=2, max_iterations=1000,
                      convergence_threshold=0.001, convergence_iterations=5)
    result = baum_welch(seqs, spec)
    assert result.converged
    assert result.iterations < 1000
    tail = np.abs(np.diff(result.log_likelihoods[-6:]))
    assert np.all(tail < 0.001)


def test_fit_deterministic_for_seed():
    rng = np.random.default_rng(10)
    seqs = two_cluster_sequences(rng, n_seq=4, t_len=25)
    spec = HmmFitSpec(n_states=3, max_iterations=30, seed=5)
    a = baum_welch(seqs, spec)
    b = baum_welch(seqs, spec)
    assert np.array_equal(a.model.means, b.model.means)
    assert np.array_equal(a.model.transitions, b.model.transitions)
    assert np.array_equal(a.model.variances, b.model.variances)
    assert a.log_likelihoods == b.log_likelihoods


def test_fit_changes_with_seed():
    rng = np.random.default_rng(11)
    seqs = [rng.normal(size=(30, 2)) for _ in range(4)]
    a = baum_welch(seqs, HmmFitSpec(n_states=3, max_iterations=3, seed=0))
    b = baum_welch(seqs, HmmFitSpec(n_states=3, max_iterations=3, seed=1))
    assert not np.array_equal(a.model.means, b.model.means)


def test_rows_stay_stochastic_and_variances_floored():
    rng = np.random.default_rng(12)
    seqs = two_cluster_sequences(rng, n_seq=4, t_len=30)
    result = baum_welch(seqs, HmmFitSpec(n_states=2, max_iterations=50))
    m = result.model
    np.testing.assert_allclose(m.pi.sum(), 1.0, atol=1e-9)
    np.testing.assert_allclose(m.transitions.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(m.variances >= 1e-6 * (1 - 1e-12))


def test_starved_state_reseeds_with_warning():
    rng = np.random.default_rng(13)
    seqs = [rng.normal(size=(30, 1)) for _ in range(3)]
    bad_start = GaussianHmm(pi=[0.5, 0.5], transitions=[[0.5, 0.5]] * 2,
                            means=[[0.0], [1e6]],
                            variances=[[1.0], [1e-6]])
    with pytest.warns(DegenerateState):
        result = baum_welch(seqs, HmmFitSpec(n_states=2, max_iterations=20),
                            initial_model=bad_start)
    # after re-seeding, both states sit near the data again
    assert np.all(np.abs(result.model.means) < 10.0)


def test_fit_preconditions():
    with pytest.raises(EmptyInput):
        baum_welch([], HmmFitSpec(n_states=2))
    with pytest.raises(EmptyInput):
        baum_welch([np.zeros((2, 1))], HmmFitSpec(n_states=5))


# --- descriptors ------------------------------------------------------------

def test_embed_shape_and_occupancy_simplex():
    rng = np.random.default_rng(14)
    model = random_model(rng, k=3, d=2)
    desc = hmm_embed(model, rng.normal(size=(15, 2)))
    assert desc.shape == (4,)
    np.testing.assert_allclose(desc[:3].sum(), 1.0, atol=1e-12)
    assert np.all(desc[:3] >= 0)


def test_embed_concentrates_on_matching_state():
    model = GaussianHmm(pi=[0.5, 0.5], transitions=[[0.99, 0.01],
                                                    [0.01, 0.99]],
                        means=[[0.0], [100.0]],
                        variances=[[1.0], [1.0]])
    seq = np.zeros((20, 1))
    desc = hmm_embed(model, seq)
    assert desc[0] > 0.999
    # mean per-step log-likelihood rides along as the last entry
    loglik, _ = log_forward(model, seq)
    assert abs(desc[-1] - loglik / 20) < 1e-12


def test_embed_deterministic():
    rng = np.random.default_rng(15)
    model = random_model(rng, k=2, d=3)
    seq = rng.normal(size=(10, 3))
    assert np.array_equal(hmm_embed(model, seq), hmm_embed(model, seq))


# --- prototype head ---------------------------------------------------------

def test_prototype_hand_case_and_tie_rule():
    train = np.array([[0.0, 0.0], [0.0, 2.0]])
    labels = np.array([0, 1])
    preds, scores = prototype_classify(train, labels,
                                       np.array([[0.0, 0.5], [0.0, 1.0]]))
    assert preds.tolist() == [0, 0]      # equidistant point -> class 0
    np.testing.assert_allclose(scores, [-1.0, 0.0], atol=1e-12)


def test_prototype_uses_class_means():
    train = np.array([[0.0], [2.0], [10.0], [12.0]])
    labels = np.array([0, 0, 1, 1])      # prototypes at 1 and 11
    preds, scores = prototype_classify(train, labels, np.array([[5.9],
                                                                [6.1]]))
    assert preds.tolist() == [0, 1]
    np.testing.assert_allclose(scores, [4.9 - 5.1, 5.1 - 4.9], atol=1e-12)


def test_prototype_blob_accuracy():
    rng = np.random.default_rng(16)
    train = np.vstack([rng.normal(0, 1, size=(50, 3)),
                       rng.normal(5, 1, size=(50, 3))])
    labels = np.repeat([0, 1], 50)
    test = np.vstack([rng.normal(0, 1, size=(100, 3)),
                      rng.normal(5, 1, size=(100, 3))])
    truth = np.repeat([0, 1], 100)
    preds, _ = prototype_classify(train, labels, test)
    assert (preds == truth).mean() > 0.95


def test_prototype_requires_both_classes():
    with pytest.raises(EmptyClass):
        prototype_classify(np.zeros((3, 2)), np.zeros(3, dtype=int),
                           np.zeros((1, 2)))


# --- serialization ----------------------------------------------------------

def test_json_round_trip_exact():
    rng = np.random.default_rng(17)
    model = random_model(rng, k=3, d=4)
    clone = GaussianHmm.from_json(model.to_json())
    assert np.array_equal(clone.pi, model.pi)
    assert np.array_equal(clone.transitions, model.transitions)
    assert np.array_equal(clone.means, model.means)
    assert np.array_equal(clone.variances, model.variances)


def test_model_invariants_enforced():
    with pytest.raises(ValueError):
        GaussianHmm(pi=[0.5, 0.6], transitions=[[1, 0], [0, 1]],
                    means=[[0], [1]], variances=[[1], [1]])
    with pytest.raises(ValueError):
        GaussianHmm(pi=[1.0], transitions=[[1.0]], means=[[0]],
                    variances=[[1e-9]])


def test_fit_result_is_reusable():
    rng = np.random.default_rng(18)
    seqs = two_cluster_sequences(rng, n_seq=4, t_len=30)
    result = baum_welch(seqs, HmmFitSpec(n_states=2, max_iterations=40))
    assert isinstance(result, FitResult)
    clone = GaussianHmm.from_json(result.model.to_json())
    ll_a, _ = log_forward(result.model, seqs[0])
    ll_b, _ = log_forward(clone, seqs[0])
    assert ll_a == ll_b
