import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foil import scm
from foil.data import window_arrays, zero_mean_normalize, SplitSpec
from foil.envinfer import (
    EmConfig,
    EnvironmentAssignment,
    MultiHeadRegressors,
    e_step_assign,
    em_infer,
    label_propagate,
    m_step,
    mean_run_length,
    tei_objective,
)
from foil.errors import ConfigError
from foil.evaluation import env_recovery_score
from foil.losses import suf_loss
from foil.nn import DenseLayer, MlpNetwork, make_rng
from oracles import mode_vote


def _linear_head(d_in, d_out, rng):
    return MlpNetwork.init([d_in, d_out], rng, output_activation="identity")


def _assign(labels, k):
    return EnvironmentAssignment(np.array(labels), k)


# ---------------------------------------------------------------- propagation


def test_propagation_uniform_labels():
    a = _assign([1] * 7, 2)
    assert label_propagate(a, 2).labels.tolist() == [1] * 7


def test_propagation_isolated_label_is_outvoted():
    assert label_propagate(_assign([0, 0, 1, 0, 0], 2), 1).labels.tolist() == [0, 0, 0, 0, 0]


def test_propagation_alternating_sequence():
    out = label_propagate(_assign([0, 1, 0, 1, 0], 2), 1).labels.tolist()
    # boundaries see a 1-1 tie and keep their own label; interior points follow 2-vs-1 votes
    assert out == mode_vote([0, 1, 0, 1, 0], 1) == [0, 0, 1, 0, 0]


def test_propagation_radius_zero_is_identity():
    a = _assign([0, 1, 1, 0, 2], 3)
    assert label_propagate(a, 0).labels.tolist() == [0, 1, 1, 0, 2]
    with pytest.raises(ConfigError):
        label_propagate(a, -1)


@settings(max_examples=400, deadline=None)
@given(
    st.integers(2, 4).flatmap(
        lambda k: st.tuples(st.just(k), st.lists(st.integers(0, k - 1), min_size=1, max_size=60))
    ),
    st.integers(0, 4),
)
def test_propagation_matches_brute_force(k_labels, radius):
    k, labels = k_labels
    out = label_propagate(_assign(labels, k), radius)
    assert out.labels.tolist() == mode_vote(labels, radius)
    assert set(out.labels.tolist()) <= set(labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.lists(st.tuples(st.integers(0, 2), st.integers(1, 30)), min_size=1, max_size=6))
def test_propagation_idempotent_on_long_runs(radius, runs):
    labels = []
    for lab, n in runs:
        labels += [lab] * (n + 2 * radius + 1)
    out = label_propagate(_assign(labels, 3), radius).labels.tolist()
    # every index deep inside a run (at least r away from its edges) keeps its label
    pos = 0
    for lab, n in runs:
        length = n + 2 * radius + 1
        deep = range(pos + radius, pos + length - radius)
        assert all(out[i] == lab for i in deep)
        pos += length


# ---------------------------------------------------------------- E-step


def test_identical_heads_keep_labels():
    rng = make_rng(0)
    head = _linear_head(3, 4, rng)
    heads = MultiHeadRegressors([head.copy(), head.copy()])
    reps, Y = rng.normal(size=(10, 3)), rng.normal(size=(10, 4))
    cur = EnvironmentAssignment(rng.integers(0, 2, size=10), 2)
    out = e_step_assign(heads, reps, Y, cur)
    assert out.labels.tolist() == cur.labels.tolist()
    assert out.changed_fraction == 0


def test_exact_head_wins():
    reps = np.array([[1.0, 0.0], [0.0, 1.0]])
    targets = [np.array([1.0, 2.0, 3.0]), np.array([3.0, 1.0, 2.0])]
    # head e maps its own basis vector to targets[e] exactly and the other to a flipped copy
    h0 = MlpNetwork([DenseLayer(np.column_stack([targets[0], -targets[1]]), np.zeros(3))])
    h1 = MlpNetwork([DenseLayer(np.column_stack([-targets[0], targets[1]]), np.zeros(3))])
    heads = MultiHeadRegressors([h0, h1])
    out = e_step_assign(heads, reps, np.stack(targets), _assign([1, 0], 2))
    assert out.labels.tolist() == [0, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_estep_never_increases_summed_loss(seed, k):
    rng = make_rng(seed)
    heads = MultiHeadRegressors([_linear_head(3, 5, rng) for _ in range(k)])
    reps, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 5))
    cur = EnvironmentAssignment(rng.integers(0, k, size=20), k)
    L = heads.losses(reps, Y)
    new = e_step_assign(heads, reps, Y, cur)
    assert L[np.arange(20), new.labels].sum() <= L[np.arange(20), cur.labels].sum()
    np.testing.assert_array_equal(L[np.arange(20), new.labels], L.min(axis=1))


# ---------------------------------------------------------------- M-step


def _affine_env_data(rng, n=40, d=4, h=6):
    """Two environments, each realizable by its own linear head up to a positive affine map."""
    W = [rng.normal(size=(h, d)), rng.normal(size=(h, d))]
    reps = rng.normal(size=(2 * n, d))
    labels = np.repeat([0, 1], n)
    Y = np.stack([3.0 * (W[e] @ r) + 1.0 for r, e in zip(reps, labels)])
    return reps, Y, labels


def test_m_step_fits_realizable_environments():
    rng = make_rng(1)
    reps, Y, labels = _affine_env_data(rng)
    heads = MultiHeadRegressors([_linear_head(4, 6, rng) for _ in range(2)])
    risks, skipped = m_step(heads, reps, Y, _assign(labels, 2), epochs=3000, lr=0.05, momentum=0.9)
    assert skipped == []
    assert max(risks.values()) <= 1e-4


def test_m_step_small_lr_does_not_increase_objective():
    rng = make_rng(2)
    reps, Y, labels = _affine_env_data(rng)
    heads = MultiHeadRegressors([_linear_head(4, 6, rng) for _ in range(2)])
    a = _assign(labels, 2)
    before = tei_objective(heads, reps, Y, a)
    m_step(heads, reps, Y, a, epochs=200, lr=1e-3, momentum=0.0)
    assert tei_objective(heads, reps, Y, a) <= before


def test_m_step_single_env_is_plain_fit():
    rng = make_rng(3)
    reps, Y = rng.normal(size=(30, 3)), rng.normal(size=(30, 4))
    head = _linear_head(3, 4, rng)
    ref = head.copy()
    heads = MultiHeadRegressors([head])
    m_step(heads, reps, Y, _assign([0] * 30, 1), epochs=20, lr=0.05)
    # the reference: full-batch descent on the mean suf loss of every sample
    from foil.nn import SgdOptimizer, backward, forward
    from foil.losses import suf_loss_grad

    opt = SgdOptimizer(0.05, 0.9)
    for _ in range(20):
        pred, tape = forward(ref, reps)
        opt.step(ref.parameters(), backward(ref, tape, suf_loss_grad(pred, Y) / 30).params)
        ref.version += 1
    for k, v in ref.parameters().items():
        assert v.tobytes() == head.parameters()[k].tobytes()


def test_m_step_skips_empty_environment():
    rng = make_rng(4)
    heads = MultiHeadRegressors([_linear_head(2, 3, rng) for _ in range(3)])
    before = heads[2].parameters()["0.weight"].copy()
    _, skipped = m_step(heads, rng.normal(size=(5, 2)), rng.normal(size=(5, 3)), _assign([0, 1, 0, 1, 0], 3), 5, 0.1)
    assert skipped == [2]
    assert np.array_equal(heads[2].parameters()["0.weight"], before)


def test_heads_must_share_architecture():
    rng = make_rng(5)
    with pytest.raises(ConfigError):
        MultiHeadRegressors([_linear_head(2, 3, rng), _linear_head(3, 3, rng)])


# ---------------------------------------------------------------- full EM


def _scm_reps(seed, lookback=24, horizon=12):
    s, truth = scm.generate(scm.preset("default", seed))
    split = SplitSpec(s.length, s.length, s.length)
    s = zero_mean_normalize(s, split)
    w = window_arrays(s, lookback, horizon, split, "train")
    return w.X.reshape(len(w), -1), w.Y, truth.labels[w.t]


@pytest.fixture(scope="module")
def scm_seed7():
    return _scm_reps(7)


def _run_em(reps, Y, radius, seed, tol=0.01, max_iters=10, block=200):
    rng = make_rng(seed)
    head = MlpNetwork.init([reps.shape[1], Y.shape[1]], rng, output_activation="identity")
    heads = MultiHeadRegressors.from_regressor(head, 2)
    init = EnvironmentAssignment.random(len(reps), 2, rng, block)
    return em_infer(heads, reps, Y, init, EmConfig(n_envs=2, radius=radius, tol=tol, max_iters=max_iters, epochs=200))


def test_em_recovers_environments_seed7(scm_seed7):
    reps, Y, true = scm_seed7
    res = _run_em(reps, Y, 2, seed=7)
    assert res.iterations <= 10 and res.converged
    assert env_recovery_score(res.assignment, true) >= 0.8
    for h in res.history:
        assert h["estep_loss_after"] <= h["estep_loss_before"]


def test_em_threshold_one_stops_after_one_iteration(scm_seed7):
    reps, Y, _ = scm_seed7
    res = _run_em(reps[:500], Y[:500], 2, seed=0, tol=1.0)
    assert res.iterations == 1 and res.converged


def test_propagation_increases_contiguity(scm_seed7):
    reps, Y, _ = scm_seed7
    with_lp = _run_em(reps, Y, 2, seed=1)
    without = _run_em(reps, Y, 0, seed=1)
    assert mean_run_length(without.assignment.labels) <= mean_run_length(with_lp.assignment.labels)


def test_em_is_permutation_symmetric():
    reps, Y, _ = _scm_reps(3)
    reps, Y = reps[:800], Y[:800]
    rng = make_rng(11)
    h_a = MlpNetwork.init([reps.shape[1], Y.shape[1]], rng, output_activation="identity")
    h_b = MlpNetwork.init([reps.shape[1], Y.shape[1]], rng, output_activation="identity")
    init = EnvironmentAssignment.random(len(reps), 2, rng, 100)
    cfg = EmConfig(n_envs=2, radius=2, epochs=50, max_iters=4)
    r1 = em_infer(MultiHeadRegressors([h_a.copy(), h_b.copy()]), reps, Y, init, cfg)
    swapped = EnvironmentAssignment(1 - init.labels, 2)
    r2 = em_infer(MultiHeadRegressors([h_b.copy(), h_a.copy()]), reps, Y, swapped, cfg)
    assert r1.assignment.labels.tolist() == (1 - r2.assignment.labels).tolist()
    assert [h["changed_fraction"] for h in r1.history] == [h["changed_fraction"] for h in r2.history]


def test_em_rejects_mismatched_heads():
    rng = make_rng(0)
    heads = MultiHeadRegressors([_linear_head(2, 2, rng)] * 3)
    with pytest.raises(ConfigError):
        em_infer(heads, np.ones((4, 2)), np.ones((4, 2)), _assign([0, 1, 0, 1], 2), EmConfig())


def test_random_assignment_blocks():
    a = EnvironmentAssignment.random(23, 3, make_rng(0), block=5)
    assert len(a.labels) == 23
    for i in range(0, 23, 5):
        assert len(set(a.labels[i : i + 5].tolist())) == 1
    with pytest.raises(ConfigError):
        EnvironmentAssignment(np.array([0, 3]), 3)


def test_mean_run_length():
    assert mean_run_length([0, 0, 1, 1, 1, 0]) == 2.0
    assert mean_run_length([]) == 0.0


def test_head_losses_shape():
    rng = make_rng(0)
    heads = MultiHeadRegressors([_linear_head(3, 4, rng) for _ in range(2)])
    reps, Y = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    L = heads.losses(reps, Y)
    assert L.shape == (6, 2)
    np.testing.assert_allclose(L[:, 1], suf_loss(heads[1](reps), Y))
