import numpy as np
import pytest

from foil import scm
from foil.errors import ConfigError


def _lstsq_mse(Xtr, ytr, Xte, yte):
    A = np.column_stack([Xtr, np.ones(len(Xtr))])
    coef = np.linalg.lstsq(A, ytr, rcond=None)[0]
    pred = np.column_stack([Xte, np.ones(len(Xte))]) @ coef
    return float(np.mean((pred - yte) ** 2)), coef


def _lagged_latent(truth, spec):
    """Design matrix of the lags that generate Y^suf, aligned to t."""
    x = truth.x_inv
    start = spec.lag_offset + spec.n_lags - 1
    cols = [x[start - spec.lag_offset - j : len(x) - spec.lag_offset - j] for j in range(spec.n_lags)]
    return np.hstack(cols), start


def test_identity_z_makes_y_equal_y_suf():
    spec = scm.ScmSpec(alpha_range=(1.0, 1.0), beta_range=(0.0, 0.0), seed=3)
    s, truth = scm.generate(spec)
    assert np.array_equal(s.values[:, s.target], truth.y_suf)


def test_y_is_affine_in_y_suf_per_block():
    s, truth = scm.generate(scm.ScmSpec(seed=1))
    y = s.values[:, s.target]
    for b in truth.blocks[:50]:
        sl = slice(b["start"], b["stop"])
        np.testing.assert_allclose(y[sl], b["alpha"] * truth.y_suf[sl] + b["beta"], atol=1e-12)
        assert abs(b["alpha"]) >= 0.1


def test_seed_determinism():
    a, _ = scm.generate(scm.ScmSpec(seed=5))
    b, _ = scm.generate(scm.ScmSpec(seed=5))
    c, _ = scm.generate(scm.ScmSpec(seed=6))
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()


def test_layout_covers_series():
    spec = scm.ScmSpec()
    segs = spec.segments()
    assert segs[0][0] == 0 and segs[-1][1] == spec.length
    _, truth = scm.generate(spec)
    assert set(np.unique(truth.labels)) == {0, 1}


def test_invalid_specs():
    with pytest.raises(ConfigError):
        scm.ScmSpec(n_envs=1).validate()
    with pytest.raises(ConfigError):
        scm.ScmSpec(layout=[[0, 100]], length=200).validate()
    with pytest.raises(ConfigError):
        scm.ScmSpec(var_weights=[np.eye(3).tolist()] * 2).validate()
    with pytest.raises(ConfigError):
        scm.ScmSpec(alpha_range=(-0.5, 0.5)).validate()


def test_invariant_coefficients_identical_across_envs():
    spec = scm.ScmSpec(noise_std=0.0, seed=2)
    _, truth = scm.generate(spec)
    X, start = _lagged_latent(truth, spec)
    y, labels = truth.y_suf[start:], truth.labels[start:]
    coefs = [np.linalg.lstsq(X[labels == e], y[labels == e], rcond=None)[0] for e in (0, 1)]
    np.testing.assert_allclose(coefs[0], coefs[1], atol=1e-6)
    np.testing.assert_allclose(coefs[0], spec.resolved_inv_weights().ravel(), atol=1e-6)


def test_spurious_coefficients_differ_across_envs():
    spec = scm.ScmSpec(seed=2, lag_offset=0, n_lags=1)
    s, truth = scm.generate(spec)
    xv = s.values[:, 3:6]
    coefs = [np.linalg.lstsq(xv[truth.labels == e], truth.y_suf[truth.labels == e], rcond=None)[0] for e in (0, 1)]
    assert np.linalg.norm(coefs[0] - coefs[1]) > 0.5 * np.linalg.norm(coefs[0])


def test_single_env_ols_uses_spurious_features():
    spec = scm.ScmSpec(layout=[[0, 4000]], seed=4, lag_offset=0, n_lags=1)
    s, _ = scm.generate(spec)
    X, y = s.values[:, :6], s.values[:, s.target]
    _, coef = _lstsq_mse(X, y, X, y)
    assert np.max(np.abs(coef[3:6])) > 0.1


def test_sign_flip_hurts_pooled_fit_but_not_invariant_oracle():
    spec = scm.ScmSpec(seed=4, lag_offset=0, n_lags=1, alpha_range=(1, 1), beta_range=(0, 0))
    s, truth = scm.generate(spec)
    X, y = s.values[:, :6], s.values[:, s.target]
    tr, te = truth.labels == 0, truth.labels == 1
    erm_in, _ = _lstsq_mse(X[tr], y[tr], X[tr], y[tr])
    erm_out, _ = _lstsq_mse(X[tr], y[tr], X[te], y[te])
    inv_in, _ = _lstsq_mse(X[tr, :3], y[tr], X[tr, :3], y[tr])
    inv_out, _ = _lstsq_mse(X[tr, :3], y[tr], X[te, :3], y[te])
    assert erm_out > 2 * erm_in
    assert inv_out < 1.5 * inv_in
    assert inv_out < erm_out


def test_heldout_protocol_selects_final_environment():
    s, truth = scm.generate(scm.preset("heldout"))
    split = scm.ood_split(s, truth, "held-out-environment")
    assert split.val_end == int(0.8 * s.length)
    assert np.all(truth.labels[split.val_end :] == 2)
    assert not np.any(truth.labels[: split.val_end] == 2)
    assert split.train_end < split.val_end


def test_shifted_z_changes_target_scale():
    spec = scm.ScmSpec(test_fraction=0.2, test_alpha_range=(2.5, 3.5), seed=0)
    s, truth = scm.generate(spec)
    split = scm.ood_split(s, truth, "shifted-z")
    y = s.values[:, s.target]
    assert np.std(y[split.val_end :]) > 1.5 * np.std(y[: split.train_end])


def test_protocol_errors():
    s, truth = scm.generate(scm.ScmSpec(layout=[[0, 4000]], seed=0))
    with pytest.raises(ConfigError):
        scm.ood_split(s, truth, "held-out-environment")
    with pytest.raises(ConfigError):
        scm.ood_split(s, truth, "shifted-z")
    with pytest.raises(ConfigError):
        scm.ood_split(s, truth, "bogus")
    # default preset interleaves both environments, so neither is held out
    s, truth = scm.generate(scm.ScmSpec())
    with pytest.raises(ConfigError):
        scm.ood_split(s, truth, "held-out-environment")


def test_env_z_coupling_shifts_beta():
    spec = scm.ScmSpec(ez_coupling=2.0, beta_range=(0.0, 0.0), seed=0)
    _, truth = scm.generate(spec)
    betas = {}
    for b in truth.blocks:
        betas.setdefault(int(truth.labels[b["start"]]), []).append(b["beta"])
    assert np.mean(betas[0]) == pytest.approx(-2.0) and np.mean(betas[1]) == pytest.approx(2.0)


def test_truth_round_trip(tmp_path):
    _, truth = scm.generate(scm.ScmSpec(length=300, segment_length=100))
    truth.save(tmp_path / "t.json")
    back = scm.ScmTruth.load(tmp_path / "t.json")
    assert back.labels.tolist() == truth.labels.tolist()
    assert back.blocks == truth.blocks
    np.testing.assert_array_equal(back.y_suf, truth.y_suf)


def test_tanh_mechanism_runs():
    s, _ = scm.generate(scm.ScmSpec(mechanism="tanh", var_transform="tanh", length=500))
    assert np.all(np.isfinite(s.values))


def test_presets_and_dict_form():
    assert scm.preset("default", 3).seed == 3
    d = scm.spec_to_dict(scm.preset("heldout"))
    assert d["n_envs"] == 3 and isinstance(d["alpha_range"], list)
    with pytest.raises(ConfigError):
        scm.preset("nope")
