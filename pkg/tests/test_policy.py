import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lohp.nn import DimensionError, make_rng
from lohp.policy import (Conditioning, PolicyArch, PolicyModel, PolicyOutput, gaussian_log_prob,
                         gaussian_log_prob_grad, load_policy, policy_eval, sample_online_trajectory,
                         save_policy, sigmoid, softplus)
from lohp.store import StoreFormatError

from conftest import central_diff, max_rel_err


def model_and_phi(seed=0, D=4, x_dim=2, coeff_inputs="context", scale=0.3):
    model = PolicyModel(PolicyArch(D, x_dim, embed_dim=3, encoder_hidden=5, trunk_hidden=(6,),
                                   coeff_inputs=coeff_inputs))
    rng = make_rng(seed)
    return model, model.init(rng) + scale * rng.standard_normal(model.n_params), rng


def reference_eval(model, phi, s, x, t, head):
    """Duplicate of policy_eval written against the documented parameter layout."""
    a = model.arch
    D, E, H = a.state_dim, a.embed_dim, a.trunk_hidden[-1]
    p = phi.copy()

    def take(n):
        nonlocal p
        out, p = p[:n], p[n:]
        return out

    def dense(h, n_in, n_out):
        W = take(n_in * n_out).reshape(n_in, n_out)
        return h @ W + take(n_out)

    enc = dense(np.tanh(dense(x, a.x_dim, a.encoder_hidden)), a.encoder_hidden, E).mean(axis=0)
    h = np.tanh(dense(np.concatenate([s, enc, [t]]), D + E + 1, H))
    fwd = dense(h, H, 2 * D)
    bwd = dense(h, H, 2 * D)
    if a.coeff_inputs == "state":
        log_c = dense(h, H, 1)[0]
    else:
        log_c = dense(np.tanh(dense(np.concatenate([enc, [t]]), E + 1, a.coeff_hidden)), a.coeff_hidden, 1)[0]
    assert p.size == 0
    if head == "coeff":
        return None, None, log_c
    o = fwd if head == "forward" else bwd
    return s + o[:D], np.log1p(np.exp(o[D:])) + a.sigma_floor, log_c


def test_init_contract_identity_mean():
    model = PolicyModel(PolicyArch(3, 2))
    phi = model.init(make_rng(0))
    s = np.array([0.5, -1.0, 2.0])
    out = policy_eval(model, phi, s, Conditioning.from_samples(np.ones((4, 2))), "forward")
    assert np.array_equal(out.mu, s)
    np.testing.assert_allclose(out.sigma, np.log(2.0) + 1e-3, rtol=1e-15)
    assert out.log_c == 0.0


@pytest.mark.parametrize("coeff_inputs", ["context", "state"])
@pytest.mark.parametrize("head", ["forward", "backward", "coeff"])
def test_eval_matches_duplicate(coeff_inputs, head):
    model, phi, rng = model_and_phi(1, coeff_inputs=coeff_inputs)
    for _ in range(5):
        s, x, t = rng.standard_normal(4), rng.standard_normal((5, 2)), float(rng.uniform())
        out = policy_eval(model, phi, s, Conditioning(x, t), head)
        mu, sigma, log_c = reference_eval(model, phi, s, x, t, head)
        assert abs(out.log_c - log_c) <= 1e-10
        if head != "coeff":
            assert np.max(np.abs(out.mu - mu)) <= 1e-10 and np.max(np.abs(out.sigma - sigma)) <= 1e-10


def test_permutation_invariance_100_episodes():
    model, phi, rng = model_and_phi(2)
    for _ in range(100):
        x = rng.standard_normal((int(rng.integers(1, 12)), 2))
        s = rng.standard_normal(4)
        a = policy_eval(model, phi, s, Conditioning.from_samples(x, 0.5), "forward")
        b = policy_eval(model, phi, s, Conditioning.from_samples(x[rng.permutation(len(x))], 0.5), "forward")
        assert a.mu.tobytes() == b.mu.tobytes() and a.sigma.tobytes() == b.sigma.tobytes()
        assert a.log_c == b.log_c


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 50.0))
def test_sigma_positive_for_any_phi(seed, scale):
    model, phi, rng = model_and_phi(seed, scale=scale)
    out = policy_eval(model, phi, rng.standard_normal((3, 4)) * scale, Conditioning(rng.standard_normal((2, 2))),
                      "backward")
    assert np.all(out.sigma >= model.arch.sigma_floor)


def test_eval_dimension_errors():
    model, phi, _ = model_and_phi()
    with pytest.raises(DimensionError):
        policy_eval(model, phi, np.zeros(5), Conditioning(np.zeros((1, 2))), "forward")
    with pytest.raises(DimensionError):
        policy_eval(model, phi, np.zeros(4), Conditioning(np.zeros((1, 3))), "forward")
    with pytest.raises(DimensionError):
        policy_eval(model, phi[:-1], np.zeros(4), Conditioning(np.zeros((1, 2))), "forward")
    with pytest.raises(ValueError):
        policy_eval(model, phi, np.zeros(4), Conditioning(np.zeros((1, 2))), "flow")


def test_log_prob_standard_normal():
    out = PolicyOutput(np.zeros(1), np.ones(1), 0.0)
    assert gaussian_log_prob(np.zeros(1), out) == pytest.approx(-0.918939, abs=1e-6)
    out2 = PolicyOutput(np.zeros(2), np.ones(2), 0.0)
    assert gaussian_log_prob(np.ones(2), out2) == pytest.approx(-2.837877, abs=1e-6)


def test_log_prob_matches_product_of_univariate_densities(rng):
    for _ in range(20):
        d = int(rng.integers(1, 8))
        mu, sigma, s = rng.standard_normal(d), rng.uniform(0.1, 3, d), rng.standard_normal(d)
        dens = np.prod(np.exp(-0.5 * ((s - mu) / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma))
        assert abs(gaussian_log_prob(s, PolicyOutput(mu, sigma, 0.0)) - np.log(dens)) <= 1e-10


def test_log_prob_gradients(rng):
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 6))
        mu, sigma, s = rng.standard_normal(d), rng.uniform(0.2, 2, d), rng.standard_normal(d)
        _, ds, dmu, dsig = gaussian_log_prob_grad(s, mu, sigma)
        lp = lambda s_, mu_, sig_: gaussian_log_prob(s_, PolicyOutput(mu_, sig_, 0.0))
        worst = max(worst, max_rel_err(ds, central_diff(lambda v: lp(v, mu, sigma), s)),
                    max_rel_err(dmu, central_diff(lambda v: lp(s, v, sigma), mu)),
                    max_rel_err(dsig, central_diff(lambda v: lp(s, mu, v), sigma)))
    assert worst <= 1e-4


def test_log_prob_rejects_sigma_below_floor():
    with pytest.raises(ValueError):
        gaussian_log_prob(np.zeros(1), PolicyOutput(np.zeros(1), np.array([1e-4]), 0.0))


def test_softplus_and_sigmoid_stable():
    x = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    assert np.all(np.isfinite(softplus(x))) and softplus(x)[-1] == 800.0
    np.testing.assert_allclose(softplus(x[1:4]), np.log1p(np.exp(x[1:4])), rtol=1e-15)
    np.testing.assert_allclose(sigmoid(x[1:4]), 1 / (1 + np.exp(-x[1:4])), rtol=1e-14)


def _head_vjp(model, phi, s, x, t, head, w):
    """d(w · raw head output)/dφ assembled from the model's backward blocks."""
    grad = np.zeros(model.n_params)
    emb, enc_cache = model.encode(phi, x[None])
    h, cache = model.trunk_forward(phi, s[None], emb, np.array([t]))
    if head == "coeff":
        _, ccache = model.log_coeff(phi, h, emb, np.array([t]))
        dh, d_emb = model.log_coeff_backward(phi, ccache, h, np.array([w[0]]), grad)
        dh = dh + np.zeros_like(h)
    else:
        dh = model.head_backward(phi, head, h, w[None], grad)
        d_emb = 0.0
    _, de = model.trunk_backward(cache, h, dh, grad)
    model.encode_backward(enc_cache, de + d_emb, grad)
    return grad


def _raw_head(model, phi, s, x, t, head):
    emb, _ = model.encode(phi, x[None])
    h, _ = model.trunk_forward(phi, s[None], emb, np.array([t]))
    if head == "coeff":
        return model.log_coeff(phi, h, emb, np.array([t]))[0]
    W, b = model.head_params(phi, head)
    return (h @ W + b)[0]


@pytest.mark.parametrize("coeff_inputs", ["context", "state"])
@pytest.mark.parametrize("head", ["forward", "backward", "coeff"])
def test_head_gradients_match_fd(coeff_inputs, head):
    worst = 0.0
    for seed in range(20):
        model, phi, rng = model_and_phi(seed, coeff_inputs=coeff_inputs)
        s, x, t = rng.standard_normal(4), rng.standard_normal((3, 2)), float(rng.uniform())
        w = rng.standard_normal(1 if head == "coeff" else 8)
        g = _head_vjp(model, phi, s, x, t, head, w)
        idx = rng.choice(model.n_params, 30, replace=False)
        fd = np.array([(w @ _raw_head(model, phi + e, s, x, t, head) - w @ _raw_head(model, phi - e, s, x, t, head))
                       / 2e-5 for e in (1e-5 * np.eye(model.n_params)[i] for i in idx)])
        worst = max(worst, max_rel_err(g[idx], fd))
    assert worst <= 1e-4


def test_sample_identity_policy_stays_put():
    model = PolicyModel(PolicyArch(5, 2, sigma_init=-60.0))
    phi = model.init(make_rng(0))
    N = 16
    tr = sample_online_trajectory(model, phi, np.ones(5), np.zeros((3, 2)), N, make_rng(1))
    assert tr.states.shape == (N + 1, 5) and tr.N == N
    assert np.max(np.abs(tr.states - 1.0)) <= 5 * 1e-3 * np.sqrt(N)


def test_sample_deterministic_and_log_probs_recompute():
    model, phi, _ = model_and_phi(3)
    x = make_rng(5).standard_normal((4, 2))
    a = sample_online_trajectory(model, phi, np.zeros(4), x, 6, make_rng(9))
    b = sample_online_trajectory(model, phi, np.zeros(4), x, 6, make_rng(9))
    assert a.states.tobytes() == b.states.tobytes()
    for t in range(6):
        fwd = policy_eval(model, phi, a.states[t], Conditioning.from_samples(x, t / 6), "forward")
        bwd = policy_eval(model, phi, a.states[t + 1], Conditioning.from_samples(x, (t + 1) / 6), "backward")
        assert abs(a.log_pf[t] - gaussian_log_prob(a.states[t + 1], fwd)) <= 1e-10
        assert abs(a.log_pb[t] - gaussian_log_prob(a.states[t], bwd)) <= 1e-10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sample_rejects_bad_input():
    model, phi, rng = model_and_phi()
    with pytest.raises(ValueError):
        sample_online_trajectory(model, phi, np.zeros(4), np.zeros((1, 2)), 0, rng)
    with pytest.raises(FloatingPointError, match="step 1"):
        sample_online_trajectory(model, phi, np.full(4, np.inf), np.zeros((1, 2)), 2, rng)


def test_checkpoint_round_trip(tmp_path):
    model, phi, _ = model_and_phi(4, coeff_inputs="state")
    save_policy(tmp_path / "p", model, phi)
    m2, phi2 = load_policy(tmp_path / "p")
    assert m2.arch == model.arch and phi2.tobytes() == phi.tobytes()
    raw = (tmp_path / "p").read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTAPHI!" + raw[8:])
    with pytest.raises(StoreFormatError):
        load_policy(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(StoreFormatError):
        load_policy(tmp_path / "short")
