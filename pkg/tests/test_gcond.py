import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bertswin import tensor as T
from bertswin.errors import ConfigError, ContractError
from bertswin.gcond import (AdamWHyper, GcondHyper, OptState, Optimizer, adamw_step, gcond_step,
                            state_memory_report, trust_ratio)

from oracles import gcond_scalar_reference


def _one(p, g, **hyper):
    params = {"p": np.array(p, dtype=float)}
    state = OptState.for_params("gcond", params)
    lams = gcond_step(params, {"p": np.array(g, dtype=float)}, state, GcondHyper(**hyper))
    return params["p"], lams["p"], state


def test_hand_example():
    p, lam, state = _one([1.0, 0.0], [0.5, -0.5], eps=0.0)
    assert lam == pytest.approx(1.0 / np.sqrt(0.5), rel=1e-14)
    assert lam == pytest.approx(1.41421, abs=1e-5)
    np.testing.assert_allclose(p, [1.0 - 1.5e-5 * lam, 1.5e-5 * lam], rtol=1e-14)
    np.testing.assert_allclose(state.buffers["m"]["p"], [0.05, -0.05], rtol=1e-14)
    assert state.t == 1


def test_clip_caps_lambda():
    _, lam, _ = _one([1.0, 0.0], [0.5, -0.5], eps=0.0, lambda_clip=0.5)
    assert lam == 0.5


def test_zero_gradient_leaves_params():
    p, lam, _ = _one([1.0, -2.0], [0.0, 0.0])
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert lam == 10.0           # zero momentum: ratio saturates at the clip, sign(0) = 0 keeps p still


def test_zero_param_tensor_never_moves():
    p, lam, _ = _one([0.0, 0.0], [1.0, -3.0])
    assert lam == 0.0
    np.testing.assert_array_equal(p, [0.0, 0.0])


def test_trust_ratio_cases():
    h = GcondHyper(eps=0.0, lambda_clip=3.0)
    assert trust_ratio(0.0, 1.0, h) == 0.0
    assert trust_ratio(1.0, 0.0, h) == 3.0
    assert trust_ratio(1.0, 2.0, h) == 0.5


def gcond_oracle_run(n_steps=100, seed=0):
    """Run the vectorised optimizer and the scalar-loop reference side by side.

    Returns (max |param diff|, sign agreement every step, all lambdas within bounds, aux buffers per param).
    """
    rng = np.random.default_rng(seed)
    shapes = {"a": (3, 4), "b": (5,), "c": ()}
    h = GcondHyper(eta_gamma=1e-2, beta1=0.9, eps=1e-8, lambda_clip=2.0, weight_decay=0.1)
    params = {k: rng.normal(size=s) for k, s in shapes.items()}
    grads = {k: [rng.normal(size=s) * rng.choice([1e-3, 1.0, 10.0]) for _ in range(n_steps)]
             for k, s in shapes.items()}
    for k in shapes:                       # sprinkle exact zeros to exercise sign(0)
        grads[k][3] = np.zeros(shapes[k])
    refs = {k: gcond_scalar_reference(np.ravel(params[k]), [np.ravel(g) for g in grads[k]],
                                      h.eta_gamma, h.beta1, h.eps, h.lambda_clip, h.weight_decay)
            for k in shapes}
    state = OptState.for_params("gcond", params)
    worst, signs_ok, lam_ok = 0.0, True, True
    for t in range(n_steps):
        lams = gcond_step(params, {k: grads[k][t] for k in shapes}, state, h)
        for k in shapes:
            hist, rlams, ms, mhats = refs[k]
            worst = max(worst, float(np.max(np.abs(np.ravel(params[k]) - hist[t]))))
            worst = max(worst, abs(lams[k] - rlams[t]))
            m = np.ravel(state.buffers["m"][k])
            m_hat = m / (1 - h.beta1 ** (t + 1))
            signs_ok &= bool(np.array_equal(np.sign(m_hat), np.sign(m)))
            signs_ok &= bool(np.array_equal(np.sign(m_hat), np.sign(mhats[t])))
            lam_ok &= 0.0 <= lams[k] <= h.lambda_clip
    aux = state_memory_report(state) / sum(int(np.prod(s)) for s in shapes.values())
    return worst, signs_ok, lam_ok, aux


def test_matches_scalar_reference():
    worst, signs_ok, lam_ok, aux = gcond_oracle_run(30, seed=1)
    assert worst <= 1e-12 and signs_ok and lam_ok and aux == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e3))
def test_gradient_scale_does_not_change_direction(seed, c):
    rng = np.random.default_rng(seed)
    gs = [rng.normal(size=6) for _ in range(8)]
    signs = []
    for scale in (1.0, c):
        state = OptState.for_params("gcond", {"p": np.zeros(6)})
        out = []
        for g in gs:
            gcond_step({"p": np.ones(6)}, {"p": g * scale}, state, GcondHyper())
            out.append(np.sign(state.buffers["m"]["p"]))
        signs.append(out)
    for a, b in zip(*signs):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_update_magnitude_bound(seed):
    rng = np.random.default_rng(seed)
    h = GcondHyper(eta_gamma=1e-3, lambda_clip=5.0)
    p0 = rng.normal(size=7) * 100
    params = {"p": p0.copy()}
    state = OptState.for_params("gcond", params)
    gcond_step(params, {"p": rng.normal(size=7) * 1e-6}, state, h)
    assert np.max(np.abs(params["p"] - p0)) <= h.eta_gamma * h.lambda_clip * (1 + 1e-12)


def test_weight_decay_applied_after_sign_update():
    params = {"p": np.array([2.0])}
    state = OptState.for_params("gcond", params)
    h = GcondHyper(eta_gamma=0.1, eps=0.0, lambda_clip=1.0, weight_decay=0.5)
    gcond_step(params, {"p": np.array([1.0])}, state, h)
    # lambda = min(2/1, 1) = 1 -> 2 - 0.1 = 1.9, then decay by (1 - 0.05)
    assert params["p"][0] == pytest.approx(1.9 * 0.95, rel=1e-15)


def test_state_shape_mismatch():
    params = {"p": np.zeros(3)}
    state = OptState.for_params("gcond", params)
    with pytest.raises(ContractError):
        gcond_step(params, {"p": np.zeros(4)}, state, GcondHyper())
    with pytest.raises(ContractError):
        adamw_step(params, {"p": np.zeros(3)}, state, AdamWHyper())


def test_bad_hyperparameters():
    with pytest.raises(ConfigError):
        GcondHyper(beta1=1.0)
    with pytest.raises(ConfigError):
        GcondHyper(lambda_clip=0.0)
    with pytest.raises(ConfigError):
        Optimizer("sgd", {})


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_scalar_step():
    params = {"p": np.array(1.0)}
    state = OptState.for_params("adamw", params)
    adamw_step(params, {"p": np.array(1.0)}, state, AdamWHyper(lr=0.1, weight_decay=0.0))
    assert float(params["p"]) == pytest.approx(0.9, abs=1e-8)


def test_adamw_zero_grad_only_decays():
    params = {"p": np.array([2.0, -4.0])}
    state = OptState.for_params("adamw", params)
    adamw_step(params, {"p": np.zeros(2)}, state, AdamWHyper(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(params["p"], [2.0 * 0.95, -4.0 * 0.95], rtol=1e-15)


def test_memory_report():
    params = {"a": np.zeros((10, 50)), "b": np.zeros(500)}
    g, a = OptState.for_params("gcond", params), OptState.for_params("adamw", params)
    assert state_memory_report(g) == 1000 and state_memory_report(a) == 2000
    assert len(g.buffers) == 1 and len(a.buffers) == 2
    assert state_memory_report(OptState.for_params("gcond", {})) == 0


@given(st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=5))
def test_memory_ratio_is_half(shapes):
    params = {f"p{i}": np.zeros(s) for i, s in enumerate(shapes)}
    ratio = state_memory_report(OptState.for_params("gcond", params)) / \
        state_memory_report(OptState.for_params("adamw", params))
    assert ratio == 0.5


# ---------------------------------------------------------------------------
# Optimizer wrapper
# ---------------------------------------------------------------------------

def test_optimizer_decreases_quadratic():
    for kind, hyper in (("gcond", GcondHyper(eta_gamma=5e-2)), ("adamw", AdamWHyper(lr=0.05, weight_decay=0.0))):
        w = T.parameter(np.array([3.0, -2.0, 1.5]), name="w")
        opt = Optimizer(kind, {"w": w}, hyper)
        first = None
        for _ in range(100):
            opt.zero_grad()
            loss = T.tsum(w * w)
            T.backward(loss)
            first = loss.item() if first is None else first
            opt.step()
        assert T.tsum(w * w).item() < 0.5 * first, kind
    assert opt.state.t == 100
