# tests/test_nn.py
import numpy as np
import pytest

from app.core import AcquisitionParams
from app.nn import (adagn, group_norm, init_mlp, init_optimizer, mlp_backward, mlp_forward, mlp_input_gradient,
                    optimizer_step, zero_output_layer)


def _loss(model, x, cond, G):
    return float(np.sum(mlp_forward(model, x, cond) * G))


def _perturbed(model, rng):
    # sesgos no nulos para que todas las rutas del gradiente participen
    params = [p + 0.1 * rng.normal(size=p.shape) for p in model.parameters()]
    return model.with_parameters(params)


# =============================================================================
# Group norm / AdaGN
# =============================================================================
def test_group_norm_two_values():
    out = group_norm(np.array([[1.0], [3.0]]), groups=1)
    np.testing.assert_allclose(out[:, 0], [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)], rtol=1e-12)
    assert out[1, 0] == pytest.approx(0.999995, abs=1e-6)


def test_group_norm_statistics(rng):
    h = rng.normal(3.0, 2.0, size=(5, 8, 10))
    out = group_norm(h, groups=4)
    grouped = out.reshape(5, 4, -1)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(grouped.var(axis=-1), 1.0, rtol=1e-4)


def test_group_norm_rejects_indivisible_groups():
    with pytest.raises(ValueError):
        group_norm(np.ones((6, 2)), groups=4)


def test_adagn_scale_and_shift(rng):
    h = rng.normal(size=(4, 3))
    np.testing.assert_allclose(adagn(h, 2.0, 0.5, groups=2), 2.0 * group_norm(h, 2) + 0.5)
    with pytest.raises(ValueError):
        adagn(h, np.ones(5), 0.0, groups=2)


# =============================================================================
# Modelo y pase hacia adelante
# =============================================================================
def test_init_is_seeded():
    a = init_mlp((3, 8, 2), cond_dim=3, seed=4)
    b = init_mlp((3, 8, 2), cond_dim=3, seed=4)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(a.head_bias, [1.0, 0.0])
    assert not np.array_equal(init_mlp((3, 8, 2), seed=5).weights[0], a.weights[0])


def test_zero_output_layer_gives_zero(rng):
    model = zero_output_layer(init_mlp((4, 16, 16, 2), seed=1))
    np.testing.assert_array_equal(mlp_forward(model, rng.normal(size=(7, 4))), 0.0)


def test_forward_is_deterministic(rng):
    model = init_mlp((3, 10, 10, 3), cond_dim=3, groups=2, seed=2)
    x = rng.normal(size=(6, 3))
    params = AcquisitionParams("flair", 0.1, 9.0, 2.4)
    np.testing.assert_array_equal(mlp_forward(model, x, params), mlp_forward(model, x, params))
    assert mlp_forward(model, x[0], params).shape == (3,)


def test_single_layer_is_affine(rng):
    model = _perturbed(init_mlp((3, 2), seed=0), rng)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(mlp_forward(model, x), x @ model.weights[0].T + model.biases[0], rtol=1e-14)


def test_model_validation():
    model = init_mlp((3, 4, 2), cond_dim=3)
    with pytest.raises(ValueError):
        mlp_forward(model, np.ones(3))
    with pytest.raises(ValueError):
        mlp_forward(init_mlp((3, 4, 2)), np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        mlp_forward(model, np.ones(5), np.ones(3))
    with pytest.raises(ValueError):
        model.with_parameters(model.parameters()[:-1])
    with pytest.raises(ValueError):
        init_mlp((3, 5, 2), cond_dim=3, groups=2)


# =============================================================================
# Gradientes
# =============================================================================
@pytest.mark.parametrize("case", range(20))
def test_parameter_gradients_match_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    model = _perturbed(init_mlp((4, 6, 6, 3), cond_dim=3, groups=2, seed=case), rng)
    x = rng.normal(size=(5, 4))
    cond = rng.uniform(0.0, 3.0, size=(5, 3))
    G = rng.normal(size=(5, 3))
    grads = mlp_backward(model, x, cond, G)
    params = model.parameters()
    h = 1e-6
    for k, p in enumerate(params):
        direction = rng.normal(size=p.shape)
        up = list(params)
        down = list(params)
        up[k] = p + h * direction
        down[k] = p - h * direction
        fd = (_loss(model.with_parameters(up), x, cond, G) - _loss(model.with_parameters(down), x, cond, G)) / (2 * h)
        assert np.sum(grads[k] * direction) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_input_gradient_matches_finite_differences(rng):
    model = _perturbed(init_mlp((4, 6, 6, 3), cond_dim=3, groups=2, seed=7), rng)
    x = rng.normal(size=(3, 4))
    cond = rng.uniform(0.0, 3.0, size=(3, 3))
    G = rng.normal(size=(3, 3))
    dx = mlp_input_gradient(model, x, cond, G)
    direction = rng.normal(size=x.shape)
    h = 1e-6
    fd = (_loss(model, x + h * direction, cond, G) - _loss(model, x - h * direction, cond, G)) / (2 * h)
    assert np.sum(dx * direction) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_zero_output_gradient_gives_zero_gradients(rng):
    model = init_mlp((4, 6, 2), cond_dim=3, groups=3, seed=0)
    grads = mlp_backward(model, rng.normal(size=(2, 4)), np.ones(3), np.zeros((2, 2)))
    assert all(np.all(g == 0) for g in grads)


def test_linear_gradient_is_outer_product(rng):
    model = init_mlp((3, 2), seed=0)
    x = rng.normal(size=(4, 3))
    G = rng.normal(size=(4, 2))
    grad_w, grad_b = mlp_backward(model, x, None, G)
    np.testing.assert_allclose(grad_w, G.T @ x, rtol=1e-14)
    np.testing.assert_allclose(grad_b, G.sum(axis=0), rtol=1e-14)


# =============================================================================
# Adam
# =============================================================================
def test_adam_zero_gradient_keeps_parameters():
    params = [np.array([1.0, -2.0])]
    state = init_optimizer(params, lr=0.1)
    new_params, new_state = optimizer_step(state, params, [np.zeros(2)])
    np.testing.assert_array_equal(new_params[0], params[0])
    assert new_state.step == 1


def test_adam_first_step_hand_trace():
    params = [np.array([1.0])]
    state = init_optimizer(params, lr=0.1)
    new_params, new_state = optimizer_step(state, params, [np.array([0.5])])
    assert new_params[0][0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-12)
    assert new_state.first_moment[0][0] == pytest.approx(0.05)
    assert new_state.second_moment[0][0] == pytest.approx(0.00025)
    assert params[0][0] == 1.0


def test_adam_minimizes_quadratic():
    params = [np.array([1.0])]
    state = init_optimizer(params, lr=1e-2)
    for _ in range(500):
        params, state = optimizer_step(state, params, [2.0 * params[0]])
    assert abs(params[0][0]) < 1e-2
    assert state.step == 500


def test_adam_validation():
    with pytest.raises(ValueError):
        init_optimizer([np.zeros(1)], lr=0.0)
    state = init_optimizer([np.zeros(2)], lr=0.1)
    with pytest.raises(ValueError):
        optimizer_step(state, [np.zeros(2)], [np.zeros(3)])
