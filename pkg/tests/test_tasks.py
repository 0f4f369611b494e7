import numpy as np
import pytest

from lohp.nn import MlpSpec, make_rng, mlp_forward
from lohp.tasks import (Episode, Landscape2D, QuadraticTask, accuracy, classification_loss_grad,
                        make_blob_episodes, quadratic_loss_grad, random_quadratic, task_conditioning)

from conftest import central_diff, max_rel_err


def test_quadratic_at_optimum(rng):
    task = random_quadratic(rng, 5)
    loss, g = quadratic_loss_grad(task, task.optimum)
    assert loss == 0.0 and np.all(g == 0.0)


def test_quadratic_scalar_case():
    task = QuadraticTask(np.array([4.0]), np.array([0.0]))
    loss, g = quadratic_loss_grad(task, np.array([1.0]))
    assert loss == pytest.approx(2.0, abs=1e-15) and g[0] == pytest.approx(4.0, abs=1e-15)


def test_quadratic_rotated_gradient_matches_fd(rng):
    task = random_quadratic(rng, 6, 50.0)
    theta = rng.standard_normal(6)
    fd = central_diff(lambda t: quadratic_loss_grad(task, t)[0], theta)
    assert max_rel_err(quadratic_loss_grad(task, theta)[1], fd) <= 1e-6


def test_quadratic_constants_are_the_built_eigenvalues(rng):
    for _ in range(20):
        task = random_quadratic(rng, int(rng.integers(2, 12)), 100.0)
        eig = np.linalg.eigvalsh(task.hessian)
        assert task.mu == task.hessian_eigs.min() and task.l == task.hessian_eigs.max()
        np.testing.assert_allclose(eig[[0, -1]], [task.mu, task.l], rtol=1e-10)
        assert task.l / task.mu <= 100.0 * (1 + 1e-12)


def test_gd_step_one_over_l_descends(rng):
    for _ in range(100):
        task = random_quadratic(rng, int(rng.integers(1, 21)), 100.0)
        theta = rng.standard_normal(task.dim) * 3
        prev = quadratic_loss_grad(task, theta)[0]
        for _ in range(20):
            theta = theta - quadratic_loss_grad(task, theta)[1] / task.l
            cur = quadratic_loss_grad(task, theta)[0]
            assert cur <= prev
            prev = cur


def test_quadratic_dim_mismatch():
    task = QuadraticTask(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        quadratic_loss_grad(task, np.zeros(2))


@pytest.mark.parametrize("kind", ["two_basin", "rosenbrock_like"])
def test_landscape_gradients(rng, kind):
    land = Landscape2D(kind)
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(-2, 2, size=2)
        fd = central_diff(lambda q: land.loss_grad(q)[0], p, 1e-6)
        worst = max(worst, max_rel_err(land.loss_grad(p)[1], fd))
    assert worst <= 1e-5


def test_blob_episodes_deterministic():
    a = make_blob_episodes(make_rng(3), 2, 3, 2, 10)
    b = make_blob_episodes(make_rng(3), 2, 3, 2, 10)
    for x, y in zip(a, b):
        assert x.task_id == y.task_id
        assert x.x_train.tobytes() == y.x_train.tobytes() and x.y_eval.tobytes() == y.y_eval.tobytes()


def test_blob_labels_and_shapes():
    ep = make_blob_episodes(make_rng(0), 1, 3, 2, 10)[0]
    assert set(ep.y_train.tolist()) == {0, 1, 2} and set(ep.y_eval.tolist()) == {0, 1, 2}
    assert ep.x_train.shape == (30, 2) and ep.x_eval.shape == (30, 2)
    # eval points are fresh draws, not copies of training points
    assert not any(np.any(np.all(ep.x_train == row, axis=1)) for row in ep.x_eval)


def test_blob_tasks_differ():
    a, b = make_blob_episodes(make_rng(5), 2, 3, 2, 10)
    assert not np.allclose(a.x_train.mean(axis=0), b.x_train.mean(axis=0))


def test_blob_linear_probe_reference(rng):
    """200 SGD steps of a linear probe separate well-separated blobs."""
    ep = make_blob_episodes(rng, 1, 3, 2, 30, separation=4.0, jitter=0.0)[0]
    spec = MlpSpec((2, 3))
    theta = np.zeros(spec.n_params)
    for _ in range(200):
        theta -= 0.1 * classification_loss_grad(spec, theta, (ep.x_train, ep.y_train))[1]
    assert accuracy(spec, theta, ep.x_eval, ep.y_eval) >= 0.9


def test_blob_validation():
    with pytest.raises(ValueError):
        make_blob_episodes(make_rng(0), 1, 1, 2, 5)
    with pytest.raises(ValueError):
        make_blob_episodes(make_rng(0), 0, 3, 2, 5)


def test_episode_label_range():
    with pytest.raises(ValueError):
        Episode(np.ones((1, 2)), np.ones((1, 2)), np.array([3]), np.ones((1, 2)), np.array([0]), 3, 0)
    with pytest.raises(ValueError):
        Episode(np.ones((0, 2)), np.ones((1, 2)), np.array([0]), np.ones((1, 2)), np.array([0]), 3, 0)


def test_xent_uniform_logits():
    spec = MlpSpec((2, 3))
    loss, _ = classification_loss_grad(spec, np.zeros(spec.n_params), (np.ones((4, 2)), np.array([0, 1, 2, 0])))
    assert loss == pytest.approx(np.log(3), abs=1e-12)


def test_xent_saturated():
    spec = MlpSpec((1, 3))
    # logits = bias; the correct class leads by 20
    theta = np.array([0.0, 0.0, 0.0, 20.0, 0.0, 0.0])
    loss, _ = classification_loss_grad(spec, theta, (np.zeros((2, 1)), np.array([0, 0])))
    assert 0.0 <= loss <= 1e-3


def test_xent_matches_duplicate(rng):
    spec = MlpSpec((2, 5, 3))
    theta = rng.standard_normal(spec.n_params)
    x = rng.standard_normal((7, 2))
    y = rng.integers(0, 3, size=7)
    logits = mlp_forward(spec, theta, x)
    ref = np.mean([np.log(np.sum(np.exp(row))) - row[c] for row, c in zip(logits, y)])
    loss, g = classification_loss_grad(spec, theta, (x, y))
    assert abs(loss - ref) <= 1e-10
    fd = central_diff(lambda t: classification_loss_grad(spec, t, (x, y))[0], theta)
    assert max_rel_err(g, fd) <= 1e-4


def test_xent_label_out_of_range():
    spec = MlpSpec((2, 3))
    with pytest.raises(ValueError):
        classification_loss_grad(spec, np.zeros(spec.n_params), (np.zeros((1, 2)), np.array([3])))


def test_conditioning():
    ep = make_blob_episodes(make_rng(0), 1, 3, 2, 5)[0]
    assert task_conditioning(ep) is not None and task_conditioning(ep).shape == ep.unlabeled_x.shape
    task = QuadraticTask(np.array([1.0, 2.0]), np.array([1.0, -1.0]), rotation_seed=None)
    np.testing.assert_array_equal(task_conditioning(task), [[1.0, 0.0, 1.0], [0.0, 2.0, -2.0]])
    with pytest.raises(TypeError):
        task_conditioning(object())
