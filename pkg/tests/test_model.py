import numpy as np
import pytest

from gap_priors.model import (CheckpointError, MlpSpec, ParamVector, TensorSlot, apply_perturbation,
                              forward, freeze_all_but_last, init_mlp, load_checkpoint, predict,
                              predict_logits, save_checkpoint)


def test_parameter_counts():
    assert init_mlp(MlpSpec((4, 8, 2)), 0).size == 58
    assert init_mlp(MlpSpec((4, 2)), 0).size == 10


def test_init_is_deterministic():
    a, b = init_mlp(MlpSpec((4, 8, 2)), 0), init_mlp(MlpSpec((4, 8, 2)), 0)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, init_mlp(MlpSpec((4, 8, 2)), 1).theta)


def test_layout_tiles_parameter_vector():
    spec = MlpSpec((5, 7, 3, 2))
    pos = 0
    for slot in spec.layout():
        assert slot.offset == pos
        pos = slot.stop
    assert pos == spec.n_params
    assert [s.name for s in spec.layout()] == ["W0", "b0", "W1", "b1", "W2", "b2"]
    p = init_mlp(spec, 0)
    assert p.prior_mean.shape == (spec.n_params,)
    np.testing.assert_array_equal(p.tensor("b1"), 0.0)


def test_bad_layout_rejected():
    with pytest.raises(ValueError):
        ParamVector(np.zeros(3), (TensorSlot("W0", 0, (2,)),), np.ones(3, bool))
    with pytest.raises(ValueError):
        MlpSpec((4,))
    with pytest.raises(ValueError):
        MlpSpec((4, 2), "sigmoid")


def test_zero_parameters_give_zero_logits(rng):
    spec = MlpSpec((4, 8, 3))
    z = predict_logits(np.zeros(spec.n_params), spec, rng.standard_normal((5, 4)))
    np.testing.assert_array_equal(z, 0.0)


def test_unit_input_selects_weight_column(rng):
    spec = MlpSpec((4, 3))
    p = init_mlp(spec, 2)
    p.theta[12:] = 0.0  # biases
    z = predict_logits(p, spec, np.eye(4)[0])
    np.testing.assert_array_equal(z, p.tensor("W0")[:, 0])


def test_batch_equals_per_example(rng):
    spec = MlpSpec((6, 9, 4), "tanh")
    theta = rng.standard_normal(spec.n_params)
    x = rng.standard_normal((11, 6))
    batched = predict_logits(theta, spec, x)
    stacked = np.stack([predict_logits(theta, spec, xi) for xi in x])
    np.testing.assert_allclose(batched, stacked, rtol=0, atol=1e-13)


@pytest.mark.parametrize("c", [0.5, 2.0, -3.0])
def test_single_layer_is_homogeneous(rng, c):
    spec = MlpSpec((5, 3))
    theta = rng.standard_normal(spec.n_params)
    x = rng.standard_normal((4, 5))
    np.testing.assert_allclose(forward(c * theta, spec, x), c * forward(theta, spec, x), rtol=1e-13)


def test_ties_go_to_lower_class():
    spec = MlpSpec((2, 3))
    assert predict(np.zeros(spec.n_params), spec, np.ones((3, 2))).tolist() == [0, 0, 0]


def test_freeze_all_but_last():
    p = freeze_all_but_last(init_mlp(MlpSpec((4, 8, 2)), 0))
    assert p.n_trainable == 18
    assert p.trainable_mask[-18:].all() and not p.trainable_mask[:-18].any()
    assert freeze_all_but_last(init_mlp(MlpSpec((4, 2)), 0)).n_trainable == 10


def test_perturbation():
    p = init_mlp(MlpSpec((4, 2)), 0)
    d = np.zeros(p.size)
    d[0] = 1.0
    np.testing.assert_array_equal(apply_perturbation(p, d, 0.0), p.theta)
    out = apply_perturbation(p, d, 0.15)
    assert out[0] == p.theta[0] + 0.15
    np.testing.assert_array_equal(out[1:], p.theta[1:])
    frozen = freeze_all_but_last(init_mlp(MlpSpec((4, 8, 2)), 0))
    out = apply_perturbation(frozen, np.ones(frozen.size), 0.3)
    np.testing.assert_array_equal(out[:40], frozen.theta[:40])
    with pytest.raises(ValueError):
        apply_perturbation(p, np.ones(3), 0.1)


def test_checkpoint_round_trip(tmp_path):
    spec = MlpSpec((4, 8, 2), "tanh")
    p = freeze_all_but_last(init_mlp(spec, 5))
    p.prior_mean = p.theta * 2
    path = save_checkpoint(tmp_path / "m.gapckpt", p, spec, {"seed": 5})
    q, spec2, meta = load_checkpoint(path)
    assert spec2 == spec and meta == {"seed": 5}
    np.testing.assert_array_equal(q.theta, p.theta)
    np.testing.assert_array_equal(q.prior_mean, p.prior_mean)
    np.testing.assert_array_equal(q.trainable_mask, p.trainable_mask)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, MlpSpec((4, 8, 2), "relu"))
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
