import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ccoma import checkpoint
from ccoma.autodiff import ShapeError, Tensor
from ccoma.checkpoint import CheckpointError
from ccoma.optim import RMSProp, RmsPropState, clip_by_global_norm, rmsprop_step


def test_rmsprop_single_step_hand_value():
    p, g = np.array([1.0]), np.array([0.5])
    new, state = rmsprop_step([p], [g], RmsPropState(lr=0.1, alpha=0.9, eps=1e-5))
    v = 0.1 * 0.25
    np.testing.assert_allclose(state.v[0], [v])
    np.testing.assert_allclose(new[0], [1.0 - 0.1 * 0.5 / (np.sqrt(v) + 1e-5)])


def test_rmsprop_zero_gradient_leaves_parameters():
    p = np.arange(4.0)
    new, _ = rmsprop_step([p], [np.zeros(4)], RmsPropState())
    np.testing.assert_array_equal(new[0], p)


def test_rmsprop_step_is_pure():
    p, g = np.ones(3), np.full(3, 2.0)
    state = RmsPropState(v=[np.zeros(3)])
    rmsprop_step([p], [g], state)
    np.testing.assert_array_equal(p, np.ones(3))
    np.testing.assert_array_equal(state.v[0], np.zeros(3))


def test_rmsprop_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsprop_step([np.ones(3)], [np.ones(2)], RmsPropState())


def test_rmsprop_matches_reference_loop():
    rng = np.random.default_rng(0)
    p = rng.normal(size=5)
    opt = RMSProp([Tensor(p.copy(), requires_grad=True)], lr=0.01, alpha=0.99, eps=1e-5, max_grad_norm=None)
    ref, v = p.copy(), np.zeros(5)
    for _ in range(10):
        g = rng.normal(size=5)
        opt.step([g])
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.01 * g / (np.sqrt(v) + 1e-5)
    np.testing.assert_allclose(opt.params[0].data, ref, rtol=0, atol=1e-14)


def test_global_norm_clip():
    grads = [np.array([3.0, 4.0]), np.array([12.0])]
    clipped, norm = clip_by_global_norm(grads, 6.5)
    assert norm == 13.0
    np.testing.assert_allclose(np.sqrt(sum((c ** 2).sum() for c in clipped)), 6.5)
    same, _ = clip_by_global_norm(grads, 20.0)
    np.testing.assert_array_equal(same[0], grads[0])


def _arrays(rng):
    return {
        "actor/enc.w": rng.normal(size=(3, 4)),
        "critic/out.b": rng.normal(size=2).astype(np.float32),
        "scalar": np.array(1.5),
        "empty": np.zeros((0, 3)),
    }


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    arrays = _arrays(np.random.default_rng(1))
    path = tmp_path / "a.ccoma"
    checkpoint.save(path, arrays)
    loaded = checkpoint.load(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert np.array_equal(loaded[k], arrays[k])
    checkpoint.save(tmp_path / "b.ccoma", loaded)
    assert path.read_bytes() == (tmp_path / "b.ccoma").read_bytes()


def test_checkpoint_layout_header():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]])})
    assert blob[:6] == b"CCOMA\x01"
    assert blob[6:10] == (1).to_bytes(4, "little")
    assert blob[10:11] == b"w"
    assert blob[11] == 1 and blob[12] == 2  # float64, rank 2
    assert np.frombuffer(blob[-16:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("blob", [b"", b"NOPE\x00\x01", b"CCOMA\x01\x05\x00\x00\x00ab",
                                  b"CCOMA\x01\x01\x00\x00\x00w\x07\x00"])
def test_corrupt_checkpoints_are_rejected(blob):
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob)


def test_truncated_values_rejected():
    blob = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:-3])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_checkpoint_round_trip_property(arr):
    out = checkpoint.loads(checkpoint.dumps({"x": arr}))["x"]
    assert out.shape == arr.shape and np.array_equal(out, arr)
