import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sslfewshot.nn import (
    CheckpointError,
    ClassifierWeights,
    FeatureExtractor,
    Layer,
    cosine_scores,
    dump_checkpoint,
    extract_features,
    init_extractor,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from sslfewshot.tensor import DimensionError, GradientTape


def test_init_is_deterministic():
    a, b = init_extractor([4, 8, 3], seed=5), init_extractor([4, 8, 3], seed=5)
    for la, lb in zip(a.layers, b.layers):
        assert la.weight.tobytes() == lb.weight.tobytes()


def test_init_shapes():
    fe = init_extractor([4, 8, 3], seed=0)
    assert fe.output_dim == 3 and fe.input_dim == 4 and len(fe.layers) == 2
    assert [l.activation for l in fe.layers] == ["relu", "none"]
    assert all(np.all(l.bias == 0) for l in fe.layers)


def test_init_seeds_differ():
    assert not np.array_equal(init_extractor([4, 8, 3], 0).layers[0].weight, init_extractor([4, 8, 3], 1).layers[0].weight)


def test_init_glorot_bounds():
    w = init_extractor([10, 30], seed=3).layers[0].weight
    assert np.abs(w).max() <= math.sqrt(6 / 40)


def test_init_empty_spec():
    with pytest.raises(ValueError):
        init_extractor([4], seed=0)


def test_zero_network_gives_zero():
    fe = FeatureExtractor((Layer(np.zeros((3, 2)), np.zeros(2), "none"),))
    np.testing.assert_array_equal(extract_features(fe, np.ones((4, 3))).numpy(), 0.0)


def test_identity_layer_passes_input():
    x = np.random.default_rng(0).standard_normal((5, 3))
    fe = FeatureExtractor((Layer(np.eye(3), np.zeros(3), "none"),))
    np.testing.assert_array_equal(extract_features(fe, x).numpy(), x)


def _loop_forward(fe, x):
    out = []
    for row in x:
        h = list(row)
        for layer in fe.layers:
            nxt = []
            for j in range(layer.d_out):
                acc = layer.bias[j]
                for i in range(layer.d_in):
                    acc += h[i] * layer.weight[i, j]
                nxt.append(max(acc, 0.0) if layer.activation == "relu" else acc)
            h = nxt
        out.append(h)
    return np.array(out)


def test_forward_matches_loop_oracle():
    fe = init_extractor([6, 5, 4], seed=11)
    fe = fe.with_params({k: v + 0.1 for k, v in fe.params().items()})
    x = np.random.default_rng(2).standard_normal((7, 6))
    np.testing.assert_allclose(extract_features(fe, x).numpy(), _loop_forward(fe, x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(fe.forward(x), _loop_forward(fe, x), rtol=1e-12, atol=1e-14)


def test_extract_dim_mismatch():
    with pytest.raises(DimensionError):
        extract_features(init_extractor([4, 2], 0), np.ones((2, 5)))


def test_frozen_extractor_adds_no_parameters():
    fe = init_extractor([4, 3], 0)
    tape = GradientTape()
    extract_features(fe.freeze(), np.ones((2, 4)), tape)
    assert tape.named == {}
    extract_features(fe, np.ones((2, 4)), tape)
    assert set(tape.named) == {"extractor.0.weight", "extractor.0.bias"}


def test_cosine_parallel():
    assert cosine_scores(ClassifierWeights([[6.0], [8.0]], 10.0), [[3.0, 4.0]]).item() == pytest.approx(10.0, abs=1e-12)


def test_cosine_orthogonal():
    assert cosine_scores(ClassifierWeights([[0.0], [1.0]], 3.0), [[1.0, 0.0]]).item() == 0.0


def test_cosine_45_degrees():
    assert cosine_scores(ClassifierWeights([[1.0], [0.0]], 2.0), [[1.0, 1.0]]).item() == pytest.approx(1.41421, abs=5e-6)


def test_cosine_dim_mismatch():
    with pytest.raises(DimensionError):
        cosine_scores(ClassifierWeights(np.ones((3, 2))), np.ones((1, 4)))


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_and_bound(seed, kw, kf):
    rng = np.random.default_rng(seed)
    W, F = rng.standard_normal((4, 3)), rng.standard_normal((5, 4))
    alpha = 7.0
    base = cosine_scores(ClassifierWeights(W, alpha), F).numpy()
    col_scale = np.array([kw, 1.0, kf])
    scaled = cosine_scores(ClassifierWeights(W * col_scale, alpha), F * kf).numpy()
    np.testing.assert_allclose(scaled, base, atol=1e-12)
    assert np.all(np.abs(base) <= alpha + 1e-12)


def _model(seed=0):
    fe = init_extractor([5, 6, 3], seed)
    W = np.random.default_rng(seed).standard_normal((3, 4))
    return fe, ClassifierWeights(W, 12.5)


def test_checkpoint_round_trip(tmp_path):
    fe, cw = _model()
    save_checkpoint(tmp_path / "a.ckpt", fe, cw)
    fe2, cw2 = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", fe2, cw2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert cw2.alpha == 12.5 and cw2.array().tobytes() == cw.array().tobytes()


def test_checkpoint_layout():
    fe = FeatureExtractor((Layer([[1.0, 2.0]], [3.0, 4.0], "none"),))
    cw = ClassifierWeights([[1.0, 2.0], [3.0, 4.0]], 2.0)
    blob = dump_checkpoint(fe, cw)
    assert blob[:8] == b"SSLCKPT\x01"
    assert blob[8:12] == (1).to_bytes(4, "little")
    assert blob[12:21] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"\x00"
    tail = np.frombuffer(blob[-32:], dtype="<f8")
    np.testing.assert_array_equal(tail, [1.0, 3.0, 2.0, 4.0])  # column-major


@pytest.mark.parametrize("mutate", [
    lambda b: b"BADMAGIC" + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
])
def test_checkpoint_rejects_corruption(mutate):
    blob = dump_checkpoint(*_model())
    with pytest.raises(CheckpointError):
        parse_checkpoint(mutate(blob))
