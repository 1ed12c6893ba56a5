from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sslfewshot.data import (
    CapacityError,
    Dataset,
    EpisodeSpec,
    ParseError,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    rng_for,
    sample_episode,
    save_dataset,
    split_by_class,
)


def test_zero_noise_samples_sit_on_centers():
    ds = generate_synthetic(SyntheticSpec(4, 5, 3, 2.0, 0.0), seed=1)
    for cls in range(4):
        rows = ds.features[ds.indices_of(cls)]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(2.0)


def test_generation_deterministic():
    a = generate_synthetic(SyntheticSpec(), seed=3)
    b = generate_synthetic(SyntheticSpec(), seed=3)
    assert a.features.tobytes() == b.features.tobytes()
    assert not np.array_equal(a.features, generate_synthetic(SyntheticSpec(), seed=4).features)


def test_nearest_center_accuracy_when_well_separated():
    spec = SyntheticSpec(20, 50, 16, center_scale=10.0, noise_sigma=1.0)
    ds = generate_synthetic(spec, seed=0)
    # same seed with zero noise gives the exact class centers
    exact = generate_synthetic(replace(spec, noise_sigma=0.0), seed=0)
    centers = np.stack([exact.features[exact.indices_of(c)[0]] for c in range(20)])
    pred = np.argmin(((ds.features[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) > 0.99


def test_generation_rejects_bad_spec():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(num_classes=0), 0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(noise_sigma=-1.0), 0)


def test_split_fractions_64_16_20():
    sp = split_by_class(100, (0.64, 0.16, 0.20), seed=0)
    assert (len(sp.base), len(sp.val), len(sp.novel)) == (64, 16, 20)
    assert sorted(sp.base + sp.val + sp.novel) == list(range(100))


def test_split_all_base():
    sp = split_by_class(10, (1, 0, 0), seed=0)
    assert sp.base == tuple(range(10)) and sp.val == () and sp.novel == ()


def test_split_deterministic():
    assert split_by_class(30, (0.5, 0.2, 0.3), seed=7) == split_by_class(30, (0.5, 0.2, 0.3), seed=7)


def test_split_overlap_rejected():
    with pytest.raises(ValueError):
        split_by_class(5, base=[0, 1], novel=[1, 2])


def test_train_classes_modes():
    sp = SplitSpec((0, 1), (2,), (3,))
    assert sp.train_classes("base") == (0, 1)
    assert sp.train_classes("base+val") == (0, 1, 2)
    with pytest.raises(ValueError):
        sp.train_classes("all")


@given(st.integers(2, 60), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_split_is_partition(n, a, b, seed):
    a, b = a / 2, b / 2
    sp = split_by_class(n, (a, b, 1 - a - b), seed=seed)
    groups = [set(sp.base), set(sp.val), set(sp.novel)]
    assert sum(len(g) for g in groups) == n
    assert set().union(*groups) == set(range(n))


def _small():
    return generate_synthetic(SyntheticSpec(8, 20, 4, 1.0, 0.3), seed=0)


def test_episode_shape():
    ep = sample_episode(_small(), range(8), EpisodeSpec(5, 1, 16), np.random.default_rng(0))
    assert ep.support_x.shape == (5, 4) and ep.query_x.shape == (80, 4)
    assert sorted(set(ep.support_y.tolist())) == list(range(5))


def test_episode_uses_every_sample_when_forced():
    ds = Dataset([[0.0], [1.0], [2.0], [3.0]], [0, 0, 1, 1], ["a", "b"])
    ep = sample_episode(ds, [0, 1], EpisodeSpec(2, 1, 1), np.random.default_rng(0))
    assert sorted(np.concatenate([ep.support_idx, ep.query_idx]).tolist()) == [0, 1, 2, 3]


def test_episode_deterministic():
    ds = _small()
    a = sample_episode(ds, range(8), EpisodeSpec(), rng_for(5, "episode", 3))
    b = sample_episode(ds, range(8), EpisodeSpec(), rng_for(5, "episode", 3))
    assert np.array_equal(a.support_idx, b.support_idx) and np.array_equal(a.query_idx, b.query_idx)


def test_episode_capacity_errors():
    ds = _small()
    with pytest.raises(CapacityError, match="need 5 classes"):
        sample_episode(ds, [0, 1, 2], EpisodeSpec(5, 1, 1), np.random.default_rng(0))
    with pytest.raises(CapacityError, match="short by 1"):
        sample_episode(ds, range(8), EpisodeSpec(2, 5, 16), np.random.default_rng(0))


def test_episode_spec_validation():
    with pytest.raises(ValueError):
        EpisodeSpec(1, 1, 1)


def test_ten_thousand_episodes_disjoint_and_bijective():
    ds = _small()
    es = EpisodeSpec(4, 3, 5)
    for e in range(10_000):
        ep = sample_episode(ds, range(8), es, rng_for(1, "episode", e))
        assert not set(ep.support_idx.tolist()) & set(ep.query_idx.tolist())
        assert len(set(ep.class_map)) == 4
        for k, cls in enumerate(ep.class_map):
            assert np.all(ds.labels[ep.support_idx[ep.support_y == k]] == cls)
            assert np.all(ds.labels[ep.query_idx[ep.query_y == k]] == cls)
        assert np.array_equal(np.bincount(ep.query_y), [5] * 4)


# -- FSDS --

def test_fsds_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(3, 4, 5, 1.0, 0.7), seed=2)
    save_dataset(ds, tmp_path / "a.fsds")
    back = load_dataset(tmp_path / "a.fsds")
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.class_names == ds.class_names
    save_dataset(back, tmp_path / "b.fsds")
    assert (tmp_path / "a.fsds").read_bytes() == (tmp_path / "b.fsds").read_bytes()


def test_fsds_header_line(tmp_path):
    save_dataset(Dataset([[0.1, 0.2]], [0], ["only"]), tmp_path / "x.fsds")
    assert (tmp_path / "x.fsds").read_text().splitlines()[:2] == ["FSDS 1 1 2 1", "only"]


@pytest.mark.parametrize("body, line", [
    ("FSDS 1 1 3 1\na\n0 1.0 2.0\n", 3),
    ("FSDS 1 1 3 1\na\n\n", 3),
    ("FSDS 1 1 2 1\na\n4 1.0 2.0\n", 3),
    ("FSDX 1 1 2 1\na\n0 1.0 2.0\n", 1),
    ("FSDS 1 2 2 1\na\n0 1.0 2.0\n", 4),
    ("FSDS 1 1 2 2\na\n0 1.0 2.0\n", 2),
])
def test_fsds_parse_errors_carry_line(tmp_path, body, line):
    path = tmp_path / "bad.fsds"
    path.write_text(body)
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line == line
