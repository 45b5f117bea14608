import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gap_priors.datagen import (CELEBA_TRAIN, WATERBIRDS_TRAIN, CsvFormatError, GroupedDataset, ShiftSpec,
                                celeba_like, load_csv, make_spurious_gaussian, save_csv, split,
                                waterbirds_like)


@pytest.mark.parametrize("preset, props", [(waterbirds_like, WATERBIRDS_TRAIN), (celeba_like, CELEBA_TRAIN)])
def test_train_proportions_converge(preset, props):
    train, *_ = make_spurious_gaussian(preset(n_train=20_000), seed=3)
    np.testing.assert_allclose(train.group_proportions(), props, atol=0.015)


def test_test_split_is_balanced():
    *_, test = make_spurious_gaussian(waterbirds_like(n_test=20_000), seed=0)
    np.testing.assert_allclose(test.group_proportions(), 0.25, atol=0.015)


def test_group_ids_and_tags():
    parts = make_spurious_gaussian(waterbirds_like(), seed=0)
    assert [p.split_tag for p in parts] == ["train", "val_context", "val_tune", "test"]
    for p in parts:
        np.testing.assert_array_equal(p.g, p.y * 2 + p.a)
        assert p.n_features == 10
    val_context, val_tune = parts[1], parts[2]
    assert len(val_context) + len(val_tune) == 1200


def test_generation_is_deterministic():
    a = make_spurious_gaussian(waterbirds_like(), seed=4)
    b = make_spurious_gaussian(waterbirds_like(), seed=4)
    assert all(x.equals(y) for x, y in zip(a, b))
    c = make_spurious_gaussian(waterbirds_like(), seed=5)
    assert not a[0].equals(c[0])


def test_no_spurious_signal_means_equal_group_accuracy():
    # with spurious_separation = 0 the Bayes rule sign(sum of core coords)
    # sees the same distribution in both attribute groups of a class
    spec = waterbirds_like(spurious_separation=0.0, n_test=40_000)
    *_, test = make_spurious_gaussian(spec, seed=0)
    pred = (test.x[:, :2].sum(axis=1) > 0).astype(int)
    accs = [np.mean(pred[test.g == g] == test.y[test.g == g]) for g in range(4)]
    n = np.bincount(test.g)
    for y in (0, 1):
        g0, g1 = 2 * y, 2 * y + 1
        bound = 4 * np.sqrt(0.25 / n[g0] + 0.25 / n[g1])
        assert abs(accs[g0] - accs[g1]) < bound


def test_shift_spec_validation():
    with pytest.raises(ValueError):
        ShiftSpec((0.5, 0.5), (0.25,) * 4)
    with pytest.raises(ValueError):
        ShiftSpec((0.5, 0.5, 0.5, -0.5), (0.25,) * 4)
    with pytest.raises(ValueError):
        waterbirds_like(noise_sd=0)


def _one_group(n, g=0):
    return GroupedDataset(np.arange(n, dtype=float)[:, None], np.full(n, g // 2), np.full(n, g % 2))


def test_split_sizes_single_group():
    a, b = split(_one_group(100), (0.85, 0.15), seed=0)
    assert (len(a), len(b)) == (85, 15)
    (only,) = split(_one_group(100), (1.0,), seed=0)
    assert only.equals(_one_group(100))


def test_split_floor_then_remainder():
    # group of 10: floor 8.5 -> 8, floor 1.5 -> 1, leftover 1 to the first part: (9, 1)
    # group of 3: floor 2.55 -> 2, floor 0.45 -> 0, leftover 1 to the first part: (3, 0)
    d = GroupedDataset(np.zeros((13, 1)), [0] * 10 + [1] * 3, [0] * 13)
    with pytest.warns(UserWarning, match="no examples"):
        a, b = split(d, (0.85, 0.15), seed=1)
    assert a.group_counts == {0: 9, 2: 3}
    assert b.group_counts == {0: 1}


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=4, max_size=4), st.integers(0, 100))
def test_split_preserves_counts(counts, seed):
    g = np.repeat(np.arange(4), counts)
    d = GroupedDataset(np.random.default_rng(seed).standard_normal((g.size, 2)), g // 2, g % 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts = split(d, (0.85, 0.15), seed)
    assert sum(len(p) for p in parts) == len(d)
    for grp in range(4):
        assert sum(p.group_counts.get(grp, 0) for p in parts) == counts[grp]
    rows = np.sort(np.concatenate([p.x[:, 0] for p in parts]))
    np.testing.assert_array_equal(rows, np.sort(d.x[:, 0]))


def test_csv_empty_round_trip(tmp_path):
    d = GroupedDataset(np.zeros((0, 3)), [], [])
    path = save_csv(d, tmp_path / "e.csv")
    assert path.read_text() == "x0,x1,x2,y,a,g,split\n"
    assert load_csv(path).equals(d)


def test_csv_single_example_round_trip(tmp_path):
    d = GroupedDataset(np.array([[0.1, -1e-300, 3.0e12]]), [1], [0], split_tag="test")
    assert load_csv(save_csv(d, tmp_path / "one.csv")).equals(d)


def test_csv_large_round_trip(tmp_path):
    train, *_ = make_spurious_gaussian(waterbirds_like(n_train=10_000), seed=0)
    back = load_csv(save_csv(train, tmp_path / "big.csv"))
    assert back.group_counts == train.group_counts
    assert back.equals(train)


def test_csv_malformed_row_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x0,y,a,g,split\n0.5,0,0,0,train\n0.7,1,zz,2,train\n")
    with pytest.raises(CsvFormatError, match=r"bad.csv:3"):
        load_csv(p)
    p.write_text("x0,y,a,g,split\n0.5,0,0,0,train\n0.7,1,1,1,train\n")
    with pytest.raises(CsvFormatError, match=r":3"):
        load_csv(p)
    p.write_text("x0,y,a,g,split\n0.5,0,0\n")
    with pytest.raises(CsvFormatError, match=r":2"):
        load_csv(p)
