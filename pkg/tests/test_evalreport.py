from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gap_priors.datagen import GroupedDataset
from gap_priors.evalreport import (EvalReport, aggregate, evaluate, per_group_accuracy, report_rows,
                                   weighted_average_accuracy, worst_group_accuracy, write_report_csv)
from gap_priors.model import MlpSpec, init_mlp


def _grid_test_set(n_per_group=50, seed=0, tag="test"):
    r = np.random.default_rng(seed)
    y = np.repeat([0, 0, 1, 1], n_per_group)
    a = np.tile(np.repeat([0, 1], n_per_group), 2)
    x = (2 * y - 1)[:, None] * np.abs(r.standard_normal((y.size, 1))) + 0.0
    return GroupedDataset(x, y, a, split_tag=tag)


def _perfect(spec):
    p = init_mlp(spec, 0)
    p.theta[:] = [-1.0, 1.0, 0.0, 0.0]
    return p


def test_perfect_and_constant_classifiers():
    spec = MlpSpec((1, 2))
    test = _grid_test_set()
    assert per_group_accuracy(_perfect(spec), spec, test) == {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
    zero = init_mlp(spec, 0)
    zero.theta[:] = 0.0
    assert per_group_accuracy(zero, spec, test) == {0: 1.0, 1: 1.0, 2: 0.0, 3: 0.0}


def test_odd_random_network_is_at_chance():
    # zero biases and tanh make the logit gap odd in x, and x is symmetric,
    # so each group accuracy is 1/2 in expectation
    spec = MlpSpec((5, 16, 2), "tanh")
    r = np.random.default_rng(0)
    n = 4000
    g = np.repeat(np.arange(4), n)
    test = GroupedDataset(r.standard_normal((g.size, 5)), g // 2, g % 2, split_tag="test")
    for seed in range(3):
        accs = per_group_accuracy(init_mlp(spec, seed), spec, test)
        for acc in accs.values():
            assert abs(acc - 0.5) < 4 * np.sqrt(0.25 / n)


def test_absent_group_is_omitted():
    spec = MlpSpec((1, 2))
    test = _grid_test_set()
    test = test.subset(np.flatnonzero(test.g != 1))
    rep = evaluate(_perfect(spec), spec, test, (0.5, 0.0, 0.25, 0.25))
    assert set(rep.per_group_acc) == {0, 2, 3}
    assert rep.weighted_avg_acc == 1.0


def test_worst_group():
    assert worst_group_accuracy({0: 0.9, 1: 0.8, 2: 0.7, 3: 0.95}) == 0.7
    assert worst_group_accuracy({0: 0.42}) == 0.42
    assert worst_group_accuracy({0: 0.6, 1: 0.6, 2: 0.6}) == 0.6
    with pytest.raises(ValueError):
        worst_group_accuracy({})


def test_weighted_average():
    accs = {0: 0.9, 1: 0.8, 2: 0.7, 3: 0.95}
    assert weighted_average_accuracy(accs, (0.22, 0.01, 0.04, 0.73)) == pytest.approx(0.9275, abs=1e-15)
    assert weighted_average_accuracy(accs, (0.25,) * 4) == pytest.approx(np.mean(list(accs.values())))
    assert weighted_average_accuracy(accs, (0, 0, 1.0, 0)) == 0.7
    with pytest.raises(ValueError):
        weighted_average_accuracy(accs, (0.5, 0.5))
    with pytest.raises(ValueError):
        weighted_average_accuracy(accs, (0.5, 0.5, 0.5, 0.5))


def test_aggregate():
    agg = aggregate({"wga": [0.8, 0.9]})["wga"]
    assert agg["mean"] == pytest.approx(0.85)
    assert agg["se"] == pytest.approx(0.05)
    same = aggregate({"wga": [0.7, 0.7, 0.7]})["wga"]
    assert same["se"] == 0.0 and same["se_defined"]
    one = aggregate({"wga": [0.7]})["wga"]
    assert one["se"] == 0.0 and not one["se_defined"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=4, max_size=4), st.integers(0, 10_000))
def test_metric_identities(counts, seed):
    r = np.random.default_rng(seed)
    correct = {g: int(r.integers(0, c + 1)) for g, c in enumerate(counts)}
    total = sum(counts)
    props = {g: c / total for g, c in enumerate(counts)}
    rep = EvalReport({g: correct[g] / counts[g] for g in range(4)}, dict(enumerate(counts)), correct, props)
    accs = rep.per_group_acc.values()
    assert rep.worst_group_acc <= rep.weighted_avg_acc + 1e-15 and rep.weighted_avg_acc <= max(accs) + 1e-15
    # empirical proportions: sum_g (n_g/N)(k_g/n_g) = sum k_g / N exactly in rationals
    exact = sum(Fraction(counts[g], total) * Fraction(correct[g], counts[g]) for g in range(4))
    assert exact == Fraction(sum(correct.values()), total)
    assert rep.weighted_avg_acc == pytest.approx(rep.overall_acc, rel=1e-14, abs=1e-15)


def test_evaluation_is_pure_and_round_trips(tmp_path):
    spec = MlpSpec((1, 8, 2), "tanh")
    test = _grid_test_set(seed=3)
    p = init_mlp(spec, 1)
    a = evaluate(p, spec, test, (0.22, 0.01, 0.04, 0.73))
    b = evaluate(p, spec, test, (0.22, 0.01, 0.04, 0.73))
    assert a.to_dict() == b.to_dict()
    assert EvalReport.from_dict(a.to_dict()).to_dict() == a.to_dict()
    assert not a.in_sample
    assert evaluate(p, spec, _grid_test_set(tag="train")).in_sample
    path = write_report_csv(tmp_path / "r.csv", report_rows("erm", 0, a))
    lines = path.read_text().splitlines()
    assert lines[0] == "method,seed,group,acc,wga,avg" and len(lines) == 5


def test_empty_test_set():
    spec = MlpSpec((1, 2))
    with pytest.raises(ValueError):
        evaluate(init_mlp(spec, 0), spec, GroupedDataset(np.zeros((0, 1)), [], [], split_tag="test"))
