import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cre.data import (
    Condition,
    Dataset,
    Direction,
    Rule,
    SplitIndices,
    build_rule_matrix,
    canonicalize,
    evaluate_rule,
    evaluate_rules,
    load_dataset,
    rules_from_json,
    rules_to_json,
    split_sample,
    write_dataset,
)
from cre.errors import DomainError, ParseError, SchemaError, SelectionInputError, ValidationError
from cre.simulation import DgpSpec, generate

LE, GT = Direction.LE, Direction.GT


def _csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _toy(x, z=None, y=None):
    x = np.asarray(x, float)
    n = x.shape[0]
    z = np.arange(n) % 2 if z is None else z
    y = np.zeros(n) if y is None else y
    return Dataset(y, z, x, tuple(f"x{j + 1}" for j in range(x.shape[1])))


# ---------------------------------------------------------------- loading

def test_load_four_rows(tmp_path):
    p = _csv(tmp_path, "y,z,x1,x2\n1.0,1,0,1\n2,0,1,1\n3,1,0,0\n4,0,1,0\n")
    d = load_dataset(p, "y", "z")
    assert (d.n, d.k) == (4, 2)
    assert d.column_names == ("x1", "x2")
    np.testing.assert_array_equal(d.y, [1, 2, 3, 4])
    np.testing.assert_array_equal(d.x[:, 1], [1, 1, 0, 0])


def test_covariates_keep_file_order(tmp_path):
    p = _csv(tmp_path, "b,y,a,z\n1,2,3,0\n4,5,6,1\n")
    d = load_dataset(p, "y", "z")
    assert d.column_names == ("b", "a")
    np.testing.assert_array_equal(d.x, [[1, 3], [4, 6]])


def test_treatment_value_two_is_rejected(tmp_path):
    p = _csv(tmp_path, "y,z,x1\n1,0,0\n2,2,1\n")
    with pytest.raises(ValidationError, match="row 3"):
        load_dataset(p, "y", "z")


def test_missing_column(tmp_path):
    p = _csv(tmp_path, "y,t,x1\n1,0,0\n")
    with pytest.raises(SchemaError, match="'z'"):
        load_dataset(p, "y", "z")


@pytest.mark.parametrize("cell", ["abc", "", "nan"])
def test_bad_cell_names_row_and_column(tmp_path, cell):
    p = _csv(tmp_path, f"y,z,x1\n1,0,0\n2,1,{cell}\n")
    with pytest.raises(ParseError, match=r"row 3, column 'x1'"):
        load_dataset(p, "y", "z")


def test_ragged_row(tmp_path):
    p = _csv(tmp_path, "y,z,x1\n1,0\n")
    with pytest.raises(ParseError):
        load_dataset(p, "y", "z")


def test_simulated_round_trip_is_bit_identical(tmp_path):
    d, _ = generate(DgpSpec(n=300, k_effect=1.3, seed=4))
    p = tmp_path / "sim.csv"
    write_dataset(d, p)
    assert load_dataset(p, "y", "z") == d


def test_dataset_is_immutable():
    d = _toy([[0.0], [1.0]])
    with pytest.raises(ValueError):
        d.x[0, 0] = 5.0


# ---------------------------------------------------------------- splitting

def test_split_sizes():
    s = split_sample(100, 0.25, seed=1)
    assert (len(s.discovery), len(s.inference)) == (25, 75)
    s = split_sample(1000, 0.25, seed=1)
    assert (len(s.discovery), len(s.inference)) == (250, 750)


def test_split_is_deterministic_and_seed_dependent():
    assert split_sample(500, 0.3, seed=9) == split_sample(500, 0.3, seed=9)
    assert split_sample(500, 0.3, seed=9).discovery != split_sample(500, 0.3, seed=10).discovery


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2, 1.5])
def test_split_ratio_domain(ratio):
    with pytest.raises(DomainError):
        split_sample(10, ratio)


@given(n=st.integers(2, 400), ratio=st.floats(0.01, 0.99), seed=st.integers(0, 2**32))
def test_split_partitions(n, ratio, seed):
    s = split_sample(n, ratio, seed)
    disc, inf = set(s.discovery), set(s.inference)
    assert not disc & inf
    assert disc | inf == set(range(n))
    assert len(disc) == min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)


def test_split_membership_frequency():
    n, ratio = 40, 0.25
    hits = np.zeros(n)
    for seed in range(1000):
        hits[list(split_sample(n, ratio, seed).discovery)] += 1
    assert np.all(np.abs(hits / 1000 - ratio) <= 0.05)


def test_split_json_round_trip():
    s = split_sample(50, 0.4, seed=3)
    assert SplitIndices.from_json(s.to_json()) == s


# ---------------------------------------------------------------- rules

def test_conjunction_of_two_indicators():
    # male = 1 and young = 1 with 0/1 coding
    r = Rule([Condition(0, GT, 0.5), Condition(1, GT, 0.5)])
    assert evaluate_rule(r, [1, 1]) == 1
    assert evaluate_rule(r, [1, 0]) == 0


def test_le_boundary_is_inclusive():
    r = Rule([Condition(0, LE, 0.5)])
    assert evaluate_rule(r, [0.5, 7.0]) == 1
    assert evaluate_rule(Rule([Condition(0, GT, 0.5)]), [0.5]) == 0


def test_index_out_of_range():
    with pytest.raises(DomainError):
        evaluate_rule(Rule([Condition(3, LE, 0.5)]), [0.0, 1.0])


def test_canonical_merge():
    r = Rule([Condition(1, LE, 3.0), Condition(0, GT, 1.0), Condition(1, LE, 2.0), Condition(0, GT, 1.5)])
    assert r.conditions == (Condition(0, GT, 1.5), Condition(1, LE, 2.0))
    assert r.label == "X1 > 1.5 & X2 <= 2"


def test_vacuous_and_empty_rules_rejected():
    with pytest.raises(DomainError):
        Rule([Condition(0, LE, 0.5), Condition(0, GT, 0.5)])
    with pytest.raises(DomainError):
        Rule([])


def test_equal_canonical_rules_compare_equal():
    a = Rule([Condition(0, LE, 2.0), Condition(0, LE, 1.0), Condition(2, GT, 0.0)])
    b = Rule([Condition(2, GT, 0.0), Condition(0, LE, 1.0)])
    assert a == b and hash(a) == hash(b)


conditions = st.builds(Condition, st.integers(0, 3), st.sampled_from([LE, GT]),
                       st.sampled_from([0.5, 1.5, 2.5]))


@given(st.lists(conditions, min_size=1, max_size=6))
def test_canonicalize_idempotent(conds):
    try:
        once = canonicalize(conds)
    except DomainError:
        return
    assert canonicalize(once) == once
    keys = [(c.covariate_index, c.direction) for c in once]
    assert len(keys) == len(set(keys))
    assert list(once) == sorted(once, key=Condition.sort_key)


@given(st.lists(conditions, min_size=1, max_size=6), st.integers(0, 1000))
def test_canonical_rule_has_same_truth_table(conds, seed):
    try:
        r = Rule(conds)
    except DomainError:
        return
    x = np.random.default_rng(seed).integers(0, 4, size=(30, 4)).astype(float)
    raw = np.all([c.holds(x) for c in conds], axis=0)
    np.testing.assert_array_equal(r.evaluate(x), raw.astype(np.int8))


def test_rule_json_round_trip():
    names = ("age", "male", "income")
    rules = [Rule([Condition(0, LE, 64.5), Condition(1, GT, 0.5)]), Rule([Condition(2, GT, 1e4)])]
    obj = rules_to_json(rules, names)
    assert obj[0] == {"conditions": [{"col": "age", "op": "<=", "value": 64.5},
                                     {"col": "male", "op": ">", "value": 0.5}],
                      "label": "age <= 64.5 & male > 0.5"}
    assert rules_from_json(obj, names) == rules


# ---------------------------------------------------------------- rule matrix

def _example_tree_rules():
    # root splits on male, the male branch splits on young
    male, young = 0, 1
    return [Rule([Condition(male, LE, 0.5)]), Rule([Condition(male, GT, 0.5)]),
            Rule([Condition(male, GT, 0.5), Condition(young, LE, 0.5)]),
            Rule([Condition(male, GT, 0.5), Condition(young, GT, 0.5)])]


def test_example_tree_rule_matrix():
    cells = np.array(list(itertools.product([0, 1], [0, 1])), float)
    d = _toy(np.repeat(cells, 3, axis=0))
    rm = build_rule_matrix(_example_tree_rules(), d)
    assert rm.m == 4
    np.testing.assert_array_equal(rm.values[:, 1], rm.values[:, 2] + rm.values[:, 3])
    np.testing.assert_array_equal(rm.values[:, 0], 1 - rm.values[:, 1])


def test_duplicates_and_constants_dropped():
    d = _toy([[0, 5], [1, 5], [0, 6], [1, 6]])
    r_a = Rule([Condition(0, GT, 0.5)])
    r_a2 = Rule([Condition(0, GT, 0.7)])       # same truth table on d
    r_const = Rule([Condition(1, GT, 0.0)])    # true everywhere
    r_b = Rule([Condition(1, LE, 5.5)])
    rm = build_rule_matrix([r_a, r_a2, r_const, r_b], d)
    assert rm.rules == (r_a, r_b)
    assert [r for r, _ in rm.dropped] == [r_a2, r_const]


def test_nothing_survives():
    d = _toy([[0.0], [1.0]])
    with pytest.raises(SelectionInputError):
        build_rule_matrix([Rule([Condition(0, LE, 5.0)])], d)
    assert build_rule_matrix([Rule([Condition(0, LE, 5.0)])], d, allow_empty=True).m == 0


@settings(max_examples=40)
@given(st.lists(st.lists(conditions, min_size=1, max_size=3), min_size=1, max_size=8), st.integers(0, 99))
def test_rule_matrix_matches_evaluate_rule(rule_conds, seed):
    rules = []
    for conds in rule_conds:
        try:
            rules.append(Rule(conds))
        except DomainError:
            pass
    x = np.random.default_rng(seed).integers(0, 4, size=(12, 4)).astype(float)
    rm = build_rule_matrix(rules, _toy(x), allow_empty=True)
    for j, r in enumerate(rm.rules):
        for i in range(x.shape[0]):
            assert rm.values[i, j] == evaluate_rule(r, x[i])
    cols = {rm.values[:, j].tobytes() for j in range(rm.m)}
    assert len(cols) == rm.m
    assert np.all(rm.values.min(axis=0) == 0) and np.all(rm.values.max(axis=0) == 1)
    np.testing.assert_array_equal(evaluate_rules(list(rm.rules), x), rm.values)
