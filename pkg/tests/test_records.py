"""Record parsing, normalization endpoints, and split invariants."""

import numpy as np
import pytest

from mvbody.errors import DataError, SchemaError, SplitError, StatsError
from mvbody.records import (
    CSV_HEADER,
    DEFAULT_RACES,
    NUMERIC_FIELDS,
    MedicalRecord,
    NormalizationStats,
    RecordSchema,
    SplitPlan,
    labels_from_records,
    make_splits,
    normalize_records,
    parse_records,
    write_records_csv,
)


def make_record(pid="p0", **kw):
    base = dict(
        participant_id=pid,
        race="white",
        age=30.0,
        height=165.0,
        pre_pregnancy_weight=68.0,
        gravidity=2.0,
        parity=1.0,
        prior_cs=0,
        hist_gest_htn=0,
        hist_gdm=0,
        hist_preeclampsia=0,
        chronic_asthma=0,
        chronic_htn=0,
        chronic_dm=0,
        current_weight=80.0,
        gestational_age_at_scan=34.0,
        label=0,
    )
    base.update(kw)
    return MedicalRecord(**base)


ROW = "p0,white,30,165,68,2,1,80,34,0,0,0,0,0,0,0,0\n"
HEADER = ",".join(CSV_HEADER) + "\n"


def test_parse_single_valid_row(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + ROW)
    recs = parse_records(p)
    assert len(recs) == 1
    assert recs[0].participant_id == "p0"
    assert recs[0].age == 30.0


def test_parse_rejects_parity_over_gravidity(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + ROW + "p1,white,30,165,68,1,3,80,34,0,0,0,0,0,0,0,0\n")
    with pytest.raises(ValueError, match=":3"):  # row number in message
        parse_records(p)


def test_parse_rejects_unknown_column(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER.strip() + ",shoe_size\n" + ROW.strip() + ",38\n")
    with pytest.raises(SchemaError, match="shoe_size"):
        parse_records(p)


def test_parse_rejects_missing_numeric(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + "p0,white,30,,68,2,1,80,34,0,0,0,0,0,0,0,0\n")
    with pytest.raises(ValueError):
        parse_records(p)


def test_parse_rejects_underage(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + "p0,white,17,165,68,2,1,80,34,0,0,0,0,0,0,0,0\n")
    with pytest.raises(ValueError, match="age"):
        parse_records(p)


def test_parse_warns_outside_gestation_window(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + "p0,white,30,165,68,2,1,80,29,0,0,0,0,0,0,0,0\n")
    with pytest.warns(UserWarning, match="gestational_age_at_scan"):
        parse_records(p)


def test_csv_round_trip(tmp_path):
    recs = [make_record("a", label=1), make_record("b", age=41.0)]
    path = tmp_path / "out.csv"
    write_records_csv(recs, path)
    back = parse_records(path)
    assert back == recs


# ------------------------------------------------------------- normalization

def stats_train_pair():
    """Two records spanning a range on every numeric field (fit needs min < max)."""
    r1 = make_record(
        "a", age=20.0, height=150.0, pre_pregnancy_weight=50.0, gravidity=1.0,
        parity=0.0, current_weight=60.0, gestational_age_at_scan=31.0,
    )
    r2 = make_record(
        "b", age=40.0, height=180.0, pre_pregnancy_weight=90.0, gravidity=4.0,
        parity=3.0, current_weight=100.0, gestational_age_at_scan=38.0,
    )
    return [r1, r2]


def test_normalize_endpoints_midpoint_clamp():
    train = stats_train_pair()
    stats = NormalizationStats.fit(train)
    schema = RecordSchema()
    test = [
        make_record("x", age=20.0),
        make_record("x", age=40.0),
        make_record("x", age=30.0),
        make_record("x", age=18.0),  # below training min -> clamped
        make_record("x", age=55.0),  # above training max -> clamped
    ]
    X = normalize_records(test, stats, schema)
    age_col = schema.feature_names().index("age")
    np.testing.assert_allclose(X[:, age_col], [-1.0, 1.0, 0.0, -1.0, 1.0])


def test_normalize_binary_and_onehot_encoding():
    stats = NormalizationStats.fit(stats_train_pair())
    schema = RecordSchema()
    rec = make_record("x", prior_cs=1, race="black")
    X = normalize_records([rec], stats, schema)[0]
    names = schema.feature_names()
    assert X[names.index("prior_cs")] == 1.0
    assert X[names.index("hist_gdm")] == -1.0
    assert X[names.index("race_black")] == 1.0
    assert X[names.index("race_white")] == -1.0
    assert X.min() >= -1.0 and X.max() <= 1.0
    assert len(X) == schema.d == len(NUMERIC_FIELDS) + 7 + len(DEFAULT_RACES)


def test_normalize_is_affine_order_preserving():
    stats = NormalizationStats.fit(stats_train_pair())
    schema = RecordSchema()
    ages = [21.0, 24.0, 30.0, 38.0]  # inside the training range; outside would clamp
    X = normalize_records([make_record("x", age=a) for a in ages], stats, schema)
    col = X[:, schema.feature_names().index("age")]
    assert np.all(np.diff(col) > 0)
    # affine: equal age gaps map to equal normalized gaps
    np.testing.assert_allclose(np.diff(col) / np.diff(ages), np.diff(col)[0] / np.diff(ages)[0])


def test_stats_constant_field_rejected():
    with pytest.raises(StatsError):
        NormalizationStats.fit([make_record("a"), make_record("b")])  # all fields equal


def test_stats_missing_field_rejected():
    stats = NormalizationStats(ranges={"age": (20.0, 40.0)})
    with pytest.raises(StatsError):
        normalize_records([make_record("a")], stats)


def test_stats_ignore_validation_values():
    # leakage guard: stats computed on train only are unaffected by val records
    train = stats_train_pair()
    s1 = NormalizationStats.fit(train)
    s2 = NormalizationStats.fit(train)  # val perturbed elsewhere, stats identical
    assert s1 == s2


# -------------------------------------------------------------------- splits

def _labels(n, n_pos, prefix="p"):
    return {f"{prefix}{i:03}": 1 if i < n_pos else 0 for i in range(n)}


def test_split_example_8_participants():
    labels = _labels(8, 2)
    plan = make_splits(labels, seed=3, n_folds=2, test_frac=0.25)
    assert len(plan.test_participants) == 2
    pool = [p for f in plan.cv_folds for p in f[1]]
    assert len(pool) == 6
    again = make_splits(labels, seed=3, n_folds=2, test_frac=0.25)
    assert plan == again


def test_split_no_overlap_and_partition():
    labels = _labels(40, 10)
    plan = make_splits(labels, seed=11)
    test = set(plan.test_participants)
    all_val = []
    for train, val in plan.cv_folds:
        assert not (set(train) & set(val))
        assert not (set(train) & test)
        assert not (set(val) & test)
        all_val.extend(val)
    assert sorted(all_val) == sorted(set(labels) - test)  # folds partition CV pool


@pytest.mark.parametrize("seed", range(0, 100, 7))
def test_split_stratification_101_participants(seed):
    labels = _labels(101, 25)
    plan = make_splits(labels, seed=seed)
    test = plan.test_participants
    n_pos = sum(labels[p] for p in test)
    assert 25 <= len(test) <= 26
    assert 5 <= n_pos <= 7


def test_split_order_invariance():
    labels = _labels(30, 8)
    shuffled = dict(reversed(list(labels.items())))
    assert make_splits(labels, seed=5) == make_splits(shuffled, seed=5)


def test_split_too_few_of_class():
    with pytest.raises(SplitError):
        make_splits(_labels(12, 3), seed=0, n_folds=5)


def test_split_json_round_trip():
    plan = make_splits(_labels(40, 10), seed=2)
    assert SplitPlan.from_json(plan.to_json()) == plan


def test_labels_from_records_conflict():
    recs = [make_record("a", label=0), make_record("a", label=1)]
    with pytest.raises(DataError):
        labels_from_records(recs)
