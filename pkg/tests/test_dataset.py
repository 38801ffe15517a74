import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskgrid import dataset as D
from riskgrid.exceptions import (ConfigurationError, DataError, ShapeError,
                                 StratificationError)


@pytest.fixture(scope="module")
def small():
    return D.synth(D.SynthConfig(n=400, seed=3))


def test_default_schema_has_34_unique_features():
    s = D.default_schema()
    assert len(s) == 34
    assert len(set(s.names)) == 34
    for name in ("LSBP", "RSBP", "Ht", "Wt", "HbA1c", "Sm", "Exs", "TC"):
        assert name in s.names
    assert s.fingerprint() == D.default_schema().fingerprint()
    assert s.subset([0, 1]).fingerprint() != s.fingerprint()


def test_normal_range_only_on_continuous():
    with pytest.raises(ConfigurationError):
        D.FeatureDef("X", D.BINARY, normal_range=(0, 1))
    with pytest.raises(ConfigurationError):
        D.FeatureSchema((D.FeatureDef("A", D.CONTINUOUS),
                         D.FeatureDef("A", D.BINARY)))


def test_synth_reproduces_paper_class_counts():
    ds = D.synth()
    assert len(ds) == 20531
    assert tuple(ds.class_counts()) == (7221, 5868, 5475, 1967)
    # stroke : non-stroke is "nearly 1:10"
    ratio = ds.stroke.sum() / (len(ds) - ds.stroke.sum())
    assert 0.09 < ratio < 0.12


def test_synth_class_counts_follow_ratios_within_rounding():
    ds = D.synth(D.SynthConfig(n=1000, class_ratios=(1, 2, 3, 4)))
    np.testing.assert_array_equal(ds.class_counts(), [100, 200, 300, 400])
    ds = D.synth(D.SynthConfig(n=997, class_ratios=(1, 1, 1, 1)))
    counts = ds.class_counts()
    assert counts.sum() == 997 and counts.max() - counts.min() <= 1


def test_synth_is_deterministic(small):
    again = D.synth(D.SynthConfig(n=400, seed=3))
    assert D.csv_text(small) == D.csv_text(again)
    other = D.synth(D.SynthConfig(n=400, seed=4))
    assert D.csv_text(small) != D.csv_text(other)


def test_noiseless_linear_rule_is_a_threshold_function():
    cfg = D.SynthConfig(n=2000, interaction_strength=0.0, noise=0.0, seed=11)
    ds = D.synth(cfg)
    score, attack_score = D.planted_scores(ds.X, cfg, ds.schema)
    np.testing.assert_array_equal(score, attack_score)
    order = np.argsort(score, kind="stable")
    labels = ds.risk_state[order]
    # low < medium < high < attack along the linear score
    assert np.all(np.diff(labels) >= 0)

    # only the five causal features matter
    X = ds.X.copy()
    others = [j for j, n in enumerate(ds.schema.names)
              if n not in D.CAUSAL_FEATURES]
    X[:, others] = 0.0
    np.testing.assert_allclose(D.planted_scores(X, cfg, ds.schema)[0], score)


def test_noise_changes_labels_but_not_counts():
    clean = D.synth(D.SynthConfig(n=2000, noise=0.0))
    noisy = D.synth(D.SynthConfig(n=2000, noise=0.2))
    np.testing.assert_array_equal(clean.class_counts(), noisy.class_counts())
    changed = (clean.risk_state != noisy.risk_state).mean()
    assert 0.05 < changed <= 0.2


@pytest.mark.parametrize("kw", [dict(n=39), dict(noise=1.5),
                                dict(class_ratios=(1, 2, 3)),
                                dict(class_ratios=(1, 0, 1, 1)),
                                dict(interaction_strength=-1)])
def test_synth_preconditions(kw):
    with pytest.raises(ConfigurationError):
        D.synth(D.SynthConfig(**kw))


def test_dataset_validates_shapes_and_labels():
    s = D.default_schema()
    with pytest.raises(ShapeError):
        D.Dataset(s, np.zeros((3, 5)), np.zeros(3))
    with pytest.raises(DataError):
        D.Dataset(s, np.zeros((2, 34)), np.array([0, 4]))
    ds = D.Dataset(s, np.zeros((2, 34)), np.array([0, 3]))
    np.testing.assert_array_equal(ds.stroke, [0, 1])
    with pytest.raises(ValueError):
        ds.X[0, 0] = 1.0


# -- CSV -----------------------------------------------------------------------

def test_csv_round_trip_is_field_for_field(tmp_path, small):
    path = tmp_path / "d.csv"
    D.write_csv(small, path)
    text = path.read_text()
    back = D.load_csv(path)
    assert D.csv_text(back) == text
    np.testing.assert_array_equal(np.isnan(back.X), np.isnan(small.X))


def test_csv_keeps_full_precision(tmp_path):
    s = D.default_schema()
    X = np.full((1, 34), 1.0 / 3.0)
    X[0, 5] = np.nan
    ds = D.Dataset(s, X, np.array([2]))
    path = tmp_path / "p.csv"
    D.write_csv(ds, path)
    back = D.load_csv(path)
    assert back.X[0, 0] == 1.0 / 3.0
    assert math.isnan(back.X[0, 5])


def _write(tmp_path, header, rows):
    path = tmp_path / "bad.csv"
    path.write_text("\n".join([",".join(header)] + rows) + "\n")
    return path


def test_load_csv_reports_row_and_column(tmp_path):
    s = D.default_schema()
    header = s.names + ["risk_state"]
    good = ",".join(["1"] * 34 + ["0"])
    bad = ",".join(["1"] * 5 + ["abc"] + ["1"] * 28 + ["0"])
    with pytest.raises(DataError) as exc:
        D.load_csv(_write(tmp_path, header, [good, bad]), s)
    assert exc.value.row == 3 and exc.value.column == s.names[5]
    assert "row 3" in str(exc.value)

    with pytest.raises(DataError) as exc:
        D.load_csv(_write(tmp_path, header, [",".join(["1"] * 34 + ["7"])]), s)
    assert exc.value.column == "risk_state"

    with pytest.raises(DataError) as exc:
        D.load_csv(_write(tmp_path, header[:-2] + ["zzz", "risk_state"],
                          [good]), s)
    assert exc.value.row == 1


# -- imputation / normalization --------------------------------------------------

def _tiny(cols, kinds, labels=None):
    schema = D.FeatureSchema(tuple(D.FeatureDef(f"f{i}", k)
                                   for i, k in enumerate(kinds)))
    X = np.array(cols, dtype=float).T
    return D.Dataset(schema, X, np.zeros(X.shape[0], int)
                     if labels is None else labels)


def test_binary_missing_gets_mode():
    ds = _tiny([[1, 1, 0, np.nan]], [D.BINARY])
    np.testing.assert_array_equal(D.impute(ds).X[:, 0], [1, 1, 0, 1])


def test_continuous_missing_gets_mean():
    ds = _tiny([[1.0, 2.0, np.nan, 6.0]], [D.CONTINUOUS])
    np.testing.assert_array_equal(D.impute(ds).X[:, 0], [1, 2, 3, 6])


def test_no_missing_is_identity(small):
    full = D.impute(small)
    again = D.impute(full)
    np.testing.assert_array_equal(full.X, again.X)


def test_imputation_never_alters_observed_cells(small):
    out = D.impute(small)
    seen = ~np.isnan(small.X)
    np.testing.assert_array_equal(out.X[seen], small.X[seen])
    assert not np.isnan(out.X).any()


def test_stats_come_from_training_split_only(small):
    train, test = D.split(small, 0.25, seed=1)
    tr, te = D.prepare(train, test)
    np.testing.assert_array_equal(tr.stats.mean, D.fit_stats(train).mean)
    assert te.stats is tr.stats
    cont = np.array(small.schema.kinds) == D.CONTINUOUS
    np.testing.assert_allclose(tr.X[:, cont].mean(axis=0), 0, atol=1e-9)
    codes = ~cont
    np.testing.assert_array_equal(np.unique(tr.X[:, codes]),
                                  np.unique(D.impute(train).X[:, codes]))


def test_entirely_missing_column_is_rejected():
    ds = _tiny([[np.nan, np.nan]], [D.CONTINUOUS])
    with pytest.raises(ConfigurationError):
        D.fit_stats(ds)


def test_preprocessor_matches_functional_path(small):
    pre = D.Preprocessor().fit(small.X)
    np.testing.assert_allclose(pre.transform(small.X), D.prepare(small)[0].X)
    assert pre.get_params() == {"kinds": None}
    with pytest.raises(ShapeError):
        pre.transform(small.X[:, :5])


def test_reference_point_uses_means_and_modes():
    X = np.array([[0.0, 1.0, 2.0], [1.0, 1.0, 4.0], [1.0, 0.0, 9.0]])
    kinds = D.infer_kinds(X)
    assert kinds == (D.BINARY, D.BINARY, D.CATEGORICAL)
    np.testing.assert_allclose(D.reference_point(X), [1.0, 1.0, 2.0])
    np.testing.assert_allclose(
        D.reference_point(X, [D.CONTINUOUS] * 3), X.mean(axis=0))


# -- split ---------------------------------------------------------------------------

def test_balanced_split_is_exact():
    y = np.repeat(np.arange(4), 25)
    tr, te = D.stratified_indices(y, 0.2, seed=0)
    assert te.size == 20
    np.testing.assert_array_equal(np.bincount(y[te]), [5, 5, 5, 5])
    assert np.intersect1d(tr, te).size == 0


def test_split_is_deterministic(small):
    a = D.split(small, 0.15, seed=9)[1].sample_ids
    b = D.split(small, 0.15, seed=9)[1].sample_ids
    np.testing.assert_array_equal(a, b)


def test_split_rejects_tiny_classes():
    with pytest.raises(StratificationError):
        D.stratified_indices(np.array([0, 0, 1, 1, 2]), 0.5, seed=0)
    with pytest.raises(ConfigurationError):
        D.stratified_indices(np.array([0, 0]), 1.0, seed=0)


def test_paper_supports_at_matching_fraction():
    # The four Table 1 supports imply per-class fractions between 0.1501
    # and 0.1519, so one stratified fraction cannot hit all four within 1.
    y = np.repeat(np.arange(4), D.PAPER_CLASS_COUNTS)
    f = 3080 / 20531
    _, te = D.stratified_indices(y, f, seed=0)
    got = np.bincount(y[te])
    expected = np.floor(f * np.array(D.PAPER_CLASS_COUNTS) + 0.5)
    np.testing.assert_array_equal(got, expected)
    assert abs(int(got.sum()) - 3080) <= 2


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(2, 60), min_size=1, max_size=5),
       frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**16))
def test_stratified_share_within_one_sample(counts, frac, seed):
    y = np.repeat(np.arange(len(counts)), counts)
    tr, te = D.stratified_indices(y, frac, seed)
    assert tr.size + te.size == y.size
    got = np.bincount(y[te], minlength=len(counts))
    for c, n in enumerate(counts):
        assert 1 <= got[c] <= n - 1
        assert abs(got[c] - frac * n) <= 1 or got[c] in (1, n - 1)
