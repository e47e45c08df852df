import json
import warnings

import numpy as np
import pytest

from balmm import data as dt
from balmm.baseline import LogisticConfig, fit_logistic, format_mean_std, format_table, logistic_baseline, modality_combinations, predict_proba
from balmm.metrics import macro_f1

TABLE1_COUNTS = [112, 53, 248, 98]


def count_oracle(n, fractions):
    val = max(1, int(n * fractions[1]))
    test = max(1, int(n * fractions[2]))
    while n - val - test < 1:
        if val >= test:
            val -= 1
        else:
            test -= 1
    return n - val - test, val, test


def test_split_disjoint_covering_stratified_and_counted():
    labels = np.repeat(np.arange(4), TABLE1_COUNTS)
    masks = dt.stratified_split(labels, (0.6, 0.2, 0.2), seed=3)
    stack = np.stack([masks.train, masks.val, masks.test]).astype(int)
    assert (stack.sum(axis=0) == 1).all()
    for c, n in enumerate(TABLE1_COUNTS):
        got = tuple(int((m & (labels == c)).sum()) for m in (masks.train, masks.val, masks.test))
        assert got == count_oracle(n, (0.6, 0.2, 0.2))
        assert min(got) >= 1


def test_split_small_class_and_bad_fractions():
    with pytest.raises(ValueError, match="class 1"):
        dt.stratified_split(np.array([0, 0, 0, 1, 1]))
    with pytest.raises(ValueError):
        dt.stratified_split(np.zeros(10, int), (0.5, 0.5, 0.1))
    assert dt.split_counts(3, (0.6, 0.2, 0.2)) == (1, 1, 1)


def test_split_deterministic():
    labels = np.repeat(np.arange(3), 20)
    a, b = dt.stratified_split(labels, seed=5), dt.stratified_split(labels, seed=5)
    np.testing.assert_array_equal(a.train, b.train)


def test_pca_exact_on_low_rank():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 4)) @ rng.normal(size=(4, 30))
    r = dt.reduce_features(x, 6, "pca")
    assert r.meta["reconstruction_mse"] < 1e-20
    assert r.values.shape == (80, 6)


def test_autoencoder_not_better_than_pca_and_close_at_convergence():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 5)) @ rng.normal(size=(5, 20)) + 0.3 * rng.normal(size=(60, 20))
    mask = np.arange(60) < 40
    pca = dt.reduce_features(x, 3, "pca", mask).meta["reconstruction_mse"]
    ae = dt.reduce_features(x, 3, "autoencoder", mask, seed=0, epochs=3000, learning_rate=0.01).meta["reconstruction_mse"]
    assert ae >= pca - 1e-6
    assert ae <= pca * 1.05


def test_autoencoder_wide_input_uses_span():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 200))
    r = dt.reduce_features(x, 5, "autoencoder", np.arange(30) < 20, seed=0, epochs=50)
    assert r.values.shape == (30, 5) and np.isfinite(r.values).all()


def test_reduction_passthrough_and_order():
    x = np.arange(12.0).reshape(4, 3)
    with pytest.warns(UserWarning, match="passing through"):
        r = dt.reduce_features(x, 3)
    np.testing.assert_array_equal(r.values, x)
    with pytest.raises(ValueError):
        dt.reduce_features(x, 2, "tsne")


def test_generator_defaults_and_determinism():
    spec = dt.SyntheticSpec(modalities=[dt.ModalitySpec("a", 5), dt.ModalitySpec("b", 3, snr=0.0)], seed=4)
    a, b = dt.generate_synthetic(spec), dt.generate_synthetic(spec)
    assert a.n == 511 and np.bincount(a.labels).tolist() == TABLE1_COUNTS
    for m, n in zip(a.modalities, b.modalities):
        np.testing.assert_array_equal(m.values, n.values)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert dt.SyntheticSpec().class_counts == TABLE1_COUNTS
    assert [m.dim for m in dt.SyntheticSpec().modalities] == [19580, 19273, 223]


def test_spec_rejects_unknown_keys():
    with pytest.raises(KeyError, match="colour"):
        dt.SyntheticSpec.from_dict({"colour": 1})
    with pytest.raises(KeyError, match="noise"):
        dt.SyntheticSpec.from_dict({"modalities": [{"name": "a", "dim": 3, "noise": 1}]})
    spec = dt.SyntheticSpec.from_dict({"modalities": [{"name": "a", "dim": 3}], "seed": 2})
    assert dt.SyntheticSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        dt.SyntheticSpec(class_counts=[2, 5], class_names=["a", "b"]).validate()


def unimodal_f1(snr, seed, dim=30):
    ds = dt.generate_synthetic(dt.SyntheticSpec(modalities=[dt.ModalitySpec("x", dim, snr, 1.0, 0.8)], seed=seed))
    masks = dt.stratified_split(ds.labels, seed=seed)
    x = dt.standardize(ds.modalities[0].values, masks.train)
    pred = predict_proba(fit_logistic(x, ds.labels, masks.train, 4), x).argmax(axis=1)
    return macro_f1(ds.labels[masks.test], pred[masks.test], 4)


def test_zero_snr_modality_scores_near_chance():
    f = [unimodal_f1(0.0, s) for s in range(20)]
    assert abs(np.mean(f) - 0.25) <= 0.08


def test_snr_monotonicity():
    grid = [0.25, 1.0, 2.0]
    stats = [(np.mean(f), np.std(f)) for f in ([unimodal_f1(s, seed) for seed in range(20)] for s in grid)]
    for (m0, s0), (m1, _) in zip(stats, stats[1:]):
        assert m1 >= m0 - s0


def write_csv(path, ids, values, header=None):
    cols = header or [f"f{j}" for j in range(len(values[0]))]
    lines = ["sample_id," + ",".join(cols)] + [f"{i}," + ",".join(map(str, row)) for i, row in zip(ids, values)]
    path.write_text("\n".join(lines) + "\n")


def test_csv_loading_intersection_and_errors(tmp_path):
    ids = [f"P{i:02d}" for i in range(20)]
    rng = np.random.default_rng(0)
    write_csv(tmp_path / "a.csv", ids, rng.normal(size=(20, 3)).tolist())
    write_csv(tmp_path / "b.csv", ids[::-1], rng.normal(size=(20, 2)).tolist())
    (tmp_path / "labels.csv").write_text("sample_id,label\n" + "".join(f"{i},{'LumA' if k % 2 else 'Basal'}\n" for k, i in enumerate(ids)))
    ds = dt.load_csv_dataset({"a": tmp_path / "a.csv", "b": tmp_path / "b.csv"}, tmp_path / "labels.csv")
    assert ds.n == 20 and ds.sample_ids == sorted(ids) and ds.class_names == ["Basal", "LumA"]

    write_csv(tmp_path / "c.csv", ids[10:], rng.normal(size=(10, 2)).tolist())
    with pytest.warns(UserWarning, match="dropped 10"):
        ds = dt.load_csv_dataset({"a": tmp_path / "a.csv", "c": tmp_path / "c.csv"}, tmp_path / "labels.csv")
    assert ds.n == 10

    rows = rng.normal(size=(20, 2)).tolist()
    rows[4][1] = "oops"
    write_csv(tmp_path / "bad.csv", ids, rows)
    with pytest.raises(dt.DatasetError, match=r"bad.csv.*row 6.*'f1'"):
        dt.load_csv_dataset({"bad": tmp_path / "bad.csv"}, tmp_path / "labels.csv")

    write_csv(tmp_path / "other.csv", [f"Q{i}" for i in range(5)], rng.normal(size=(5, 2)).tolist())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(dt.DatasetError, match="no sample ID"):
            dt.load_csv_dataset({"a": tmp_path / "a.csv", "o": tmp_path / "other.csv"}, tmp_path / "labels.csv")


def test_dataset_round_trip_and_manifest(tmp_path):
    ds = dt.generate_synthetic(dt.SyntheticSpec(modalities=[dt.ModalitySpec("a", 4), dt.ModalitySpec("b", 2)], seed=1))
    dt.write_dataset_csv(ds, tmp_path)
    back = dt.load_manifest(tmp_path / "manifest.json")
    assert back.sample_ids == ds.sample_ids and back.class_names == ds.class_names
    np.testing.assert_array_equal(back.labels, ds.labels)
    for m, n in zip(ds.modalities, back.modalities):
        np.testing.assert_array_equal(m.values, n.values)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["extra"] = 1
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(dt.DatasetError, match="extra"):
        dt.load_manifest(tmp_path / "manifest.json")


def test_baseline_separable_and_schema():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 30)
    x = np.eye(3)[labels] * 5 + 0.3 * rng.normal(size=(90, 3))
    ds = dt.MultiOmicsDataset([dt.ModalityMatrix("a", x), dt.ModalityMatrix("b", rng.normal(size=(90, 2)))], labels, [str(i) for i in range(90)], ["x", "y", "z"])
    rows = logistic_baseline(ds, LogisticConfig(repeats=3))
    assert [r["modalities"] for r in rows] == ["a", "b", "a+b"]
    assert rows[0]["macro_f1_mean"] >= 0.98
    table = format_table(rows)
    assert set(table[0]) == {"Modalities", "Accuracy", "AUC", "Macro F1"}
    assert format_mean_std(0.83381, 0.034) == "0.8338 ± 0.0340"


def test_duplicated_modality_within_noise():
    ds = dt.generate_synthetic(dt.SyntheticSpec(modalities=[dt.ModalitySpec("a", 20, 0.7)], seed=0))
    dup = dt.MultiOmicsDataset([ds.modalities[0], dt.ModalityMatrix("a2", ds.modalities[0].values)], ds.labels, ds.sample_ids, ds.class_names)
    rows = logistic_baseline(dup, LogisticConfig(repeats=5), combos=[("a",), ("a", "a2")])
    assert abs(rows[0]["macro_f1_mean"] - rows[1]["macro_f1_mean"]) <= 2 * max(rows[0]["macro_f1_std"], 0.01)


def test_modality_combinations():
    assert modality_combinations(["a", "b", "c"]) == [("a",), ("b",), ("c",), ("a", "b"), ("a", "c"), ("b", "c"), ("a", "b", "c")]
