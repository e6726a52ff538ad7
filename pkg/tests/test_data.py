import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qjfuse.data import (Coupling, Dataset, DatasetManifest, SchemaError, SyntheticSpec, generate_synthetic,
                         iter_batches, load_jsonl, load_splits, mask_features, save_splits, score_to_class,
                         split_and_batch, split_dataset, unit_directions, write_jsonl)

DIMS = {"m1": 8, "m2": 8, "m3": 8}


def xor(n=1000, noise=0.3, seed=0, dims=DIMS):
    return generate_synthetic(SyntheticSpec(n, dims, Coupling.XOR_JOINT, noise, seed))


def projections(ds, seed=0):
    dirs = unit_directions(ds.modalities, seed)
    return {k: ds.features[k] @ dirs[k] for k in ds.features}


def binned_mi(x, y, bins=20):
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    xb = np.searchsorted(edges, x)
    joint = np.zeros((bins, 2))
    np.add.at(joint, (xb, y), 1)
    joint /= joint.sum()
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def test_synthetic_is_bit_reproducible():
    a, b = xor(seed=3), xor(seed=3)
    assert a.ids == b.ids
    for k in DIMS:
        assert a.features[k].tobytes() == b.features[k].tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(xor(seed=4).features["m1"], a.features["m1"])


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(noise=-0.1)
    with pytest.raises(ValueError):
        SyntheticSpec(n_samples=0)
    with pytest.raises(ValueError):
        SyntheticSpec(dims={"m1": 4}, coupling="xor_joint")


def test_noiseless_xor_bayes_accuracies():
    ds = xor(n=2000, noise=0.0)
    proj = projections(ds)
    bits = {k: (proj[k] > 0).astype(int) for k in ("m1", "m2")}
    # given one modality the label is a fair coin; the pair determines it
    for k, b in bits.items():
        for v in (0, 1):
            assert abs(ds.labels[b == v].mean() - 0.5) < 0.05
    np.testing.assert_array_equal(bits["m1"] ^ bits["m2"], ds.labels)


def test_noiseless_marginal_is_single_modality_solvable():
    ds = generate_synthetic(SyntheticSpec(500, DIMS, Coupling.MARGINAL, 0.0, 1))
    for k, p in projections(ds, 1).items():
        np.testing.assert_array_equal((p > 0).astype(int), ds.labels)


def test_noisy_xor_joint_oracle_accuracy():
    ds = xor(n=4000, noise=0.3, dims={"m1": 32, "m2": 32, "m3": 32})
    proj = projections(ds)
    pred = (proj["m1"] > 0).astype(int) ^ (proj["m2"] > 0).astype(int)
    assert (pred == ds.labels).mean() >= 0.95


def test_single_modality_mutual_information_is_small():
    ds = xor(n=10_000, noise=0.3)
    for k, p in projections(ds).items():
        assert binned_mi(p, ds.labels) < 0.02, k


# ------------------------------------------------------------------ JSONL


def test_jsonl_round_trip_is_bit_exact(tmp_path):
    ds = xor(n=50)
    ds.scores = np.linspace(-3, 3, 50)
    write_jsonl(tmp_path / "d.jsonl", ds)
    back = load_jsonl(tmp_path / "d.jsonl", ds.modalities, 2)
    assert back.ids == ds.ids
    for k in DIMS:
        assert back.features[k].tobytes() == ds.features[k].tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.scores.tobytes() == ds.scores.tobytes()


def test_empty_file_gives_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    ds = load_jsonl(tmp_path / "e.jsonl", {"a": 3}, 2)
    assert len(ds) == 0 and ds.features["a"].shape == (0, 3)


def write_lines(path, objs):
    path.write_text("\n".join(o if isinstance(o, str) else json.dumps(o) for o in objs) + "\n")


@pytest.mark.parametrize("bad, message", [
    ({"id": "x", "label": 0, "features": {"a": [1, 2]}}, "missing modality 'b'"),
    ({"id": "x", "label": 0, "features": {"a": [1, 2], "b": [1], "c": [0]}}, "unknown modality 'c'"),
    ({"id": "x", "label": 0, "features": {"a": [1, 2, 3], "b": [1]}}, "modality 'a' has dim"),
    ({"id": "x", "label": 5, "features": {"a": [1, 2], "b": [1]}}, "label 5"),
    ("{not json", "malformed JSON"),
])
def test_schema_errors_name_the_line(tmp_path, bad, message):
    good = {"id": "ok", "label": 1, "features": {"a": [0.5, 1.0], "b": [2.0]}}
    write_lines(tmp_path / "f.jsonl", [good, bad])
    with pytest.raises(SchemaError) as err:
        load_jsonl(tmp_path / "f.jsonl", {"a": 2, "b": 1}, 2)
    assert ":2:" in str(err.value) and message in str(err.value)


def test_score_only_records_are_binned(tmp_path):
    write_lines(tmp_path / "s.jsonl", [{"id": i, "score": s, "features": {"a": [0.0]}}
                                       for i, s in enumerate([-2.6, -0.4, 0.0, 1.2, 3.0])])
    ds = load_jsonl(tmp_path / "s.jsonl", {"a": 1}, 7)
    np.testing.assert_array_equal(ds.labels, [0, 3, 3, 4, 6])
    assert [score_to_class(s, 2) for s in (-0.1, 0.0, 2.0)] == [0, 1, 1]
    assert [score_to_class(s, 3) for s in (-1.0, 0.0, 0.5)] == [0, 1, 2]


def test_sequence_features_are_mean_pooled(tmp_path):
    write_lines(tmp_path / "q.jsonl", [{"id": "a", "label": 0, "features": {"v": [[1.0, 2.0], [3.0, 4.0]]}}])
    np.testing.assert_array_equal(load_jsonl(tmp_path / "q.jsonl", {"v": 2}, 2).features["v"], [[2.0, 3.0]])


def test_manifest_round_trip(tmp_path):
    splits = split_dataset(xor(n=100), seed=2)
    path = save_splits(tmp_path / "ds", splits)
    assert json.loads(path.read_text())["format"] == "qjd1"
    back = load_splits(path)
    assert {k: len(v) for k, v in back.items()} == {"train": 80, "valid": 10, "test": 10}
    assert back["test"].features["m2"].tobytes() == splits["test"].features["m2"].tobytes()
    obj = json.loads(path.read_text())
    obj["format"] = "qjd0"
    path.write_text(json.dumps(obj))
    with pytest.raises(SchemaError):
        DatasetManifest.load(path)


def test_manifest_size_mismatch_is_an_error(tmp_path):
    path = save_splits(tmp_path, split_dataset(xor(n=100)))
    obj = json.loads(path.read_text())
    obj["sizes"]["train"] = 81
    path.write_text(json.dumps(obj))
    with pytest.raises(SchemaError):
        load_splits(path)


def test_dataset_rejects_ragged_modalities():
    with pytest.raises(SchemaError):
        Dataset(["a", "b"], {"x": np.zeros((3, 2))}, [0, 1])


# ------------------------------------------------------------------ masking


def test_mask_rate_examples():
    ds = generate_synthetic(SyntheticSpec(20, {"a": 10, "b": 7}, "marginal", 0.3, 0))
    same = mask_features(ds, 0.0, 1)
    for k in ds.features:
        np.testing.assert_array_equal(same.features[k], ds.features[k])
    allz = mask_features(ds, 1.0, 1)
    assert all(np.all(v == 0) for v in allz.features.values())
    m = mask_features(ds, 0.3, 1)
    assert np.all((m.features["a"] == 0).sum(1) == 3)
    assert np.all((m.features["b"] == 0).sum(1) == 2)
    with pytest.raises(ValueError):
        mask_features(ds, 1.2, 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
def test_masking_only_zeroes_entries(rate, seed):
    ds = xor(n=30)
    m = mask_features(ds, rate, seed)
    assert m.ids == ds.ids
    np.testing.assert_array_equal(m.labels, ds.labels)
    for k, x in ds.features.items():
        changed = m.features[k] != x
        assert np.all(m.features[k][changed] == 0)
        assert np.all(changed.sum(1) <= int(np.floor(rate * x.shape[1] + 1e-9)))
    again = mask_features(ds, rate, seed)
    for k in ds.features:
        np.testing.assert_array_equal(again.features[k], m.features[k])


def test_mask_does_not_depend_on_dataset_order():
    ds = xor(n=40)
    rev = ds.subset(np.arange(40)[::-1])
    a, b = mask_features(ds, 0.5, 9), mask_features(rev, 0.5, 9)
    np.testing.assert_array_equal(a.features["m1"], b.features["m1"][::-1])


# ------------------------------------------------------------------ splits


def test_split_sizes_and_membership():
    ds = xor(n=100)
    s1, s2 = split_dataset(ds, (0.8, 0.1, 0.1), seed=5), split_dataset(ds, (0.8, 0.1, 0.1), seed=5)
    assert [len(s1[k]) for k in ("train", "valid", "test")] == [80, 10, 10]
    for k in s1:
        assert s1[k].ids == s2[k].ids
    assert sorted(sum((s1[k].ids for k in s1), [])) == ds.ids
    with pytest.raises(ValueError):
        split_dataset(ds, (0.5, 0.4))
    with pytest.raises(ValueError):
        split_dataset(xor(n=5), (0.8, 0.1, 0.1))


def test_batches_keep_the_last_partial_batch():
    splits, batches = split_and_batch(xor(n=125), (0.8, 0.1, 0.1), 32, seed=0)
    assert len(splits["train"]) == 100
    e0 = list(batches(0))
    assert [len(b) for b in e0] == [32, 32, 32, 4]
    e1 = list(batches(1))
    assert sorted(np.concatenate(e0)) == sorted(np.concatenate(e1)) == list(range(100))
    assert not np.array_equal(np.concatenate(e0), np.concatenate(e1))
    np.testing.assert_array_equal(np.concatenate(list(batches(0))), np.concatenate(e0))
    assert [len(b) for b in iter_batches(xor(n=13), 4)] == [4, 4, 4, 1]
