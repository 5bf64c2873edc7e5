import json

import numpy as np
import pytest

from reduxpll import data
from reduxpll.errors import ConfigError, DataError, ParseError


def test_generator_shapes_and_invariants():
    ds = data.gen_gaussian_mixture(5, 2, 200, 2.5, seed=0)
    assert (ds.n, ds.q, ds.c) == (200, 2, 5)
    assert np.abs(np.asarray(ds.posterior).sum(axis=1) - 1.0).max() < 1e-12
    # pre-corruption candidates are the bare true labels
    assert np.all(ds.candidates.sum(axis=1) == 1)
    assert np.all(ds.candidates[np.arange(ds.n), ds.true_labels])


def test_generator_is_deterministic():
    a = data.gen_gaussian_mixture(4, 3, 100, 2.0, seed=11)
    b = data.gen_gaussian_mixture(4, 3, 100, 2.0, seed=11)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.true_labels, b.true_labels)


def test_huge_separation_gives_one_hot_posteriors():
    ds = data.gen_gaussian_mixture(5, 2, 1000, 50.0, seed=1)
    assert np.asarray(ds.posterior).max(axis=1).min() > 1.0 - 1e-6


def test_posterior_symmetric_at_midpoint_of_two_components():
    mixture = data.GaussianMixture(
        means=np.array([[0.0, 0.0], [4.0, 0.0], [100.0, 100.0]]),
        scales=np.ones(3),
    )
    eta = mixture.posterior(np.array([2.0, 0.0]))
    assert abs(eta[0] - eta[1]) < 1e-9


def test_mean_posterior_matches_uniform_class_prior():
    ds = data.gen_gaussian_mixture(5, 2, 10_000, 2.5, seed=2)
    mean_eta = np.asarray(ds.posterior).mean(axis=0)
    assert np.abs(mean_eta - 0.2).max() < 0.02


def test_generator_rejects_tiny_n():
    with pytest.raises(ConfigError):
        data.gen_gaussian_mixture(5, 2, 3, 2.5, seed=0)


# -- corruption -----------------------------------------------------------------

def _uncorrupted(n=400, seed=0, separation=2.5):
    return data.gen_gaussian_mixture(5, 2, n, separation, seed=seed)


def test_corruption_keeps_true_label_and_legal_sizes():
    ds = data.corrupt_instance_dependent(_uncorrupted(), 0.5, seed=3)
    data.validate_dataset(ds, require_posterior=True)
    assert np.all(ds.candidates[np.arange(ds.n), ds.true_labels])
    sizes = ds.candidates.sum(axis=1)
    assert sizes.min() >= 2 and sizes.max() <= ds.c - 1


def test_corruption_with_full_ambiguity_always_includes_top_incorrect_label():
    ds = data.corrupt_instance_dependent(_uncorrupted(), 1.0, seed=4)
    post = np.asarray(ds.posterior)
    for i in range(ds.n):
        eta = post[i].copy()
        eta[ds.true_labels[i]] = -np.inf
        top_wrong = int(np.argmax(eta))
        size = ds.candidates[i].sum()
        if size < ds.c - 1 or ds.candidates[i, top_wrong]:
            assert ds.candidates[i, top_wrong]


def test_corruption_near_onehot_posterior_forces_pair_sets():
    # peaked posteriors leave flips improbable, so the repair path dominates
    ds = data.gen_gaussian_mixture(5, 2, 1000, 25.0, seed=5)
    out = data.corrupt_instance_dependent(ds, 0.1, seed=5)
    assert (out.candidates.sum(axis=1) == 2).mean() >= 0.95


def test_mean_candidate_count_grows_with_ambiguity():
    base = _uncorrupted(n=1000, separation=1.8)
    means = [
        data.corrupt_instance_dependent(base, amb, seed=6).candidates.sum(axis=1).mean()
        for amb in (0.1, 0.3, 0.5)
    ]
    assert means[0] < means[1] < means[2]


def test_corruption_is_pure_in_seed():
    base = _uncorrupted()
    a = data.corrupt_instance_dependent(base, 0.5, seed=7)
    b = data.corrupt_instance_dependent(base, 0.5, seed=7)
    assert np.array_equal(a.candidates, b.candidates)
    c = data.corrupt_instance_dependent(base, 0.5, seed=8)
    assert not np.array_equal(a.candidates, c.candidates)


def test_corruption_requires_posterior_and_valid_ambiguity():
    base = _uncorrupted()
    stripped = data.PllDataset(base.features, base.candidates, base.true_labels, None)
    with pytest.raises(ConfigError):
        data.corrupt_instance_dependent(stripped, 0.5, seed=0)
    with pytest.raises(ConfigError):
        data.corrupt_instance_dependent(base, 0.0, seed=0)


# -- validator --------------------------------------------------------------------

def _tiny_dataset():
    return data.PllDataset(
        features=np.zeros((3, 2)),
        candidates=np.array(
            [[True, True, False], [True, False, True], [False, True, True]]
        ),
        true_labels=np.array([0, 0, 1]),
        posterior=np.full((3, 3), 1 / 3),
    )


def test_validator_accepts_legal_dataset():
    data.validate_dataset(_tiny_dataset())


def test_validator_rejects_empty_and_full_sets():
    ds = _tiny_dataset()
    ds.candidates[1] = False
    with pytest.raises(DataError) as err:
        data.validate_dataset(ds)
    assert 1 in err.value.rows

    ds = _tiny_dataset()
    ds.candidates[2] = True
    with pytest.raises(DataError):
        data.validate_dataset(ds)


def test_validator_rejects_missing_true_label():
    ds = _tiny_dataset()
    ds.true_labels[0] = 2
    with pytest.raises(DataError) as err:
        data.validate_dataset(ds)
    assert 0 in err.value.rows


def test_validator_rejects_bare_singleton_unless_supervised():
    ds = _tiny_dataset()
    ds.candidates[0] = [True, False, False]
    with pytest.raises(DataError):
        data.validate_dataset(ds)
    data.validate_dataset(ds, allow_supervised=True)


def test_validator_rejects_nonfinite_features_and_bad_posterior():
    ds = _tiny_dataset()
    ds.features[2, 0] = np.inf
    with pytest.raises(DataError):
        data.validate_dataset(ds)

    ds = _tiny_dataset()
    ds.posterior[0] = [0.9, 0.9, 0.9]
    with pytest.raises(DataError):
        data.validate_dataset(ds)


# -- csv round trip ----------------------------------------------------------------

def test_csv_round_trip_is_exact(tmp_path):
    ds = data.corrupt_instance_dependent(_uncorrupted(n=50), 0.5, seed=9)
    path = tmp_path / "ds.csv"
    data.save_csv(ds, path)
    loaded = data.load_csv(path)
    assert np.array_equal(loaded.features, ds.features)
    assert np.array_equal(loaded.candidates, ds.candidates)
    assert np.array_equal(loaded.true_labels, ds.true_labels)
    assert np.array_equal(loaded.posterior, ds.posterior)
    # a second save reproduces the file byte for byte
    path2 = tmp_path / "ds2.csv"
    data.save_csv(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_csv_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,x1,candidates,label\n0.0,0.0,\"0,1\",0\n0.0,nope,\"0,1\",0\n")
    with pytest.raises(ParseError) as err:
        data.load_csv(path)
    assert ":3" in str(err.value)


def test_csv_invariant_violation_reported_on_load(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,x1,candidates,label\n0.0,0.0,\"1\",0\n")
    with pytest.raises(DataError):
        data.load_csv(path, c=3)


def test_manifest_checksum_matches_file(tmp_path):
    ds = data.corrupt_instance_dependent(_uncorrupted(n=30), 0.5, seed=10)
    csv_path = tmp_path / "ds.csv"
    data.save_csv(ds, csv_path)
    manifest_path = tmp_path / "manifest.json"
    data.write_manifest(manifest_path, ds, csv_path, ambiguity=0.5, seed=10)
    manifest = json.loads(manifest_path.read_text())
    assert manifest["checksum"] == data.file_checksum(csv_path)
    assert manifest["n"] == 30 and manifest["c"] == 5 and manifest["q"] == 2


# -- splitting ----------------------------------------------------------------------

def test_split_sizes_exact_for_even_fractions():
    ds = data.corrupt_instance_dependent(_uncorrupted(n=1000), 0.5, seed=11)
    train, val, test = data.split(ds, data.SplitSpec(seed=0))
    assert (train.n, val.n, test.n) == (800, 100, 100)


def test_split_is_disjoint_and_deterministic():
    ds = data.corrupt_instance_dependent(_uncorrupted(n=500), 0.5, seed=12)
    a = data.split(ds, data.SplitSpec(seed=3))
    b = data.split(ds, data.SplitSpec(seed=3))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.features, pb.features)
    seen = np.concatenate([p.features[:, 0] for p in a])
    assert seen.size == ds.n
    assert np.unique(seen).size == np.unique(ds.features[:, 0]).size


def test_split_stratification_within_one_of_ideal():
    ds = data.corrupt_instance_dependent(_uncorrupted(n=1000), 0.5, seed=13)
    spec = data.SplitSpec(seed=1)
    parts = data.split(ds, spec)
    fracs = (spec.train, spec.val, spec.test)
    for cls in range(ds.c):
        total = int((ds.true_labels == cls).sum())
        for part, frac in zip(parts, fracs):
            got = int((part.true_labels == cls).sum())
            assert abs(got - frac * total) <= 1.0


def test_split_handles_unlabeled_datasets():
    ds = data.corrupt_instance_dependent(_uncorrupted(n=200), 0.5, seed=14)
    unlabeled = data.PllDataset(ds.features, ds.candidates, None, None)
    train, val, test = data.split(unlabeled, data.SplitSpec(seed=0))
    assert (train.n, val.n, test.n) == (160, 20, 20)


def test_split_rejects_bad_fractions():
    ds = _tiny_dataset()
    with pytest.raises(ConfigError):
        data.split(ds, data.SplitSpec(train=0.9, val=0.2, test=0.1))
    with pytest.raises(ConfigError):
        data.split(ds, data.SplitSpec(train=1.0, val=-0.1, test=0.1))


def test_allocator_is_exact_over_random_class_profiles():
    rng = np.random.default_rng(15)
    fracs = (0.8, 0.1, 0.1)
    for _ in range(200):
        counts = [int(rng.integers(1, 40)) for _ in range(int(rng.integers(1, 8)))]
        alloc = data._allocate_stratified(counts, fracs)
        n = sum(counts)
        targets = data._largest_remainder(n, fracs)
        assert [sum(col) for col in zip(*alloc)] == targets
        for cnt, row in zip(counts, alloc):
            assert sum(row) == cnt
            for frac, got in zip(fracs, row):
                assert abs(got - frac * cnt) <= 1.0
