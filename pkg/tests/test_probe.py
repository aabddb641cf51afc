import numpy as np
import pytest

from colld.exceptions import UsageError
from colld.probe import LinearProbe, extract_frozen, split_utterances, train_linear_probe


def gaussian_classes(seed, shuffle=False, n_utt=40, frames=50):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(4, 16)) * 4
    reps, labels = [], []
    for _ in range(n_utt):
        y = rng.integers(0, 4, size=frames)
        reps.append(means[y] + rng.normal(size=(frames, 16)))
        labels.append(rng.permutation(y) if shuffle else y)
    return reps, labels


def test_separable_classes():
    reps, labels = gaussian_classes(0)
    assert train_linear_probe(reps, labels).accuracy > 0.95


def test_shuffled_labels_are_chance():
    reps, labels = gaussian_classes(1, shuffle=True)
    assert train_linear_probe(reps, labels).accuracy == pytest.approx(0.25, abs=0.05)


def test_same_seed_same_result():
    reps, labels = gaussian_classes(2)
    a = train_linear_probe(reps, labels, seed=4)
    assert a == train_linear_probe(reps, labels, seed=4)
    assert a.train_frames + a.test_frames == 40 * 50
    assert set(a.per_class_accuracy) == {0, 1, 2, 3}


def test_single_class_rejected():
    reps = [np.random.default_rng(0).normal(size=(10, 3)) for _ in range(4)]
    with pytest.raises(UsageError):
        train_linear_probe(reps, [np.zeros(10, int)] * 4)
    with pytest.raises(UsageError):
        LinearProbe().fit(reps[0], np.zeros(10, int))


def test_length_mismatch_rejected():
    with pytest.raises(UsageError):
        train_linear_probe([np.zeros((5, 2))], [np.zeros(4)])


def test_split_is_disjoint_and_covering():
    train, test = split_utterances(23, seed=1)
    assert len(test) == 5 and not set(train) & set(test)
    assert sorted([*train, *test]) == list(range(23))
    with pytest.raises(UsageError):
        split_utterances(1, seed=0)


def test_extract_frozen(small_encoder, rng):
    seqs = [rng.normal(size=(n, 12)).astype(np.float32) for n in (7, 11)]
    before = {n: small_encoder.params[n].copy() for n in small_encoder.params}
    reps, labels = extract_frozen(small_encoder, seqs, 2)
    assert [r.shape for r in reps] == [(7, 16), (11, 16)] and labels == [None, None]
    again, _ = extract_frozen(small_encoder, seqs, 2)
    assert all(np.array_equal(a, b) for a, b in zip(reps, again))
    other, _ = extract_frozen(small_encoder, seqs, 3)
    assert not np.allclose(reps[0], other[0])
    assert all(np.array_equal(before[n], small_encoder.params[n]) for n in before)
    with pytest.raises(UsageError):
        extract_frozen(small_encoder, seqs, 4)


def test_extract_frozen_carries_corpus_labels(tiny_pair, tiny_corpus):
    teacher, _ = tiny_pair
    reps, labels = extract_frozen(teacher, tiny_corpus, 1)
    assert len(reps) == len(tiny_corpus)
    assert all(len(r) == len(lab) for r, lab in zip(reps, labels))


def test_linear_probe_estimator():
    reps, labels = gaussian_classes(3, n_utt=10)
    X, y = np.concatenate(reps), np.concatenate(labels)
    probe = LinearProbe(C=0.5)
    assert probe.get_params() == {"C": 0.5, "max_iter": 2000, "tol": 1e-6}
    assert probe.fit(X, y).score(X, y) > 0.95
