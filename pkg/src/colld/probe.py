"""Frozen-feature linear probing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, check_X_y

from .encoder import Encoder, encode
from .exceptions import UsageError
from .features import FeatureSequence
from .rng import stream
from .validation import check_matrix


@dataclass
class ProbeResult:
    accuracy: float
    per_class_accuracy: dict[int, float] = field(default_factory=dict)
    layer: int | None = None
    seed: int = 0
    train_frames: int = 0
    test_frames: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        return d


def extract_frozen(encoder: Encoder, data, layer: int) -> tuple[list[np.ndarray], list]:
    """Block outputs of ``layer`` for each utterance, with their labels (or ``None``).

    ``data`` is a single sequence, a list of sequences, or a corpus yielding
    ``(sequence, labels)`` pairs. Parameters are only read.
    """
    if not 1 <= layer <= encoder.config.layers:
        raise UsageError(f"layer {layer} outside [1, {encoder.config.layers}]")
    if isinstance(data, (FeatureSequence, np.ndarray)):
        items = [(data, None)]
    elif hasattr(data, "input_dim"):
        items = [data[i] for i in range(len(data))]
    else:
        items = [(seq, None) for seq in data]
    reps, labels = [], []
    for seq, lab in items:
        values = seq.values if isinstance(seq, FeatureSequence) else check_matrix(seq)
        taps, _ = encode(encoder, values[None], tap_layers=[layer], tap_kind="block_output")
        reps.append(taps[layer].data[0])
        labels.append(lab)
    return reps, labels


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Standardize, then multinomial logistic regression."""

    def __init__(self, C=1.0, max_iter=2000, tol=1e-6):
        self.C = C
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise UsageError(f"probe needs at least 2 classes, got {list(self.classes_)}")
        self.scaler_ = StandardScaler().fit(X)
        self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter, tol=self.tol)
        self.clf_.fit(self.scaler_.transform(X), y)
        return self

    def predict(self, X):
        check_is_fitted(self, "clf_")
        return self.clf_.predict(self.scaler_.transform(check_matrix(X, dtype=np.float64)))


def split_utterances(n: int, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    order = stream(seed, "split").permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise UsageError(f"need at least 2 utterances to split, got {n}")
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def train_linear_probe(representations, labels, seed: int = 0, layer: int | None = None,
                       test_fraction: float = 0.2, C: float = 1.0) -> ProbeResult:
    """Fit a probe on 80% of the utterances and report held-out frame accuracy.

    ``representations``/``labels`` are per-utterance lists of (frames, dim)
    arrays and frame labels; the split is by utterance so frames of one
    utterance never straddle train and test.
    """
    reps = [np.asarray(r) for r in representations]
    labs = [np.asarray(lab) for lab in labels]
    if len(reps) != len(labs):
        raise UsageError(f"{len(reps)} representation sets but {len(labs)} label sets")
    for r, lab in zip(reps, labs):
        if len(r) != len(lab):
            raise UsageError(f"{len(r)} frames but {len(lab)} labels")
    if len(np.unique(np.concatenate(labs))) < 2:
        raise UsageError("probe needs at least 2 classes")
    train, test = split_utterances(len(reps), seed, test_fraction)
    Xtr = np.concatenate([reps[i] for i in train])
    ytr = np.concatenate([labs[i] for i in train])
    Xte = np.concatenate([reps[i] for i in test])
    yte = np.concatenate([labs[i] for i in test])
    probe = LinearProbe(C=C).fit(Xtr, ytr)
    pred = probe.predict(Xte)
    per_class = {int(c): float(np.mean(pred[yte == c] == c)) for c in np.unique(yte)}
    return ProbeResult(float(np.mean(pred == yte)), per_class, layer, seed, len(ytr), len(yte))
