"""Precision-weighted majority voting over heterogeneous classifiers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.neighbors import NearestCentroid

from ..encoding import NormStats, build_intensity_map, encode_matrices
from .model import CnnAttModel
from .train import classification_metrics


def _flat_intensity(matrices, stats):
    return np.stack([build_intensity_map(m, stats).ravel() for m in matrices])


class CnnAttMember:
    name = "cnn_att"

    def __init__(self, model: CnnAttModel, stats: NormStats):
        self.model, self.stats = model, stats

    def predict(self, matrices):
        return self.model.predict(encode_matrices(matrices, self.stats, self.model.dtype))


class LogisticMember:
    """L2 logistic regression on flattened (unblurred) intensity maps."""

    name = "logistic"

    def __init__(self, stats: NormStats, c: float = 1.0, seed: int = 0):
        self.stats = stats
        self.clf = LogisticRegression(C=c, max_iter=2000, random_state=seed)

    def fit(self, matrices, labels):
        self.clf.fit(_flat_intensity(matrices, self.stats), labels)
        return self

    def predict(self, matrices):
        return self.clf.predict(_flat_intensity(matrices, self.stats)).astype(int)


class CentroidMember:
    name = "centroid"

    def __init__(self, stats: NormStats):
        self.stats = stats
        self.clf = NearestCentroid()

    def fit(self, matrices, labels):
        with warnings.catch_warnings():
            # constant pixels (flat rows) are expected and harmless here
            warnings.simplefilter("ignore", UserWarning)
            self.clf.fit(_flat_intensity(matrices, self.stats), labels)
        return self

    def predict(self, matrices):
        return self.clf.predict(_flat_intensity(matrices, self.stats)).astype(int)


def member_precision(member, matrices, labels) -> float:
    return classification_metrics(labels, member.predict(matrices))["precision"]


@dataclass
class WmvEnsemble:
    members: list
    precisions: list

    def __post_init__(self):
        if len(self.members) != len(self.precisions):
            raise ValueError("one precision per member is required")
        p = np.asarray(self.precisions, dtype=float)
        if np.any(p < 0):
            raise ValueError("precisions must be non-negative")
        if not p.sum() > 0:
            raise ValueError("at least one member needs a positive precision")

    @property
    def weights(self) -> np.ndarray:
        p = np.asarray(self.precisions, dtype=float)
        return p / p.sum()

    def combine(self, votes) -> np.ndarray:
        """Votes (members, samples) in {0, 1} -> weighted winner, ties to class 1."""
        votes = np.atleast_2d(np.asarray(votes, dtype=int))
        w = self.weights[:, None]
        support1 = (w * (votes == 1)).sum(axis=0)
        support0 = (w * (votes == 0)).sum(axis=0)
        return np.where(support1 >= support0, 1, 0)

    def predict(self, x) -> np.ndarray:
        votes = np.stack([np.asarray(m.predict(x)) for m in self.members])
        return self.combine(votes)


def wmv_predict(ensemble: WmvEnsemble, x) -> np.ndarray:
    return ensemble.predict(x)
