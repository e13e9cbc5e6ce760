"""scikit-learn style wrapper for transductive node classification.

The estimator sees every node at ``fit`` time (features and graph) but only
some labels. ``predict`` returns a label for every node of the fitted graph.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ShapeError
from .graph import Dataset, Graph, SplitAssignment, symmetrize
from .training import ExperimentConfig, predict_logits, train_run

UNLABELED = -1


def as_graph(graph, num_nodes: int) -> Graph:
    """Accept a :class:`Graph`, a scipy sparse adjacency matrix or an ``[E, 2]`` edge list."""
    if isinstance(graph, Graph):
        out = graph
    elif sp.issparse(graph):
        coo = sp.coo_matrix(graph)
        out = symmetrize(np.stack([coo.row, coo.col], axis=1)[coo.data != 0], coo.shape[0])
    else:
        out = symmetrize(np.asarray(graph, dtype=np.int64).reshape(-1, 2), num_nodes)
    if out.num_nodes != num_nodes:
        raise ShapeError(f"graph has {out.num_nodes} nodes but X has {num_nodes} rows")
    return out


class GATPOSClassifier(ClassifierMixin, BaseEstimator):
    """Positional-embedding-aware graph attention classifier.

    Parameters mirror :class:`ExperimentConfig`. ``hidden_units`` and
    ``hidden_heads`` default to 8 each when left as ``None``.
    """

    def __init__(self, model="gat-pos", regime="joint", hidden_units=None, hidden_heads=None, output_heads=1,
                 positional_dim=64, lr=5e-3, weight_decay=5e-4, dropout=0.5, lam=1.0, num_negatives=1,
                 max_epochs=1000, patience=100, validation_fraction=0.2, random_state=0):
        self.model = model
        self.regime = regime
        self.hidden_units = hidden_units
        self.hidden_heads = hidden_heads
        self.output_heads = output_heads
        self.positional_dim = positional_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.lam = lam
        self.num_negatives = num_negatives
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(
            model=self.model, regime=self.regime, hidden_units=self.hidden_units, hidden_heads=self.hidden_heads,
            output_heads=self.output_heads, positional_dim=self.positional_dim, lr=self.lr,
            weight_decay=self.weight_decay, dropout=self.dropout, lam=self.lam, num_negatives=self.num_negatives,
            max_epochs=self.max_epochs, patience=self.patience, seed=int(self.random_state or 0),
        )

    def fit(self, X, y, graph, train_idx=None, val_idx=None):
        """Train on the labeled nodes.

        ``y`` has one entry per node; ``-1`` marks unlabeled nodes. Without
        explicit ``train_idx``/``val_idx`` a random ``validation_fraction``
        of the labeled nodes is held out for early stopping.
        """
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        if sp.issparse(X):
            X = X.toarray()
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have one entry per node ({X.shape[0]}), got shape {y.shape}")
        labeled = np.flatnonzero(y != UNLABELED)
        if len(labeled) == 0:
            raise ValueError("y has no labeled nodes")
        self.label_encoder_ = LabelEncoder().fit(y[labeled])
        self.classes_ = self.label_encoder_.classes_
        codes = np.zeros(len(y), dtype=np.int64)
        codes[labeled] = self.label_encoder_.transform(y[labeled])

        rng = np.random.default_rng(self.random_state)
        if train_idx is None:
            shuffled = rng.permutation(labeled)
            n_val = int(round(self.validation_fraction * len(shuffled))) if val_idx is None else 0
            train_idx = np.sort(shuffled[n_val:])
            if val_idx is None:
                val_idx = np.sort(shuffled[:n_val])
        val_idx = np.asarray([] if val_idx is None else val_idx, dtype=np.int64)
        split = SplitAssignment(np.asarray(train_idx, dtype=np.int64), val_idx, np.zeros(0, dtype=np.int64))
        split.validate(X.shape[0])
        if (y[split.train_idx] == UNLABELED).any() or (y[split.val_idx] == UNLABELED).any():
            raise ValueError("train_idx and val_idx must only contain labeled nodes")

        self.graph_ = as_graph(graph, X.shape[0])
        self.dataset_ = Dataset(self.graph_, X, codes, len(self.classes_), name="estimator")
        self.config_ = self._config()
        self.model_, self.result_ = train_run(self.dataset_, split, self.config_, int(self.random_state or 0))
        self.n_features_in_ = X.shape[1]
        return self

    def _dataset_for(self, X):
        if X is None:
            return self.dataset_
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        if sp.issparse(X):
            X = X.toarray()
        if X.shape != self.dataset_.features.shape:
            raise ValueError(f"X must have shape {self.dataset_.features.shape} (the fitted nodes), got {X.shape}")
        return Dataset(self.graph_, X, self.dataset_.labels, self.dataset_.num_classes, name="estimator")

    def decision_function(self, X=None):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, self._dataset_for(X))

    def predict_proba(self, X=None):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X=None):
        """Labels of all fitted nodes; ``X`` may replace their features."""
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def score(self, X, y, sample_weight=None, idx=None):
        """Accuracy, optionally restricted to the nodes ``idx``."""
        pred = self.predict(X)
        y = np.asarray(y)
        if idx is not None:
            pred, y = pred[idx], y[idx]
            sample_weight = None if sample_weight is None else np.asarray(sample_weight)[idx]
        mask = y != UNLABELED
        w = None if sample_weight is None else np.asarray(sample_weight)[mask]
        return float(np.average(pred[mask] == y[mask], weights=w))
