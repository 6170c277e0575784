"""Linear probing on frozen encoder features."""

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .._validation import check_int, check_positive
from ..exceptions import InvalidParameterError
from .metrics import TOP_KS, MetricsReport, topk_accuracy
from .retrieval import image_side_embeddings, resolve_level


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Single zero-initialised linear layer trained with cross-entropy and AdamW.

    Parameters
    ----------
    epochs : int
    lr : float
    batch_size : int
    weight_decay : float
    random_state : int
        Seeds the mini-batch order.
    """

    def __init__(self, epochs=6, lr=2e-5, batch_size=32, weight_decay=0.0, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        check_int(self.epochs, "epochs", min_value=1)
        check_int(self.batch_size, "batch_size", min_value=1)
        check_positive(self.lr, "lr")
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        head = torch.nn.Linear(X.shape[1], len(self.classes_), dtype=torch.float64)
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
        opt = torch.optim.AdamW(head.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        Xt, yt = torch.from_numpy(X), torch.from_numpy(y_idx)
        rng = np.random.default_rng(self.random_state)
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for s in range(0, len(X), self.batch_size):
                idx = torch.from_numpy(order[s:s + self.batch_size])
                loss = F.cross_entropy(head(Xt[idx]), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.coef_ = head.weight.detach().numpy().copy()
        self.intercept_ = head.bias.detach().numpy().copy()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidParameterError(
                f"X has {X.shape[1]} features, the probe was fit on {self.n_features_in_}")
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def probe_scores(probe, X, labels):
    """Score matrix and truth indices.

    Labels unseen in training point at an extra ``-inf`` column, so they rank
    below every fitted class and count as misses for any ``k <= n_classes``.
    """
    scores = probe.decision_function(X)
    index = {c: i for i, c in enumerate(probe.classes_)}
    unseen = sorted({lab for lab in labels if lab not in index})
    if unseen:
        pad = np.full((len(X), 1), -np.inf)
        scores = np.hstack([scores, pad])
    truths = np.array([index.get(lab, len(probe.classes_)) for lab in labels], dtype=int)
    return scores, truths, unseen


def linear_probe(model, train_records, test_records, task, **probe_params):
    """Fit a linear head on frozen features of ``train_records`` and report Top-K on ``test_records``."""
    level = resolve_level(task)
    model.eval()
    X_tr, y_tr = image_side_embeddings(model, train_records, level)
    X_te, y_te = image_side_embeddings(model, test_records, level)
    probe = LinearProbeClassifier(**probe_params).fit(X_tr.double().numpy(), y_tr)
    scores, truths, unseen = probe_scores(probe, X_te.double().numpy(), y_te)
    warnings = [f"test class {lab!r} absent from the training split" for lab in unseen]
    name = {"global": "actions", "object": "objects", "relation": "relations"}[level]
    C = len(probe.classes_)
    metrics = ({f"top{k}": topk_accuracy(scores, truths, min(k, C)) for k in TOP_KS}
               if len(truths) else {})
    return MetricsReport(f"probe_{name}", metrics, len(truths),
                         {"level": level, "n_classes": len(probe.classes_),
                          **probe.get_params()}, warnings)
