"""scikit-learn style wrapper around model construction, training and zero-shot action prediction."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .curation.negatives import AntonymDictionary
from .encoders import EncoderConfig, ScenarioModel, Tokenizer
from .evaluation.retrieval import (
    PromptTemplateSet,
    class_text_embeddings,
    cosine_scores,
    image_side_embeddings,
)
from .exceptions import InvalidInputError
from .records import SceneRecord, triplet_text
from .training import DEFAULT_TEMPLATES, TrainConfig, fit_model, set_determinism


def _check_records(records):
    records = list(records)
    if not records or not all(isinstance(r, SceneRecord) for r in records):
        raise InvalidInputError("expected a non-empty sequence of SceneRecord objects")
    return records


class MultiLevelCLIP(TransformerMixin, BaseEstimator):
    """Train the six-encoder model on scene records.

    ``transform`` returns unit-norm global image embeddings; ``predict`` ranks
    the actions seen during ``fit`` zero-shot; ``score`` is action Top-1.
    """

    def __init__(self, embed_dim=64, depth=2, heads=4, patch_size=8, crop_size=32,
                 epochs=12, batch_size=16, base_lr=1e-3, weight_decay=0.2,
                 lambda_kd="fixed:1", ema_warmup_steps=200, templates=DEFAULT_TEMPLATES,
                 random_state=0):
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.patch_size = patch_size
        self.crop_size = crop_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.lambda_kd = lambda_kd
        self.ema_warmup_steps = ema_warmup_steps
        self.templates = templates
        self.random_state = random_state

    def _vocabulary(self, records):
        texts = [r.action for r in records]
        texts += [o.name for r in records for o in r.objects]
        texts += [triplet_text(t) for r in records for rel in r.relations
                  for t in [rel.triplet, *rel.negatives]]
        texts += list(AntonymDictionary().mapping.values())
        texts += [t.replace("{label}", "") for t in self.templates]
        return sorted({w for t in texts for w in t.lower().split()})

    def fit(self, X, y=None):
        records = _check_records(X)
        size = records[0].image.shape[0]
        enc_cfg = EncoderConfig(embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
                                patch_size=self.patch_size, image_size=size,
                                crop_size=self.crop_size)
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                base_lr=self.base_lr, weight_decay=self.weight_decay,
                                lambda_kd=self.lambda_kd, ema_warmup_steps=self.ema_warmup_steps,
                                caption_templates=self.templates, seed=self.random_state)
        set_determinism(self.random_state)
        self.model_ = ScenarioModel(enc_cfg, Tokenizer(self._vocabulary(records)))
        self.history_, _, _ = fit_model(self.model_, records, train_cfg)
        self.classes_ = np.array(sorted({r.action for r in records}))
        self._class_text = class_text_embeddings(
            self.model_, list(self.classes_), PromptTemplateSet(self.templates), "global")
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "model_")
        rows, _ = image_side_embeddings(self.model_, _check_records(X), "global")
        return torch.nn.functional.normalize(rows.double(), dim=-1).numpy()

    def decision_function(self, X):
        return cosine_scores(self.transform(X), self._class_text)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y=None):
        records = _check_records(X)
        truth = np.array([r.action for r in records]) if y is None else np.asarray(y)
        return float(np.mean(self.predict(records) == truth))
