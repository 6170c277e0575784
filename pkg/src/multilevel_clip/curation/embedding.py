"""Deterministic character n-gram text embedder used as the default curation embedder."""

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer


class CharNgramEmbedder:
    """Hashed character n-gram counts of ``#label#``, l2-normalised.

    The hash (murmur3 with a fixed seed) is stable across processes.
    """

    name = "char-ngram"

    def __init__(self, n_features=512, ngram_range=(2, 4)):
        self.n_features = n_features
        self.ngram_range = tuple(ngram_range)
        self._vectorizer = HashingVectorizer(analyzer="char", ngram_range=self.ngram_range,
                                             n_features=n_features, alternate_sign=False,
                                             norm="l2", lowercase=False)

    def __call__(self, text):
        return self.embed_many([text])[0]

    def embed_many(self, texts):
        if not texts:
            return np.zeros((0, self.n_features))
        padded = [f"#{t.strip().lower()}#" for t in texts]
        return self._vectorizer.transform(padded).toarray().astype(np.float64)


EMBEDDERS = {"char-ngram": CharNgramEmbedder}


def get_embedder(name_or_callable="char-ngram"):
    if callable(name_or_callable):
        return name_or_callable
    try:
        return EMBEDDERS[name_or_callable]()
    except KeyError:
        raise KeyError(f"unknown embedder {name_or_callable!r}; known: {sorted(EMBEDDERS)}") from None


def cosine_similarity(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
