"""Hard negative relation triplets: object swaps and antonym predicate substitution."""

from pathlib import Path

from ..exceptions import ExhaustionError, InvalidParameterError
from .embedding import cosine_similarity, get_embedder

DEFAULT_OPPOSITES = {
    "left of": "right of",
    "above": "below",
    "inside": "outside of",
    "touching": "apart from",
    "on": "under",
    "in front of": "behind",
    "holding": "dropping",
    "near": "far from",
}


class AntonymDictionary:
    """Key phrase to opposite phrase, with nearest-key lookup for unseen phrases.

    The mapping is made symmetric on construction. Lookup of an unknown phrase
    falls back to the key with the highest embedder cosine similarity; ties are
    broken lexicographically.
    """

    def __init__(self, mapping=None, embedder="char-ngram"):
        mapping = DEFAULT_OPPOSITES if mapping is None else mapping
        table = {}
        for key, value in mapping.items():
            key, value = key.strip(), value.strip()
            if not key or not value:
                raise InvalidParameterError("antonym keys and values must be non-empty")
            table.setdefault(key, value)
            table.setdefault(value, key)
        if not table:
            raise InvalidParameterError("antonym dictionary is empty")
        self.mapping = table
        self.embedder = get_embedder(embedder)
        self._keys = sorted(table)
        self._key_vectors = [self.embedder(k) for k in self._keys]

    def nearest_key(self, phrase):
        if phrase in self.mapping:
            return phrase
        query = self.embedder(phrase)
        best_key, best_sim = None, -float("inf")
        for key, vec in zip(self._keys, self._key_vectors):
            sim = cosine_similarity(query, vec)
            if sim > best_sim:  # keys are sorted, so strict > keeps the lexicographic first on ties
                best_key, best_sim = key, sim
        return best_key

    def opposite(self, phrase):
        return self.mapping[self.nearest_key(phrase)]

    @classmethod
    def from_file(cls, path, embedder="char-ngram"):
        """Read a two-column file: ``phrase<TAB>opposite`` (or ``phrase,opposite``)."""
        mapping = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            sep = "\t" if "\t" in line else ","
            key, value = (part.strip() for part in line.split(sep, 1))
            mapping[key] = value
        return cls(mapping, embedder=embedder)


def iter_negative_candidates(record, rel_idx, antonyms):
    """Yield ``(triplet, kind)`` candidates in priority order.

    Order: swaps with third-party objects (object_1 slot, then object_2 slot),
    the antonym substitution, then swaps that duplicate the other participant.
    """
    rel = record.relations[rel_idx]
    subj, pred, obj = rel.triplet
    i, j = rel.object_indices
    names = [o.name for o in record.objects]
    for k, name in enumerate(names):
        if k not in (i, j) and name != subj:
            yield (name, pred, obj), "swap"
    for k, name in enumerate(names):
        if k not in (i, j) and name != obj:
            yield (subj, pred, name), "swap"
    yield (subj, antonyms.opposite(pred), obj), "antonym"
    if obj != subj:
        yield (obj, pred, obj), "swap"
        yield (subj, pred, subj), "swap"


def generate_negative_triplets(record, rel_idx, antonyms, n=3, reject=None):
    """First ``n`` distinct candidates that are not positive triplets of the scene.

    ``reject`` is an optional extra predicate; candidates for which it returns
    true are skipped as well (the generator uses it to drop statements that are
    geometrically true even though unannotated).
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    positives = set(record.positive_triplets())
    chosen = []
    for cand, _kind in iter_negative_candidates(record, rel_idx, antonyms):
        if cand in positives or cand in chosen:
            continue
        if reject is not None and reject(cand):
            continue
        chosen.append(cand)
        if len(chosen) == n:
            return chosen
    raise ExhaustionError(
        f"scene {record.scene_id or '<unnamed>'}: only {len(chosen)} valid negatives "
        f"for relation {rel_idx}, {n} requested"
    )
