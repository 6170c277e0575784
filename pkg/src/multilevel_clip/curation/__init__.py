"""Vocabulary curation: label cleanup, density-based grouping, relation dedup, negatives."""

from .clustering import (
    ClusterConfig,
    MutualReachabilityClustering,
    VocabularyState,
    cluster_objects,
    mutual_reachability,
    read_vocabulary,
)
from .embedding import CharNgramEmbedder, get_embedder
from .labels import (
    DEFAULT_COLORS,
    DEFAULT_STOPWORDS,
    canonicalize_relation,
    dedupe_relations,
    fold_plurals,
    normalize_object_label,
    read_term_list,
)
from .negatives import AntonymDictionary, generate_negative_triplets, iter_negative_candidates


def curate(object_labels, triplets, *, colors=DEFAULT_COLORS, stopwords=DEFAULT_STOPWORDS,
           tagger=None, cluster_config=None):
    """Run the whole label pipeline: normalise, fold plurals, group, canonicalise, dedupe.

    Returns ``(state, relations)`` where ``state.raw_labels`` holds the cleaned
    object labels and ``relations`` the surviving canonical triplets.
    """
    cleaned = [normalize_object_label(lab, colors, tagger) for lab in object_labels]
    folded = fold_plurals(cleaned)
    raw_to_clean = dict(zip(object_labels, folded))
    state = cluster_objects(sorted(set(folded)), cluster_config)
    state.color_list = frozenset(colors)
    names = state.label_to_name()
    full_map = {raw: names.get(clean, clean) for raw, clean in raw_to_clean.items()}
    survivors = dedupe_relations(triplets, full_map, stopwords)
    relations = [canonicalize_relation(t, full_map, stopwords) for t in survivors]
    return state, relations


__all__ = [
    "AntonymDictionary", "CharNgramEmbedder", "ClusterConfig", "DEFAULT_COLORS",
    "DEFAULT_STOPWORDS", "MutualReachabilityClustering", "VocabularyState",
    "canonicalize_relation", "cluster_objects", "curate", "dedupe_relations",
    "fold_plurals", "generate_negative_triplets", "get_embedder", "iter_negative_candidates",
    "mutual_reachability", "normalize_object_label", "read_term_list", "read_vocabulary",
]
