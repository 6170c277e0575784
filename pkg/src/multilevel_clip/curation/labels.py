"""Label normalisation, plural folding and relation canonicalisation."""

from pathlib import Path

DEFAULT_COLORS = frozenset({
    "red", "orange", "yellow", "green", "blue", "purple", "violet", "pink", "brown",
    "black", "white", "gray", "grey", "silver", "gold", "golden", "beige", "cyan",
    "magenta", "teal", "navy", "maroon", "olive", "tan",
})

DEFAULT_STOPWORDS = frozenset({
    "a", "an", "the", "on", "in", "at", "of", "to", "with", "by", "from", "into",
    "onto", "upon", "for", "and", "is", "are",
})


def read_term_list(path):
    """One term per line; blank lines and ``#`` comments are ignored."""
    terms = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            terms.add(line)
    return frozenset(terms)


def normalize_object_label(label, color_list=DEFAULT_COLORS, tagger=None):
    """Drop colour terms and adjective-tagged tokens; never returns an empty label.

    ``tagger`` maps a token list to Penn Treebank tags (``JJ*`` marks adjectives).
    """
    tokens = label.split()
    colors = {c.lower() for c in color_list}
    tags = tagger(tokens) if tagger is not None else [None] * len(tokens)
    kept = [tok for tok, tag in zip(tokens, tags)
            if tok.lower() not in colors and not (tag or "").startswith("JJ")]
    return " ".join(kept) if kept else label


def plural_map(labels):
    """``{plural: singular}`` for plurals whose ``-s``/``-es`` singular is also present."""
    present = set(labels)
    mapping = {}
    for lab in present:
        for suffix in ("es", "s"):
            if lab.endswith(suffix) and lab[: -len(suffix)] in present:
                mapping[lab] = lab[: -len(suffix)]
                break
    return mapping


def fold_plurals(labels):
    """Remap every co-present plural occurrence to its singular (order preserved)."""
    mapping = plural_map(labels)
    return [mapping.get(lab, lab) for lab in labels]


def canonicalize_relation(triplet, group_assignments=None, stopwords=DEFAULT_STOPWORDS):
    """Map both objects to their group names and strip stopwords from the predicate.

    ``group_assignments`` maps a raw object label to its canonical group name.
    """
    subj, pred, obj = triplet
    groups = group_assignments or {}
    kept = [tok for tok in pred.split() if tok.lower() not in stopwords]
    pred = " ".join(kept) if kept else pred
    return (groups.get(subj, subj), pred, groups.get(obj, obj))


def dedupe_relations(triplets, group_assignments=None, stopwords=DEFAULT_STOPWORDS):
    """Keep the first triplet of each canonical form, in input order."""
    seen = set()
    out = []
    for t in triplets:
        key = canonicalize_relation(t, group_assignments, stopwords)
        if key not in seen:
            seen.add(key)
            out.append(tuple(t))
    return out
