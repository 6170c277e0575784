"""Zero-shot retrieval and predicate / scene-graph classification by text-image cosine ranking."""

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .._validation import check_int
from ..encoders import crop_box, image_to_tensor, union_box
from ..exceptions import ConfigurationError, InvalidParameterError
from ..records import triplet_text
from .metrics import MetricsReport, topk_report

DEFAULT_PROMPTS = ("a photo of {label}", "a scene showing {label}", "{label}")
LEVEL_ALIASES = {"action": "global", "actions": "global", "global": "global",
                 "object": "object", "objects": "object",
                 "relation": "relation", "relations": "relation"}
CHUNK = 256


def resolve_level(level):
    try:
        return LEVEL_ALIASES[level]
    except KeyError:
        raise InvalidParameterError(
            f"unknown level {level!r}; expected action/global, object or relation") from None


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple = DEFAULT_PROMPTS

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise InvalidParameterError("a prompt template set needs at least one template")
        for t in self.templates:
            if t.count("{label}") != 1:
                raise InvalidParameterError(f"template {t!r} must contain exactly one {{label}} slot")

    def fill(self, label):
        return [t.replace("{label}", label) for t in self.templates]

    def __len__(self):
        return len(self.templates)

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")))


def _text_rows(model, texts, level):
    rows = [model.encode_text(texts[i:i + CHUNK], level) for i in range(0, len(texts), CHUNK)]
    return torch.cat(rows) if rows else torch.zeros(0, model.config.embed_dim)


def _image_rows(model, tensors, level):
    if not tensors:
        return torch.zeros(0, model.config.embed_dim)
    stacked = torch.stack(tensors).to(model.dtype)
    enc = model.vision(level)
    return torch.cat([enc(stacked[i:i + CHUNK])[0] for i in range(0, len(stacked), CHUNK)])


@torch.no_grad()
def class_text_embeddings(model, labels, templates=None, level="global"):
    """``(C, d)`` prompt-ensembled, unit-norm class embeddings."""
    templates = templates or PromptTemplateSet()
    level = resolve_level(level)
    texts = [t for lab in labels for t in templates.fill(lab)]
    emb = F.normalize(_text_rows(model, texts, level), dim=-1)
    emb = emb.reshape(len(labels), len(templates), -1).mean(dim=1)
    return F.normalize(emb, dim=-1)


def class_text_embedding(model, label, templates=None, level="global"):
    """Mean of the l2-normalised template embeddings of ``label``, re-normalised."""
    return class_text_embeddings(model, [label], templates, level)[0]


@torch.no_grad()
def image_side_embeddings(model, records, level):
    """Image-side rows and their ground-truth strings for a retrieval level."""
    level = resolve_level(level)
    cfg = model.config
    tensors, labels = [], []
    for rec in records:
        if level == "global":
            tensors.append(image_to_tensor(rec.image))
            labels.append(rec.action)
        elif level == "object":
            for o in rec.objects:
                tensors.append(crop_box(rec.image, o.bbox, cfg.crop_size))
                labels.append(o.name)
        else:
            for r in rec.relations:
                tensors.append(image_to_tensor(r.focused_region))
                labels.append(triplet_text(r.triplet))
    return _image_rows(model, tensors, level), labels


def cosine_scores(image_rows, text_rows):
    img = F.normalize(torch.as_tensor(image_rows, dtype=torch.float64), dim=-1)
    txt = F.normalize(torch.as_tensor(text_rows, dtype=torch.float64), dim=-1)
    return (img @ txt.T).numpy()


def _truth_indices(labels, class_strings):
    index = {c: i for i, c in enumerate(class_strings)}
    missing = sorted({lab for lab in labels if lab not in index})
    if missing:
        raise ConfigurationError(
            f"ground-truth label {missing[0]!r} is missing from the class list"
            + (f" ({len(missing)} missing in total)" if len(missing) > 1 else ""))
    return np.array([index[lab] for lab in labels], dtype=int)


def zero_shot_retrieval(model, records, class_strings, templates=None, level="global"):
    """Rank ``class_strings`` for every image-side item of ``records`` and report Top-1/5/10."""
    level = resolve_level(level)
    class_strings = list(class_strings)
    if not class_strings:
        raise ConfigurationError("class list is empty")
    model.eval()
    rows, labels = image_side_embeddings(model, records, level)
    truths = _truth_indices(labels, class_strings)
    text = class_text_embeddings(model, class_strings, templates, level)
    scores = cosine_scores(rows, text)
    task = {"global": "zeroshot_actions", "object": "zeroshot_objects",
            "relation": "zeroshot_relations"}[level]
    metrics = topk_report(scores, truths) if len(truths) else {}
    metrics["chance_top1"] = 1.0 / len(class_strings)
    return MetricsReport(task, metrics, len(truths),
                         {"level": level, "n_classes": len(class_strings),
                          "templates": list((templates or PromptTemplateSet()).templates)})


# ------------------------------------------------------------------ PredCls

def select_predicate_vocab(records, n=None):
    """The ``n`` most frequent predicates of ``records`` (ties: alphabetical)."""
    counts = Counter(r.predicate for rec in records for r in rec.relations)
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    return ranked if n is None else ranked[: check_int(n, "n", min_value=1)]


def _union_crops(model, records, keep):
    size = model.config.image_size
    tensors, items = [], []
    for rec in records:
        for r in rec.relations:
            if not keep(r):
                continue
            a, b = (rec.objects[i] for i in r.object_indices)
            tensors.append(crop_box(rec.image, union_box(a.bbox, b.bbox), size))
            items.append((rec, r))
    return tensors, items


@torch.no_grad()
def _predicate_scores(model, items, feats, predicate_vocab, object_names, templates):
    """Score matrix ``(N, P)``; ``object_names[n]`` is the (subject, object) pair for item ``n``."""
    texts = [triplet_text((s, p, o)) for (s, o) in object_names for p in predicate_vocab]
    cand = class_text_embeddings(model, texts, templates, "relation")
    cand = cand.reshape(len(items), len(predicate_vocab), -1).to(torch.float64)
    img = F.normalize(feats.to(torch.float64), dim=-1)
    return torch.einsum("nd,npd->np", img, cand).numpy()


def _relation_ranking(model, records, predicate_vocab, templates, object_namer, task):
    predicate_vocab = list(predicate_vocab)
    if not predicate_vocab:
        raise ConfigurationError("predicate vocabulary is empty")
    model.eval()
    vocab_set = set(predicate_vocab)
    tensors, items = _union_crops(model, records, lambda r: r.predicate in vocab_set)
    n_total = sum(rec.n_relations for rec in records)
    if not items:
        return MetricsReport(task, {}, 0, {"n_predicates": len(predicate_vocab),
                                           "n_excluded": n_total})
    with torch.no_grad():
        feats = _image_rows(model, tensors, "relation")
    names = object_namer(items)
    scores = _predicate_scores(model, items, feats, predicate_vocab, names, templates)
    truths = np.array([predicate_vocab.index(r.predicate) for _, r in items])
    return MetricsReport(task, topk_report(scores, truths, prefix="R@"), len(items),
                         {"n_predicates": len(predicate_vocab), "n_excluded": n_total - len(items)})


def _gt_names(items):
    return [(rec.objects[r.object_indices[0]].name, rec.objects[r.object_indices[1]].name)
            for rec, r in items]


def predicate_classification(model, records, predicate_vocab, templates=None):
    """PredCls: union-box relation feature ranked against ``(o1, p, o2)`` prompts with true names."""
    return _relation_ranking(model, records, predicate_vocab, templates, _gt_names, "predcls")


class ObjectClassifier:
    """Zero-shot object classifier over a fixed vocabulary via the object encoders."""

    def __init__(self, model, object_vocab, templates=None):
        self.model = model
        self.object_vocab = list(object_vocab)
        if not self.object_vocab:
            raise ConfigurationError("object vocabulary is empty")
        self.text = class_text_embeddings(model, self.object_vocab, templates, "object")

    @torch.no_grad()
    def __call__(self, record, obj_index):
        obj = record.objects[obj_index]
        crop = crop_box(record.image, obj.bbox, self.model.config.crop_size)
        row = _image_rows(self.model, [crop], "object")
        scores = cosine_scores(row, self.text)[0]
        return self.object_vocab[int(np.argmax(scores))]


def scene_graph_classification(model, records, object_vocab, predicate_vocab, templates=None,
                               object_classifier=None):
    """SGCls: as PredCls but with predicted object names substituted into the prompts.

    ``object_classifier(record, obj_index) -> name`` overrides the default
    zero-shot :class:`ObjectClassifier`.
    """
    classify = object_classifier or ObjectClassifier(model, object_vocab, templates)

    def namer(items):
        cache = {}

        def name(rec, i):
            key = (id(rec), i)
            if key not in cache:
                cache[key] = classify(rec, i)
            return cache[key]

        return [(name(rec, r.object_indices[0]), name(rec, r.object_indices[1])) for rec, r in items]

    return _relation_ranking(model, records, predicate_vocab, templates, namer, "sgcls")
