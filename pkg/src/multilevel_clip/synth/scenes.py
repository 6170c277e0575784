"""Procedural scenes of parametric glyphs with geometric relation annotations."""

import colorsys
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np

from .._validation import check_int, check_positive, check_range
from ..curation.negatives import AntonymDictionary, generate_negative_triplets
from ..exceptions import ExhaustionError, GenerationError, InvalidParameterError
from ..records import ObjectAnnotation, RelationAnnotation, SceneRecord
from .focus import compose_focused_region

PREDICATES = ("left of", "right of", "above", "below", "inside", "touching")

# Arrangement families; an action is (family, object category).
GROUPS = (
    ("horizontal", "lining up", ("left of", "right of")),
    ("vertical", "stacking", ("above", "below")),
    ("containment", "nesting", ("inside",)),
    ("contact", "clustering", ("touching",)),
)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")

OBJECT_NOUNS = (
    "apple", "bucket", "cone", "crate", "donut", "kite", "gem", "lamp",
    "plate", "wheel", "star", "tent", "ball", "box", "bell", "cup",
    "drum", "fan", "hat", "jar", "key", "leaf", "mug", "pot",
)

CATEGORY_WORDS = ("warm things", "cool things", "bright things", "dark things",
                  "soft things", "sharp things")

MAX_RETRIES = 64
_BACKGROUND = 0.86


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    n_actions: int = 8
    n_object_classes: int = 12
    n_relation_classes: int = 6
    objects_per_scene: tuple = (2, 5)
    relations_per_scene: tuple = (1, 3)
    rbf_sigma: float = 6.0
    blur_sigma: float = 3.0
    n_negatives: int = 3
    seed: int = 0

    def __post_init__(self):
        check_int(self.image_size, "image_size", min_value=16)
        check_int(self.n_actions, "n_actions", min_value=1)
        check_int(self.n_object_classes, "n_object_classes", min_value=1)
        check_int(self.n_relation_classes, "n_relation_classes", min_value=1,
                  max_value=len(PREDICATES))
        obj = check_range(self.objects_per_scene, "objects_per_scene", min_value=2)
        rel = check_range(self.relations_per_scene, "relations_per_scene", min_value=1)
        object.__setattr__(self, "objects_per_scene", obj)
        object.__setattr__(self, "relations_per_scene", rel)
        if rel[1] > comb(obj[1], 2):
            raise InvalidParameterError(
                f"relations_per_scene max {rel[1]} exceeds C({obj[1]}, 2) object pairs")
        check_positive(self.rbf_sigma, "rbf_sigma")
        check_positive(self.blur_sigma, "blur_sigma")
        check_int(self.n_negatives, "n_negatives", min_value=1)
        check_int(self.seed, "seed", min_value=0)
        n_groups = len(self.groups)
        if self.n_actions % n_groups:
            raise InvalidParameterError(
                f"n_actions={self.n_actions} must be a multiple of the {n_groups} "
                "arrangement families enabled by n_relation_classes")
        if self.n_categories > self.n_object_classes:
            raise InvalidParameterError("more object categories than object classes")

    @property
    def predicates(self):
        return PREDICATES[:self.n_relation_classes]

    @property
    def groups(self):
        enabled = set(self.predicates)
        return [(key, verb, tuple(p for p in preds if p in enabled))
                for key, verb, preds in GROUPS if enabled.intersection(preds)]

    @property
    def n_categories(self):
        return self.n_actions // len(self.groups)

    def to_dict(self):
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        d["relations_per_scene"] = list(self.relations_per_scene)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("objects_per_scene", "relations_per_scene"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ObjectClass:
    index: int
    name: str
    shape: str
    color: tuple
    category: int


@dataclass
class Vocabulary:
    """Label spaces implied by a :class:`SceneConfig`."""

    object_classes: list
    actions: list
    predicates: list
    category_names: list = field(default_factory=list)

    def object_by_name(self, name):
        for cls in self.object_classes:
            if cls.name == name:
                return cls
        raise KeyError(name)


def _category_name(c):
    return CATEGORY_WORDS[c] if c < len(CATEGORY_WORDS) else f"kind{c} things"


def build_vocabulary(config):
    n_cat = config.n_categories
    per_cat = -(-config.n_object_classes // n_cat)
    classes = []
    for k in range(config.n_object_classes):
        cat, m = k % n_cat, k // n_cat
        hue = ((cat + (m + 0.5) / per_cat) / n_cat - 0.08) % 1.0
        value = 0.9 if m % 2 == 0 else 0.6
        rgb = colorsys.hsv_to_rgb(hue, 0.85, value)
        name = OBJECT_NOUNS[k] if k < len(OBJECT_NOUNS) else f"item{k}"
        classes.append(ObjectClass(k, name, SHAPES[m % len(SHAPES)], tuple(rgb), cat))
    actions = [f"{verb} {_category_name(c)}"
               for _key, verb, _preds in config.groups for c in range(n_cat)]
    return Vocabulary(classes, actions, list(config.predicates),
                      [_category_name(c) for c in range(n_cat)])


def spatial_predicate(box_a, box_b):
    """Geometric predicate holding for ``(a, ?, b)``, or None when ambiguous.

    Boxes are half-open ``(x_min, y_min, x_max, y_max)``. Containment wins, then
    edge contact, then separation along the axis with the larger gap.
    """
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    if tuple(box_a) != tuple(box_b) and ax0 >= bx0 and ay0 >= by0 and ax1 <= bx1 and ay1 <= by1:
        return "inside"
    gx = max(bx0 - ax1, ax0 - bx1)
    gy = max(by0 - ay1, ay0 - by1)
    if (gx == 0 and gy < 0) or (gy == 0 and gx < 0):
        return "touching"
    if gx > 0 and gx >= gy:
        return "left of" if ax1 <= bx0 else "right of"
    if gy > 0:
        return "above" if ay1 <= by0 else "below"
    return None


def action_for(triplets, config, vocab=None):
    """Action label as a function of the relation multiset.

    The arrangement family with most triplets wins (ties: family order); the
    category is the majority category of that family's subjects (ties: lowest).
    """
    vocab = vocab or build_vocabulary(config)
    groups = config.groups
    counts = [0] * len(groups)
    for _s, pred, _o in triplets:
        for g, (_key, _verb, preds) in enumerate(groups):
            if pred in preds:
                counts[g] += 1
    g = int(np.argmax(counts))
    cat_counts = [0] * config.n_categories
    for subj, pred, _o in triplets:
        if pred in groups[g][2]:
            cat_counts[vocab.object_by_name(subj).category] += 1
    c = int(np.argmax(cat_counts))
    return vocab.actions[g * config.n_categories + c]


# ---------------------------------------------------------------- layouts

def _sizes(rng, n, lo, hi, limit):
    sizes = rng.integers(lo, hi + 1, size=n)
    return np.minimum(sizes, limit)


def _split_free(rng, free, parts):
    cuts = np.sort(rng.integers(0, free + 1, size=parts - 1))
    return np.diff(np.concatenate([[0], cuts, [free]]))


def _row_layout(rng, n, size, s_lo, s_hi):
    """Boxes in a left-to-right row that all cross one common scanline."""
    margin, gap = 1, 2
    limit = (size - 2 * margin - gap * (n - 1)) // n
    if limit < 3:
        return None
    s = _sizes(rng, n, s_lo, s_hi, limit)
    free = size - 2 * margin - gap * (n - 1) - int(s.sum())
    extra = _split_free(rng, free, n + 1)
    smax = int(s.max())
    yc = int(rng.integers(margin + smax // 2, size - margin - (smax - smax // 2) + 1))
    boxes, x = [], margin + int(extra[0])
    for i in range(n):
        y0 = yc - int(s[i]) // 2 + int(rng.integers(-1, 2))
        y0 = min(max(y0, margin, yc - int(s[i]) + 1), yc, size - margin - int(s[i]))
        boxes.append((x, y0, x + int(s[i]), y0 + int(s[i])))
        x += int(s[i]) + gap + int(extra[i + 1])
    return boxes


def _transpose(boxes):
    return [(y0, x0, y1, x1) for (x0, y0, x1, y1) in boxes]


def _overlaps(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _place_free(rng, boxes, n, size, s_lo, s_hi, tries=200):
    """Add ``n`` boxes that overlap nothing placed so far (with a 1 px moat)."""
    out = list(boxes)
    for _ in range(n):
        for _attempt in range(tries):
            s = int(rng.integers(s_lo, s_hi + 1))
            x0 = int(rng.integers(1, size - s))
            y0 = int(rng.integers(1, size - s))
            cand = (x0, y0, x0 + s, y0 + s)
            moat = (x0 - 1, y0 - 1, x0 + s + 1, y0 + s + 1)
            if not any(_overlaps(moat, b) for b in out):
                out.append(cand)
                break
        else:
            return None
    return out


def _nest_layout(rng, n_obj, n_inner, size, s_lo, s_hi):
    """Container at index 0, ``n_inner`` boxes inside it, the rest outside."""
    big_lo, big_hi = int(0.5 * size), int(0.72 * size)
    big = int(rng.integers(big_lo, big_hi + 1))
    x0 = int(rng.integers(1, size - big))
    y0 = int(rng.integers(1, size - big))
    container = (x0, y0, x0 + big, y0 + big)
    inner_limit = (big - 4 - (n_inner - 1)) // n_inner
    if inner_limit < 3:
        return None
    s = _sizes(rng, n_inner, max(3, s_lo - 2), s_hi, inner_limit)
    free = big - 4 - (n_inner - 1) - int(s.sum())
    extra = _split_free(rng, free, n_inner + 1)
    boxes, x = [container], x0 + 2 + int(extra[0])
    for i in range(n_inner):
        si = int(s[i])
        yi = int(rng.integers(y0 + 2, y0 + big - 2 - si + 1))
        boxes.append((x, yi, x + si, yi + si))
        x += si + 1 + int(extra[i + 1])
    return _place_free(rng, boxes, n_obj - 1 - n_inner, size, s_lo, s_hi)


def _cluster_layout(rng, n, size, s_lo, s_hi):
    """Equal cells tiled in two rows so edge-sharing neighbours touch."""
    cols = -(-n // 2)
    limit = (size - 2) // cols
    s = int(min(rng.integers(s_lo, s_hi + 1), limit))
    if s < 3:
        return None
    x0 = int(rng.integers(1, size - cols * s))
    y0 = int(rng.integers(1, size - 2 * s))
    boxes = []
    for i in range(n):
        r, c = (0, i) if i < cols else (1, i - cols)
        boxes.append((x0 + c * s, y0 + r * s, x0 + (c + 1) * s, y0 + (r + 1) * s))
    if rng.random() < 0.5:
        boxes = _transpose(boxes)
    return boxes


# -------------------------------------------------------------- rendering

def glyph_mask(shape, w, h):
    """Boolean ``h x w`` mask of a glyph inscribed in its box."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "circle":
        m = u * u + v * v <= 1.0
    elif shape == "square":
        m = (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    elif shape == "triangle":
        m = (v >= -0.9) & (v <= 0.9) & (np.abs(u) <= (v + 0.9) / 1.8)
    elif shape == "cross":
        m = (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    elif shape == "ring":
        r2 = u * u + v * v
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    else:
        raise ValueError(shape)
    if not m.any():
        m[:] = True
    return m


def _render(rng, size, classes, boxes, order):
    canvas = np.full((size, size, 3), _BACKGROUND)
    canvas += rng.normal(0.0, 0.02, size=canvas.shape)
    centers = [None] * len(boxes)
    for i in order:
        x0, y0, x1, y1 = boxes[i]
        m = glyph_mask(classes[i].shape, x1 - x0, y1 - y0)
        region = canvas[y0:y1, x0:x1]
        region[m] = classes[i].color
        ys, xs = np.nonzero(m)
        centers[i] = (float(xs.mean() + x0), float(ys.mean() + y0))
    return np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0, centers


def _pick_relations(rng, boxes, preds, n_rel, names):
    pairs = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            options = [(a, b) for a, b in ((i, j), (j, i))
                       if spatial_predicate(boxes[a], boxes[b]) in preds]
            if options:
                pairs.append(options)
    if len(pairs) < n_rel:
        return None
    chosen = rng.choice(len(pairs), size=n_rel, replace=False)
    out = []
    for idx in sorted(int(c) for c in chosen):
        options = pairs[idx]
        a, b = options[int(rng.integers(len(options)))]
        out.append(((names[a], spatial_predicate(boxes[a], boxes[b]), names[b]), (a, b)))
    return out


def generate_scene(config, seed=None, *, antonyms=None, scene_id=""):
    """Deterministically generate one :class:`SceneRecord`.

    ``seed`` may be an int or a sequence of ints (anything ``numpy.random.default_rng``
    accepts); it defaults to ``config.seed``.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    vocab = build_vocabulary(config)
    antonyms = antonyms or AntonymDictionary()
    size = config.image_size
    s_lo, s_hi = max(3, round(0.16 * size)), max(3, round(0.25 * size))
    groups = config.groups
    for _attempt in range(MAX_RETRIES):
        g = int(rng.integers(len(groups)))
        key, _verb, preds = groups[g]
        cat = int(rng.integers(config.n_categories))
        members = [c for c in vocab.object_classes if c.category == cat]
        n_obj = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
        n_rel = int(rng.integers(config.relations_per_scene[0], config.relations_per_scene[1] + 1))
        if n_obj > len(members):
            continue
        picked = rng.choice(len(members), size=n_obj, replace=False)
        classes = [members[int(i)] for i in picked]
        if key == "horizontal":
            boxes = _row_layout(rng, n_obj, size, s_lo, s_hi)
        elif key == "vertical":
            boxes = _row_layout(rng, n_obj, size, s_lo, s_hi)
            boxes = _transpose(boxes) if boxes else None
        elif key == "containment":
            boxes = _nest_layout(rng, n_obj, n_rel, size, s_lo, s_hi) if n_rel < n_obj else None
        else:
            boxes = _cluster_layout(rng, n_obj, size, s_lo, s_hi)
        if boxes is None:
            continue
        names = [c.name for c in classes]
        picked_rel = _pick_relations(rng, boxes, preds, n_rel, names)
        if picked_rel is None:
            continue
        image, centers = _render(rng, size, classes, boxes, range(n_obj))
        objects = [ObjectAnnotation(nm, tuple(int(v) for v in b)) for nm, b in zip(names, boxes)]
        relations = []
        for triplet, (a, b) in picked_rel:
            focused = compose_focused_region(image, centers[a], centers[b],
                                             config.rbf_sigma, config.blur_sigma)
            relations.append(RelationAnnotation(triplet, (a, b), focused, [],
                                                (centers[a], centers[b])))
        record = SceneRecord(image, action_for([r.triplet for r in relations], config, vocab),
                             objects, relations, scene_id)
        box_of = dict(zip(names, boxes))

        def geometrically_true(t):
            s, p, o = t
            return s != o and spatial_predicate(box_of[s], box_of[o]) == p

        try:
            for idx, rel in enumerate(relations):
                rel.negatives = generate_negative_triplets(
                    record, idx, antonyms, config.n_negatives, reject=geometrically_true)
        except ExhaustionError:
            continue
        return record
    raise GenerationError(
        f"could not satisfy {config!r} within {MAX_RETRIES} attempts (seed={seed!r})")
