"""Six disentangled encoders: global / object / relation, on the vision and text sides."""

import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import check_int
from .exceptions import InvalidInputError, InvalidParameterError
from .records import triplet_text

CHECKPOINT_FORMAT = "multilevel-clip-checkpoint"
CHECKPOINT_VERSION = 1
LEVELS = ("global", "object", "relation")


class Tokenizer:
    """Lower-cased whitespace tokenizer with ``<pad>``, ``<unk>`` and ``<eos>`` ids."""

    PAD, UNK, EOS = 0, 1, 2
    SPECIALS = ("<pad>", "<unk>", "<eos>")

    def __init__(self, words=()):
        self.itos = list(self.SPECIALS) + sorted(set(words) - set(self.SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @classmethod
    def from_texts(cls, texts):
        return cls({w for t in texts for w in t.lower().split()})

    def encode(self, text, max_tokens):
        ids = [self.stoi.get(w, self.UNK) for w in text.lower().split()]
        return ids[: max_tokens - 1] + [self.EOS]

    def batch_encode(self, texts, max_tokens):
        out = torch.full((len(texts), max_tokens), self.PAD, dtype=torch.long)
        for i, t in enumerate(texts):
            ids = self.encode(t, max_tokens)
            out[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        return out


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    patch_size: int = 8
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    image_size: int = 64
    crop_size: int = 32
    max_tokens: int = 16
    vocab: list = field(default_factory=list)
    init_temperature: float = 0.07
    init_kd_temperature: float = 1.0

    def __post_init__(self):
        check_int(self.embed_dim, "embed_dim", min_value=1)
        check_int(self.heads, "heads", min_value=1)
        check_int(self.depth, "depth", min_value=1)
        check_int(self.max_tokens, "max_tokens", min_value=2)
        if self.embed_dim % self.heads:
            raise InvalidParameterError(
                f"embed_dim={self.embed_dim} is not divisible by heads={self.heads}")
        if self.embed_dim % 4:
            raise InvalidParameterError(f"embed_dim={self.embed_dim} must be divisible by 4")
        for name in ("image_size", "crop_size"):
            if getattr(self, name) % self.patch_size:
                raise InvalidParameterError(
                    f"patch_size={self.patch_size} does not divide {name}={getattr(self, name)}")

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ layers

class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_padding_mask=None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(),
                                 nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask)
        return x + self.mlp(self.norm2(x))


def sincos_2d(grid, dim):
    """``(grid * grid, dim)`` 2-D sine-cosine table: half the channels encode rows, half columns."""
    if dim % 4:
        raise InvalidParameterError(f"embed_dim={dim} must be divisible by 4 for 2-D positions")
    omega = 1.0 / 10000 ** (torch.arange(dim // 4, dtype=torch.float64) / (dim // 4))
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64),
                            torch.arange(grid, dtype=torch.float64), indexing="ij")

    def enc(pos):
        out = pos.reshape(-1, 1) * omega[None]
        return torch.cat([out.sin(), out.cos()], dim=1)

    return torch.cat([enc(ys), enc(xs)], dim=1).float()


class VisionEncoder(nn.Module):
    """Patchify, embed, add learned positions, run blocks; project the class token.

    Position offsets are learned but start from a 2-D sine-cosine table, which
    gives a randomly initialised encoder usable row/column information from the first step.
    """

    def __init__(self, cfg, input_size):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.input_size = input_size
        self.grid = input_size // cfg.patch_size
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(3 * cfg.patch_size ** 2, d)
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        pos = torch.cat([torch.zeros(1, d), sincos_2d(self.grid, d)])
        self.pos_embed = nn.Parameter(pos[None].clone())
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d, bias=False)

    def patchify(self, images):
        b, c, h, w = images.shape
        if c != 3 or h != self.input_size or w != self.input_size:
            raise InvalidInputError(
                f"expected images of shape (B, 3, {self.input_size}, {self.input_size}), "
                f"got {tuple(images.shape)}")
        p = self.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def tokens(self, images):
        """Final normalised token sequence; index 0 is the class token."""
        x = self.patch_embed(self.patchify(images))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, images):
        toks = self.tokens(images)
        return self.proj(toks[:, 0]), toks[:, 1:]


class TextEncoder(nn.Module):
    """Token + position embeddings through blocks; the end-of-sequence token is projected."""

    def __init__(self, cfg, vocab_size):
        super().__init__()
        d = cfg.embed_dim
        self.max_tokens = cfg.max_tokens
        self.token_embed = nn.Embedding(vocab_size, d)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.max_tokens, d) * 0.01)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d, bias=False)

    def forward(self, ids):
        pad = ids == Tokenizer.PAD
        eos_pos = (~pad).sum(dim=1) - 1
        x = self.token_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad)
        x = self.norm(x)
        return self.proj(x[torch.arange(ids.shape[0]), eos_pos])


class ScenarioModel(nn.Module):
    """Global, object and relation encoders per modality plus learnable temperatures.

    Contrastive temperatures (one per alignment level) and the distillation
    temperature are stored as logs so they stay positive.
    """

    def __init__(self, cfg, tokenizer=None):
        super().__init__()
        self.config = cfg
        self.tokenizer = tokenizer or Tokenizer(cfg.vocab)
        cfg.vocab = self.tokenizer.itos[len(Tokenizer.SPECIALS):]
        n_vocab = len(self.tokenizer)
        self.vision_global = VisionEncoder(cfg, cfg.image_size)
        self.vision_object = VisionEncoder(cfg, cfg.crop_size)
        self.vision_relation = VisionEncoder(cfg, cfg.image_size)
        self.text_global = TextEncoder(cfg, n_vocab)
        self.text_object = TextEncoder(cfg, n_vocab)
        self.text_relation = TextEncoder(cfg, n_vocab)
        self.log_temperature = nn.Parameter(torch.full((3,), math.log(cfg.init_temperature)))
        self.log_kd_temperature = nn.Parameter(torch.tensor(math.log(cfg.init_kd_temperature)))

    @property
    def temperatures(self):
        return self.log_temperature.exp()

    @property
    def kd_temperature(self):
        return self.log_kd_temperature.exp()

    def vision(self, level):
        return getattr(self, f"vision_{level}")

    def text(self, level):
        return getattr(self, f"text_{level}")

    def encoder_modules(self):
        return {f"{side}_{lvl}": getattr(self, f"{side}_{lvl}")
                for side in ("vision", "text") for lvl in LEVELS}

    def encode_image(self, images, level="global"):
        return self.vision(level)(images.to(self.dtype))

    def encode_text(self, texts, level="global"):
        ids = self.tokenizer.batch_encode(list(texts), self.config.max_tokens)
        return self.text(level)(ids)

    @property
    def dtype(self):
        return self.log_temperature.dtype


# ---------------------------------------------------------------- batching

def image_to_tensor(image):
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def crop_box(image, bbox, size):
    """Crop ``bbox`` (half-open, pixels) and resize bilinearly to ``size x size``.

    Degenerate boxes are grown to at least one pixel.
    """
    h, w = image.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in bbox)
    x0, y0 = min(max(x0, 0), w - 1), min(max(y0, 0), h - 1)
    x1, y1 = max(min(x1, w), x0 + 1), max(min(y1, h), y0 + 1)
    patch = image_to_tensor(image[y0:y1, x0:x1])[None]
    return F.interpolate(patch, size=(size, size), mode="bilinear", align_corners=False)[0]


def union_box(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


@dataclass
class RecordTensors:
    """Pre-processed encoder inputs for one scene (cached across epochs)."""

    image: torch.Tensor
    crops: torch.Tensor
    focused: torch.Tensor
    caption: str
    object_texts: list
    relation_texts: list
    negative_texts: list  # one list per relation


def record_tensors(record, cfg):
    H = record.image.shape[0]
    if record.image.shape[:2] != (cfg.image_size, cfg.image_size) or H != cfg.image_size:
        raise InvalidInputError(
            f"scene image {record.image.shape[:2]} does not match image_size={cfg.image_size}")
    crops = [crop_box(record.image, o.bbox, cfg.crop_size) for o in record.objects]
    focused = [image_to_tensor(r.focused_region) for r in record.relations]
    empty_c = torch.zeros(0, 3, cfg.crop_size, cfg.crop_size)
    empty_f = torch.zeros(0, 3, cfg.image_size, cfg.image_size)
    return RecordTensors(
        image=image_to_tensor(record.image),
        crops=torch.stack(crops) if crops else empty_c,
        focused=torch.stack(focused) if focused else empty_f,
        caption=record.action,
        object_texts=[o.name for o in record.objects],
        relation_texts=[triplet_text(r.triplet) for r in record.relations],
        negative_texts=[[triplet_text(n) for n in r.negatives] for r in record.relations],
    )


@dataclass
class EmbeddingSet:
    """One scene's six embedding blocks."""

    V_G: torch.Tensor
    V_O: torch.Tensor
    V_R: torch.Tensor
    T_G: torch.Tensor
    T_O: torch.Tensor
    T_R: torch.Tensor

    @property
    def n_O(self):
        return self.V_O.shape[0]

    @property
    def n_R(self):
        return self.V_R.shape[0]


@dataclass
class BatchEmbeddings:
    """Stacked embeddings for a batch: ``B`` global rows, ``sum n_O`` and ``sum n_R`` local rows."""

    V_G: torch.Tensor
    V_O: torch.Tensor
    V_R: torch.Tensor
    T_G: torch.Tensor
    T_O: torch.Tensor
    T_R: torch.Tensor
    T_neg: torch.Tensor  # (sum n_R, K, d), padded
    neg_mask: torch.Tensor  # (sum n_R, K) True where a negative exists
    obj_counts: list
    rel_counts: list

    @property
    def batch_size(self):
        return self.V_G.shape[0]

    def object_scene_index(self):
        return torch.repeat_interleave(torch.arange(self.batch_size),
                                       torch.tensor(self.obj_counts, dtype=torch.long))

    def relation_scene_index(self):
        return torch.repeat_interleave(torch.arange(self.batch_size),
                                       torch.tensor(self.rel_counts, dtype=torch.long))

    def scene(self, i):
        o0, r0 = sum(self.obj_counts[:i]), sum(self.rel_counts[:i])
        o1, r1 = o0 + self.obj_counts[i], r0 + self.rel_counts[i]
        return EmbeddingSet(self.V_G[i], self.V_O[o0:o1], self.V_R[r0:r1],
                            self.T_G[i], self.T_O[o0:o1], self.T_R[r0:r1])

    def scenes(self):
        return [self.scene(i) for i in range(self.batch_size)]


def forward_batch(model, items, caption_fn=None):
    """Encode a list of :class:`RecordTensors`.

    ``caption_fn(level, index, text)`` may rewrite texts before tokenisation
    (training uses it to wrap labels in prompt templates).
    """
    dt = model.dtype
    wrap = caption_fn or (lambda level, i, text: text)
    images = torch.stack([it.image for it in items]).to(dt)
    crops = torch.cat([it.crops for it in items]).to(dt)
    focused = torch.cat([it.focused for it in items]).to(dt)
    captions = [wrap("global", i, it.caption) for i, it in enumerate(items)]
    obj_texts = [wrap("object", i, t) for i, it in enumerate(items) for t in it.object_texts]
    rel_texts = [wrap("relation", i, t) for i, it in enumerate(items) for t in it.relation_texts]
    negs = [n for it in items for n in it.negative_texts]
    K = max((len(n) for n in negs), default=0)
    d = model.config.embed_dim
    V_G, _ = model.vision_global(images)
    V_O = model.vision_object(crops)[0] if len(crops) else images.new_zeros(0, d)
    V_R = model.vision_relation(focused)[0] if len(focused) else images.new_zeros(0, d)
    T_G = model.encode_text(captions, "global")
    T_O = model.encode_text(obj_texts, "object") if obj_texts else images.new_zeros(0, d)
    T_R = model.encode_text(rel_texts, "relation") if rel_texts else images.new_zeros(0, d)
    flat_negs = [wrap("relation", i, t) for i, n in enumerate(negs) for t in n]
    T_neg = images.new_zeros(len(negs), K, d)
    mask = torch.zeros(len(negs), K, dtype=torch.bool)
    if flat_negs:
        emb = model.encode_text(flat_negs, "relation")
        pos = 0
        for r, n in enumerate(negs):
            T_neg[r, : len(n)] = emb[pos:pos + len(n)]
            mask[r, : len(n)] = True
            pos += len(n)
    return BatchEmbeddings(V_G, V_O, V_R, T_G, T_O, T_R, T_neg, mask,
                           [len(it.object_texts) for it in items],
                           [len(it.relation_texts) for it in items])


def forward_scene(model, record):
    """Six-way :class:`EmbeddingSet` for one :class:`~multilevel_clip.records.SceneRecord`."""
    return forward_batch(model, [record_tensors(record, model.config)]).scene(0)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, **payload):
    """Write a versioned checkpoint; ``payload`` may hold optimizer/EMA state and configs."""
    data = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": model.config.to_dict(),
        "model": model.state_dict(),
        "imported_weights": None,
    }
    data.update(payload)
    buf = io.BytesIO()
    torch.save(data, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, payload)``; raises :class:`InvalidInputError` on incompatibility."""
    data = torch.load(path, map_location="cpu", weights_only=False)
    if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = EncoderConfig(**data["encoder_config"])
    model = ScenarioModel(cfg, Tokenizer(cfg.vocab))
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in data["model"].items()}
    if expected != found:
        bad = sorted(k for k in expected.keys() | found.keys() if expected.get(k) != found.get(k))
        raise InvalidInputError(f"{path}: parameter shapes incompatible with config: {bad[:5]}")
    model.load_state_dict(data["model"])
    model = model.to(data["model"]["log_temperature"].dtype)
    model.eval()
    return model, data
