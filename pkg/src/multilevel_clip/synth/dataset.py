"""On-disk dataset layout: PNG images, focused regions, JSON annotations and a manifest."""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..records import SceneRecord
from .scenes import SceneConfig, build_vocabulary, generate_scene

MANIFEST_VERSION = 1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def to_uint8(image):
    return np.round(np.clip(np.asarray(image), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    path = Path(path)
    try:
        Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_png(path):
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"failed to read {path}: {exc}") from exc


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scene_id(index):
    return f"{index:06d}"


def assign_splits(ids, seed):
    """Rank scenes by a hash of ``(seed, id)`` and cut 80/10/10 by rounded counts."""
    order = sorted(ids, key=lambda s: hashlib.sha256(f"{seed}:{s}".encode()).hexdigest())
    n = len(order)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


@dataclass
class DatasetManifest:
    root: Path
    data: dict

    @property
    def splits(self):
        return self.data["splits"]

    @property
    def config(self):
        return SceneConfig.from_dict(self.data["config"])

    @property
    def path(self):
        return self.root / "manifest.json"

    def checksum(self):
        return sha256_file(self.path)

    def vocabulary(self):
        return build_vocabulary(self.config)

    def load_annotation(self, sid):
        entry = self.data["records"][sid]
        return json.loads((self.root / entry["annotation"]).read_text(encoding="utf-8"))

    def load_record(self, sid):
        entry = self.data["records"][sid]
        ann = self.load_annotation(sid)
        image = read_png(self.root / entry["image"])
        focused = [read_png(self.root / f) for f in entry["focused"]]
        return SceneRecord.from_annotation(ann, image, focused)

    def load_split(self, split):
        return [self.load_record(sid) for sid in self.splits[split]]

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"manifest not found: {path}") from None
        return cls(path.parent, data)


def write_scene(record, out_dir):
    """Write one scene's files; returns ``{"image", "annotation", "focused"}`` relative paths."""
    out_dir = Path(out_dir)
    sid = record.scene_id
    entry = {
        "image": f"images/{sid}.png",
        "annotation": f"annotations/{sid}.json",
        "focused": [f"focused/{sid}_{j}.png" for j in range(record.n_relations)],
    }
    write_png(out_dir / entry["image"], record.image)
    for rel, rel_path in zip(record.relations, entry["focused"]):
        write_png(out_dir / rel_path, rel.focused_region)
    ann_path = out_dir / entry["annotation"]
    try:
        ann_path.write_text(json.dumps(record.to_annotation(), indent=1, sort_keys=True),
                            encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to write {ann_path}: {exc}") from exc
    return entry


def render_dataset(config, n_scenes, out_dir, *, antonyms=None):
    """Generate ``n_scenes`` scenes under ``out_dir`` and write ``manifest.json``.

    Scene ``i`` is seeded with ``(config.seed, i)`` so scenes are independent of
    one another and the output is byte-reproducible.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "focused", "annotations"):
        try:
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {out_dir / sub}: {exc}") from exc
    records = {}
    for i in range(n_scenes):
        sid = scene_id(i)
        record = generate_scene(config, seed=(config.seed, i), antonyms=antonyms, scene_id=sid)
        records[sid] = write_scene(record, out_dir)
    checksums = {}
    for entry in records.values():
        for rel_path in [entry["image"], entry["annotation"], *entry["focused"]]:
            checksums[rel_path] = sha256_file(out_dir / rel_path)
    data = {
        "version": MANIFEST_VERSION,
        "config": config.to_dict(),
        "n_scenes": n_scenes,
        "splits": assign_splits(list(records), config.seed),
        "records": records,
        "checksums": dict(sorted(checksums.items())),
    }
    manifest_path = out_dir / "manifest.json"
    try:
        manifest_path.write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to write {manifest_path}: {exc}") from exc
    return DatasetManifest(out_dir, data)
