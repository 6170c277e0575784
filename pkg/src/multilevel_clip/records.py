"""Annotated scene records shared by generation, curation, training and evaluation."""

from dataclasses import dataclass, field

import numpy as np

Triplet = tuple  # (object_1, relation, object_2)


def triplet_text(triplet):
    """Render a relation triplet as the space-joined caption fed to text encoders."""
    return " ".join(triplet)


@dataclass(frozen=True)
class ObjectAnnotation:
    name: str
    bbox: tuple  # (x_min, y_min, x_max, y_max), pixels, half-open

    def center(self):
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


@dataclass
class RelationAnnotation:
    triplet: tuple
    object_indices: tuple
    focused_region: np.ndarray
    negatives: list
    centers: tuple = ()  # centers of mass of the two participants, (x, y) pixels

    @property
    def predicate(self):
        return self.triplet[1]


@dataclass
class SceneRecord:
    image: np.ndarray
    action: str
    objects: list
    relations: list = field(default_factory=list)
    scene_id: str = ""

    @property
    def n_objects(self):
        return len(self.objects)

    @property
    def n_relations(self):
        return len(self.relations)

    def positive_triplets(self):
        return [tuple(r.triplet) for r in self.relations]

    def to_annotation(self):
        """JSON-compatible annotation (pixel grids excluded)."""
        return {
            "id": self.scene_id,
            "image_size": [int(self.image.shape[0]), int(self.image.shape[1])],
            "action": self.action,
            "objects": [{"name": o.name, "bbox": [int(v) for v in o.bbox]} for o in self.objects],
            "relations": [
                {
                    "triplet": list(r.triplet),
                    "object_indices": [int(i) for i in r.object_indices],
                    "centers": [[float(c) for c in xy] for xy in r.centers],
                    "negatives": [list(n) for n in r.negatives],
                }
                for r in self.relations
            ],
        }

    @classmethod
    def from_annotation(cls, ann, image, focused_regions):
        objects = [ObjectAnnotation(o["name"], tuple(o["bbox"])) for o in ann["objects"]]
        relations = [
            RelationAnnotation(
                triplet=tuple(r["triplet"]),
                object_indices=tuple(r["object_indices"]),
                focused_region=focused,
                negatives=[tuple(n) for n in r["negatives"]],
                centers=tuple(tuple(c) for c in r.get("centers", ())),
            )
            for r, focused in zip(ann["relations"], focused_regions)
        ]
        return cls(image=image, action=ann["action"], objects=objects,
                   relations=relations, scene_id=ann.get("id", ""))
