"""Evaluation protocols: retrieval, probing, relation ranking, localization, relevance maps."""

from .export import dump_embeddings, plot_retrieval_curves, read_embeddings, save_overlay
from .localization import (
    ConvDecoder,
    LocalizationDecoderConfig,
    RelationLocalizer,
    localization_data,
    mask_metrics,
    relation_localization,
)
from .metrics import (
    MetricsReport,
    dice_score,
    iou_score,
    mean_absolute_error,
    topk_accuracy,
    topk_report,
    truth_ranks,
)
from .probe import LinearProbeClassifier, linear_probe
from .relevance import overlay_heatmap, relevance_map
from .retrieval import (
    ObjectClassifier,
    PromptTemplateSet,
    class_text_embedding,
    class_text_embeddings,
    cosine_scores,
    predicate_classification,
    scene_graph_classification,
    select_predicate_vocab,
    zero_shot_retrieval,
)

__all__ = [
    "ConvDecoder", "LinearProbeClassifier", "LocalizationDecoderConfig", "MetricsReport",
    "ObjectClassifier", "PromptTemplateSet", "RelationLocalizer", "class_text_embedding",
    "class_text_embeddings", "cosine_scores", "dice_score", "dump_embeddings", "iou_score",
    "linear_probe", "localization_data", "mask_metrics", "mean_absolute_error",
    "overlay_heatmap", "plot_retrieval_curves", "predicate_classification", "read_embeddings",
    "relation_localization", "relevance_map", "save_overlay", "scene_graph_classification",
    "select_predicate_vocab", "topk_accuracy", "topk_report", "truth_ranks", "zero_shot_retrieval",
]
