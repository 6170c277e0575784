"""Relation localization: a small convolutional decoder over relation-encoder patch tokens."""

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .._validation import check_int, check_positive
from ..exceptions import InvalidInputError, InvalidParameterError
from ..synth.focus import focus_weights
from .metrics import MetricsReport, dice_score, iou_score, mean_absolute_error


@dataclass
class LocalizationDecoderConfig:
    channels: tuple = (256, 64, 1)
    kernels: tuple = (3, 3, 1)
    frozen_encoder: bool = True
    lr: float = 1e-4
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.channels, self.kernels = tuple(self.channels), tuple(self.kernels)
        if len(self.channels) != len(self.kernels) or not self.channels:
            raise InvalidParameterError("channels and kernels must be non-empty and of equal length")
        if self.channels[-1] != 1:
            raise InvalidParameterError(f"final channel width must be 1, got {self.channels[-1]}")
        if any(k % 2 == 0 for k in self.kernels):
            raise InvalidParameterError(f"kernel sizes must be odd, got {self.kernels}")
        check_positive(self.lr, "lr")
        check_int(self.epochs, "epochs", min_value=1)
        check_int(self.batch_size, "batch_size", min_value=1)

    def to_dict(self):
        d = asdict(self)
        d["channels"], d["kernels"] = list(self.channels), list(self.kernels)
        return d


class ConvDecoder(torch.nn.Module):
    """Same-padded conv stack with ReLU between layers; outputs one logit map."""

    def __init__(self, in_channels, channels, kernels):
        super().__init__()
        layers, c = [], in_channels
        for i, (out, k) in enumerate(zip(channels, kernels)):
            layers.append(torch.nn.Conv2d(c, out, k, padding=k // 2))
            if i < len(channels) - 1:
                layers.append(torch.nn.ReLU())
            c = out
        self.net = torch.nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _as_batch(images):
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected images of shape (N, H, W, 3), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class RelationLocalizer(BaseEstimator):
    """Predict a soft relation mask from a (masked) image.

    Parameters
    ----------
    encoder : VisionEncoder
        Copied at fit time; the original is never modified.
    config : LocalizationDecoderConfig
    """

    def __init__(self, encoder=None, config=None):
        self.encoder = encoder
        self.config = config

    def _logits(self, x):
        b = x.shape[0]
        toks = self.encoder_.tokens(x.to(self.dtype_))[:, 1:]
        g = self.encoder_.grid
        fmap = toks.transpose(1, 2).reshape(b, -1, g, g)
        logits = self.decoder_(fmap)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)[:, 0]

    def fit(self, X, y):
        cfg = self.config or LocalizationDecoderConfig()
        if self.encoder is None:
            raise InvalidParameterError("RelationLocalizer needs a vision encoder")
        x = _as_batch(X)
        masks = torch.as_tensor(np.asarray(y), dtype=torch.float32)
        if masks.shape != (x.shape[0], x.shape[2], x.shape[3]):
            raise InvalidInputError(
                f"mask shape {tuple(masks.shape)} does not match images {tuple(x.shape)}")
        torch.manual_seed(cfg.seed)
        self.encoder_ = copy.deepcopy(self.encoder)
        self.dtype_ = next(self.encoder_.parameters()).dtype
        self.decoder_ = ConvDecoder(self.encoder_.proj.in_features, cfg.channels,
                                    cfg.kernels).to(self.dtype_)
        for p in self.encoder_.parameters():
            p.requires_grad_(not cfg.frozen_encoder)
        params = list(self.decoder_.parameters())
        if not cfg.frozen_encoder:
            params += list(self.encoder_.parameters())
        opt = torch.optim.Adam(params, lr=cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        self.loss_curve_ = []
        for _ in range(cfg.epochs):
            self.encoder_.train(not cfg.frozen_encoder)
            order = rng.permutation(x.shape[0])
            total = 0.0
            for s in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(order[s:s + cfg.batch_size])
                pred = torch.sigmoid(self._logits(x[idx]))
                loss = F.mse_loss(pred, masks[idx].to(pred.dtype))
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            self.loss_curve_.append(total / len(order))
        self.encoder_.eval()
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        check_is_fitted(self, "decoder_")
        x = _as_batch(X)
        cfg = self.config or LocalizationDecoderConfig()
        out = [torch.sigmoid(self._logits(x[s:s + cfg.batch_size]))
               for s in range(0, x.shape[0], cfg.batch_size)]
        return torch.cat(out).double().numpy()

    def predict(self, X):
        return self.predict_proba(X) >= 0.5


def masked_union_image(record, relation):
    """Scene image with every pixel outside the union of the two participant boxes set to zero."""
    out = np.zeros_like(record.image)
    for i in relation.object_indices:
        x0, y0, x1, y1 = (int(v) for v in record.objects[i].bbox)
        out[y0:y1, x0:x1] = record.image[y0:y1, x0:x1]
    return out


def localization_data(records, rbf_sigma):
    """``(images, masks)`` arrays: union-masked inputs and RBF weight-map targets."""
    images, masks = [], []
    for rec in records:
        for rel in rec.relations:
            if len(rel.centers) != 2:
                raise InvalidInputError(f"scene {rec.scene_id!r} has a relation without centers")
            images.append(masked_union_image(rec, rel))
            masks.append(focus_weights(rec.image.shape[:2], rel.centers, rbf_sigma))
    h = records[0].image.shape[0] if records else 0
    empty = np.zeros((0, h, h))
    return (np.stack(images) if images else empty[..., None].repeat(3, -1),
            np.stack(masks) if masks else empty)


def mask_metrics(pred_proba, target):
    """Dice and IoU at threshold 0.5 plus raw MAE, averaged over masks."""
    pred_proba, target = np.asarray(pred_proba), np.asarray(target)
    if pred_proba.shape != target.shape:
        raise InvalidInputError(f"mask shapes differ: {pred_proba.shape} vs {target.shape}")
    if len(target) == 0:
        return {}
    return {
        "dice": float(np.mean([dice_score(p, t) for p, t in zip(pred_proba, target)])),
        "iou": float(np.mean([iou_score(p, t) for p, t in zip(pred_proba, target)])),
        "mae": mean_absolute_error(pred_proba, target),
    }


def relation_localization(model, train_records, test_records, cfg=None, rbf_sigma=6.0):
    """Train a decoder on ``train_records`` relations and report mask metrics on ``test_records``."""
    cfg = cfg or LocalizationDecoderConfig()
    X_tr, y_tr = localization_data(train_records, rbf_sigma)
    X_te, y_te = localization_data(test_records, rbf_sigma)
    loc = RelationLocalizer(model.vision_relation, cfg).fit(X_tr, y_tr)
    metrics = mask_metrics(loc.predict_proba(X_te), y_te) if len(X_te) else {}
    variant = "frozen" if cfg.frozen_encoder else "trainable"
    return MetricsReport(f"localize_{variant}", metrics, len(X_te),
                         {**cfg.to_dict(), "rbf_sigma": rbf_sigma,
                          "final_train_loss": loc.loss_curve_[-1]})
