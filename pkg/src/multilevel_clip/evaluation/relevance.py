"""Class-token relevance maps and heat-map overlays."""

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps

from .._validation import check_image
from .retrieval import resolve_level


def _minmax(x):
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return torch.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


@torch.no_grad()
def relevance_map(model, image, level="global"):
    """Patch-to-class-token cosine similarity, min-max scaled and upsampled to the image size.

    The image is resized to the encoder's input size first. A constant
    similarity map yields 0.5 everywhere.
    """
    image = check_image(image)
    enc = model.vision(resolve_level(level))
    h, w = image.shape[:2]
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(model.dtype)
    if (h, w) != (enc.input_size, enc.input_size):
        x = F.interpolate(x, size=(enc.input_size, enc.input_size), mode="bilinear",
                          align_corners=False)
    toks = enc.tokens(x)[0].double()
    sims = F.cosine_similarity(toks[1:], toks[:1], dim=-1).reshape(1, 1, enc.grid, enc.grid)
    if float(sims.max() - sims.min()) <= 1e-12:
        return np.full((h, w), 0.5)
    up = F.interpolate(_minmax(sims), size=(h, w), mode="bilinear", align_corners=False)
    return _minmax(up[0, 0]).numpy()


def overlay_heatmap(image, heatmap, alpha=0.5, cmap="jet"):
    """Blend a ``[0, 1]`` heat map (coloured with ``cmap``) over ``image``; returns ``uint8`` RGB."""
    image = check_image(image)
    colours = colormaps[cmap](np.clip(heatmap, 0.0, 1.0))[..., :3]
    out = (1.0 - alpha) * image + alpha * colours
    return np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)
