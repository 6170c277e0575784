"""Relation-focused regions: RBF weighting around object centers blended with a blurred copy."""

import numpy as np

from .._validation import check_image, check_positive


def rbf_mask(center, sigma, shape):
    """Gaussian radial basis weights ``exp(-|p - c|^2 / (2 sigma^2))`` on an ``H x W`` grid.

    Pixel ``p = (x, y)`` is (column, row). ``center`` may lie outside the grid.
    """
    sigma = check_positive(sigma, "sigma")
    h, w = int(shape[0]), int(shape[1])
    cx, cy = float(center[0]), float(center[1])
    dx2 = (np.arange(w, dtype=np.float64) - cx) ** 2
    dy2 = (np.arange(h, dtype=np.float64) - cy) ** 2
    d2 = dy2[:, None] + dx2[None, :]
    denom = 2.0 * sigma * sigma
    if denom == 0.0:  # sigma so small its square underflows
        return (d2 == 0).astype(np.float64)
    return np.exp(-d2 / denom)


def gaussian_kernel1d(sigma):
    """Normalised 1-D Gaussian taps truncated at ``int(3 sigma + 0.5)``."""
    radius = int(3.0 * sigma + 0.5)
    if radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(arr, kernel, axis):
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    # numpy "symmetric" repeats the edge sample (d c b a | a b c d)
    padded = np.pad(arr, pad, mode="symmetric")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for offset, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(offset, offset + n), axis=axis)
    return out


def gaussian_blur(image, sigma):
    """Separable Gaussian blur with reflected borders; ``sigma == 0`` is the identity."""
    sigma = check_positive(sigma, "sigma", strict=False)
    image = check_image(image)
    if sigma == 0:
        return image.copy()
    kernel = gaussian_kernel1d(sigma)
    return _convolve_axis(_convolve_axis(image, kernel, 0), kernel, 1)


def focus_weights(shape, centers, sigma):
    """Pixelwise max of one RBF per center; the relation's soft ground-truth mask."""
    weights = [rbf_mask(c, sigma, shape) for c in centers]
    return np.maximum.reduce(weights)


def compose_focused_region(image, center_1, center_2, sigma_rbf, sigma_blur):
    image = check_image(image)
    w = focus_weights(image.shape[:2], (center_1, center_2), sigma_rbf)[..., None]
    blurred = gaussian_blur(image, sigma_blur)
    return w * image + (1.0 - w) * blurred
