"""Image montages and summary numbers for reconstructions."""
import numpy as np
from PIL import Image

__all__ = ["nrmse", "per_echo_nrmse", "montage", "save_png", "t_summary"]


def nrmse(recon, ref):
    """``|| |recon| - |ref| || / || ref ||`` over all echoes.

    Magnitudes are compared because estimated coil maps fix the image phase
    only up to a global constant. Two all-zero images score 0.
    """
    a, b = np.abs(np.asarray(recon)), np.abs(np.asarray(ref))
    den = np.linalg.norm(b)
    num = np.linalg.norm(a - b)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)


def per_echo_nrmse(recon, ref):
    return [nrmse(r, f) for r, f in zip(recon, ref)]


def montage(images, percentile=99.0):
    """Side-by-side magnitude tiles scaled to 8 bits at a shared percentile window."""
    mags = [np.abs(np.asarray(im)) for im in images]
    tiles = np.concatenate(mags, axis=-1)
    top = np.percentile(tiles, percentile)
    if top <= 0:
        return np.zeros(tiles.shape, dtype=np.uint8)
    return np.round(np.clip(tiles / top, 0.0, 1.0) * 255).astype(np.uint8)


def signed_map(t, limit=None):
    """RGB rendering of a t-map with a window symmetric about zero (red +, blue -)."""
    t = np.nan_to_num(np.asarray(t, dtype=np.float64), posinf=0.0, neginf=0.0)
    limit = limit or float(np.percentile(np.abs(t), 99.0)) or 1.0
    s = np.clip(t / limit, -1.0, 1.0)
    rgb = np.zeros(t.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.round(np.maximum(s, 0) * 255)
    rgb[..., 2] = np.round(np.maximum(-s, 0) * 255)
    return rgb


def save_png(path, pixels):
    Image.fromarray(pixels).save(path, format="PNG", optimize=False)


def t_summary(t, mask):
    """Mean t inside and outside an activation mask, and their ratio."""
    t = np.asarray(t, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    inside = float(np.mean(t[mask]))
    outside = float(np.mean(t[~mask]))
    outside_abs = float(np.mean(np.abs(t[~mask])))
    return {
        "mean_in": inside,
        "mean_out": outside,
        "mean_abs_out": outside_abs,
        "ratio_abs": inside / outside_abs if outside_abs > 0 else float("inf"),
        "max": float(np.max(t)),
    }
