"""Pure numpy alpha-compositing core; fallback for ``_raster_ext``.

Pairs (gaussian, pixel) inside each 3-sigma ellipse are enumerated in one
vectorized pass, grouped per pixel in depth order, and padded into a dense
(pixels, depth-slots) layout so front-to-back compositing and its reverse
sweep run column by column.
"""
from __future__ import annotations

import numpy as np

CUTOFF = 9.0


def _pairs(means, conics, order, bbox, width):
    bb = bbox[order]
    w = bb[:, 1] - bb[:, 0] + 1
    h = bb[:, 3] - bb[:, 2] + 1
    sizes = np.maximum(w, 0) * np.maximum(h, 0)
    total = int(sizes.sum())
    rank = np.repeat(np.arange(order.size), sizes)
    local = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    wr = w[rank]
    x = bb[rank, 0] + local % wr
    y = bb[rank, 2] + local // wr
    g = order[rank]
    dx = x - means[g, 0]
    dy = y - means[g, 1]
    p = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
    keep = p <= CUTOFF
    pix = (y * width + x)[keep]
    rank, g, p = rank[keep], g[keep], p[keep]
    srt = np.lexsort((rank, pix))
    return pix[srt], g[srt], p[srt]


def forward(means, conics, opacity, colors, order, bbox, height, width, t_min):
    n_pix = height * width
    pix, gauss, power = _pairs(means, conics, order, bbox, width)
    counts = np.bincount(pix, minlength=n_pix)
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    slot = np.arange(pix.size) - offsets[pix]
    k_max = int(counts.max()) if pix.size else 0

    alpha = np.zeros((n_pix, k_max))
    col = np.zeros((n_pix, k_max, 3))
    alpha[pix, slot] = opacity[gauss] * np.exp(-0.5 * power)
    col[pix, slot] = colors[gauss]

    t_incl = np.cumprod(1.0 - alpha, axis=1)
    t_excl = np.ones_like(alpha)
    t_excl[:, 1:] = t_incl[:, :-1]
    if t_min > 0:
        # T is nonincreasing along a pixel list, so everything past the
        # first slot with T < t_min is dropped
        live = t_excl >= t_min
        alpha = np.where(live, alpha, 0.0)
        t_incl = np.cumprod(1.0 - alpha, axis=1)
        t_excl[:, 1:] = t_incl[:, :-1]
    else:
        live = np.ones_like(alpha, dtype=bool)

    weight = alpha * t_excl
    image = (col * weight[..., None]).sum(axis=1).reshape(height, width, 3)
    t_final = t_incl[:, -1] if k_max else np.ones(n_pix)
    state = {
        "pix": pix, "gauss": gauss, "power": power, "slot": slot, "live": live,
        "alpha": alpha, "t_excl": t_excl, "col": col, "k_max": k_max,
        "n_gauss": means.shape[0], "height": height, "width": width,
    }
    return image, (1.0 - t_final).reshape(height, width), state


def backward(state, grad_image, means, conics, opacity, colors):
    height, width, n_gauss = state["height"], state["width"], state["n_gauss"]
    n_pix = height * width
    alpha, t_excl, col = state["alpha"], state["t_excl"], state["col"]
    gimg = grad_image.reshape(n_pix, 3)

    d_alpha = np.zeros_like(alpha)
    s = np.zeros((n_pix, 3))
    for k in range(state["k_max"] - 1, -1, -1):
        a = alpha[:, k:k + 1]
        d_alpha[:, k] = t_excl[:, k] * (gimg * (col[:, k] - s)).sum(axis=1)
        s = a * col[:, k] + (1.0 - a) * s

    pix, gauss, power, slot = state["pix"], state["gauss"], state["power"], state["slot"]
    live = state["live"][pix, slot]
    pix, gauss, power, slot = pix[live], gauss[live], power[live], slot[live]
    da = d_alpha[pix, slot]
    a = alpha[pix, slot]
    w = a * t_excl[pix, slot]

    def scatter(values):
        return np.bincount(gauss, weights=values, minlength=n_gauss)

    g_colors = np.stack([scatter(w * gimg[pix, ch]) for ch in range(3)], axis=1)
    g_opac = scatter(da * np.exp(-0.5 * power))
    d_power = -0.5 * a * da
    x = (pix % width).astype(np.float64)
    y = (pix // width).astype(np.float64)
    dx = x - means[gauss, 0]
    dy = y - means[gauss, 1]
    ca, cb, cc = conics[gauss, 0], conics[gauss, 1], conics[gauss, 2]
    g_means = np.stack([
        scatter(-2.0 * d_power * (ca * dx + cb * dy)),
        scatter(-2.0 * d_power * (cb * dx + cc * dy)),
    ], axis=1)
    g_conics = np.stack([
        scatter(d_power * dx * dx),
        scatter(2.0 * d_power * dx * dy),
        scatter(d_power * dy * dy),
    ], axis=1)
    return g_means, g_conics, g_opac, g_colors
