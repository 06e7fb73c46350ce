# cython: language_level=3
"""Compiled alpha-compositing core (forward + backward).

Same contract as ``_raster_py``: Gaussians arrive already projected to
image space and depth-sorted (``order``); the kernel builds per-pixel
front-to-back lists restricted to the 3-sigma ellipse, composites, and on
the backward pass scatters gradients into the 2D means, conics, opacities
and colors.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64

cdef double CUTOFF = 9.0


cdef inline double _power(double a, double b, double c, double dx, double dy) nogil:
    return a * dx * dx + 2.0 * b * dx * dy + c * dy * dy


def forward(f64[:, ::1] means, f64[:, ::1] conics, f64[::1] opacity, f64[:, ::1] colors,
            i64[::1] order, i64[:, ::1] bbox, int height, int width, double t_min):
    cdef Py_ssize_t n_pix = <Py_ssize_t>height * width
    cdef Py_ssize_t n_order = order.shape[0]
    cdef i64[::1] offsets = np.zeros(n_pix + 1, dtype=np.int64)
    cdef i64[::1] fill
    cdef Py_ssize_t r, g, x, y, pix, k, start, stop, n_pairs
    cdef double a, b, c, dx, dy, p, mx, my, alpha, T, o
    cdef double cr, cg, cb

    with nogil:
        for r in range(n_order):
            g = order[r]
            mx = means[g, 0]; my = means[g, 1]
            a = conics[g, 0]; b = conics[g, 1]; c = conics[g, 2]
            for y in range(bbox[g, 2], bbox[g, 3] + 1):
                dy = y - my
                for x in range(bbox[g, 0], bbox[g, 1] + 1):
                    dx = x - mx
                    if _power(a, b, c, dx, dy) <= CUTOFF:
                        offsets[y * width + x + 1] += 1
        for pix in range(n_pix):
            offsets[pix + 1] += offsets[pix]

    n_pairs = offsets[n_pix]
    gauss = np.empty(n_pairs, dtype=np.int64)
    power = np.empty(n_pairs, dtype=np.float64)
    t_before = np.zeros(n_pairs, dtype=np.float64)
    alphas = np.zeros(n_pairs, dtype=np.float64)
    used = np.zeros(n_pix, dtype=np.int64)
    image = np.zeros((height, width, 3), dtype=np.float64)
    t_final = np.ones((height, width), dtype=np.float64)
    cdef i64[::1] gauss_v = gauss
    cdef f64[::1] power_v = power
    cdef f64[::1] tb_v = t_before
    cdef f64[::1] al_v = alphas
    cdef i64[::1] used_v = used
    cdef f64[:, :, ::1] img_v = image
    cdef f64[:, ::1] tf_v = t_final
    fill = np.zeros(n_pix, dtype=np.int64)

    with nogil:
        for r in range(n_order):
            g = order[r]
            mx = means[g, 0]; my = means[g, 1]
            a = conics[g, 0]; b = conics[g, 1]; c = conics[g, 2]
            for y in range(bbox[g, 2], bbox[g, 3] + 1):
                dy = y - my
                for x in range(bbox[g, 0], bbox[g, 1] + 1):
                    dx = x - mx
                    p = _power(a, b, c, dx, dy)
                    if p <= CUTOFF:
                        pix = y * width + x
                        k = offsets[pix] + fill[pix]
                        gauss_v[k] = g
                        power_v[k] = p
                        fill[pix] += 1

        for pix in range(n_pix):
            start = offsets[pix]
            stop = offsets[pix + 1]
            T = 1.0
            cr = 0.0; cg = 0.0; cb = 0.0
            k = start
            while k < stop:
                if T < t_min:
                    break
                g = gauss_v[k]
                o = opacity[g]
                alpha = o * exp(-0.5 * power_v[k])
                tb_v[k] = T
                al_v[k] = alpha
                cr = cr + colors[g, 0] * alpha * T
                cg = cg + colors[g, 1] * alpha * T
                cb = cb + colors[g, 2] * alpha * T
                T = T * (1.0 - alpha)
                k += 1
            used_v[pix] = k - start
            y = pix // width
            x = pix - y * width
            img_v[y, x, 0] = cr
            img_v[y, x, 1] = cg
            img_v[y, x, 2] = cb
            tf_v[y, x] = T

    state = {
        "offsets": np.asarray(offsets), "gauss": gauss, "power": power,
        "t_before": t_before, "alpha": alphas, "used": used,
        "n_gauss": means.shape[0], "height": height, "width": width,
    }
    return image, 1.0 - t_final, state


def backward(state, f64[:, :, ::1] grad_image, f64[:, ::1] means, f64[:, ::1] conics,
             f64[::1] opacity, f64[:, ::1] colors):
    cdef i64[::1] offsets = state["offsets"]
    cdef i64[::1] gauss = state["gauss"]
    cdef f64[::1] power = state["power"]
    cdef f64[::1] t_before = state["t_before"]
    cdef f64[::1] alphas = state["alpha"]
    cdef i64[::1] used = state["used"]
    cdef int height = state["height"]
    cdef int width = state["width"]
    cdef Py_ssize_t n_gauss = state["n_gauss"]
    cdef Py_ssize_t n_pix = <Py_ssize_t>height * width

    g_means_a = np.zeros((n_gauss, 2), dtype=np.float64)
    g_conics_a = np.zeros((n_gauss, 3), dtype=np.float64)
    g_opac_a = np.zeros(n_gauss, dtype=np.float64)
    g_colors_a = np.zeros((n_gauss, 3), dtype=np.float64)
    cdef f64[:, ::1] g_means = g_means_a
    cdef f64[:, ::1] g_conics = g_conics_a
    cdef f64[::1] g_opac = g_opac_a
    cdef f64[:, ::1] g_colors = g_colors_a

    cdef Py_ssize_t pix, k, start, g, x, y
    cdef double gr, gg, gb, sr, sg, sb, alpha, T, d_alpha, d_power, dx, dy, w
    cdef double cr, cg, cb

    with nogil:
        for pix in range(n_pix):
            start = offsets[pix]
            y = pix // width
            x = pix - y * width
            gr = grad_image[y, x, 0]; gg = grad_image[y, x, 1]; gb = grad_image[y, x, 2]
            sr = 0.0; sg = 0.0; sb = 0.0
            k = start + used[pix] - 1
            while k >= start:
                g = gauss[k]
                alpha = alphas[k]
                T = t_before[k]
                cr = colors[g, 0]; cg = colors[g, 1]; cb = colors[g, 2]
                w = alpha * T
                g_colors[g, 0] += w * gr
                g_colors[g, 1] += w * gg
                g_colors[g, 2] += w * gb
                d_alpha = T * (gr * (cr - sr) + gg * (cg - sg) + gb * (cb - sb))
                sr = alpha * cr + (1.0 - alpha) * sr
                sg = alpha * cg + (1.0 - alpha) * sg
                sb = alpha * cb + (1.0 - alpha) * sb
                g_opac[g] += d_alpha * exp(-0.5 * power[k])
                d_power = -0.5 * alpha * d_alpha
                dx = x - means[g, 0]
                dy = y - means[g, 1]
                g_means[g, 0] += d_power * (-2.0) * (conics[g, 0] * dx + conics[g, 1] * dy)
                g_means[g, 1] += d_power * (-2.0) * (conics[g, 1] * dx + conics[g, 2] * dy)
                g_conics[g, 0] += d_power * dx * dx
                g_conics[g, 1] += d_power * 2.0 * dx * dy
                g_conics[g, 2] += d_power * dy * dy
                k -= 1

    return g_means_a, g_conics_a, g_opac_a, g_colors_a
