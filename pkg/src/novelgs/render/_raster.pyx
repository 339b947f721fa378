# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back compositing of projected 2D splats.

Splats are visited in the given order; each one touches only the pixels
inside the box where its weight can reach ``eps_w``. With ``eps_w == 0``
every splat covers the full image and the arithmetic matches the numpy
oracle operation for operation.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, ceil, floor

cnp.import_array()


cdef inline bint _bounds(double a, double b, double c, double op, double mx, double my,
                         double eps_w, int height, int width,
                         int* x0, int* x1, int* y0, int* y1) noexcept nogil:
    cdef double qmax, det, ex, ey
    if eps_w <= 0.0:
        x0[0] = 0
        x1[0] = width - 1
        y0[0] = 0
        y1[0] = height - 1
        return True
    if op < eps_w:
        return False
    qmax = 2.0 * log(op / eps_w)
    det = a * c - b * b
    if det <= 0.0:
        return False
    # bounding box of the ellipse {d : d^T conic d <= qmax}, padded by a pixel
    ex = sqrt(qmax * c / det) + 1.0
    ey = sqrt(qmax * a / det) + 1.0
    x0[0] = <int>max(0.0, ceil(mx - ex - 0.5))
    x1[0] = <int>min(width - 1.0, floor(mx + ex - 0.5))
    y0[0] = <int>max(0.0, ceil(my - ey - 0.5))
    y1[0] = <int>min(height - 1.0, floor(my + ey - 0.5))
    return x0[0] <= x1[0] and y0[0] <= y1[0]


def forward(const double[:, ::1] means, const double[:, ::1] conics, const double[::1] opacities,
            const double[:, ::1] colors, const Py_ssize_t[::1] order, int height, int width,
            const double[::1] background, double alpha_max, double eps_w):
    """Return ``(image H×W×3, transmittance H×W)``."""
    image_arr = np.zeros((height, width, 3))
    trans_arr = np.ones((height, width))
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] trans = trans_arr
    cdef Py_ssize_t n, k, g
    cdef int x0, x1, y0, y1, row, col, ch
    cdef double a, b, c, op, mx, my, dx, dy, power, alpha, weight
    with nogil:
        for n in range(order.shape[0]):
            g = order[n]
            a = conics[g, 0]
            b = conics[g, 1]
            c = conics[g, 2]
            op = opacities[g]
            mx = means[g, 0]
            my = means[g, 1]
            if not _bounds(a, b, c, op, mx, my, eps_w, height, width, &x0, &x1, &y0, &y1):
                continue
            for row in range(y0, y1 + 1):
                dy = (row + 0.5) - my
                for col in range(x0, x1 + 1):
                    dx = (col + 0.5) - mx
                    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    alpha = op * exp(power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < eps_w:
                        continue
                    weight = alpha * trans[row, col]
                    for ch in range(3):
                        image[row, col, ch] = image[row, col, ch] + weight * colors[g, ch]
                    trans[row, col] = trans[row, col] * (1.0 - alpha)
        for row in range(height):
            for col in range(width):
                for ch in range(3):
                    image[row, col, ch] = image[row, col, ch] + trans[row, col] * background[ch]
    return image_arr, trans_arr


def backward(const double[:, ::1] means, const double[:, ::1] conics, const double[::1] opacities,
             const double[:, ::1] colors, const Py_ssize_t[::1] order, int height, int width,
             const double[::1] background, double alpha_max, double eps_w,
             const double[:, :, ::1] image, const double[:, ::1] trans_final,
             const double[:, :, ::1] grad_image, const double[:, ::1] grad_alpha):
    """Gradients w.r.t. means, conics ``(a, b, c)``, opacities and colors.

    Walks splats front to back, rebuilding the transmittance of every pixel,
    and takes the color composited behind each splat as the final color minus
    the running accumulation. No division by the final transmittance, so deep
    pixels whose transmittance underflows still get correct front gradients.
    """
    cdef Py_ssize_t count = means.shape[0]
    g_means_arr = np.zeros((count, 2))
    g_conics_arr = np.zeros((count, 3))
    g_op_arr = np.zeros(count)
    g_colors_arr = np.zeros((count, 3))
    trans_arr = np.ones((height, width))
    acc_arr = np.zeros((height, width, 3))
    cdef double[:, ::1] g_means = g_means_arr
    cdef double[:, ::1] g_conics = g_conics_arr
    cdef double[::1] g_op = g_op_arr
    cdef double[:, ::1] g_colors = g_colors_arr
    cdef double[:, ::1] trans = trans_arr
    cdef double[:, :, ::1] acc = acc_arr
    cdef Py_ssize_t n, g
    cdef int x0, x1, y0, y1, row, col, ch
    cdef double a, b, c, op, mx, my, dx, dy, power, gauss, raw_alpha, alpha, t_here, inv
    cdef double d_alpha, d_power, behind, weight
    with nogil:
        for n in range(order.shape[0]):
            g = order[n]
            a = conics[g, 0]
            b = conics[g, 1]
            c = conics[g, 2]
            op = opacities[g]
            mx = means[g, 0]
            my = means[g, 1]
            if not _bounds(a, b, c, op, mx, my, eps_w, height, width, &x0, &x1, &y0, &y1):
                continue
            for row in range(y0, y1 + 1):
                dy = (row + 0.5) - my
                for col in range(x0, x1 + 1):
                    dx = (col + 0.5) - mx
                    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                    gauss = exp(power)
                    raw_alpha = op * gauss
                    alpha = raw_alpha
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < eps_w:
                        continue
                    t_here = trans[row, col]
                    weight = alpha * t_here
                    inv = 1.0 / (1.0 - alpha)
                    d_alpha = grad_alpha[row, col] * trans_final[row, col] * inv
                    for ch in range(3):
                        acc[row, col, ch] = acc[row, col, ch] + weight * colors[g, ch]
                        g_colors[g, ch] += grad_image[row, col, ch] * weight
                        behind = image[row, col, ch] - acc[row, col, ch]
                        d_alpha += grad_image[row, col, ch] * (t_here * colors[g, ch] - behind * inv)
                    trans[row, col] = t_here * (1.0 - alpha)
                    if raw_alpha > alpha_max:
                        continue
                    g_op[g] += d_alpha * gauss
                    d_power = d_alpha * alpha
                    g_means[g, 0] += d_power * (a * dx + b * dy)
                    g_means[g, 1] += d_power * (b * dx + c * dy)
                    g_conics[g, 0] += d_power * (-0.5 * dx * dx)
                    g_conics[g, 1] += d_power * (-dx * dy)
                    g_conics[g, 2] += d_power * (-0.5 * dy * dy)
    return g_means_arr, g_conics_arr, g_op_arr, g_colors_arr
