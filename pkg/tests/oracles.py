"""Independent scalar reference implementations used as test oracles.

Everything here is deliberately written as plain nested loops in float64,
sharing no code with the vectorized implementations it checks.
"""

import numpy as np


def conv2d_naive(x, w, bias=None, stride=1, dilation=1, groups=1, padding=0):
    """Direct nested-loop 2-D convolution, zero padded."""
    n, c_in, h, w_in = x.shape
    c_out, c_in_g, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w_in + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.zeros((n, c_in, h + 2 * padding, w_in + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w_in] = x
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    icg = c_in // groups
    ocg = c_out // groups
    for b in range(n):
        for oc in range(c_out):
            g = oc // ocg
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ic in range(icg):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += (
                                    w[oc, ic, dy, dx]
                                    * xp[b, g * icg + ic, oy * stride + dy * dilation, ox * stride + dx * dilation]
                                )
                    out[b, oc, oy, ox] = acc + (bias[oc] if bias is not None else 0.0)
    return out


def dft2_naive(plane):
    """O(N^2) double-loop unnormalized forward 2-D DFT of one plane."""
    h, w = plane.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for y in range(h):
                for x in range(w):
                    acc += plane[y, x] * np.exp(-2j * np.pi * (u * y / h + v * x / w))
            out[u, v] = acc
    return out


def max_pool_naive(x, kernel, stride):
    n, c, h, w = x.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    window = x[b, ch, i * stride : min(i * stride + kernel, h), j * stride : min(j * stride + kernel, w)]
                    out[b, ch, i, j] = window.max()
    return out


def bilinear_scalar(plane, out_h, out_w):
    """Per-pixel align-corners=false bilinear sampling (edge clamped)."""
    h, w = plane.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            sy = (oy + 0.5) * h / out_h - 0.5
            sx = (ox + 0.5) * w / out_w - 0.5
            y0 = int(np.floor(sy))
            x0 = int(np.floor(sx))
            fy = sy - y0
            fx = sx - x0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            out[oy, ox] = (
                plane[y0c, x0c] * (1 - fy) * (1 - fx)
                + plane[y0c, x1c] * (1 - fy) * fx
                + plane[y1c, x0c] * fy * (1 - fx)
                + plane[y1c, x1c] * fy * fx
            )
    return out


def _cubic(t, a=-0.5):
    at = abs(t)
    if at <= 1:
        return (a + 2) * at**3 - (a + 3) * at**2 + 1
    if at < 2:
        return a * at**3 - 5 * a * at**2 + 8 * a * at - 4 * a
    return 0.0


def bicubic_scalar(plane, out_h, out_w):
    """Per-pixel antialiased bicubic resize (Keys a=-0.5, edge clamped)."""
    h, w = plane.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    # rows then columns, matching a separable evaluation but recomputed per pixel
    tmp = np.zeros((out_h, w), dtype=np.float64)
    for oy in range(out_h):
        scale = out_h / h
        ks = min(scale, 1.0)
        support = 2.0 / ks
        pos = (oy + 0.5) / scale - 0.5
        left = int(np.floor(pos - support)) + 1
        span = int(np.ceil(2 * support)) + 2
        weights = [_cubic((pos - (left + t)) * ks) * ks for t in range(span)]
        wsum = sum(weights)
        for ox in range(w):
            acc = 0.0
            for t in range(span):
                j = min(max(left + t, 0), h - 1)
                acc += weights[t] * plane[j, ox]
            tmp[oy, ox] = acc / wsum
    for ox in range(out_w):
        scale = out_w / w
        ks = min(scale, 1.0)
        support = 2.0 / ks
        pos = (ox + 0.5) / scale - 0.5
        left = int(np.floor(pos - support)) + 1
        span = int(np.ceil(2 * support)) + 2
        weights = [_cubic((pos - (left + t)) * ks) * ks for t in range(span)]
        wsum = sum(weights)
        for oy in range(out_h):
            acc = 0.0
            for t in range(span):
                j = min(max(left + t, 0), w - 1)
                acc += weights[t] * tmp[oy, j]
            out[oy, ox] = acc / wsum
    return out


def ssim_scalar(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct-formula local SSIM mean over valid windows of two planes."""
    h, w = a.shape
    half = window // 2
    coords = np.arange(window) - half
    g1 = np.exp(-(coords**2) / (2 * sigma**2))
    g1 /= g1.sum()
    kernel = np.outer(g1, g1)
    c1 = k1**2
    c2 = k2**2
    vals = []
    for cy in range(half, h - half):
        for cx in range(half, w - half):
            pa = a[cy - half : cy + half + 1, cx - half : cx + half + 1]
            pb = b[cy - half : cy + half + 1, cx - half : cx + half + 1]
            mu_a = (kernel * pa).sum()
            mu_b = (kernel * pb).sum()
            var_a = (kernel * pa * pa).sum() - mu_a**2
            var_b = (kernel * pb * pb).sum() - mu_b**2
            cov = (kernel * pa * pb).sum() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def finite_difference_grads(f, tensors, eps):
    """Central-difference gradients of a scalar-valued builder ``f``.

    ``f`` is re-invoked for every probe so the whole forward graph is
    rebuilt; tensors are perturbed in place.
    """
    grads = []
    for t in tensors:
        fd = np.zeros_like(t.data, dtype=np.float64)
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = t.data[i]
            t.data[i] = orig + eps
            lp = f().item()
            t.data[i] = orig - eps
            lm = f().item()
            t.data[i] = orig
            fd[i] = (lp - lm) / (2 * eps)
            it.iternext()
        grads.append(fd)
    return grads


def relative_error(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
