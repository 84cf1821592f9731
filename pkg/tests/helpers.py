"""Shared test utilities: finite-difference gradient checking and small oracles."""

import numpy as np

from geoseg import tensorcore as tc

FD_EPS = 1e-5


def fd_gradcheck(loss_fn, tensors, eps=FD_EPS, min_grad=1e-9, sample_every=1):
    """Max relative error between analytic and central-difference gradients.

    loss_fn rebuilds the graph and returns a scalar DiffTensor; tensors are the
    leaves to check. Entries whose finite difference is below min_grad are
    skipped (relative error is meaningless there).
    """
    loss = loss_fn()
    for t in tensors:
        t.zero_grad()
    tc.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.values.ravel()
        gflat = grad.ravel()
        for idx in range(0, flat.size, sample_every):
            old = flat[idx]
            flat[idx] = old + eps
            up = float(loss_fn().values)
            flat[idx] = old - eps
            down = float(loss_fn().values)
            flat[idx] = old
            fd = (up - down) / (2 * eps)
            if abs(fd) < min_grad:
                continue
            worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx])))
    return worst


def conv_loop_reference(xv, wv, bias, q):
    """Nested-loop dilated convolution with zero same-padding (oracle)."""
    C, H, W = xv.shape
    Co = wv.shape[0]
    r = (wv.shape[2] - 1) // 2
    out = np.zeros((Co, H, W))
    for o in range(Co):
        for y in range(H):
            for x in range(W):
                s = bias[o]
                for c in range(C):
                    for i in range(-r, r + 1):
                        for j in range(-r, r + 1):
                            yy, xx = y - q * i, x - q * j
                            if 0 <= yy < H and 0 <= xx < W:
                                s += xv[c, yy, xx] * wv[o, c, i + r, j + r]
                out[o, y, x] = s
    return out


def zero_inserted_kernel(w3, q):
    """Expand a 3x3 kernel to its dense (2q+1)-extent zero-inserted form."""
    Co, C = w3.shape[:2]
    k = 2 * q + 1
    dense = np.zeros((Co, C, k, k))
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            dense[:, :, q + q * i, q + q * j] = w3[:, :, i + 1, j + 1]
    return dense


def dense_conv_reference(xv, dense_w, bias):
    """Plain dense convolution (q = 1) with the loop oracle."""
    C, H, W = xv.shape
    Co = dense_w.shape[0]
    r = (dense_w.shape[2] - 1) // 2
    out = np.zeros((Co, H, W))
    for o in range(Co):
        for y in range(H):
            for x in range(W):
                s = bias[o]
                for c in range(C):
                    for i in range(-r, r + 1):
                        for j in range(-r, r + 1):
                            yy, xx = y - i, x - j
                            if 0 <= yy < H and 0 <= xx < W:
                                s += xv[c, yy, xx] * dense_w[o, c, i + r, j + r]
                out[o, y, x] = s
    return out


def brute_force_assd(mask_a, mask_b):
    """Scalar double-loop ASSD oracle over 4-neighbor surfaces."""
    import math

    def surface(m):
        pts = []
        H, W = m.shape
        for y in range(H):
            for x in range(W):
                if not m[y, x]:
                    continue
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if not (0 <= ny < H and 0 <= nx < W) or not m[ny, nx]:
                        pts.append((y, x))
                        break
        return pts

    sa = surface(np.asarray(mask_a) > 0)
    sb = surface(np.asarray(mask_b) > 0)
    if not sa or not sb:
        return None
    total = 0.0
    for p in sa:
        total += min(math.hypot(p[0] - r[0], p[1] - r[1]) for r in sb)
    for p in sb:
        total += min(math.hypot(p[0] - r[0], p[1] - r[1]) for r in sa)
    return total / (len(sa) + len(sb))
