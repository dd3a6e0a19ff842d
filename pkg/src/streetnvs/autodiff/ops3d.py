"""Volume operators: 3D convolution, pooling, trilinear resampling.

Layout convention is channels-first, [C, D, H, W], without a batch axis —
the pipeline always works on a single scene volume at a time.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor, _make


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding.

    x: [C_in, D, H, W], weight: [C_out, C_in, k, k, k].  With stride 1 and
    padding (k-1)/2 the spatial size is preserved.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ValueError("conv3d expects x[C,D,H,W], weight[O,C,k,k,k]")
    c_in, d, h, w = xd.shape
    c_out, c_w, k, k2, k3 = wd.shape
    if c_w != c_in:
        raise ValueError(f"conv3d channel mismatch: input {c_in}, weight {c_w}")
    if k != k2 or k != k3:
        raise ValueError("conv3d kernel must be cubic")
    p, s = padding, stride
    od = (d + 2 * p - k) // s + 1
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1

    xpad = np.pad(xd, ((0, 0), (p, p), (p, p), (p, p))) if p else xd
    wmat = wd.reshape(c_out, c_in, k * k * k)
    out = np.zeros((c_out, od, oh, ow), dtype=xd.dtype)
    # one small GEMM per kernel offset; avoids the im2col memory blowup
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                sl = xpad[:, kz:kz + s * od:s, ky:ky + s * oh:s,
                          kx:kx + s * ow:s]
                wk = wmat[:, :, (kz * k + ky) * k + kx]
                out += np.tensordot(wk, sl, axes=([1], [0]))
    if bias is not None:
        out += bias.data[:, None, None, None]

    def bwd(g):
        gw = np.zeros_like(wd)
        gxpad = np.zeros_like(xpad)
        for kz in range(k):
            for ky in range(k):
                for kx in range(k):
                    sl = xpad[:, kz:kz + s * od:s, ky:ky + s * oh:s,
                              kx:kx + s * ow:s]
                    gw[:, :, kz, ky, kx] = np.tensordot(
                        g, sl, axes=([1, 2, 3], [1, 2, 3]))
                    wk = wmat[:, :, (kz * k + ky) * k + kx]
                    gxpad[:, kz:kz + s * od:s, ky:ky + s * oh:s,
                          kx:kx + s * ow:s] += np.tensordot(
                        wk, g, axes=([0], [0]))
        gx = gxpad[:, p:p + d, p:p + h, p:p + w] if p else gxpad
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd)


def avgpool3d(x: Tensor, factor: int) -> Tensor:
    """Block-average downsampling; spatial dims must divide the factor."""
    xd = x.data
    c, d, h, w = xd.shape
    f = factor
    if d % f or h % f or w % f:
        raise ValueError(f"avgpool3d: dims {xd.shape[1:]} not divisible by {f}")
    blocked = xd.reshape(c, d // f, f, h // f, f, w // f, f)
    out = blocked.mean(axis=(2, 4, 6))
    inv = 1.0 / (f * f * f)

    def bwd(g):
        gx = np.broadcast_to(
            g[:, :, None, :, None, :, None] * inv,
            (c, d // f, f, h // f, f, w // f, f),
        )
        return (gx.reshape(c, d, h, w).copy(),)

    return _make(out, (x,), bwd)


@lru_cache(maxsize=64)
def _upsample_matrix(n_in: int, factor: int, dtype_name: str) -> np.ndarray:
    """[n_out, n_in] linear interpolation matrix, corner-aligned."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    if n_in == 1:
        m[:, 0] = 1
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(pos.astype(np.int64), n_in - 2)
    t = pos - i0
    m[np.arange(n_out), i0] = 1 - t
    m[np.arange(n_out), i0 + 1] = t
    return m


def upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear upsampling with corner-aligned sampling."""
    xd = x.data
    mats = [_upsample_matrix(n, factor, xd.dtype.name) for n in xd.shape[1:]]

    def apply(v, ms):
        v = np.tensordot(v, ms[0], axes=([1], [1])).transpose(0, 3, 1, 2)
        v = np.tensordot(v, ms[1], axes=([2], [1])).transpose(0, 1, 3, 2)
        return np.tensordot(v, ms[2], axes=([3], [1]))

    out = apply(xd, mats)

    def bwd(g):
        return (apply(g, [m.T for m in mats]),)

    return _make(out, (x,), bwd)


def instance_norm3d(x: Tensor, eps: float = 1e-2) -> Tensor:
    """Per-channel normalization over the spatial dims, no learned affine.

    The epsilon is deliberately large: near-constant channels otherwise
    produce extreme curvature in 1/sqrt(var), which would put finite
    differences at h=1e-3 outside their linear regime.
    """
    xd = x.data
    sp = (1, 2, 3)
    mu = xd.mean(axis=sp, keepdims=True)
    var = xd.var(axis=sp, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def bwd(g):
        gm = g.mean(axis=sp, keepdims=True)
        gxm = (g * xhat).mean(axis=sp, keepdims=True)
        return ((g - gm - xhat * gxm) * inv,)

    return _make(xhat, (x,), bwd)


def grid_sample_trilinear(volume: Tensor, points) -> tuple[Tensor, np.ndarray]:
    """Sample a [C, D, H, W] volume at N points in normalized [0,1]^3 coords.

    Grid nodes sit at i/(n-1) along each axis, so a query at a node returns
    that node's feature exactly.  Points outside [0,1]^3 produce zeros and a
    False validity flag; the volume is never extrapolated.  Differentiable in
    the volume, and in the point coordinates when given as a Tensor.
    """
    pts_t = points if isinstance(points, Tensor) else None
    pd = points.data if pts_t is not None else np.asarray(points)
    if pd.ndim != 2 or pd.shape[1] != 3:
        raise ValueError("points must have shape [N, 3]")
    vd = volume.data
    c = vd.shape[0]
    dims = np.array(vd.shape[1:])
    n = pd.shape[0]

    valid = np.all((pd >= 0.0) & (pd <= 1.0), axis=1)
    scale = (dims - 1).astype(vd.dtype)
    g = np.clip(pd, 0.0, 1.0) * scale
    i0 = np.minimum(g.astype(np.int64), np.maximum(dims - 2, 0))
    frac = (g - i0).astype(vd.dtype)

    flat = vd.reshape(c, -1)
    sy, sz = int(dims[1] * dims[2]), int(dims[2])
    base = i0[:, 0] * sy + i0[:, 1] * sz + i0[:, 2]
    corner_off = np.array(
        [(dz * sy + dy * sz + dx)
         for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    wts = np.stack([
        (1 - fx) * (1 - fy) * (1 - fz), (1 - fx) * (1 - fy) * fz,
        (1 - fx) * fy * (1 - fz), (1 - fx) * fy * fz,
        fx * (1 - fy) * (1 - fz), fx * (1 - fy) * fz,
        fx * fy * (1 - fz), fx * fy * fz,
    ], axis=1)                                   # [N, 8]
    wts = wts * valid[:, None].astype(vd.dtype)
    idx = base[:, None] + corner_off[None, :]    # [N, 8]

    corners = flat[:, idx]                       # [C, N, 8]
    out = np.einsum("cnk,nk->nc", corners, wts, optimize=True)

    def bwd(grad):
        gv = np.zeros_like(flat)
        contrib = grad.T[:, :, None] * wts[None, :, :]   # [C, N, 8]
        flat_idx = idx.ravel()
        for ch in range(c):
            gv[ch] = np.bincount(flat_idx, weights=contrib[ch].ravel(),
                                 minlength=flat.shape[1]).astype(vd.dtype)
        grads = [gv.reshape(vd.shape)]
        if pts_t is not None:
            # d(weight)/d(frac) per corner, chain through grid scaling
            gp = np.zeros_like(pd)
            signs = np.array([[(1.0 if dz else -1.0, 1.0 if dy else -1.0,
                                1.0 if dx else -1.0)
                               for dz in (0, 1) for dy in (0, 1)
                               for dx in (0, 1)]])[0]
            one = np.ones_like(fx)
            comp = np.stack([
                np.stack([fx if s[0] > 0 else (1 - fx) for s in signs], 1),
                np.stack([fy if s[1] > 0 else (1 - fy) for s in signs], 1),
                np.stack([fz if s[2] > 0 else (1 - fz) for s in signs], 1),
            ])                                            # [3, N, 8]
            per_corner = np.einsum("cnk,nc->nk", corners, grad)
            for ax in range(3):
                others = [a for a in range(3) if a != ax]
                dw = (signs[None, :, ax] * comp[others[0]] * comp[others[1]])
                gp[:, ax] = (per_corner * dw).sum(axis=1) * scale[ax]
            gp *= valid[:, None]
            grads.append(gp)
        return tuple(grads)

    inputs = (volume,) if pts_t is None else (volume, pts_t)
    return _make(out, inputs, bwd), valid
