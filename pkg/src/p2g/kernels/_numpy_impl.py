"""Pure-numpy twins of the numba kernels.

Selected with P2G_BACKEND=numpy. Fragment loops are vectorized across the
pixels of a tile while keeping the exact sequential compositing semantics
(per-pixel early termination, identical skip rules), so both backends
produce the same values.
"""

import numpy as np


def knn(query, ref, k):
    d = query[:, None, :] - ref[None, :, :]
    dist = (d * d).sum(axis=-1)
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def fps_greedy(points, k, start):
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf, dtype=points.dtype)
    cur = start
    for step in range(k):
        chosen[step] = cur
        delta = points - points[cur]
        d = (delta * delta).sum(axis=1)
        np.minimum(dist, d, out=dist)
        cur = int(np.argmax(dist))
    return chosen


def nn_sq(a, b):
    d = a[:, None, :] - b[None, :, :]
    dist = (d * d).sum(axis=-1)
    idx = dist.argmin(axis=1).astype(np.int64)
    return idx, dist[np.arange(a.shape[0]), idx]


def scatter_add_rows(out, idx, grads):
    np.add.at(out, idx, grads)


def scatter_add_flat(out, idx, grads):
    np.add.at(out, idx, grads)


def adam_update(p, g, m, v, lr, b1, b2, eps, corr1, corr2):
    m[:] = b1 * m + (1.0 - b1) * g
    v[:] = b2 * v + (1.0 - b2) * g * g
    p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + eps)).astype(p.dtype)


def _tile_pixels(ty, tx, tile, width, height, dtype):
    y0, y1 = ty * tile, min((ty + 1) * tile, height)
    x0, x1 = tx * tile, min((tx + 1) * tile, width)
    ys, xs = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    return ys.ravel(), xs.ravel(), (ys + 0.5).ravel().astype(dtype), (xs + 0.5).ravel().astype(dtype)


def render_forward(means2d, conic, opac, colors, tile_offsets, tile_ids,
                   width, height, tile, bg, stop_t, qcut):
    dt = means2d.dtype
    rgb = np.empty((height, width, 3), dtype=dt)
    alpha = np.empty((height, width), dtype=dt)
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            ids = tile_ids[tile_offsets[t]:tile_offsets[t + 1]]
            ys, xs, cy, cx = _tile_pixels(ty, tx, tile, width, height, dt)
            trans = np.ones(cx.shape[0], dtype=dt)
            acc = np.zeros((cx.shape[0], 3), dtype=dt)
            for gi in ids:
                dx = cx - means2d[gi, 0]
                dy = cy - means2d[gi, 1]
                q = conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy + conic[gi, 2] * dy * dy
                live = (trans >= stop_t) & (q <= qcut) & (q >= 0.0)
                a = np.where(live, opac[gi] * np.exp(np.where(live, -0.5 * q, 0.0)), 0.0).astype(dt)
                acc += (a * trans)[:, None] * colors[gi][None, :]
                trans = trans * (1.0 - a)
            rgb[ys, xs] = acc + trans[:, None] * bg[None, :]
            alpha[ys, xs] = 1.0 - trans
    return rgb, alpha


def render_backward(means2d, conic, opac, colors, tile_offsets, tile_ids,
                    width, height, tile, bg, stop_t, qcut, d_rgb, d_alpha,
                    d_means2d, d_conic, d_opac, d_colors):
    dt = means2d.dtype
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            ids = tile_ids[tile_offsets[t]:tile_offsets[t + 1]]
            if ids.shape[0] == 0:
                continue
            ys, xs, cy, cx = _tile_pixels(ty, tx, tile, width, height, dt)
            npx = cx.shape[0]
            # replay compositing, keeping per-fragment state for the sweep back
            trans = np.ones(npx, dtype=dt)
            frag_w, frag_T, frag_live, frag_dx, frag_dy = [], [], [], [], []
            for gi in ids:
                dx = cx - means2d[gi, 0]
                dy = cy - means2d[gi, 1]
                q = conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy + conic[gi, 2] * dy * dy
                live = (trans >= stop_t) & (q <= qcut) & (q >= 0.0)
                w = np.where(live, np.exp(np.where(live, -0.5 * q, 0.0)), 0.0).astype(dt)
                frag_w.append(w)
                frag_T.append(trans)
                frag_live.append(live)
                frag_dx.append(dx)
                frag_dy.append(dy)
                trans = trans * (1.0 - opac[gi] * w)
            dc = d_rgb[ys, xs]  # (P,3)
            da_pix = d_alpha[ys, xs]
            t_behind = np.ones(npx, dtype=dt)
            rest = np.broadcast_to(bg, (npx, 3)).astype(dt).copy()
            for s in range(len(ids) - 1, -1, -1):
                gi = ids[s]
                w = frag_w[s]
                ti = frag_T[s]
                live = frag_live[s]
                a = opac[gi] * w
                at = a * ti
                d_colors[gi] += (at[:, None] * dc).sum(axis=0)
                dalpha = ti * ((colors[gi][None, :] - rest) * dc).sum(axis=1) + da_pix * ti * t_behind
                dalpha = np.where(live, dalpha, 0.0)
                d_opac[gi] += (dalpha * w).sum()
                dq = -0.5 * w * (dalpha * opac[gi])
                dx = frag_dx[s]
                dy = frag_dy[s]
                d_conic[gi, 0] += (dq * dx * dx).sum()
                d_conic[gi, 1] += (dq * 2.0 * dx * dy).sum()
                d_conic[gi, 2] += (dq * dy * dy).sum()
                gx = dq * 2.0 * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                gy = dq * 2.0 * (conic[gi, 1] * dx + conic[gi, 2] * dy)
                d_means2d[gi, 0] -= gx.sum()
                d_means2d[gi, 1] -= gy.sum()
                rest = colors[gi][None, :] * a[:, None] + (1.0 - a)[:, None] * rest
                t_behind = t_behind * (1.0 - a)


def _disk_offsets(radius):
    r = int(np.ceil(radius))
    oy, ox = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return oy.ravel(), ox.ravel()


def zbuffer_build(px, depth, valid, radius, width, height):
    zbuf = np.full((height, width), np.inf, dtype=px.dtype)
    ix = np.floor(px[:, 0]).astype(np.int64)
    iy = np.floor(px[:, 1]).astype(np.int64)
    inb = valid & (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    np.minimum.at(zbuf, (iy[inb], ix[inb]), depth[inb])
    r2 = radius * radius
    for oy, ox in zip(*_disk_offsets(radius)):
        xx = ix + ox
        yy = iy + oy
        ddx = xx + 0.5 - px[:, 0]
        ddy = yy + 0.5 - px[:, 1]
        m = valid & (xx >= 0) & (xx < width) & (yy >= 0) & (yy < height) & (ddx * ddx + ddy * ddy <= r2)
        if m.any():
            np.minimum.at(zbuf, (yy[m], xx[m]), depth[m])
    return zbuf


def zbuffer_query(px, depth, valid, radius, width, height, zbuf, tol):
    m = px.shape[0]
    visible = np.zeros(m, dtype=bool)
    ix = np.floor(px[:, 0]).astype(np.int64)
    iy = np.floor(px[:, 1]).astype(np.int64)
    inb = valid & (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    visible[inb] = depth[inb] <= zbuf[iy[inb], ix[inb]] + tol
    r2 = radius * radius
    for oy, ox in zip(*_disk_offsets(radius)):
        xx = ix + ox
        yy = iy + oy
        ddx = xx + 0.5 - px[:, 0]
        ddy = yy + 0.5 - px[:, 1]
        sel = valid & (xx >= 0) & (xx < width) & (yy >= 0) & (yy < height) & (ddx * ddx + ddy * ddy <= r2)
        if sel.any():
            visible[sel] |= depth[sel] <= zbuf[yy[sel], xx[sel]] + tol
    return visible
