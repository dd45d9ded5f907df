"""Numba-jitted hot loops: rasterization, neighbour search, z-buffering.

Index/tile bookkeeping lives in numpy (renderer.py); these kernels do the
per-pixel and per-point work. Every function has a value-identical twin in
`_numpy_impl.py`. Kernels are serial: tile order and fragment order are
fixed, so outputs are bit-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def knn(query, ref, k):
    m = query.shape[0]
    n = ref.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    best_d = np.empty(k, dtype=ref.dtype)
    best_i = np.empty(k, dtype=np.int64)
    for i in range(m):
        count = 0
        for j in range(n):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if count < k:
                # insertion sort by (distance, index)
                pos = count
                while pos > 0 and best_d[pos - 1] > d:
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = d
                best_i[pos] = j
                count += 1
            elif d < best_d[k - 1]:
                pos = k - 1
                while pos > 0 and best_d[pos - 1] > d:
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = d
                best_i[pos] = j
        for t in range(k):
            out[i, t] = best_i[t]
    return out


@njit(cache=True)
def fps_greedy(points, k, start):
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf, dtype=points.dtype)
    cur = start
    for step in range(k):
        chosen[step] = cur
        cx = points[cur, 0]
        cy = points[cur, 1]
        cz = points[cur, 2]
        best = -1.0
        nxt = 0
        for j in range(n):
            dx = points[j, 0] - cx
            dy = points[j, 1] - cy
            dz = points[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < dist[j]:
                dist[j] = d
            if dist[j] > best:
                best = dist[j]
                nxt = j
        cur = nxt
    return chosen


@njit(cache=True)
def _nn_sq_brute(a, b):
    m = a.shape[0]
    n = b.shape[0]
    idx = np.empty(m, dtype=np.int64)
    dist = np.empty(m, dtype=a.dtype)
    for i in range(m):
        best = np.inf
        bi = 0
        for j in range(n):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                bi = j
        idx[i] = bi
        dist[i] = best
    return idx, dist


@njit(cache=True)
def _nn_sq_grid(a, b, res):
    """Uniform-grid nearest neighbour: exact distances, ring expansion with
    a conservative stop bound."""
    m = a.shape[0]
    n = b.shape[0]
    lo = np.empty(3, dtype=b.dtype)
    hi = np.empty(3, dtype=b.dtype)
    for d in range(3):
        lo[d] = b[:, d].min()
        hi[d] = b[:, d].max()
    span = max(hi[0] - lo[0], max(hi[1] - lo[1], hi[2] - lo[2]))
    cell = max(span / res, 1e-12)
    nx = int((hi[0] - lo[0]) / cell) + 1
    ny = int((hi[1] - lo[1]) / cell) + 1
    nz = int((hi[2] - lo[2]) / cell) + 1
    ncell = nx * ny * nz
    counts = np.zeros(ncell + 1, dtype=np.int64)
    cid = np.empty(n, dtype=np.int64)
    for j in range(n):
        ix = min(int((b[j, 0] - lo[0]) / cell), nx - 1)
        iy = min(int((b[j, 1] - lo[1]) / cell), ny - 1)
        iz = min(int((b[j, 2] - lo[2]) / cell), nz - 1)
        c = (ix * ny + iy) * nz + iz
        cid[j] = c
        counts[c + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    order = np.empty(n, dtype=np.int64)
    fill = counts[:-1].copy()
    for j in range(n):
        order[fill[cid[j]]] = j
        fill[cid[j]] += 1

    idx = np.empty(m, dtype=np.int64)
    dist = np.empty(m, dtype=a.dtype)
    max_ring = max(nx, max(ny, nz))
    for i in range(m):
        px = min(max(int((a[i, 0] - lo[0]) / cell), 0), nx - 1)
        py = min(max(int((a[i, 1] - lo[1]) / cell), 0), ny - 1)
        pz = min(max(int((a[i, 2] - lo[2]) / cell), 0), nz - 1)
        best = np.inf
        bi = 0
        for ring in range(max_ring + 1):
            if best < np.inf:
                # cells at this ring are at least (ring-1)*cell away
                reach = (ring - 1) * cell
                if reach > 0 and reach * reach > best:
                    break
            x0, x1 = max(px - ring, 0), min(px + ring, nx - 1)
            y0, y1 = max(py - ring, 0), min(py + ring, ny - 1)
            z0, z1 = max(pz - ring, 0), min(pz + ring, nz - 1)
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        on_shell = (ix == px - ring or ix == px + ring
                                    or iy == py - ring or iy == py + ring
                                    or iz == pz - ring or iz == pz + ring)
                        if not on_shell:
                            continue
                        c = (ix * ny + iy) * nz + iz
                        for s in range(counts[c], counts[c + 1]):
                            j = order[s]
                            dx = a[i, 0] - b[j, 0]
                            dy = a[i, 1] - b[j, 1]
                            dz = a[i, 2] - b[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best or (d == best and j < bi):
                                best = d
                                bi = j
        idx[i] = bi
        dist[i] = best
    return idx, dist


def nn_sq(a, b):
    if b.shape[0] < 512:
        return _nn_sq_brute(a, b)
    res = max(4, int(np.cbrt(b.shape[0] / 2.0)))
    return _nn_sq_grid(a, b, res)


@njit(cache=True)
def scatter_add_rows(out, idx, grads):
    for i in range(idx.shape[0]):
        row = idx[i]
        for j in range(grads.shape[1]):
            out[row, j] += grads[i, j]


@njit(cache=True)
def scatter_add_flat(out, idx, grads):
    for i in range(idx.shape[0]):
        out[idx[i]] += grads[i]


@njit(cache=True)
def adam_update(p, g, m, v, lr, b1, b2, eps, corr1, corr2):
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / corr1) / (np.sqrt(v[i] / corr2) + eps)


@njit(cache=True)
def render_forward(means2d, conic, opac, colors, tile_offsets, tile_ids,
                   width, height, tile, bg, stop_t, qcut):
    rgb = np.empty((height, width, 3), dtype=means2d.dtype)
    alpha = np.empty((height, width), dtype=means2d.dtype)
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            f0 = tile_offsets[t]
            f1 = tile_offsets[t + 1]
            y1 = min((ty + 1) * tile, height)
            x1 = min((tx + 1) * tile, width)
            for py in range(ty * tile, y1):
                cy = py + 0.5
                for px in range(tx * tile, x1):
                    cx = px + 0.5
                    trans = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    for f in range(f0, f1):
                        if trans < stop_t:
                            break
                        gi = tile_ids[f]
                        dx = cx - means2d[gi, 0]
                        dy = cy - means2d[gi, 1]
                        q = (conic[gi, 0] * dx * dx
                             + 2.0 * conic[gi, 1] * dx * dy
                             + conic[gi, 2] * dy * dy)
                        if q > qcut or q < 0.0:
                            continue
                        a = opac[gi] * np.exp(-0.5 * q)
                        r += colors[gi, 0] * a * trans
                        g += colors[gi, 1] * a * trans
                        b += colors[gi, 2] * a * trans
                        trans *= 1.0 - a
                    rgb[py, px, 0] = r + trans * bg[0]
                    rgb[py, px, 1] = g + trans * bg[1]
                    rgb[py, px, 2] = b + trans * bg[2]
                    alpha[py, px] = 1.0 - trans
    return rgb, alpha


@njit(cache=True)
def render_backward(means2d, conic, opac, colors, tile_offsets, tile_ids,
                    width, height, tile, bg, stop_t, qcut, d_rgb, d_alpha,
                    d_means2d, d_conic, d_opac, d_colors):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    max_frag = 0
    for t in range(tile_offsets.shape[0] - 1):
        c = tile_offsets[t + 1] - tile_offsets[t]
        if c > max_frag:
            max_frag = c
    s_gi = np.empty(max_frag, dtype=np.int64)
    s_w = np.empty(max_frag, dtype=means2d.dtype)
    s_dx = np.empty(max_frag, dtype=means2d.dtype)
    s_dy = np.empty(max_frag, dtype=means2d.dtype)
    s_T = np.empty(max_frag, dtype=means2d.dtype)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            f0 = tile_offsets[t]
            f1 = tile_offsets[t + 1]
            if f1 == f0:
                continue
            y1 = min((ty + 1) * tile, height)
            x1 = min((tx + 1) * tile, width)
            for py in range(ty * tile, y1):
                cy = py + 0.5
                for px in range(tx * tile, x1):
                    cx = px + 0.5
                    # replay compositing, stashing per-fragment state
                    trans = 1.0
                    nf = 0
                    for f in range(f0, f1):
                        if trans < stop_t:
                            break
                        gi = tile_ids[f]
                        dx = cx - means2d[gi, 0]
                        dy = cy - means2d[gi, 1]
                        q = (conic[gi, 0] * dx * dx
                             + 2.0 * conic[gi, 1] * dx * dy
                             + conic[gi, 2] * dy * dy)
                        if q > qcut or q < 0.0:
                            continue
                        w = np.exp(-0.5 * q)
                        s_gi[nf] = gi
                        s_w[nf] = w
                        s_dx[nf] = dx
                        s_dy[nf] = dy
                        s_T[nf] = trans
                        trans *= 1.0 - opac[gi] * w
                        nf += 1
                    if nf == 0:
                        continue
                    dcr = d_rgb[py, px, 0]
                    dcg = d_rgb[py, px, 1]
                    dcb = d_rgb[py, px, 2]
                    da_pix = d_alpha[py, px]
                    # back-to-front sweep: `rest` is the color composited
                    # behind the current fragment under unit transmittance
                    t_behind = 1.0
                    rest_r = bg[0]
                    rest_g = bg[1]
                    rest_b = bg[2]
                    for s in range(nf - 1, -1, -1):
                        gi = s_gi[s]
                        w = s_w[s]
                        ti = s_T[s]
                        a = opac[gi] * w
                        d_colors[gi, 0] += a * ti * dcr
                        d_colors[gi, 1] += a * ti * dcg
                        d_colors[gi, 2] += a * ti * dcb
                        dalpha = ti * (
                            dcr * (colors[gi, 0] - rest_r)
                            + dcg * (colors[gi, 1] - rest_g)
                            + dcb * (colors[gi, 2] - rest_b)
                        ) + da_pix * ti * t_behind
                        d_opac[gi] += dalpha * w
                        dw = dalpha * opac[gi]
                        dq = -0.5 * w * dw
                        dx = s_dx[s]
                        dy = s_dy[s]
                        d_conic[gi, 0] += dq * dx * dx
                        d_conic[gi, 1] += dq * 2.0 * dx * dy
                        d_conic[gi, 2] += dq * dy * dy
                        gx = dq * 2.0 * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                        gy = dq * 2.0 * (conic[gi, 1] * dx + conic[gi, 2] * dy)
                        d_means2d[gi, 0] -= gx
                        d_means2d[gi, 1] -= gy
                        rest_r = colors[gi, 0] * a + (1.0 - a) * rest_r
                        rest_g = colors[gi, 1] * a + (1.0 - a) * rest_g
                        rest_b = colors[gi, 2] * a + (1.0 - a) * rest_b
                        t_behind *= 1.0 - a


@njit(cache=True)
def zbuffer_build(px, depth, valid, radius, width, height):
    m = px.shape[0]
    zbuf = np.full((height, width), np.inf, dtype=px.dtype)
    r = int(np.ceil(radius))
    r2 = radius * radius
    for i in range(m):
        if not valid[i]:
            continue
        x = px[i, 0]
        y = px[i, 1]
        ix = int(np.floor(x))
        iy = int(np.floor(y))
        # guaranteed footprint: the containing pixel
        if 0 <= ix < width and 0 <= iy < height and depth[i] < zbuf[iy, ix]:
            zbuf[iy, ix] = depth[i]
        for oy in range(-r, r + 1):
            yy = iy + oy
            if yy < 0 or yy >= height:
                continue
            for ox in range(-r, r + 1):
                xx = ix + ox
                if xx < 0 or xx >= width:
                    continue
                ddx = xx + 0.5 - x
                ddy = yy + 0.5 - y
                if ddx * ddx + ddy * ddy <= r2 and depth[i] < zbuf[yy, xx]:
                    zbuf[yy, xx] = depth[i]
    return zbuf


@njit(cache=True)
def zbuffer_query(px, depth, valid, radius, width, height, zbuf, tol):
    m = px.shape[0]
    visible = np.zeros(m, dtype=np.bool_)
    r = int(np.ceil(radius))
    r2 = radius * radius
    for i in range(m):
        if not valid[i]:
            continue
        x = px[i, 0]
        y = px[i, 1]
        ix = int(np.floor(x))
        iy = int(np.floor(y))
        if 0 <= ix < width and 0 <= iy < height and depth[i] <= zbuf[iy, ix] + tol:
            visible[i] = True
            continue
        for oy in range(-r, r + 1):
            yy = iy + oy
            if yy < 0 or yy >= height:
                continue
            done = False
            for ox in range(-r, r + 1):
                xx = ix + ox
                if xx < 0 or xx >= width:
                    continue
                ddx = xx + 0.5 - x
                ddy = yy + 0.5 - y
                if ddx * ddx + ddy * ddy <= r2 and depth[i] <= zbuf[yy, xx] + tol:
                    visible[i] = True
                    done = True
                    break
            if done:
                break
    return visible
