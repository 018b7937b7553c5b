"""Jit-compiled inner loops for the dense tensor kernels.

Everything here works on contiguous float64 arrays in (batch, channel,
height, width) layout. The loops are parallelized over independent output
slabs only; the reduction order for every output element is fixed by the
source, so results are bitwise identical at any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=False, cache=True)
def corr2d_s1(x, w, dh, dw, out):
    """Stride-1 cross-correlation, accumulating into ``out``.

    x: (B, I, H, W) pre-padded input; w: (O, I, kh, kw); out: (B, O, OH, OW)
    with OH = H - (kh-1)*dh and OW = W - (kw-1)*dw. Output channels are
    blocked by four and 3-wide kernels take a fused-tap path; per output
    element the reduction order is fixed regardless of thread count.
    """
    B, I, H, W = x.shape
    O, _, kh, kw = w.shape
    OH = out.shape[2]
    OW = out.shape[3]
    nblk = (O + 3) // 4
    ip = I // 2 * 2
    for bp in prange(B * nblk):
        b = bp // nblk
        o0 = (bp % nblk) * 4
        if o0 + 4 <= O and kw == 3:
            d2 = 2 * dw
            for oh in range(OH):
                r0 = out[b, o0, oh]
                r1 = out[b, o0 + 1, oh]
                r2 = out[b, o0 + 2, oh]
                r3 = out[b, o0 + 3, oh]
                for i in range(0, ip, 2):
                    for r in range(kh):
                        xr = x[b, i, oh + r * dh]
                        yr = x[b, i + 1, oh + r * dh]
                        wa0 = w[o0, i, r, 0]
                        wa1 = w[o0, i, r, 1]
                        wa2 = w[o0, i, r, 2]
                        va0 = w[o0, i + 1, r, 0]
                        va1 = w[o0, i + 1, r, 1]
                        va2 = w[o0, i + 1, r, 2]
                        wb0 = w[o0 + 1, i, r, 0]
                        wb1 = w[o0 + 1, i, r, 1]
                        wb2 = w[o0 + 1, i, r, 2]
                        vb0 = w[o0 + 1, i + 1, r, 0]
                        vb1 = w[o0 + 1, i + 1, r, 1]
                        vb2 = w[o0 + 1, i + 1, r, 2]
                        wc0 = w[o0 + 2, i, r, 0]
                        wc1 = w[o0 + 2, i, r, 1]
                        wc2 = w[o0 + 2, i, r, 2]
                        vc0 = w[o0 + 2, i + 1, r, 0]
                        vc1 = w[o0 + 2, i + 1, r, 1]
                        vc2 = w[o0 + 2, i + 1, r, 2]
                        wd0 = w[o0 + 3, i, r, 0]
                        wd1 = w[o0 + 3, i, r, 1]
                        wd2 = w[o0 + 3, i, r, 2]
                        vd0 = w[o0 + 3, i + 1, r, 0]
                        vd1 = w[o0 + 3, i + 1, r, 1]
                        vd2 = w[o0 + 3, i + 1, r, 2]
                        for ow in range(OW):
                            xa = xr[ow]
                            xb = xr[ow + dw]
                            xc = xr[ow + d2]
                            ya = yr[ow]
                            yb = yr[ow + dw]
                            yc = yr[ow + d2]
                            r0[ow] += wa0 * xa + wa1 * xb + wa2 * xc \
                                + va0 * ya + va1 * yb + va2 * yc
                            r1[ow] += wb0 * xa + wb1 * xb + wb2 * xc \
                                + vb0 * ya + vb1 * yb + vb2 * yc
                            r2[ow] += wc0 * xa + wc1 * xb + wc2 * xc \
                                + vc0 * ya + vc1 * yb + vc2 * yc
                            r3[ow] += wd0 * xa + wd1 * xb + wd2 * xc \
                                + vd0 * ya + vd1 * yb + vd2 * yc
                if ip < I:
                    i = ip
                    for r in range(kh):
                        xr = x[b, i, oh + r * dh]
                        w00 = w[o0, i, r, 0]
                        w01 = w[o0, i, r, 1]
                        w02 = w[o0, i, r, 2]
                        w10 = w[o0 + 1, i, r, 0]
                        w11 = w[o0 + 1, i, r, 1]
                        w12 = w[o0 + 1, i, r, 2]
                        w20 = w[o0 + 2, i, r, 0]
                        w21 = w[o0 + 2, i, r, 1]
                        w22 = w[o0 + 2, i, r, 2]
                        w30 = w[o0 + 3, i, r, 0]
                        w31 = w[o0 + 3, i, r, 1]
                        w32 = w[o0 + 3, i, r, 2]
                        for ow in range(OW):
                            xa = xr[ow]
                            xb = xr[ow + dw]
                            xc = xr[ow + d2]
                            r0[ow] += w00 * xa + w01 * xb + w02 * xc
                            r1[ow] += w10 * xa + w11 * xb + w12 * xc
                            r2[ow] += w20 * xa + w21 * xb + w22 * xc
                            r3[ow] += w30 * xa + w31 * xb + w32 * xc
        elif o0 + 4 <= O:
            for oh in range(OH):
                r0 = out[b, o0, oh]
                r1 = out[b, o0 + 1, oh]
                r2 = out[b, o0 + 2, oh]
                r3 = out[b, o0 + 3, oh]
                for i in range(I):
                    for r in range(kh):
                        xrow = x[b, i, oh + r * dh]
                        for c in range(kw):
                            w0 = w[o0, i, r, c]
                            w1 = w[o0 + 1, i, r, c]
                            w2 = w[o0 + 2, i, r, c]
                            w3 = w[o0 + 3, i, r, c]
                            base = c * dw
                            for ow in range(OW):
                                xv = xrow[base + ow]
                                r0[ow] += w0 * xv
                                r1[ow] += w1 * xv
                                r2[ow] += w2 * xv
                                r3[ow] += w3 * xv
        else:
            for o in range(o0, O):
                for oh in range(OH):
                    orow = out[b, o, oh]
                    for i in range(I):
                        for r in range(kh):
                            xrow = x[b, i, oh + r * dh]
                            for c in range(kw):
                                wv = w[o, i, r, c]
                                base = c * dw
                                for ow in range(OW):
                                    orow[ow] += wv * xrow[base + ow]
    return out


@njit(parallel=True, fastmath=False, cache=True)
def corr2d_dw(x, gy, dh, dw, dkernel):
    """Kernel gradient of a stride-1 correlation.

    x: (B, I, H, W) pre-padded input; gy: (B, O, OH, OW) stride-dense output
    gradient; dkernel: (O, I, kh, kw) accumulated in place.

    Channel pairs are blocked 2x2 so each pass over the maps feeds four
    accumulator sets. Per (o, i, r, c) the sum accumulates lane-wise into a
    row buffer folded left to right at the end, a fixed order at any thread
    count.
    """
    B, I, H, W = x.shape
    O, _, kh, kw = dkernel.shape
    OH = gy.shape[2]
    OW = gy.shape[3]
    k2 = kh * kw
    nob = (O + 1) // 2
    nib = (I + 1) // 2
    for blk in prange(nob * nib):
        o0 = (blk // nib) * 2
        i0 = (blk % nib) * 2
        no = min(2, O - o0)
        ni = min(2, I - i0)
        buf = np.zeros((4, k2, OW))
        for b in range(B):
            for oh in range(OH):
                if no == 2 and ni == 2 and kw == 3:
                    d2 = 2 * dw
                    g0 = gy[b, o0, oh]
                    g1 = gy[b, o0 + 1, oh]
                    for r in range(kh):
                        x0 = x[b, i0, oh + r * dh]
                        x1 = x[b, i0 + 1, oh + r * dh]
                        q = r * kw
                        b00a = buf[0, q]
                        b00b = buf[0, q + 1]
                        b00c = buf[0, q + 2]
                        b01a = buf[1, q]
                        b01b = buf[1, q + 1]
                        b01c = buf[1, q + 2]
                        b10a = buf[2, q]
                        b10b = buf[2, q + 1]
                        b10c = buf[2, q + 2]
                        b11a = buf[3, q]
                        b11b = buf[3, q + 1]
                        b11c = buf[3, q + 2]
                        for ow in range(OW):
                            gv0 = g0[ow]
                            gv1 = g1[ow]
                            xa0 = x0[ow]
                            xb0 = x0[ow + dw]
                            xc0 = x0[ow + d2]
                            xa1 = x1[ow]
                            xb1 = x1[ow + dw]
                            xc1 = x1[ow + d2]
                            b00a[ow] += gv0 * xa0
                            b00b[ow] += gv0 * xb0
                            b00c[ow] += gv0 * xc0
                            b01a[ow] += gv0 * xa1
                            b01b[ow] += gv0 * xb1
                            b01c[ow] += gv0 * xc1
                            b10a[ow] += gv1 * xa0
                            b10b[ow] += gv1 * xb0
                            b10c[ow] += gv1 * xc0
                            b11a[ow] += gv1 * xa1
                            b11b[ow] += gv1 * xb1
                            b11c[ow] += gv1 * xc1
                elif no == 2 and ni == 2:
                    g0 = gy[b, o0, oh]
                    g1 = gy[b, o0 + 1, oh]
                    for r in range(kh):
                        x0 = x[b, i0, oh + r * dh]
                        x1 = x[b, i0 + 1, oh + r * dh]
                        for c in range(kw):
                            q = r * kw + c
                            a00 = buf[0, q]
                            a01 = buf[1, q]
                            a10 = buf[2, q]
                            a11 = buf[3, q]
                            base = c * dw
                            for ow in range(OW):
                                xv0 = x0[base + ow]
                                xv1 = x1[base + ow]
                                a00[ow] += g0[ow] * xv0
                                a01[ow] += g0[ow] * xv1
                                a10[ow] += g1[ow] * xv0
                                a11[ow] += g1[ow] * xv1
                else:
                    for oo in range(no):
                        grow = gy[b, o0 + oo, oh]
                        for ii in range(ni):
                            for r in range(kh):
                                xrow = x[b, i0 + ii, oh + r * dh]
                                for c in range(kw):
                                    acc = buf[oo * 2 + ii, r * kw + c]
                                    base = c * dw
                                    for ow in range(OW):
                                        acc[ow] += grow[ow] * xrow[base + ow]
        for oo in range(no):
            for ii in range(ni):
                for q in range(k2):
                    acc = buf[oo * 2 + ii, q]
                    s = 0.0
                    for ow in range(OW):
                        s += acc[ow]
                    dkernel[o0 + oo, i0 + ii, q // kw, q % kw] += s
    return dkernel


@njit(parallel=True, fastmath=False, cache=True)
def pool2d_max(xp, k, s, p, width, out, argmax):
    """Window max over a -inf padded input; argmax keeps the first (lowest
    linear index) winner per window in row-major window order, as a flat
    h*width+w index into the unpadded input plane."""
    B, C, HP, WP = xp.shape
    OH = out.shape[2]
    OW = out.shape[3]
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for oh in range(OH):
            for ow in range(OW):
                best = -np.inf
                besti = 0
                h0 = oh * s
                w0 = ow * s
                for r in range(k):
                    xrow = xp[b, c, h0 + r]
                    for q in range(k):
                        v = xrow[w0 + q]
                        if v > best:
                            best = v
                            besti = (h0 + r - p) * width + (w0 + q - p)
                out[b, c, oh, ow] = best
                argmax[b, c, oh, ow] = besti
    return out


@njit(parallel=True, fastmath=False, cache=True)
def pool2d_scatter(argmax, gy, gx):
    """Route pooled gradients back to their argmax positions (padded flat
    indices over gx's H*W plane)."""
    B, C, OH, OW = gy.shape
    HW = gx.shape[2] * gx.shape[3]
    gxf = gx.reshape(B, C, HW)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for oh in range(OH):
            for ow in range(OW):
                gxf[b, c, argmax[b, c, oh, ow]] += gy[b, c, oh, ow]
    return gx
