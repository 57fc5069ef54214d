"""Numba @njit conv kernels.

The jit kernels run in NHWC layout with weights pre-transposed so the
innermost loop is a contiguous channel dot product; the public wrappers
keep the package-wide NCHW convention. Every prange iteration owns a
disjoint output slice (rows for forward/input-grad, one kernel tap for
the weight grad), so results do not depend on the thread count.
"""

from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
from numba import njit, prange


def _out_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


@njit(parallel=True, cache=True)
def _fwd(xh, wh, stride, dil, Ho, Wo):
    # xh [B,Hp,Wp,Ci] (padded), wh [Co,KH,KW,Ci] -> [B,Ho,Wo,Co]
    B = xh.shape[0]
    Ci = xh.shape[3]
    Co, KH, KW = wh.shape[0], wh.shape[1], wh.shape[2]
    y = np.zeros((B, Ho, Wo, Co), dtype=xh.dtype)
    for bo in prange(B * Ho):
        b = bo // Ho
        oh = bo % Ho
        for ow in range(Wo):
            acc = y[b, oh, ow]
            for kh in range(KH):
                ih = oh * stride + kh * dil
                for kw in range(KW):
                    xv = xh[b, ih, ow * stride + kw * dil]
                    for co in range(Co):
                        wrow = wh[co, kh, kw]
                        s = acc[co]
                        for ci in range(Ci):
                            s += wrow[ci] * xv[ci]
                        acc[co] = s
    return y


@njit(parallel=True, cache=True)
def _dx(dyh, wr, stride, dil, Hp, Wp):
    # dyh [B,Ho,Wo,Co], wr [KH,KW,Co,Ci] -> padded input grad [B,Hp,Wp,Ci]
    B, Ho, Wo, Co = dyh.shape
    KH, KW, Ci = wr.shape[0], wr.shape[1], wr.shape[3]
    dxp = np.zeros((B, Hp, Wp, Ci), dtype=dyh.dtype)
    for bh in prange(B * Hp):
        b = bh // Hp
        ih = bh % Hp
        for kh in range(KH):
            t = ih - kh * dil
            if t < 0 or t % stride != 0:
                continue
            oh = t // stride
            if oh >= Ho:
                continue
            for iw in range(Wp):
                row = dxp[b, ih, iw]
                for kw in range(KW):
                    u = iw - kw * dil
                    if u < 0 or u % stride != 0:
                        continue
                    ow = u // stride
                    if ow >= Wo:
                        continue
                    dyv = dyh[b, oh, ow]
                    wv = wr[kh, kw]
                    for co in range(Co):
                        d = dyv[co]
                        wrow = wv[co]
                        for ci in range(Ci):
                            row[ci] += d * wrow[ci]
    return dxp


@njit(parallel=True, cache=True)
def _dw(xh, dyh, stride, dil, KH, KW):
    # xh [B,Hp,Wp,Ci] (padded), dyh [B,Ho,Wo,Co] -> [KH*KW,Co,Ci]
    B, Ho, Wo, Co = dyh.shape
    Ci = xh.shape[3]
    dw = np.zeros((KH * KW, Co, Ci), dtype=dyh.dtype)
    for tap in prange(KH * KW):
        kh = tap // KW
        kw = tap % KW
        acc = dw[tap]
        for b in range(B):
            for oh in range(Ho):
                ih = oh * stride + kh * dil
                for ow in range(Wo):
                    xv = xh[b, ih, ow * stride + kw * dil]
                    dyv = dyh[b, oh, ow]
                    for co in range(Co):
                        d = dyv[co]
                        row = acc[co]
                        for ci in range(Ci):
                            row[ci] += d * xv[ci]
    return dw


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int) -> np.ndarray:
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    Ho = _out_extent(H, KH, stride, padding, dilation)
    Wo = _out_extent(W, KW, stride, padding, dilation)
    xh = _to_nhwc(_pad(x, padding))
    wh = np.ascontiguousarray(w.transpose(0, 2, 3, 1))
    y = _fwd(xh, wh, stride, dilation, Ho, Wo)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_input(
    dy: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int, H: int, W: int
) -> np.ndarray:
    dyh = _to_nhwc(dy)
    wr = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    dxp = _dx(dyh, wr, stride, dilation, H + 2 * padding, W + 2 * padding)
    dx = dxp.transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dx)


def conv2d_backward_weight(
    dy: np.ndarray, x: np.ndarray, stride: int, padding: int, dilation: int, KH: int, KW: int
) -> np.ndarray:
    xh = _to_nhwc(_pad(x, padding))
    dyh = _to_nhwc(dy)
    dw = _dw(xh, dyh, stride, dilation, KH, KW)
    Co, Ci = dw.shape[1], dw.shape[2]
    return np.ascontiguousarray(dw.reshape(KH, KW, Co, Ci).transpose(2, 3, 0, 1))
