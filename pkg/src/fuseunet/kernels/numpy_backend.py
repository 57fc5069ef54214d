"""Pure-numpy conv kernels via im2col / col2im lowering.

Batch is processed in chunks so the lowered column matrix stays bounded
(roughly CHUNK * C * KH * KW * Ho * Wo floats at a time).
"""

from __future__ import annotations

import numpy as np

_BATCH_CHUNK = 4


def _out_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, KH: int, KW: int, stride: int, dil: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    col = np.empty((B, C, KH, KW, Ho, Wo), dtype=xp.dtype)
    for kh in range(KH):
        h0 = kh * dil
        for kw in range(KW):
            w0 = kw * dil
            col[:, :, kh, kw] = xp[
                :, :, h0 : h0 + stride * (Ho - 1) + 1 : stride, w0 : w0 + stride * (Wo - 1) + 1 : stride
            ]
    return col


def _col2im(col: np.ndarray, Hp: int, Wp: int, stride: int, dil: int) -> np.ndarray:
    B, C, KH, KW, Ho, Wo = col.shape
    img = np.zeros((B, C, Hp, Wp), dtype=col.dtype)
    for kh in range(KH):
        h0 = kh * dil
        for kw in range(KW):
            w0 = kw * dil
            img[:, :, h0 : h0 + stride * (Ho - 1) + 1 : stride, w0 : w0 + stride * (Wo - 1) + 1 : stride] += col[
                :, :, kh, kw
            ]
    return img


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int) -> np.ndarray:
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    Ho = _out_extent(H, KH, stride, padding, dilation)
    Wo = _out_extent(W, KW, stride, padding, dilation)
    xp = _pad(x, padding)
    wm = w.reshape(Co, -1)
    y = np.empty((B, Co, Ho, Wo), dtype=x.dtype)
    for b0 in range(0, B, _BATCH_CHUNK):
        b1 = min(B, b0 + _BATCH_CHUNK)
        col = _im2col(xp[b0:b1], KH, KW, stride, dilation, Ho, Wo)
        col2 = col.reshape(b1 - b0, Ci * KH * KW, Ho * Wo)
        y[b0:b1] = np.matmul(wm[None], col2).reshape(b1 - b0, Co, Ho, Wo)
    return y


def conv2d_backward_input(
    dy: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int, H: int, W: int
) -> np.ndarray:
    B, Co, Ho, Wo = dy.shape
    _, Ci, KH, KW = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    wmT = w.reshape(Co, -1).T
    dxp = np.empty((B, Ci, Hp, Wp), dtype=dy.dtype)
    for b0 in range(0, B, _BATCH_CHUNK):
        b1 = min(B, b0 + _BATCH_CHUNK)
        dy2 = dy[b0:b1].reshape(b1 - b0, Co, Ho * Wo)
        dcol = np.matmul(wmT[None], dy2).reshape(b1 - b0, Ci, KH, KW, Ho, Wo)
        dxp[b0:b1] = _col2im(dcol, Hp, Wp, stride, dilation)
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])


def conv2d_backward_weight(
    dy: np.ndarray, x: np.ndarray, stride: int, padding: int, dilation: int, KH: int, KW: int
) -> np.ndarray:
    B, Co, Ho, Wo = dy.shape
    _, Ci, _, _ = x.shape
    xp = _pad(x, padding)
    dw = np.zeros((Co, Ci * KH * KW), dtype=dy.dtype)
    for b0 in range(0, B, _BATCH_CHUNK):
        b1 = min(B, b0 + _BATCH_CHUNK)
        col = _im2col(xp[b0:b1], KH, KW, stride, dilation, Ho, Wo)
        col2 = col.reshape(b1 - b0, Ci * KH * KW, Ho * Wo)
        dy2 = dy[b0:b1].reshape(b1 - b0, Co, Ho * Wo)
        dw += np.matmul(dy2, col2.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(Co, Ci, KH, KW)
