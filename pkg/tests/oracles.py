"""Deliberately naive reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def matmul_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def channel_mean_var_loop(x):
    n, c, h, w = x.shape
    means, vars_ = np.zeros(c), np.zeros(c)
    for ch in range(c):
        vals = [x[i, ch, y, z] for i in range(n) for y in range(h) for z in range(w)]
        m = math.fsum(vals) / len(vals)
        means[ch] = m
        vars_[ch] = math.fsum((v - m) ** 2 for v in vals) / len(vals)
    return means, vars_


def conv2d_loop(x, w, b=None, stride=1, pad=0):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    s = 0.0
                    for c in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                yy, xx = y * stride + ky - pad, z * stride + kx - pad
                                if 0 <= yy < h and 0 <= xx < wd:
                                    s += x[i, c, yy, xx] * w[o, c, ky, kx]
                    out[i, o, y, z] = s + (0.0 if b is None else b[o])
    return out


def gap_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for i in range(n):
        for ch in range(c):
            out[i, ch] = sum(x[i, ch, y, z] for y in range(h) for z in range(w)) / (h * w)
    return out


def permute_loop(x, axes):
    out = np.zeros(tuple(x.shape[a] for a in axes))
    for idx in itertools.product(*(range(d) for d in x.shape)):
        out[tuple(idx[a] for a in axes)] = x[idx]
    return out


def block_diag_dense(w, groups):
    """Assemble the dense matrix of a grouped FC, group by group."""
    n_out, gi = w.shape
    go = n_out // groups
    dense = np.zeros((n_out, gi * groups))
    for grp in range(groups):
        for o in range(go):
            for i in range(gi):
                dense[grp * go + o, grp * gi + i] = w[grp * go + o, i]
    return dense


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def relu(z):
    return np.maximum(z, 0.0)


def normalize_np(x, mean, var, eps=1e-5):
    return (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + eps)


def se_np(x, w1, b1, w2, b2):
    s = x.mean(axis=(2, 3))
    a = sigmoid(relu(s @ w1.T + b1) @ w2.T + b2)
    return x * a[:, :, None, None]


def dnb_np(x, w1, w2, b2, groups, mean=None, var=None, eps=1e-5):
    if mean is None:
        mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    c = x.shape[1]
    h = relu(x.mean(axis=(2, 3)) @ w1.T)
    out = h @ block_diag_dense(w2, groups).T + b2
    alpha, lam = out[:, :c], out[:, c:]
    return normalize_np(x, mean, var, eps) * alpha[:, :, None, None] + lam[:, :, None, None]


def dnc_np(x, p, variant, groups, eps=1e-5):
    mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    std = np.sqrt(var + eps)
    c = x.shape[1]
    if variant == "dnc-a":
        h = relu(p["fc1_mean.weight"] @ mean + p["fc1_std.weight"] @ std)
        out = block_diag_dense(p["fc2.weight"], groups) @ h + p["fc2.bias"]
    else:
        hm = relu(p["fc1_mean.weight"] @ mean)
        hs = relu(p["fc1_std.weight"] @ std)
        out = (block_diag_dense(p["fc2_mean.weight"], groups) @ hm + p["fc2_mean.bias"]
               + block_diag_dense(p["fc2_std.weight"], groups) @ hs)
    alpha, lam = out[:c], out[c:]
    return normalize_np(x, mean, var, eps) * alpha[None, :, None, None] + lam[None, :, None, None]


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        o = x[idx]
        x[idx] = o + h
        fp = f(x)
        x[idx] = o - h
        fm = f(x)
        x[idx] = o
        g[idx] = (fp - fm) / (2 * h)
    return g
