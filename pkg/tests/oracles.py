"""Independent reference computations used by the model tests."""

import math

import numpy as np
import torch


def rms(x, g, eps=1e-6):
    return x / np.sqrt(np.mean(x * x) + eps) * g


def rot_pairs(v, c, freqs):
    out = v.copy()
    for t, f in enumerate(freqs):
        for axis in range(3):
            a, b = v[6 * t + 2 * axis], v[6 * t + 2 * axis + 1]
            ang = c[axis] * f
            out[6 * t + 2 * axis] = a * math.cos(ang) - b * math.sin(ang)
            out[6 * t + 2 * axis + 1] = a * math.sin(ang) + b * math.cos(ang)
    return out


def unrolled_backbone(model, tokens, coords):
    """Single-head forward pass written position by position in numpy."""
    P = {k: v.detach().numpy() for k, v in model.named_parameters()}
    anchors = model.basis.anchors.numpy()
    bw = model.basis.bandwidth
    L = model.basis.L.numpy()
    freqs = model.freqs.numpy()
    T = len(tokens)
    x = np.stack([P["embed"][t] for t in tokens])
    z = []
    for c in coords:
        k = np.exp(-np.sum((anchors - c) ** 2, axis=1) / (2 * bw * bw))
        y = np.zeros(len(k))
        for i in range(len(k)):
            y[i] = (k[i] - L[i, :i] @ y[:i]) / L[i, i]
        z.append(y)
    for li in range(model.cfg.n_layers):
        p = lambda n: P[f"layers.{li}.{n}"]
        a = [rms(x[i], p("norm_attn")) for i in range(T)]
        q = [rot_pairs(p("w_q") @ a[i], coords[i], freqs) for i in range(T)]
        k = [rot_pairs(p("w_k") @ a[i], coords[i], freqs) for i in range(T)]
        v = [np.concatenate([p("w_v") @ a[i], p("w_v_nys")[0] @ z[i]]) for i in range(T)]
        scale = math.sqrt(len(q[0]) + len(z[0]))
        new = x.copy()
        for i in range(T):
            s = np.array([(q[i] @ k[j] + z[i] @ z[j]) / scale for j in range(i + 1)])
            w = np.exp(s - s.max())
            w /= w.sum()
            out = sum(w[j] * v[j] for j in range(i + 1))
            new[i] = x[i] + p("w_o") @ out
        x = new
        for i in range(T):
            f = p("w_ff1") @ rms(x[i], p("norm_ff")) + p("b_ff1")
            x[i] = x[i] + p("w_ff2") @ (f / (1 + np.exp(-f))) + p("b_ff2")
    return np.stack([rms(x[i], P["norm_out"]) for i in range(T)])


def fd_check(loss_fn, params, h=1e-6, rtol=1e-4, atol=1e-6):
    """Central differences for every scalar of every parameter against autograd.

    Returns a list of (name, index, autograd, finite difference) for the scalars that fail
    both the relative and the absolute criterion.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in params.items()}
    bad = []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = grads[name].view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                err = abs(fd - g[i].item())
                if err > atol and err > rtol * abs(fd):
                    bad.append((name, i, g[i].item(), fd))
    return bad
