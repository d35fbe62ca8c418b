"""Geometry-aware attention: 3D rotary encoding, Nystrom distance features, causal attention.

Everything works on float64 torch tensors so the same code runs inside the model under
autograd and in the numerical tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64


def _t(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class GeoRoPEConfig:
    d_type: int = 24
    anchors: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0),)
    n_heads: int = 1
    rope_base: float = 100.0
    rbf_bandwidth: float = 1.5
    chol_jitter: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(tuple(float(v) for v in a) for a in self.anchors))
        if self.d_type <= 0 or self.d_type % 6:
            raise ValueError(f"d_type must be a positive multiple of 6, got {self.d_type}")
        if self.n_heads < 1 or self.d_type % (6 * self.n_heads):
            raise ValueError("each head needs a width divisible by 6")
        if self.rope_base <= 1.0:
            raise ValueError("rope_base must exceed 1")
        if self.rbf_bandwidth <= 0:
            raise ValueError("rbf_bandwidth must be positive")
        if self.chol_jitter < 0:
            raise ValueError("chol_jitter must be non-negative")
        if len(self.anchors) < 1 or any(len(a) != 3 for a in self.anchors):
            raise ValueError("need at least one 3D anchor")
        if len(set(self.anchors)) != len(self.anchors):
            raise ValueError("anchors must be pairwise distinct")

    @property
    def m(self) -> int:
        return len(self.anchors)

    @property
    def d_head(self) -> int:
        return self.d_type // self.n_heads

    @property
    def n_freq(self) -> int:
        return self.d_head // 6

    def frequencies(self) -> torch.Tensor:
        t = torch.arange(self.n_freq, dtype=DTYPE)
        return self.rope_base ** (-t / self.n_freq)


# --------------------------------------------------------------------------
# anchors
# --------------------------------------------------------------------------


def farthest_point_order(points: np.ndarray) -> np.ndarray:
    """Reorder points so every prefix is spread out (greedy farthest-point traversal)."""
    points = np.asarray(points, dtype=np.float64)
    start = int(np.argmin(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    order = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    while len(order) < len(points):
        i = int(np.argmax(d))
        order.append(i)
        d = np.minimum(d, np.linalg.norm(points - points[i], axis=1))
    return points[order]


def lattice_anchors(lo, hi, shape) -> np.ndarray:
    """Cell-centered lattice over the box [lo, hi], farthest-point ordered (nested prefixes)."""
    lo, hi = np.broadcast_to(np.asarray(lo, float), 3), np.broadcast_to(np.asarray(hi, float), 3)
    axes = []
    for a, b, s in zip(lo, hi, shape):
        w = (b - a) / s
        axes.append(a + w / 2 + w * np.arange(s))
    return farthest_point_order(np.array(list(itertools.product(*axes))))


def dataset_anchors(coords: np.ndarray, shape, pad: float = 1.0) -> np.ndarray:
    """Lattice anchors over the bounding box of ``coords`` padded by ``pad`` Angstrom."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    return lattice_anchors(coords.min(axis=0) - pad, coords.max(axis=0) + pad, shape)


# --------------------------------------------------------------------------
# RoPE-3D
# --------------------------------------------------------------------------


def rope3d_apply(v, c, freqs) -> torch.Tensor:
    """Rotate consecutive dimension pairs of ``v`` by x, y, z times each frequency.

    ``v``: (..., 6 * n_freq); ``c``: (..., 3) broadcastable against ``v``'s leading dims.
    Block t holds dims (x pair, y pair, z pair) rotated by angles c * freqs[t].
    """
    v, c, freqs = _t(v), _t(c), _t(freqs)
    nf = freqs.shape[0]
    if v.shape[-1] != 6 * nf:
        raise ValueError(f"width {v.shape[-1]} does not match {nf} frequency blocks of 6")
    pairs = v.reshape(*v.shape[:-1], nf, 3, 2)
    ang = c[..., None, :] * freqs[:, None]  # (..., nf, 3)
    cos, sin = torch.cos(ang), torch.sin(ang)
    a, b = pairs[..., 0], pairs[..., 1]
    out = torch.stack((a * cos - b * sin, a * sin + b * cos), dim=-1)
    return out.reshape(v.shape)


def rope3d_apply_rel(k, delta, freqs) -> torch.Tensor:
    """R_{delta} k; the relative rotation of the identity <R_ci q, R_cj k> = <q, R_{cj-ci} k>."""
    return rope3d_apply(k, delta, freqs)


# --------------------------------------------------------------------------
# Nystrom encoding
# --------------------------------------------------------------------------


def rbf(a, b, bandwidth: float) -> torch.Tensor:
    """exp(-|a - b|^2 / (2 s^2)) over all pairs: (..., p, 3) x (q, 3) -> (..., p, q)."""
    a, b = _t(a), _t(b)
    d2 = ((a[..., :, None, :] - b[None, :, :]) ** 2).sum(-1)
    return torch.exp(-d2 / (2.0 * bandwidth**2))


@dataclass(frozen=True, eq=False)
class NystromBasis:
    anchors: torch.Tensor  # (m, 3)
    L: torch.Tensor  # (m, m) lower Cholesky factor of A + jitter I
    bandwidth: float
    jitter: float = 0.0
    gram: torch.Tensor = field(repr=False, default=None)

    @classmethod
    def build(cls, anchors, bandwidth: float, jitter: float = 0.0) -> "NystromBasis":
        anchors = _t(anchors).reshape(-1, 3)
        gram = rbf(anchors, anchors, bandwidth)
        L = torch.linalg.cholesky(gram + jitter * torch.eye(anchors.shape[0], dtype=DTYPE))
        return cls(anchors, L, float(bandwidth), float(jitter), gram)

    @classmethod
    def from_config(cls, cfg: GeoRoPEConfig) -> "NystromBasis":
        return cls.build(cfg.anchors, cfg.rbf_bandwidth, cfg.chol_jitter)

    @property
    def m(self) -> int:
        return self.anchors.shape[0]


def nystrom_encode(c, basis: NystromBasis) -> torch.Tensor:
    """L^{-1} k(c) where k(c)[a] = rbf(c, anchor_a); c: (..., 3) -> (..., m)."""
    c = _t(c)
    k = rbf(c.reshape(-1, 3), basis.anchors, basis.bandwidth)  # (N, m)
    z = torch.linalg.solve_triangular(basis.L, k.T, upper=False).T
    return z.reshape(*c.shape[:-1], basis.m)


# --------------------------------------------------------------------------
# projections and scores
# --------------------------------------------------------------------------


def project_qkv(z_type, z_nys, w_q, w_k, w_v, w_v_nys):
    """Block-diagonal projections; the Nystrom block is the identity for queries and keys.

    Returns ((q_type, q_nys), (k_type, k_nys), (v_type, v_nys)).
    """
    z_type, z_nys = _t(z_type), _t(z_nys)
    q = (z_type @ _t(w_q).T, z_nys)
    k = (z_type @ _t(w_k).T, z_nys)
    v = (z_type @ _t(w_v).T, z_nys @ _t(w_v_nys).T)
    return q, k, v


def score_terms(q_type, q_nys, k_type, k_nys, ci, cj, freqs) -> tuple[torch.Tensor, torch.Tensor]:
    """Unscaled (rotary, Nystrom) contributions to the score between query i and key j."""
    rope = (rope3d_apply(q_type, ci, freqs) * rope3d_apply(k_type, cj, freqs)).sum(-1)
    nys = (_t(q_nys) * _t(k_nys)).sum(-1)
    return rope, nys


def attention_score(q_type, q_nys, k_type, k_nys, ci, cj, cfg: GeoRoPEConfig) -> torch.Tensor:
    rope, nys = score_terms(q_type, q_nys, k_type, k_nys, ci, cj, cfg.frequencies())
    return (rope + nys) / math.sqrt(_t(q_type).shape[-1] + _t(q_nys).shape[-1])


def causal_attention(q_type, k_type, v, z_nys, coords, freqs) -> torch.Tensor:
    """Masked softmax attention with rotary type scores plus Nystrom scores.

    q_type, k_type: (..., H, T, dh); v: (..., H, T, dv); z_nys: (..., T, m) shared by all
    heads; coords: (..., T, 3). Position i attends to positions j <= i.
    """
    T = q_type.shape[-2]
    c = coords.unsqueeze(-3)  # broadcast over heads
    qr = rope3d_apply(q_type, c, freqs)
    kr = rope3d_apply(k_type, c, freqs)
    scores = qr @ kr.transpose(-1, -2) + (z_nys @ z_nys.transpose(-1, -2)).unsqueeze(-3)
    scores = scores / math.sqrt(q_type.shape[-1] + z_nys.shape[-1])
    mask = torch.ones(T, T, dtype=torch.bool).triu(1)
    scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v
