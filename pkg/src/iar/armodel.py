"""Hierarchical autoregressive model over atom tokens.

Each step predicts the next atom type from the context embedding h_i (cross-entropy),
then its coordinates with a small denoiser conditioned on (type, h_i) trained with the
noise-prediction diffusion loss. Classifier-free guidance blends conditional and
unconditional logits and noise estimates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .canon import CanonicalSequence
from .georope import DTYPE, GeoRoPEConfig, NystromBasis, causal_attention, nystrom_encode
from .metrics import class_ids as default_class_ids
from .molio import Molecule

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_ff: int = 64
    denoiser_hidden: int = 64
    n_sigma_features: int = 4
    elements: tuple[int, ...] = (1, 6, 7, 8, 9)
    class_ids: tuple[int, ...] = field(default_factory=lambda: tuple(default_class_ids()))

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(int(e) for e in self.elements))
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if self.n_layers < 1 or self.d_ff < 1 or self.denoiser_hidden < 1 or self.n_sigma_features < 0:
            raise ValueError("model sizes must be positive")
        if len(set(self.elements)) != len(self.elements) or not self.elements:
            raise ValueError("elements must be distinct and non-empty")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be distinct")


@dataclass(frozen=True)
class DiffusionSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 5.0
    n_steps: int = 50
    sigma_data: float = 1.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    def sample_sigmas(self, n: int, gen: torch.Generator) -> torch.Tensor:
        """Log-uniform noise levels on [sigma_min, sigma_max]."""
        u = torch.rand(n, generator=gen, dtype=DTYPE)
        lo, hi = math.log(self.sigma_min), math.log(self.sigma_max)
        return torch.exp(lo + (hi - lo) * u)

    def grid(self) -> torch.Tensor:
        """Descending log-linear grid of n_steps + 1 levels, sigma_max to sigma_min."""
        return torch.exp(
            torch.linspace(math.log(self.sigma_max), math.log(self.sigma_min), self.n_steps + 1, dtype=DTYPE)
        )


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    p_drop: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 1.0
    lambda_diff: float = 1.0
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if self.grad_clip < 0 or self.lambda_diff < 0:
            raise ValueError("grad_clip and lambda_diff must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------


class Vocab:
    """Elements first (these plus EOS are what the type head emits), then control tokens."""

    def __init__(self, elements: Sequence[int], class_ids: Sequence[int]):
        self.elements = tuple(elements)
        self.class_ids = tuple(class_ids)
        n = len(self.elements)
        self.EOS = n
        self.BOS = n + 1
        self.NULL_CLASS = n + 2
        self._element_index = {z: i for i, z in enumerate(self.elements)}
        self._class_index = {c: n + 3 + i for i, c in enumerate(self.class_ids)}
        self.size = n + 3 + len(self.class_ids)
        self.n_emit = n + 1

    def element_token(self, z: int) -> int:
        try:
            return self._element_index[z]
        except KeyError:
            raise KeyError(f"element {z} is not in the model vocabulary") from None

    def class_token(self, class_id: int | None) -> int:
        if class_id is None:
            return self.NULL_CLASS
        try:
            return self._class_index[class_id]
        except KeyError:
            raise KeyError(f"class id {class_id} is not in the model vocabulary") from None


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt((x * x).mean(-1, keepdim=True) + eps) * gain


def cfg_blend(uncond: torch.Tensor, cond: torch.Tensor, scale: float) -> torch.Tensor:
    """u + s (c - u); the endpoints s = 0 and s = 1 return their input exactly."""
    if scale == 0:
        return uncond.clone()
    if scale == 1:
        return cond.clone()
    return uncond + scale * (cond - uncond)


class GeoARModel(nn.Module):
    """Causal transformer with GeoRoPE attention, a type head and a coordinate denoiser.

    Parameters are registered in a fixed declaration order; the checkpoint format
    relies on it.
    """

    def __init__(self, geo: GeoRoPEConfig, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.geo, self.cfg = geo, cfg
        self.vocab = Vocab(cfg.elements, cfg.class_ids)
        self.basis = NystromBasis.from_config(geo)
        self.register_buffer("freqs", geo.frequencies(), persistent=False)
        d, m, H = geo.d_type, geo.m, geo.n_heads
        gen = torch.Generator().manual_seed(seed)

        def w(*shape, fan_in=None, scale=1.0):
            fan_in = fan_in or shape[-1]
            return nn.Parameter(torch.randn(*shape, generator=gen, dtype=DTYPE) * scale / math.sqrt(fan_in))

        def ones(*shape):
            return nn.Parameter(torch.ones(*shape, dtype=DTYPE))

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))

        self.embed = nn.Parameter(torch.randn(self.vocab.size, d, generator=gen, dtype=DTYPE))
        self.layers = nn.ModuleList()
        for _ in range(cfg.n_layers):
            layer = nn.Module()
            layer.norm_attn = ones(d)
            layer.w_q = w(d, d)
            layer.w_k = w(d, d)
            layer.w_v = w(d, d)
            layer.w_v_nys = w(H, m, m)
            layer.w_o = w(d, H * (geo.d_head + m), scale=0.5)
            layer.norm_ff = ones(d)
            layer.w_ff1 = w(cfg.d_ff, d)
            layer.b_ff1 = zeros(cfg.d_ff)
            layer.w_ff2 = w(d, cfg.d_ff, scale=0.5)
            layer.b_ff2 = zeros(d)
            self.layers.append(layer)
        self.norm_out = ones(d)
        self.w_type = w(self.vocab.n_emit, d)
        self.b_type = zeros(self.vocab.n_emit)
        n_in = 3 + self.n_sigma_inputs + 2 * d
        hid = cfg.denoiser_hidden
        self.den_w1 = w(hid, n_in)
        self.den_b1 = zeros(hid)
        self.den_w2 = w(hid, hid)
        self.den_b2 = zeros(hid)
        self.den_w3 = w(3, hid, scale=0.1)
        self.den_b3 = zeros(3)

    @property
    def n_sigma_inputs(self) -> int:
        return 1 + 2 * self.cfg.n_sigma_features

    # ---- backbone -------------------------------------------------------

    def backbone(self, tokens: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """Context embeddings h: (B, T) tokens and (B, T, 3) coords -> (B, T, d_type)."""
        geo = self.geo
        B, T = tokens.shape
        H, dh = geo.n_heads, geo.d_head
        x = self.embed[tokens]
        z_nys = nystrom_encode(coords, self.basis)
        for layer in self.layers:
            a = rms_norm(x, layer.norm_attn)
            q = (a @ layer.w_q.T).view(B, T, H, dh).transpose(1, 2)
            k = (a @ layer.w_k.T).view(B, T, H, dh).transpose(1, 2)
            v_type = (a @ layer.w_v.T).view(B, T, H, dh).transpose(1, 2)
            v_nys = torch.einsum("btm,hnm->bhtn", z_nys, layer.w_v_nys)
            v = torch.cat((v_type, v_nys), dim=-1)
            out = causal_attention(q, k, v, z_nys, coords, self.freqs)
            x = x + out.transpose(1, 2).reshape(B, T, -1) @ layer.w_o.T
            f = rms_norm(x, layer.norm_ff) @ layer.w_ff1.T + layer.b_ff1
            x = x + nn.functional.silu(f) @ layer.w_ff2.T + layer.b_ff2
        return rms_norm(x, self.norm_out)

    def type_logits(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.w_type.T + self.b_type

    # ---- denoiser -------------------------------------------------------

    def sigma_features(self, sigma: torch.Tensor) -> torch.Tensor:
        u = torch.log(sigma).unsqueeze(-1) / 4.0
        if self.cfg.n_sigma_features == 0:
            return u
        w = 2.0 ** torch.arange(self.cfg.n_sigma_features, dtype=DTYPE)
        return torch.cat((u, torch.sin(w * u), torch.cos(w * u)), dim=-1)

    def denoise(self, c_noisy, sigma, type_tokens, h, sigma_data: float = 1.0) -> torch.Tensor:
        """Predicted noise eps_theta(c_sigma, sigma, t, h) for (N, 3) inputs.

        Built from an EDM-preconditioned denoiser D = c_skip x + c_out F, so that
        eps = (x - D) / sigma = sigma x / (sigma^2 + sd^2) - sd / sqrt(sigma^2 + sd^2) F.
        """
        sigma = sigma.reshape(-1)
        s2 = sigma * sigma + sigma_data**2
        c_in = torch.rsqrt(s2).unsqueeze(-1)
        feats = torch.cat((c_noisy * c_in, self.sigma_features(sigma), self.embed[type_tokens], h), dim=-1)
        f = nn.functional.silu(feats @ self.den_w1.T + self.den_b1)
        f = nn.functional.silu(f @ self.den_w2.T + self.den_b2)
        F = f @ self.den_w3.T + self.den_b3
        return (sigma / s2).unsqueeze(-1) * c_noisy - (sigma_data * torch.rsqrt(s2)).unsqueeze(-1) * F


# --------------------------------------------------------------------------
# batches and losses
# --------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T) [class, BOS, atoms..., pad]
    coords: torch.Tensor  # (B, T, 3)
    type_targets: torch.Tensor  # (B, T) next emitted token, -1 where no prediction
    coord_targets: torch.Tensor  # (B, T, 3) next atom's coordinates
    coord_mask: torch.Tensor  # (B, T) bool, position predicts an atom

    @property
    def n_coord(self) -> int:
        return int(self.coord_mask.sum())


def make_batch(
    vocab: Vocab, seqs: Sequence[CanonicalSequence | Molecule], class_labels: Sequence[int | None]
) -> Batch:
    """Prefix each sequence with its class (or NULL) token and BOS, both at the origin."""
    T = max(len(s) for s in seqs) + 2
    B = len(seqs)
    tokens = torch.full((B, T), vocab.EOS, dtype=torch.long)
    coords = torch.zeros(B, T, 3, dtype=DTYPE)
    type_targets = torch.full((B, T), -1, dtype=torch.long)
    coord_targets = torch.zeros(B, T, 3, dtype=DTYPE)
    coord_mask = torch.zeros(B, T, dtype=torch.bool)
    for b, (s, label) in enumerate(zip(seqs, class_labels)):
        n = len(s)
        atoms = [vocab.element_token(z) for z in s.atom_types]
        xyz = torch.tensor(np.asarray(s.coords), dtype=DTYPE)
        tokens[b, 0] = vocab.class_token(label)
        tokens[b, 1] = vocab.BOS
        tokens[b, 2 : 2 + n] = torch.tensor(atoms)
        coords[b, 2 : 2 + n] = xyz
        # position 1 (BOS) predicts atom 1, ..., position n + 1 predicts EOS
        type_targets[b, 1 : 1 + n] = torch.tensor(atoms)
        type_targets[b, 1 + n] = vocab.EOS
        coord_targets[b, 1 : 1 + n] = xyz
        coord_mask[b, 1 : 1 + n] = True
    return Batch(tokens, coords, type_targets, coord_targets, coord_mask)


def type_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions with a target (targets == -1 are skipped)."""
    return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-1)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean over positions of |eps - eps_hat|^2."""
    return ((eps - eps_hat) ** 2).sum(-1).mean()


def batch_losses(
    model: GeoARModel, batch: Batch, sigma: torch.Tensor, eps: torch.Tensor, sigma_data: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """(type loss, diffusion loss) for given noise levels and noise, one per coordinate target."""
    h = model.backbone(batch.tokens, batch.coords)
    lt = type_loss(model.type_logits(h), batch.type_targets)
    mask = batch.coord_mask
    target_tokens = batch.type_targets[mask]
    c = batch.coord_targets[mask]
    eps_hat = model.denoise(c + sigma.unsqueeze(-1) * eps, sigma, target_tokens, h[mask], sigma_data)
    return lt, diffusion_loss(eps, eps_hat)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: GeoARModel
    trace: list[tuple[int, float, float]]  # (step, type loss, diffusion loss)


def train(
    model: GeoARModel,
    dataset: Sequence[CanonicalSequence],
    train_cfg: TrainConfig,
    schedule: DiffusionSchedule | None = None,
    guidance: GuidanceConfig | None = None,
    callback: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """SGD with momentum on L_type + lambda * L_diff; deterministic given train_cfg.seed."""
    schedule = schedule or DiffusionSchedule()
    guidance = guidance or GuidanceConfig()
    if not dataset:
        raise ValueError("empty dataset")
    gen = torch.Generator().manual_seed(train_cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.lr, momentum=train_cfg.momentum)
    trace = []
    queue: list[int] = []
    for step in range(train_cfg.steps):
        idx = []
        while len(idx) < train_cfg.batch_size:
            if not queue:
                queue = torch.randperm(len(dataset), generator=gen).tolist()
            idx.append(queue.pop())
        seqs = [dataset[i] for i in idx]
        drop = torch.rand(len(seqs), generator=gen, dtype=DTYPE) < guidance.p_drop
        labels = [None if (bool(d) or s.class_id is None) else s.class_id for s, d in zip(seqs, drop)]
        batch = make_batch(model.vocab, seqs, labels)
        sigma = schedule.sample_sigmas(batch.n_coord, gen)
        eps = torch.randn(batch.n_coord, 3, generator=gen, dtype=DTYPE)

        if train_cfg.lr_schedule == "cosine":
            lr = 0.5 * train_cfg.lr * (1 + math.cos(math.pi * step / max(train_cfg.steps, 1)))
        else:
            lr = train_cfg.lr
        for group in opt.param_groups:
            group["lr"] = lr

        opt.zero_grad(set_to_none=False)
        lt, ld = batch_losses(model, batch, sigma, eps, schedule.sigma_data)
        loss = lt + train_cfg.lambda_diff * ld
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        loss.backward()
        if train_cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        trace.append((step, lt.item(), ld.item()))
        if callback is not None:
            callback(step, lt.item(), ld.item())
        if step % 100 == 0:
            log.debug("step %d type %.4f diff %.4f", step, lt.item(), ld.item())
    return TrainResult(model, trace)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass
class Generated:
    molecule: Molecule
    truncated: bool


def _rows(class_id: int | None, scale: float) -> list[int | None]:
    """Context rows to evaluate: [cond] or [uncond] alone at the endpoints, else both."""
    if class_id is None or scale == 0:
        return [None]
    if scale == 1:
        return [class_id]
    return [class_id, None]


def _blend_rows(x: torch.Tensor, rows, scale: float) -> torch.Tensor:
    if len(rows) == 1:
        return x[0]
    return cfg_blend(x[1], x[0], scale)


@torch.no_grad()
def sample_coord(
    model: GeoARModel,
    h: torch.Tensor,
    type_token: int,
    schedule: DiffusionSchedule,
    gen: torch.Generator,
    scale: float = 1.0,
) -> torch.Tensor:
    """Euler integration of dx/dsigma = eps from sigma_max to sigma_min.

    ``h`` holds one context row, or (conditional, unconditional) rows that are blended
    with guidance scale ``scale``.
    """
    grid = schedule.grid()
    rows = h.shape[0]
    tokens = torch.full((rows,), type_token, dtype=torch.long)
    c = schedule.sigma_max * torch.randn(3, generator=gen, dtype=DTYPE)
    for k in range(schedule.n_steps):
        sigma, nxt = grid[k], grid[k + 1]
        eps = model.denoise(c.expand(rows, 3), sigma.expand(rows), tokens, h, schedule.sigma_data)
        eps_g = eps[0] if rows == 1 else cfg_blend(eps[1], eps[0], scale)
        c = c + (nxt - sigma) * eps_g
    return c


@torch.no_grad()
def sample_molecule(
    model: GeoARModel,
    class_id: int | None = None,
    max_len: int = 32,
    schedule: DiffusionSchedule | None = None,
    guidance: GuidanceConfig | None = None,
    seed: int = 0,
    temperature: float = 1.0,
) -> Generated:
    """Generate one molecule token by token: type from (guided) logits, then coordinates.

    temperature 0 picks the most likely type at every step.
    """
    schedule = schedule or DiffusionSchedule()
    scale = (guidance or GuidanceConfig()).scale
    vocab = model.vocab
    gen = torch.Generator().manual_seed(seed)
    rows = _rows(class_id, scale)
    prefix = [vocab.class_token(r) for r in rows]
    types: list[int] = []
    xyz: list[torch.Tensor] = []
    truncated = True
    for step in range(max_len):
        T = len(types) + 2
        tokens = torch.empty(len(rows), T, dtype=torch.long)
        tokens[:, 0] = torch.tensor(prefix)
        tokens[:, 1] = vocab.BOS
        if types:
            tokens[:, 2:] = torch.tensor([vocab.element_token(z) for z in types])
        coords = torch.zeros(len(rows), T, 3, dtype=DTYPE)
        if xyz:
            coords[:, 2:] = torch.stack(xyz)
        h = model.backbone(tokens, coords)[:, -1]
        logits = _blend_rows(model.type_logits(h).unsqueeze(1), rows, scale).reshape(-1)
        if step == 0:
            logits = logits.clone()
            logits[vocab.EOS] = float("-inf")
        if temperature == 0:
            tok = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits / temperature, dim=-1)
            tok = int(torch.multinomial(probs, 1, generator=gen))
        if tok == vocab.EOS:
            truncated = False
            break
        z = vocab.elements[tok]
        xyz.append(sample_coord(model, h, tok, schedule, gen, scale))
        types.append(z)
    mol = Molecule(types, torch.stack(xyz).numpy(), class_id)
    return Generated(mol, truncated)


def type_probabilities(model: GeoARModel, batch: Batch) -> torch.Tensor:
    with torch.no_grad():
        return torch.softmax(model.type_logits(model.backbone(batch.tokens, batch.coords)), dim=-1)
