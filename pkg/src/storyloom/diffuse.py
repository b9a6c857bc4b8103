"""Pixel-space toy diffusion model with a decoupled style-adapter branch.

Every attention site in the denoiser owns two cross-attentions that share a
query: one over the text embedding and one (the adapter) over the style latent.
Their results are added onto the residual stream. The adapter's output
projection starts at zero, so attaching it leaves the base model untouched.
"""
from dataclasses import dataclass, replace
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._torch import as_tensor, seeded
from .errors import ParameterError, ShapeError
from .styleseq import Attention


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self):
        return len(self.alpha)

    @classmethod
    def from_alphas(cls, alpha, sigma=None):
        alpha = np.asarray(alpha, dtype=np.float64)
        beta = 1.0 - alpha
        if sigma is None:
            sigma = np.sqrt(beta)
            sigma[0] = 0.0
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.asarray(sigma, dtype=np.float64))

    def eps_coef(self, t):
        one_minus = 1.0 - self.alpha[t]
        return 0.0 if one_minus == 0.0 else one_minus / math.sqrt(1.0 - self.alpha_bar[t])

    def to_dict(self):
        return {"T": self.T, "beta": self.beta.tolist(), "sigma": self.sigma.tolist()}


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear-beta schedule. ``sigma_t = sqrt(beta_t)`` except the last reverse step (t=0), which adds no noise."""
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"invalid schedule T={T}, beta=({beta_start}, {beta_end})")
    return NoiseSchedule.from_alphas(1.0 - np.linspace(beta_start, beta_end, T))


def ddpm_step(x_t, eps_pred, t, schedule, z):
    """One reverse step: ``(x_t - c_t * eps) / sqrt(alpha_t) + sigma_t * z``."""
    if not 0 <= t < schedule.T:
        raise IndexError(f"t={t} outside [0, {schedule.T})")
    if np.shape(x_t) != np.shape(eps_pred) or np.shape(x_t) != np.shape(z):
        raise ShapeError("x_t, eps_pred and z must share a shape")
    inv_sqrt_alpha = 1.0 / math.sqrt(schedule.alpha[t])
    return inv_sqrt_alpha * (x_t - schedule.eps_coef(t) * eps_pred) + float(schedule.sigma[t]) * z


# -- conditioning ------------------------------------------------------------------------


@dataclass
class ConditioningBundle:
    """Text and style conditions for a batch.

    ``style=None`` means no adapter at all (plain text-only model). The drop
    masks mark rows whose condition is replaced by the model's learned null token.
    """

    text: torch.Tensor
    style: torch.Tensor = None
    drop_text: torch.Tensor = None
    drop_style: torch.Tensor = None

    @property
    def batch(self):
        return self.text.shape[0]

    def text_only(self):
        return replace(self, style=None, drop_style=None)

    def with_null(self, text=False, style=False):
        b = self.batch
        return replace(
            self,
            drop_text=torch.full((b,), bool(text)),
            drop_style=torch.full((b,), bool(style)),
        )


def draw_dropout_events(rng, n, p=0.05):
    """Three independent Bernoulli(p) columns: drop text, drop style, drop both."""
    return rng.random((n, 3)) < p


def conditioning_dropout(cond, rng, p=0.05):
    events = draw_dropout_events(rng, cond.batch, p)
    drop_text = torch.from_numpy(events[:, 0] | events[:, 2])
    drop_style = torch.from_numpy(events[:, 1] | events[:, 2])
    if cond.drop_text is not None:
        drop_text |= cond.drop_text
    if cond.drop_style is not None:
        drop_style |= cond.drop_style
    return replace(cond, drop_text=drop_text, drop_style=drop_style)


def condition_hash(tensor):
    if tensor is None:
        return None
    arr = tensor.detach().cpu().contiguous().numpy()
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


# -- model -------------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    image_size: int = 16
    channels: int = 32
    context_dim: int = 64
    text_len: int = 4
    style_len: int = 4
    vocab_size: int = 64
    heads: int = 4
    groups: int = 8
    time_dim: int = 64


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TextEncoder(nn.Module):
    """Token embeddings plus learned positions; stand-in for a frozen text tower."""

    def __init__(self, vocab_size, length, dim):
        super().__init__()
        self.length = length
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(0.02 * torch.randn(length, dim))
        self.proj = nn.Linear(dim, dim)

    def forward(self, tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.shape[-1] != self.length:
            raise ShapeError(f"expected {self.length} text tokens, got {tokens.shape[-1]}")
        return self.proj(self.embed(tokens) + self.pos)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DecoupledCrossAttention(nn.Module):
    """Shared-query cross-attention over text and (optionally) the style latent.

    ``output = h + text_attn(c) + adapter_attn(s)``; the adapter term is skipped
    entirely when no style is supplied.
    """

    def __init__(self, channels, context_dim, heads, groups):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.text = Attention(channels, context_dim, heads)
        self.to_k_style = nn.Linear(context_dim, channels, bias=False)
        self.to_v_style = nn.Linear(context_dim, channels, bias=False)
        self.to_out_style = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out_style.weight)
        nn.init.zeros_(self.to_out_style.bias)

    def _attend(self, q, k, v):
        heads, hd = self.text.heads, self.text.head_dim
        b, n, _ = q.shape
        m = k.shape[1]
        q = q.reshape(b, n, heads, hd).transpose(1, 2)
        k = k.reshape(b, m, heads, hd).transpose(1, 2)
        v = v.reshape(b, m, heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return out.transpose(1, 2).reshape(b, n, heads * hd)

    def forward(self, h, text, style=None):
        b, c, hh, ww = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)
        q = self.text.to_q(x)
        text_out = self.text.to_out(self._attend(q, self.text.to_k(text), self.text.to_v(text)))
        out = h.flatten(2).transpose(1, 2) + text_out
        if style is not None:
            style_out = self.to_out_style(self._attend(q, self.to_k_style(style), self.to_v_style(style)))
            out = out + style_out
        return out.transpose(1, 2).reshape(b, c, hh, ww)

    def adapter_parameters(self):
        return [self.to_k_style.weight, self.to_v_style.weight, self.to_out_style.weight, self.to_out_style.bias]


class AdapterDenoiser(nn.Module):
    """Small two-resolution conv net predicting noise, with one attention site per resolution."""

    def __init__(self, config=None, seed=0):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        ch, td, g = cfg.channels, cfg.time_dim, cfg.groups
        with seeded(seed):
            self.text_encoder = TextEncoder(cfg.vocab_size, cfg.text_len, cfg.context_dim)
            self.null_text = nn.Parameter(0.02 * torch.randn(cfg.text_len, cfg.context_dim))
            self.null_style = nn.Parameter(0.02 * torch.randn(cfg.style_len, cfg.context_dim))
            self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
            self.conv_in = nn.Conv2d(3, ch, 3, padding=1)
            self.res_hi = ResBlock(ch, ch, td, g)
            self.attn_hi = DecoupledCrossAttention(ch, cfg.context_dim, cfg.heads, g)
            self.down = nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1)
            self.res_lo = ResBlock(2 * ch, 2 * ch, td, g)
            self.attn_lo = DecoupledCrossAttention(2 * ch, cfg.context_dim, cfg.heads, g)
            self.res_mid = ResBlock(2 * ch, 2 * ch, td, g)
            self.up = nn.Conv2d(2 * ch, ch, 3, padding=1)
            self.res_out = ResBlock(2 * ch, ch, td, g)
            self.norm_out = nn.GroupNorm(min(g, ch), ch)
            self.conv_out = nn.Conv2d(ch, 3, 3, padding=1)

    def sites(self):
        return [self.attn_hi, self.attn_lo]

    def adapter_parameters(self):
        return [p for site in self.sites() for p in site.adapter_parameters()] + [self.null_style]

    def base_parameters(self):
        adapter = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter]

    def resolve(self, cond):
        text = cond.text
        if cond.drop_text is not None and bool(cond.drop_text.any()):
            text = torch.where(cond.drop_text[:, None, None], self.null_text.expand_as(text), text)
        style = cond.style
        if style is not None and cond.drop_style is not None and bool(cond.drop_style.any()):
            style = torch.where(cond.drop_style[:, None, None], self.null_style.expand_as(style), style)
        return text, style

    def forward(self, x, t, cond):
        if x.shape[1:] != (3, self.config.image_size, self.config.image_size):
            raise ShapeError(f"expected [B, 3, {self.config.image_size}, {self.config.image_size}], got {tuple(x.shape)}")
        text, style = self.resolve(cond)
        if text.shape[-2:] != self.null_text.shape:
            raise ShapeError(f"text embedding {tuple(text.shape)} does not match {tuple(self.null_text.shape)}")
        if style is not None and style.shape[-2:] != self.null_style.shape:
            raise ShapeError(f"style latent {tuple(style.shape)} does not match {tuple(self.null_style.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(x.dtype))
        h0 = self.conv_in(x)
        h = self.attn_hi(self.res_hi(h0, temb), text, style)
        lo = self.down(h)
        lo = self.attn_lo(self.res_lo(lo, temb), text, style)
        lo = self.res_mid(lo, temb)
        up = self.up(F.interpolate(lo, scale_factor=2, mode="nearest"))
        h = self.res_out(torch.cat([up, h], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def adapter_denoise(params, x_t, cond, t):
    return params(x_t, t, cond)


def noised(x0, t, schedule, noise):
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[torch.as_tensor(t).reshape(-1)]
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def diffusion_loss(params, x0, cond, t, noise, schedule):
    """Mean squared error between predicted and true noise at step(s) ``t``."""
    x_t = noised(x0, t, schedule, noise)
    return F.mse_loss(params(x_t, t, cond), noise)


@torch.no_grad()
def sample_image(params, schedule, cond, seed, batch=None):
    """Ancestral sampling from pure noise over ``t = T-1 .. 0``; deterministic in ``seed``."""
    size = params.config.image_size
    batch = batch or cond.batch
    dtype = next(params.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(batch, 3, size, size, generator=gen, dtype=dtype)
    for t in reversed(range(schedule.T)):
        eps = params(x, t, cond)
        z = torch.randn(x.shape, generator=gen, dtype=dtype)
        x = ddpm_step(x, eps, t, schedule, z)
    return x


def to_uint8(images):
    """``[B, 3, H, W]`` in [-1, 1] -> ``[B, H, W, 3]`` uint8."""
    arr = images.detach().cpu().clamp(-1, 1).permute(0, 2, 3, 1).numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def save_generated(images, out_dir, stem, seed, schedule, cond, extra=None):
    """Write PNGs plus one JSON sidecar per batch; returns the list of PNG paths."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, arr in enumerate(to_uint8(images)):
        p = out_dir / f"{stem}_{i:03d}.png"
        Image.fromarray(arr, mode="RGB").save(p)
        paths.append(p)
    sidecar = {
        "seed": int(seed),
        "schedule": {"T": schedule.T, "beta_first": float(schedule.beta[0]), "beta_last": float(schedule.beta[-1])},
        "text_hash": condition_hash(cond.text),
        "style_hash": condition_hash(cond.style),
        "files": [p.name for p in paths],
    }
    if extra:
        sidecar.update(extra)
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return paths
