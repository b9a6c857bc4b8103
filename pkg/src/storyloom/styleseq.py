"""Sequence style encoder: learned latent queries over a variable-length image stream.

The encoder half of the style adapter. Images go through a small fixed patch
encoder, get a Fourier embedding of their position in the stream, and a set of
learned queries attends over all patch tokens. The result is a fixed-size style
latent of shape ``[num_latents, dim]`` no matter how many images were observed.
"""
import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._torch import as_tensor, seeded
from .errors import ShapeError


class PatchEncoder(nn.Module):
    """Toy image encoder standing in for a pre-trained vision tower.

    Each image is split into a ``grid x grid`` layout of patches. Every patch is
    average-pooled down to ``pool x pool`` cells, flattened, and mapped to
    ``dim`` channels by a fixed random affine map. Weights are drawn once from
    ``seed`` and never trained.
    """

    def __init__(self, num_tokens=4, dim=64, pool=4, seed=0):
        super().__init__()
        grid = int(round(math.sqrt(num_tokens)))
        if grid * grid != num_tokens:
            raise ShapeError(f"num_tokens must be a perfect square, got {num_tokens}")
        self.grid = grid
        self.pool = pool
        self.num_tokens = num_tokens
        self.dim = dim
        in_dim = pool * pool * 3
        gen = torch.Generator().manual_seed(int(seed))
        weight = torch.randn(in_dim, dim, generator=gen, dtype=torch.float64) / math.sqrt(in_dim)
        bias = 0.1 * torch.randn(dim, generator=gen, dtype=torch.float64)
        self.register_buffer("weight", weight.float())
        self.register_buffer("bias", bias.float())

    def forward(self, images):
        images = as_tensor(images, self.weight.dtype)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected images [k, H, W, 3], got {tuple(images.shape)}")
        k, h, w, _ = images.shape
        cells = self.grid * self.pool
        if h % cells or w % cells:
            raise ShapeError(f"image size {h}x{w} not divisible by {cells}")
        x = images.permute(0, 3, 1, 2)
        x = F.adaptive_avg_pool2d(x, cells) if (h, w) != (cells, cells) else x
        # [k, 3, g, p, g, p] -> [k, g, g, p, p, 3]
        x = x.reshape(k, 3, self.grid, self.pool, self.grid, self.pool)
        x = x.permute(0, 2, 4, 3, 5, 1).reshape(k, self.num_tokens, -1)
        return x @ self.weight.to(x.dtype) + self.bias.to(x.dtype)


def encode_image_features(images, encoder=None):
    """Encode an image batch ``[k, H, W, 3]`` into features ``[k, L_v, C]``.

    All images must share one size; a ragged list raises :class:`ShapeError`.
    """
    if isinstance(images, (list, tuple)):
        shapes = {tuple(np.shape(im)) for im in images}
        if len(shapes) != 1:
            raise ShapeError(f"images have mismatched shapes: {sorted(shapes)}")
        images = np.stack([np.asarray(im) for im in images])
    encoder = encoder if encoder is not None else PatchEncoder()
    with torch.no_grad():
        return encoder(images)


def fourier_position_embed(k, num_bands=6, num_tokens=1, dtype=torch.float32):
    """Sine/cosine embedding of each image's normalized index in the stream.

    Image ``j`` sits at ``u = j / max(k - 1, 1)``. Band ``b`` contributes the pair
    ``sin(2**b * pi * u), cos(2**b * pi * u)``. The result is broadcast over the
    ``num_tokens`` patch axis, giving ``[k, num_tokens, 2 * num_bands]``.
    """
    if k < 1 or num_bands < 1:
        raise ValueError("k and num_bands must be >= 1")
    u = torch.arange(k, dtype=torch.float64) / max(k - 1, 1)
    freqs = (2.0 ** torch.arange(num_bands, dtype=torch.float64)) * math.pi
    angles = u[:, None] * freqs[None, :]
    pairs = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(k, 2 * num_bands)
    return pairs[:, None, :].expand(k, num_tokens, 2 * num_bands).to(dtype).contiguous()


def augment_features(features, position):
    features = as_tensor(features)
    position = as_tensor(position, features.dtype)
    if features.shape[:-1] != position.shape[:-1]:
        raise ShapeError(
            f"features {tuple(features.shape)} and positions {tuple(position.shape)} disagree"
        )
    return torch.cat([features, position], dim=-1)


class Attention(nn.Module):
    """Multi-head ``softmax(Q K^T / sqrt(d)) V`` with an output projection.

    Queries come from ``query_dim`` inputs, keys and values from ``context_dim``.
    """

    def __init__(self, query_dim, context_dim, heads=1, inner_dim=None):
        super().__init__()
        inner_dim = inner_dim or query_dim
        if inner_dim % heads:
            raise ShapeError(f"inner dim {inner_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = inner_dim // heads
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, query_dim)

    def forward(self, x, context, key_mask=None):
        *lead, n, _ = x.shape
        m = context.shape[-2]
        q = self.to_q(x).reshape(*lead, n, self.heads, self.head_dim).transpose(-2, -3)
        k = self.to_k(context).reshape(*lead, m, self.heads, self.head_dim).transpose(-2, -3)
        v = self.to_v(context).reshape(*lead, m, self.heads, self.head_dim).transpose(-2, -3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        out = out.transpose(-2, -3).reshape(*lead, n, self.heads * self.head_dim)
        return self.to_out(out)


class FeedForward(nn.Sequential):
    def __init__(self, dim, mult=4):
        super().__init__(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


class StyleBlock(nn.Module):
    """One (cross-attention, self-attention) pair.

    Follows the printed update literally: the cross-attention result overwrites
    the running query before self-attention, so each half carries its own
    residual on top of the FFN output.
    """

    def __init__(self, dim, context_dim, heads, ff_mult=4):
        super().__init__()
        self.cross_attn = Attention(dim, context_dim, heads)
        self.cross_ff = FeedForward(dim, ff_mult)
        self.self_attn = Attention(dim, dim, heads)
        self.self_ff = FeedForward(dim, ff_mult)

    def forward(self, s, tokens, key_mask=None):
        s = self.cross_ff(s + self.cross_attn(s, tokens, key_mask)) + s
        s = self.self_ff(s + self.self_attn(s, s)) + s
        return s


class StyleQueryAdapter(nn.Module):
    """Learned latent queries attending over position-augmented image features.

    ``latents`` (the initial query) is drawn once from N(0, 1) at construction
    and then trained like any other weight.
    """

    def __init__(self, dim=64, num_latents=4, depth=4, heads=4, num_bands=6, ff_mult=4, seed=0):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.num_latents = num_latents
        self.num_bands = num_bands
        self.depth = depth
        self.heads = heads
        self.seed = seed
        context_dim = dim + 2 * num_bands
        with seeded(seed):
            self.latents = nn.Parameter(torch.randn(num_latents, dim))
            self.blocks = nn.ModuleList(
                [StyleBlock(dim, context_dim, heads, ff_mult) for _ in range(depth)]
            )

    @property
    def context_dim(self):
        return self.dim + 2 * self.num_bands

    def forward(self, augmented, key_mask=None):
        """Map ``[..., k, L_v, C + P]`` augmented features to ``[..., L_s, C]``.

        Leading batch dimensions are optional. ``key_mask`` (bool, ``[..., k * L_v]``)
        excludes padded tokens from cross-attention.
        """
        augmented = as_tensor(augmented, self.latents.dtype)
        if augmented.dim() < 3 or augmented.shape[-1] != self.context_dim:
            raise ShapeError(
                f"expected [..., k, L_v, {self.context_dim}], got {tuple(augmented.shape)}"
            )
        if not torch.isfinite(augmented).all():
            raise FloatingPointError("non-finite values in style encoder input")
        lead = augmented.shape[:-3]
        tokens = augmented.reshape(*lead, -1, self.context_dim)
        s = self.latents.expand(*lead, *self.latents.shape)
        for block in self.blocks:
            s = block(s, tokens, key_mask)
        return s

    def encode(self, features):
        """Add position embeddings to raw ``[k, L_v, C]`` features and run the adapter."""
        features = as_tensor(features, self.latents.dtype)
        k, n = features.shape[-3], features.shape[-2]
        pos = fourier_position_embed(k, self.num_bands, n, dtype=features.dtype)
        pos = pos.expand(*features.shape[:-1], pos.shape[-1])
        return self(augment_features(features, pos))


def sq_forward(params, features):
    """Functional alias: run ``params`` (a :class:`StyleQueryAdapter`) on augmented features."""
    return params(features)
