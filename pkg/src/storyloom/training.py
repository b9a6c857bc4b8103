"""Training loops for the style-conditioned denoiser and the storyteller."""
from dataclasses import dataclass, field
import logging
import time

import numpy as np
import torch

from .diffuse import (
    AdapterDenoiser, ConditioningBundle, DenoiserConfig, conditioning_dropout,
    diffusion_loss, make_schedule, sample_image,
)
from .styleseq import PatchEncoder, StyleQueryAdapter
from .synth import VOCAB

log = logging.getLogger(__name__)


@dataclass
class StyleTrainConfig:
    image_size: int = 16
    dim: int = 64
    num_tokens: int = 4
    num_latents: int = 4
    depth: int = 4
    heads: int = 4
    num_bands: int = 6
    channels: int = 32
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    dropout: float = 0.05
    text_len: int = 4
    freeze_base: bool = False
    ema: float = 0.99


class StyleModel:
    """Bundle of the frozen patch encoder, style adapter, denoiser and schedule."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        self.encoder = PatchEncoder(config.num_tokens, config.dim, seed=seed)
        self.adapter = StyleQueryAdapter(
            config.dim, config.num_latents, config.depth, config.heads, config.num_bands, seed=seed + 1
        )
        self.denoiser = AdapterDenoiser(
            DenoiserConfig(
                image_size=config.image_size, channels=config.channels, context_dim=config.dim,
                text_len=config.text_len, style_len=config.num_latents, vocab_size=len(VOCAB),
                heads=config.heads, groups=8,
            ),
            seed=seed + 2,
        )
        self.schedule = make_schedule(config.T, config.beta_start, config.beta_end)

    def prompt_tokens(self, shapes):
        rows = []
        for shape in shapes:
            ids = VOCAB.encode(f"draw a {shape}")[: self.config.text_len]
            rows.append(ids + [VOCAB.pad] * (self.config.text_len - len(ids)))
        return torch.tensor(rows, dtype=torch.long)

    def style_latent(self, images):
        """``images``: ``[B, k, H, W, 3]`` in [0, 1] -> ``[B, L_s, C]``."""
        images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        b, k = images.shape[:2]
        feats = self.encoder(images.reshape(b * k, *images.shape[2:])).reshape(b, k, self.config.num_tokens, -1)
        return self.adapter.encode(feats)

    def condition(self, shapes, context_images=None):
        text = self.denoiser.text_encoder(self.prompt_tokens(shapes))
        style = self.style_latent(context_images) if context_images is not None else None
        return ConditioningBundle(text=text, style=style)

    def modules(self):
        return {"adapter": self.adapter, "denoiser": self.denoiser}

    @torch.no_grad()
    def generate(self, shapes, context_images=None, seed=0, null_style=False):
        cond = self.condition(shapes, context_images)
        if null_style:
            cond = cond.with_null(style=True)
        return sample_image(self.denoiser, self.schedule, cond, seed)


def to_model_space(images):
    """``[B, H, W, 3]`` in [0, 1] -> ``[B, 3, H, W]`` in [-1, 1]."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return x.permute(0, 3, 1, 2) * 2.0 - 1.0


def from_model_space(x):
    return ((x.clamp(-1, 1) + 1.0) / 2.0).permute(0, 2, 3, 1).numpy()


def train_style(stories, config, seed=0, progress=None):
    """Jointly fit denoiser, text encoder and style adapter on styled stories.

    Each example observes the first ``k ~ U{1..N-1}`` images of a story and
    learns to denoise a later image of the same story.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = StyleModel(config, seed)
    params = list(model.adapter.parameters())
    params += model.denoiser.adapter_parameters() if config.freeze_base else list(model.denoiser.parameters())
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.steps, pct_start=0.1)
    ema = {name: p.detach().clone() for name, p in _named_trainables(model)}
    images = np.stack([s.images for s in stories])  # [S, N, H, W, 3]
    n = images.shape[1]
    history = []
    start = time.time()
    for step in range(config.steps):
        idx = rng.integers(len(stories), size=config.batch_size)
        k = int(rng.integers(1, n))
        target = rng.integers(k, n, size=config.batch_size)
        x0 = to_model_space(images[idx, target])
        shapes = [stories[i].shapes[j] for i, j in zip(idx, target)]
        cond = conditioning_dropout(model.condition(shapes, images[idx, :k]), rng, config.dropout)
        t = torch.from_numpy(rng.integers(0, config.T, size=config.batch_size))
        noise = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
        loss = diffusion_loss(model.denoiser, x0, cond, t, noise, model.schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        sched.step()
        with torch.no_grad():
            for name, p in _named_trainables(model):
                ema[name].lerp_(p, 1.0 - config.ema)
        history.append(loss.item())
        if progress and (step % 100 == 0 or step == config.steps - 1):
            progress(step, float(np.mean(history[-100:])))
    with torch.no_grad():
        for name, p in _named_trainables(model):
            p.copy_(ema[name])
    log.info("style training: %d steps in %.1fs, final loss %.4f", config.steps, time.time() - start, np.mean(history[-50:]))
    return model, history


def _named_trainables(model):
    for prefix, module in model.modules().items():
        for name, p in module.named_parameters():
            yield f"{prefix}.{name}", p
