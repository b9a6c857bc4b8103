"""Toy image-stream storyteller trained jointly on story generation and story prediction.

Each image becomes a block of projected tokens. Blocks are laid out in stream
order, followed by the instruction tokens, and a small causal transformer
decodes the plots separated by ``<sep>`` and closed by ``<eos>``.
"""
from dataclasses import dataclass
import logging
import time

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._torch import as_tensor, seeded
from .errors import DecodeError, ShapeError
from .styleseq import FeedForward, PatchEncoder
from .synth import VOCAB

log = logging.getLogger(__name__)

IGNORE = -100

INSTRUCTIONS = {
    "generate": (
        "tell the story of these images",
        "write the story for these images in order",
        "describe the story of each of these images",
    ),
    "predict": (
        "continue the story from these images",
        "predict what happens next from these images",
        "tell the story of these images and what happens next",
    ),
}


@dataclass
class NarratorConfig:
    n: int = 5
    feat_dim: int = 64
    token_dim: int = 64
    num_image_tokens: int = 4
    layers: int = 2
    heads: int = 4
    max_len: int = 96
    lambda_g: float = 1.0
    lambda_p: float = 1.0
    lr: float = 3e-3
    batch_size: int = 32
    steps: int = 200
    temperature: float = 0.0
    max_plot_tokens: int = 12


@dataclass
class StoryPlots:
    plots: list

    @property
    def n(self):
        return len(self.plots)


class ImageProjector(nn.Module):
    """Two affine maps with a nonlinearity between, applied per image token."""

    def __init__(self, in_dim, out_dim, hidden=None, activation="gelu"):
        super().__init__()
        hidden = hidden or out_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = {"gelu": nn.GELU(), "relu": nn.ReLU(), "identity": nn.Identity()}[activation]
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def project_image_tokens(projector, features):
    """``[k, L_v, C]`` features -> list of ``k`` token blocks ``[L_v, C']``."""
    features = as_tensor(features, projector.fc1.weight.dtype)
    if features.dim() != 3 or features.shape[-1] != projector.fc1.in_features:
        raise ShapeError(f"expected [k, L_v, {projector.fc1.in_features}], got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise FloatingPointError("non-finite image features")
    return list(projector(features).unbind(0))


def pick_instruction(task, rng, instructions=None):
    """Uniformly pick one phrasing for ``task`` and return its token ids."""
    table = instructions or INSTRUCTIONS
    if task not in table:
        raise ValueError(f"unknown task {task!r}")
    variants = table[task]
    if not variants:
        raise ValueError(f"no instructions for task {task!r}")
    return VOCAB.encode(variants[int(rng.integers(len(variants)))])


def sample_k(n, rng):
    """Number of observed images for a prediction example: uniform on ``1..n-1``."""
    if n < 2:
        raise ValueError("story length must be >= 2")
    return int(rng.integers(1, n))


def story_target(plots):
    """``<bos> p0 <sep> p1 ... <sep> p{N-1} <eos>`` as token ids."""
    ids = [VOCAB.bos]
    for i, p in enumerate(plots):
        if i:
            ids.append(VOCAB.sep)
        ids.extend(VOCAB.encode(p))
    ids.append(VOCAB.eos)
    return ids


def cross_entropy(logits, targets):
    """Token-level CE averaged over positions whose target is not ``IGNORE``."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


def joint_loss(gen_logits, pred_logits, targets, lambda_g=1.0, lambda_p=1.0):
    """``lambda_g * CE(generation) + lambda_p * CE(prediction)`` over the same target plots."""
    if lambda_g < 0 or lambda_p < 0:
        raise ValueError("loss weights must be non-negative")
    loss = 0.0
    if lambda_g:
        loss = loss + lambda_g * cross_entropy(gen_logits, targets)
    if lambda_p:
        loss = loss + lambda_p * cross_entropy(pred_logits, targets)
    if not torch.is_tensor(loss):
        loss = gen_logits.new_zeros(())
    return loss


class CausalBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        return x + self.ff(self.ln2(x))


class Storyteller(nn.Module):
    def __init__(self, config=None, seed=0, encoder=None):
        super().__init__()
        cfg = config or NarratorConfig()
        self.config = cfg
        self.encoder = encoder or PatchEncoder(cfg.num_image_tokens, cfg.feat_dim, seed=seed)
        with seeded(seed + 7):
            self.projector = ImageProjector(cfg.feat_dim, cfg.token_dim)
            self.tok = nn.Embedding(len(VOCAB), cfg.token_dim)
            self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_len, cfg.token_dim))
            # one learned vector per image slot, added to every token of that image's block
            self.slot = nn.Parameter(0.02 * torch.randn(cfg.n, cfg.token_dim))
            self.blocks = nn.ModuleList([CausalBlock(cfg.token_dim, cfg.heads) for _ in range(cfg.layers)])
            self.ln_f = nn.LayerNorm(cfg.token_dim)
            self.head = nn.Linear(cfg.token_dim, len(VOCAB))

    def image_tokens(self, images):
        """``[k, H, W, 3]`` images -> ``[k * L_v, C']`` context tokens in stream order.

        Block ``i`` is the projected features of image ``i`` plus the slot vector ``slot[i]``.
        """
        with torch.no_grad():
            feats = self.encoder(images)
        blocks = project_image_tokens(self.projector, feats.to(self.pos.dtype))
        if len(blocks) > self.config.n:
            raise ShapeError(f"{len(blocks)} images exceed the story length {self.config.n}")
        return torch.cat([b + self.slot[i] for i, b in enumerate(blocks)], dim=0)

    def context(self, images, instruction):
        """``[v_0; ...; v_k; E_instruct]`` as embeddings."""
        ins = self.tok(torch.as_tensor(instruction, dtype=torch.long))
        return torch.cat([self.image_tokens(images), ins], dim=0)

    def forward(self, sequences):
        """``sequences``: list of ``[L_b, C']`` embeddings -> padded logits ``[B, L, V]``."""
        lengths = [s.shape[0] for s in sequences]
        width = max(lengths)
        if width > self.config.max_len:
            raise ShapeError(f"sequence of {width} tokens exceeds max_len {self.config.max_len}")
        x = torch.stack([F.pad(s, (0, 0, 0, width - s.shape[0])) for s in sequences])
        x = x + self.pos[:width]
        mask = torch.triu(torch.full((width, width), float("-inf"), dtype=x.dtype), diagonal=1)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x))

    def teacher_forced(self, contexts, targets):
        """Logits over each target token given its context; returns ``(logits [B, T, V], labels [B, T])``."""
        seqs = [torch.cat([c, self.tok(torch.as_tensor(t[:-1]))], dim=0) for c, t in zip(contexts, targets)]
        logits = self(seqs)
        span = max(len(t) - 1 for t in targets)
        labels = torch.full((len(targets), span), IGNORE, dtype=torch.long)
        idx = torch.zeros(len(targets), span, dtype=torch.long)
        for b, (c, t) in enumerate(zip(contexts, targets)):
            m = len(t) - 1
            labels[b, :m] = torch.as_tensor(t[1:])
            idx[b, :m] = c.shape[0] + torch.arange(m)
        out = torch.gather(logits, 1, idx[..., None].expand(-1, -1, logits.shape[-1]))
        return out, labels

    @torch.no_grad()
    def decode(self, context, n, generator=None):
        cfg = self.config
        ids = [VOCAB.bos]
        # never grow past the positional window; running out of room surfaces as a DecodeError
        limit = min(n * (cfg.max_plot_tokens + 1) + 1, cfg.max_len - context.shape[0] - 1)
        for _ in range(limit):
            seq = torch.cat([context, self.tok(torch.as_tensor(ids))], dim=0)
            logits = self([seq])[0, -1]
            if cfg.temperature > 0:
                probs = (logits / cfg.temperature).softmax(-1)
                nxt = int(torch.multinomial(probs, 1, generator=generator))
            else:
                nxt = int(logits.argmax())
            ids.append(nxt)
            if nxt == VOCAB.eos:
                break
        return ids


def parse_plots(ids, n):
    """Split decoded ids on ``<sep>``; anything but ``n`` plots closed by ``<eos>`` raises DecodeError."""
    body = ids[1:] if ids and ids[0] == VOCAB.bos else list(ids)
    closed = bool(body) and body[-1] == VOCAB.eos
    if closed:
        body = body[:-1]
    plots, cur = [], []
    for i in body:
        if i == VOCAB.sep:
            plots.append(VOCAB.decode(cur))
            cur = []
        elif i in (VOCAB.bos, VOCAB.pad, VOCAB.eos):
            raise DecodeError(f"unexpected control token {VOCAB.itos[i]}", plots)
        else:
            cur.append(i)
    plots.append(VOCAB.decode(cur))
    if not closed:
        raise DecodeError("no <eos> within the decoding budget", plots)
    if len(plots) != n or any(not p for p in plots):
        raise DecodeError(f"decoded {len(plots)} plots, expected {n}", plots)
    return plots


def generate_story(model, images, instruction, generator=None):
    """All ``N`` images in, ``N`` plots out."""
    n = model.config.n
    if len(images) != n:
        raise ValueError(f"generation takes exactly {n} images, got {len(images)}")
    ids = model.decode(model.context(np.asarray(images), instruction), n, generator)
    return StoryPlots(parse_plots(ids, n))


def predict_story(model, images, instruction, generator=None):
    """First ``k`` images in (``1 <= k <= N-1``), the full ``N``-plot story out."""
    n = model.config.n
    k = len(images)
    if not 1 <= k <= n - 1:
        raise ValueError(f"prediction takes 1..{n - 1} images, got {k}")
    ids = model.decode(model.context(np.asarray(images), instruction), n, generator)
    return StoryPlots(parse_plots(ids, n))


def batch_losses(model, stories, rng, config):
    """Generation and prediction logits for one batch, plus shared labels."""
    n = config.n
    gen_ctx, pred_ctx, targets = [], [], []
    for s in stories:
        gen_ctx.append(model.context(s.images, pick_instruction("generate", rng)))
        k = sample_k(n, rng)
        pred_ctx.append(model.context(s.images[:k], pick_instruction("predict", rng)))
        targets.append(story_target(s.plots))
    gen_logits, labels = model.teacher_forced(gen_ctx, targets)
    pred_logits, _ = model.teacher_forced(pred_ctx, targets)
    return gen_logits, pred_logits, labels


def train_narrator(stories, config=None, seed=0, progress=None):
    """Adam on the joint loss; returns ``(model, loss history)``."""
    config = config or NarratorConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = Storyteller(config, seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    history = []
    start = time.time()
    for step in range(config.steps):
        idx = rng.integers(len(stories), size=config.batch_size)
        gen_logits, pred_logits, labels = batch_losses(model, [stories[i] for i in idx], rng, config)
        loss = joint_loss(gen_logits, pred_logits, labels, config.lambda_g, config.lambda_p)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        history.append(loss.item())
        if progress and (step % 50 == 0 or step == config.steps - 1):
            progress(step, history[-1])
    log.info("narrator: %d steps in %.1fs, loss %.3f -> %.3f", config.steps, time.time() - start, history[0], history[-1])
    return model, history
