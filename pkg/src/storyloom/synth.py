"""Synthetic styled image stories: one background hue per story, a random shape per image."""
import colorsys
from dataclasses import dataclass, field, asdict
import json
from pathlib import Path

import numpy as np

HUES = {"red": 0.0, "yellow": 1 / 6, "green": 2 / 6, "cyan": 3 / 6, "blue": 4 / 6, "magenta": 5 / 6}
SHAPES = ("circle", "square", "triangle", "cross", "diamond")
OPENERS = ("first", "then", "next", "later", "finally", "after", "soon", "last")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")
INSTRUCTION_WORDS = (
    "tell", "write", "describe", "the", "story", "of", "for", "these", "images", "in", "order",
    "continue", "predict", "what", "happens", "next", "from", "plots", "draw", "each", "and",
)
GRAMMAR_WORDS = ("a", "on", "background") + OPENERS + SHAPES + tuple(HUES)


class Vocab:
    def __init__(self):
        words = list(SPECIALS)
        for w in INSTRUCTION_WORDS + GRAMMAR_WORDS:
            if w not in words:
                words.append(w)
        self.itos = words
        self.stoi = {w: i for i, w in enumerate(words)}

    pad = property(lambda self: self.stoi["<pad>"])
    bos = property(lambda self: self.stoi["<bos>"])
    eos = property(lambda self: self.stoi["<eos>"])
    sep = property(lambda self: self.stoi["<sep>"])

    def __len__(self):
        return len(self.itos)

    def encode(self, text):
        return [self.stoi[w] for w in text.split()]

    def decode(self, ids):
        return " ".join(self.itos[i] for i in ids)


VOCAB = Vocab()


@dataclass
class SynthStoryConfig:
    n: int = 5
    image_size: int = 16
    corpus_size: int = 100
    seed: int = 0
    shapes: tuple = SHAPES
    hues: tuple = tuple(HUES)
    saturation: float = 0.8
    value: float = 0.85


@dataclass
class StorySample:
    story_id: str
    hue: str
    shapes: list
    plots: list
    images: np.ndarray = field(repr=False)  # [N, H, W, 3] float in [0, 1]


def hue_rgb(hue, saturation=0.8, value=0.85):
    return np.array(colorsys.hsv_to_rgb(hue, saturation, value))


def _shape_mask(shape, size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "cross":
        return ((np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r)) | ((np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r))
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    raise ValueError(f"unknown shape {shape!r}")


def render_image(shape, hue, size=16, offset=(0.0, 0.0), saturation=0.8, value=0.85):
    """Light shape on a flat colored background; the outer border is always background."""
    img = np.empty((size, size, 3))
    img[:] = hue_rgb(HUES[hue] if isinstance(hue, str) else hue, saturation, value)
    r = size * 0.28
    mask = _shape_mask(shape, size, size / 2 + offset[0], size / 2 + offset[1], r)
    img[mask] = 0.97
    return img


def plot_text(position, shape, hue):
    return f"{OPENERS[position % len(OPENERS)]} a {shape} on {hue} background"


def synth_styled_dataset(config):
    rng = np.random.default_rng(config.seed)
    stories = []
    for i in range(config.corpus_size):
        hue = config.hues[rng.integers(len(config.hues))]
        shapes = [config.shapes[j] for j in rng.integers(len(config.shapes), size=config.n)]
        offsets = rng.integers(-1, 2, size=(config.n, 2)).astype(float)
        images = np.stack([
            render_image(s, hue, config.image_size, tuple(o), config.saturation, config.value)
            for s, o in zip(shapes, offsets)
        ])
        plots = [plot_text(j, s, hue) for j, s in enumerate(shapes)]
        stories.append(StorySample(f"story-{i:05d}", hue, shapes, plots, images))
    return stories


def border_pixels(images):
    images = np.asarray(images, dtype=np.float64)
    top, bottom = images[..., 0, :, :], images[..., -1, :, :]
    left, right = images[..., 1:-1, 0, :], images[..., 1:-1, -1, :]
    return np.concatenate([top, bottom, left, right], axis=-2)


def measure_hue(images):
    """Hue in [0, 1) of the mean border color of each image (``[..., H, W, 3]`` in [0, 1])."""
    mean = border_pixels(images).mean(axis=-2)
    flat = mean.reshape(-1, 3).clip(0.0, 1.0)
    hues = np.array([colorsys.rgb_to_hsv(*rgb)[0] for rgb in flat])
    return hues.reshape(mean.shape[:-1])


def nearest_hue_name(hue):
    names = list(HUES)
    dists = [circular_distance(hue, HUES[n]) for n in names]
    return names[int(np.argmin(dists))]


def circular_distance(a, b):
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 1.0
    return np.minimum(d, 1.0 - d)


def style_error(images, target_style):
    """Mean circular hue distance between measured backgrounds and the target hue(s); in [0, 0.5]."""
    if isinstance(target_style, str):
        target_style = HUES[target_style]
    elif isinstance(target_style, (list, tuple)) and target_style and isinstance(target_style[0], str):
        target_style = [HUES[h] for h in target_style]
    return float(np.mean(circular_distance(measure_hue(images), target_style)))


def save_dataset(stories, out_dir):
    """``stories.jsonl`` plus ``images.npy`` (uint8, ``[S, N, H, W, 3]``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.stack([np.round(s.images * 255).astype(np.uint8) for s in stories])
    np.save(out_dir / "images.npy", images)
    with open(out_dir / "stories.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(stories):
            rec = {k: v for k, v in asdict(s).items() if k != "images"}
            rec["image_refs"] = [f"images.npy#{i}/{j}" for j in range(len(s.plots))]
            rec["storyline_plots"] = rec.pop("plots")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out_dir


def load_dataset(out_dir):
    out_dir = Path(out_dir)
    images = np.load(out_dir / "images.npy").astype(np.float64) / 255.0
    stories = []
    with open(out_dir / "stories.jsonl", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            rec = json.loads(line)
            stories.append(StorySample(rec["story_id"], rec["hue"], rec["shapes"], rec["storyline_plots"], images[i]))
    return stories
