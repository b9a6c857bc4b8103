"""Run configuration: dataclass defaults, TOML files with dotted keys, env overrides, seed splitting.

A config file is plain TOML. Keys are ``section.field``, either as dotted keys
or as ``[section]`` tables::

    seed = 3
    style.steps = 2000
    [narrator]
    lambda_p = 0.5

Environment variables named ``STORYLOOM_<SECTION>__<FIELD>`` override the
file, e.g. ``STORYLOOM_STYLE__STEPS=500``. ``STORYLOOM_SEED`` sets the root
seed. Values are parsed as TOML literals, falling back to plain strings.
"""
from dataclasses import asdict, dataclass, field, fields, replace
import json
import os
from pathlib import Path
import zlib

import numpy as np
import tomli

from .enhancer.pipeline import EnhanceConfig
from .narrator import NarratorConfig
from .synth import SynthStoryConfig
from .training import StyleTrainConfig

ENV_PREFIX = "STORYLOOM_"
STAGES = ("synth", "enhance", "narrator", "style", "generate", "predict", "eval")


@dataclass
class EvalConfig:
    # ordinal codes used when turning pairwise choices into an ICC matrix
    win: float = 1.0
    tie: float = 0.5
    lose: float = 0.0
    raters_per_comparison: int = 3

    @property
    def mapping(self):
        return {"win": self.win, "tie": self.tie, "lose": self.lose}


@dataclass
class ExperimentConfig:
    # style-conditioning experiment: seeds to average over and test-set size
    seeds: tuple = (0, 1, 2)
    test_stories: int = 40
    context_images: int = 3
    target_positions: tuple = (3, 4)
    min_reduction: float = 0.30
    zero_adapter_seeds: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    synth: SynthStoryConfig = field(default_factory=lambda: SynthStoryConfig(corpus_size=300))
    style: StyleTrainConfig = field(default_factory=StyleTrainConfig)
    narrator: NarratorConfig = field(default_factory=NarratorConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    SECTIONS = ("synth", "style", "narrator", "enhance", "eval", "experiment")

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def stage_seed(self, stage):
        return stage_seed(self.seed, stage)

    def with_overrides(self, overrides):
        return apply_overrides(self, overrides)


def paper_scale(config=None):
    """Full-size dimensions (768-d features, 32 tokens per image); only practical for shape checks."""
    config = config or RunConfig()
    style = replace(config.style, dim=768, num_tokens=32, num_latents=4, depth=4)
    narrator = replace(config.narrator, feat_dim=768, num_image_tokens=32)
    return replace(config, style=style, narrator=narrator)


def stage_seed(root, stage):
    """Independent, reproducible 32-bit seed for one pipeline stage."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _coerce(current, value):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, bool) or current is None:
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, (int, float, str)) and not isinstance(value, type(current)):
        raise TypeError(f"expected {type(current).__name__}, got {value!r}")
    return value


def _flatten(data, prefix=""):
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, name + ".")
        else:
            yield name, value


def apply_overrides(config, overrides):
    """Return a copy of ``config`` with ``{"section.field": value}`` (or nested dicts) applied."""
    flat = dict(_flatten(overrides))
    top, sections = {}, {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if not name:
            if section in RunConfig.SECTIONS or section not in {f.name for f in fields(RunConfig)}:
                raise KeyError(f"unknown config key {key!r}")
            top[section] = _coerce(getattr(config, section), value)
            continue
        if section not in RunConfig.SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        sub = getattr(config, section)
        if name not in {f.name for f in fields(sub)}:
            raise KeyError(f"unknown config key {key!r}")
        sections.setdefault(section, {})[name] = _coerce(getattr(sub, name), value)
    updated = {s: replace(getattr(config, s), **vals) for s, vals in sections.items()}
    return replace(config, **top, **updated)


def _parse_literal(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        out[name.replace("__", ".")] = _parse_literal(raw)
    return out


def load_config(path=None, environ=None, **cli):
    """Defaults <- config file <- environment <- explicit keyword overrides (``None`` ignored)."""
    config = RunConfig()
    if path is not None:
        with open(path, "rb") as fh:
            config = apply_overrides(config, tomli.load(fh))
    config = apply_overrides(config, env_overrides(environ))
    return apply_overrides(config, {k: v for k, v in cli.items() if v is not None})


def config_from_dict(data):
    """Rebuild a config from :meth:`RunConfig.to_dict` output (the run-directory snapshot)."""
    return apply_overrides(RunConfig(), data)


def save_snapshot(config, run_dir):
    path = Path(run_dir) / "config.json"
    path.write_text(config.dumps(), encoding="utf-8")
    return path


def load_snapshot(run_dir):
    return config_from_dict(json.loads((Path(run_dir) / "config.json").read_text(encoding="utf-8")))


def describe(config):
    """Flat ``section.field = value`` listing, handy for logs."""
    lines = []
    for key, value in _flatten(config.to_dict()):
        lines.append(f"{key} = {value!r}")
    return "\n".join(lines)


__all__ = [
    "ENV_PREFIX", "STAGES", "EvalConfig", "ExperimentConfig", "RunConfig", "apply_overrides",
    "config_from_dict", "describe", "env_overrides", "load_config", "load_snapshot",
    "paper_scale", "save_snapshot", "stage_seed",
]
