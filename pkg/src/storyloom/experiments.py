"""Named desk-scale experiments, each writing artifacts and a JSON report under a run directory.

A run directory holds ``config.json`` (full config snapshot), ``seed.json``
(root seed and the derived per-stage seeds), one sub-directory per stage and
``report.json``. Stages run in order; if one fails, a :class:`StageError`
names it and the artifacts of earlier stages stay on disk.
"""
from contextlib import contextmanager
from dataclasses import replace
import json
import logging
from pathlib import Path
import time

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import STAGES, RunConfig, save_snapshot
from .diffuse import sample_image, save_generated
from .enhancer import EnhanceConfig, MockLLMClient, RawStory, run_enhancement
from .errors import StageError
from .evalstats import reproduction_report
from .narrator import INSTRUCTIONS, generate_story, predict_story, train_narrator
from .synth import VOCAB, load_dataset, save_dataset, style_error, synth_styled_dataset
from .training import StyleModel, from_model_space, train_style

log = logging.getLogger(__name__)

EXPERIMENTS = {}


def experiment(name):
    def register(fn):
        EXPERIMENTS[name] = fn
        return fn
    return register


def _json(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json) + "\n", encoding="utf-8")


class Run:
    """Run directory plus the per-stage timing/status log that ends up in the report."""

    def __init__(self, name, config, root=None):
        self.name = name
        self.config = config
        self.dir = Path(root or config.out) / f"{name}-seed{config.seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stages = {}
        save_snapshot(config, self.dir)
        write_json(self.dir / "seed.json", {
            "root": config.seed, "stages": {s: config.stage_seed(s) for s in STAGES},
        })

    def path(self, *parts):
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @contextmanager
    def stage(self, name):
        start = time.time()
        log.info("[%s] stage %s started", self.name, name)
        try:
            yield self.path(name, ".keep").parent
        except StageError:
            raise
        except Exception as exc:
            self.stages[name] = {"status": "failed", "seconds": time.time() - start, "error": repr(exc)}
            write_json(self.dir / "stages.json", self.stages)
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        self.stages[name] = {"status": "ok", "seconds": round(time.time() - start, 3)}
        write_json(self.dir / "stages.json", self.stages)


def run_experiment(name, config=None, root=None):
    """Run the experiment registered as ``name``; returns its report dict (also saved as ``report.json``)."""
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; available: {sorted(EXPERIMENTS)}")
    config = config or RunConfig()
    run = Run(name, config, root)
    started = time.time()
    report = EXPERIMENTS[name](run)
    report.update(experiment=name, seed=config.seed, run_dir=str(run.dir),
                  seconds=round(time.time() - started, 2), stages=run.stages)
    write_json(run.dir / "report.json", report)
    return report


# -- shared stage helpers ----------------------------------------------------------------

def synth_stage(run, corpus_size=None, seed_offset=0):
    cfg = run.config.synth
    cfg = replace(cfg, seed=run.config.stage_seed("synth") + seed_offset,
                  corpus_size=corpus_size or cfg.corpus_size)
    with run.stage("synth") as d:
        save_dataset(synth_styled_dataset(cfg), d)
    return load_dataset(d)


def held_out_stories(config, count):
    """Held-out stories from a seed stream disjoint from the training corpus."""
    cfg = replace(config.synth, seed=config.stage_seed("eval"), corpus_size=count)
    return synth_styled_dataset(cfg)


def style_conditioning_errors(model, stories, context=3, positions=(3, 4), seed=0):
    """Mean style_error with and without the style condition for the given target positions.

    Both arms share the text prompt and the sampling seed, so the only
    difference is whether the adapter sees the first ``context`` images.
    """
    ctx = np.stack([s.images[:context] for s in stories])
    hues = [s.hue for s in stories]
    cond, uncond = [], []
    for j in positions:
        shapes = [s.shapes[j] for s in stories]
        g = from_model_space(model.generate(shapes, ctx, seed=seed + j))
        u = from_model_space(model.generate(shapes, ctx, seed=seed + j, null_style=True))
        cond.append(style_error(g, hues))
        uncond.append(style_error(u, hues))
    return float(np.mean(cond)), float(np.mean(uncond))


def _reduction(cond, uncond):
    return 1.0 - cond / uncond if uncond > 0 else 0.0


# -- experiments ---------------------------------------------------------------------------

@experiment("zero-adapter-equivalence")
def zero_adapter_equivalence(run):
    """Untrained model (adapter output projection zero): style-conditioned sampling == text-only sampling."""
    cfg = run.config
    seeds = list(range(cfg.experiment.zero_adapter_seeds))
    stories = held_out_stories(cfg, 4)
    results = []
    with run.stage("generate") as d:
        model = StyleModel(cfg.style, seed=cfg.stage_seed("style"))
        ctx = np.stack([s.images[:3] for s in stories])
        cond = model.condition([s.shapes[3] for s in stories], ctx)
        for s in seeds:
            with_style = sample_image(model.denoiser, model.schedule, cond, s)
            text_only = sample_image(model.denoiser, model.schedule, cond.text_only(), s)
            results.append({"seed": s, "bit_identical": bool(torch.equal(with_style, text_only))})
        save_generated(with_style, d, "last_seed", seeds[-1], model.schedule, cond)
    return {"passed": all(r["bit_identical"] for r in results), "seeds": results}


@experiment("table-reproduction")
def table_reproduction(run):
    with run.stage("eval") as d:
        text, data = reproduction_report()
        (d / "table.txt").write_text(text, encoding="utf-8")
    failures = [r for r in data["rows"] if not r["ok"]]
    return {
        "passed": not failures,
        "cells": data["cells"],
        "mismatches": failures,
        "max_abs_delta": data["max_abs_delta"],
        "tolerance": data["tolerance"],
        "table_file": str(d / "table.txt"),
    }


@experiment("style-conditioning")
def style_conditioning(run):
    """Train the style model once per seed and compare conditioned vs unconditioned style error."""
    cfg = run.config
    exp = cfg.experiment
    stories = synth_stage(run)
    held_out = held_out_stories(cfg, exp.test_stories)
    per_seed = []
    for s in exp.seeds:
        with run.stage(f"style-{s}") as d:
            model, history = train_style(stories, cfg.style, seed=cfg.stage_seed("style") + int(s))
            for part, module in model.modules().items():
                save_checkpoint(module, d / part, seed=int(s))
            write_json(d / "loss.json", history)
        with run.stage(f"score-{s}"):
            cond, uncond = style_conditioning_errors(
                model, held_out, exp.context_images, exp.target_positions, cfg.stage_seed("generate") + int(s)
            )
        per_seed.append({"seed": int(s), "conditioned": cond, "unconditioned": uncond,
                         "reduction": _reduction(cond, uncond), "final_loss": float(np.mean(history[-50:]))})
    cond = float(np.mean([r["conditioned"] for r in per_seed]))
    uncond = float(np.mean([r["unconditioned"] for r in per_seed]))
    reduction = _reduction(cond, uncond)
    return {
        "passed": reduction >= exp.min_reduction,
        "conditioned": cond,
        "unconditioned": uncond,
        "reduction": reduction,
        "min_reduction": exp.min_reduction,
        "per_seed": per_seed,
    }


@experiment("pipeline")
def pipeline(run):
    """synth -> enhance (mock client) -> train narrator -> train style -> generate/predict -> score."""
    cfg = run.config
    exp = cfg.experiment
    stories = synth_stage(run)
    n = cfg.synth.n

    with run.stage("enhance") as d:
        raw = [RawStory(s.story_id, [f"images.npy#{i}/{j}" for j in range(n)], s.plots) for i, s in enumerate(stories)]
        enhance_cfg = replace(cfg.enhance, cache_dir=cfg.enhance.cache_dir or str(d / "cache"))
        client = MockLLMClient(seed=cfg.stage_seed("enhance"))
        _, accepted, stats, _ = run_enhancement(raw, client, enhance_cfg, out_dir=d)

    with run.stage("narrator") as d:
        narrator, n_hist = train_narrator(stories, cfg.narrator, seed=cfg.stage_seed("narrator"))
        save_checkpoint(narrator, d / "narrator", seed=cfg.stage_seed("narrator"))
        write_json(d / "loss.json", n_hist)

    with run.stage("style") as d:
        style_model, s_hist = train_style(stories, cfg.style, seed=cfg.stage_seed("style"))
        for part, module in style_model.modules().items():
            save_checkpoint(module, d / part, seed=cfg.stage_seed("style"))
        write_json(d / "loss.json", s_hist)

    held_out = held_out_stories(cfg, exp.test_stories)
    instruction_g = VOCAB.encode(INSTRUCTIONS["generate"][0])
    instruction_p = VOCAB.encode(INSTRUCTIONS["predict"][0])
    with run.stage("generate") as d:
        gen_rows = []
        for s in held_out:
            plots = generate_story(narrator, s.images, instruction_g).plots
            gen_rows.append({"story_id": s.story_id, "plots": plots, "reference": s.plots})
        write_json(d / "stories.json", gen_rows)
        ctx = np.stack([s.images[:exp.context_images] for s in held_out])
        gseed = cfg.stage_seed("generate")
        for j in exp.target_positions:
            shapes = [s.shapes[j] for s in held_out]
            cond = style_model.condition(shapes, ctx)
            images = sample_image(style_model.denoiser, style_model.schedule, cond, gseed + j)
            save_generated(images, d / "images", f"plot{j + 1}", gseed + j, style_model.schedule, cond)

    with run.stage("predict") as d:
        pred_rows = []
        for s in held_out[:10]:
            for k in range(1, n):
                plots = predict_story(narrator, s.images[:k], instruction_p).plots
                pred_rows.append({"story_id": s.story_id, "k": k, "plots": plots})
        write_json(d / "stories.json", pred_rows)

    with run.stage("eval"):
        cond, uncond = style_conditioning_errors(
            style_model, held_out, exp.context_images, exp.target_positions, cfg.stage_seed("generate")
        )
        hue_hits = [
            float(np.mean([s.hue in p for p in row["plots"]])) for s, row in zip(held_out, gen_rows)
        ]

    reduction = _reduction(cond, uncond)
    narrator_drop = 1.0 - n_hist[-1] / n_hist[0]
    return {
        "passed": bool(reduction >= exp.min_reduction and narrator_drop >= 0.5),
        "enhancement": stats.to_dict() | {"accepted_ids": [e.story_id for e in accepted][:20]},
        "narrator": {"initial_loss": n_hist[0], "final_loss": n_hist[-1], "reduction": narrator_drop,
                     "plots_per_story": sorted({len(r["plots"]) for r in gen_rows + pred_rows}),
                     "style_word_accuracy": float(np.mean(hue_hits))},
        "style": {"conditioned": cond, "unconditioned": uncond, "reduction": reduction,
                  "final_loss": float(np.mean(s_hist[-50:]))},
    }
