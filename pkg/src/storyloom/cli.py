"""Command-line entry point (``storyloom <command>``).

Every command accepts ``--config PATH`` (TOML, dotted keys), ``--seed INT``
and ``--out DIR``. Settings resolve as defaults < config file < environment
(``STORYLOOM_<SECTION>__<FIELD>``) < command-line flags. Commands never
prompt, and they exit with a nonzero status when a check fails.
"""
import json
import logging
from pathlib import Path
import sys

import click
import numpy as np

from .config import load_config
from .errors import StageError

log = logging.getLogger("storyloom")


def common(fn):
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Root seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="TOML config file.")(fn)
    return fn


def _config(config_path, seed, out):
    return load_config(config_path, seed=seed, out=out)


def _out(config, default):
    p = Path(config.out if config.out != "runs" else default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True, default=str))


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose):
    """Desk-scale multimodal storytelling toolkit."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command("synth-data")
@common
def synth_data(config_path, seed, out):
    """Generate the synthetic styled story corpus."""
    from dataclasses import replace

    from .synth import save_dataset, synth_styled_dataset

    cfg = _config(config_path, seed, out)
    synth = replace(cfg.synth, seed=cfg.stage_seed("synth"))
    d = save_dataset(synth_styled_dataset(synth), _out(cfg, "data"))
    _emit({"out": str(d), "stories": synth.corpus_size, "n": synth.n})


@main.command()
@common
@click.option("--data", type=click.Path(exists=True), required=True, help="stories.jsonl with RawStory records.")
@click.option("--fault", multiple=True, metavar="STORY_ID=KIND", help="Inject a mock-client fault (testing).")
def enhance(config_path, seed, out, data, fault):
    """Describe, rewrite and validate stories with the deterministic mock client."""
    from dataclasses import replace

    from .enhancer import MockLLMClient, read_raw_stories, run_enhancement

    cfg = _config(config_path, seed, out)
    out_dir = _out(cfg, "enhanced")
    stories = read_raw_stories(Path(data) / "stories.jsonl" if Path(data).is_dir() else data)
    faults = dict(f.split("=", 1) for f in fault)
    client = MockLLMClient(seed=cfg.stage_seed("enhance"), faults=faults)
    ecfg = replace(cfg.enhance, cache_dir=cfg.enhance.cache_dir or str(out_dir / "cache"))
    _, _, stats, _ = run_enhancement(stories, client, ecfg, out_dir=out_dir)
    _emit(stats.to_dict() | {"client_calls": client.calls})
    if stats.errors:
        sys.exit(1)


def _load_stories(data):
    from .synth import load_dataset

    return load_dataset(data)


@main.command("train-narrator")
@common
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
def train_narrator_cmd(config_path, seed, out, data):
    """Train the storyteller jointly on generation and prediction."""
    from .checkpoint import save_checkpoint
    from .narrator import train_narrator

    cfg = _config(config_path, seed, out)
    out_dir = _out(cfg, "narrator")
    s = cfg.stage_seed("narrator")
    model, hist = train_narrator(_load_stories(data), cfg.narrator, seed=s)
    save_checkpoint(model, out_dir / "narrator", seed=s, extra={"config": cfg.to_dict()["narrator"]})
    (out_dir / "loss.json").write_text(json.dumps(hist))
    drop = 1.0 - hist[-1] / hist[0]
    _emit({"initial_loss": hist[0], "final_loss": hist[-1], "reduction": drop, "out": str(out_dir)})


@main.command("train-style")
@common
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
def train_style_cmd(config_path, seed, out, data):
    """Train the toy denoiser together with the style adapter."""
    from .checkpoint import save_checkpoint
    from .training import train_style

    cfg = _config(config_path, seed, out)
    out_dir = _out(cfg, "style")
    s = cfg.stage_seed("style")
    model, hist = train_style(_load_stories(data), cfg.style, seed=s,
                              progress=lambda i, l: log.info("step %d loss %.4f", i, l))
    for part, module in model.modules().items():
        save_checkpoint(module, out_dir / part, seed=s, extra={"config": cfg.to_dict()["style"]})
    (out_dir / "loss.json").write_text(json.dumps(hist))
    _emit({"final_loss": float(np.mean(hist[-50:])), "out": str(out_dir)})


def _style_model(cfg, ckpt):
    from .checkpoint import load_checkpoint
    from .training import StyleModel

    model = StyleModel(cfg.style, seed=cfg.stage_seed("style"))
    for part, module in model.modules().items():
        load_checkpoint(module, Path(ckpt) / part)
    return model


def _narrator(cfg, ckpt):
    from .checkpoint import load_checkpoint
    from .narrator import Storyteller

    model = Storyteller(cfg.narrator, seed=cfg.stage_seed("narrator"))
    load_checkpoint(model, Path(ckpt) / "narrator")
    return model.eval()


@main.command()
@common
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--narrator", "narrator_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--style", "style_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--limit", type=int, default=8, show_default=True)
def generate(config_path, seed, out, data, narrator_dir, style_dir, limit):
    """Story generation: all N images in, N plots out (and style-consistent images for the last plots)."""
    from .diffuse import sample_image, save_generated
    from .narrator import INSTRUCTIONS, generate_story
    from .synth import VOCAB

    cfg = _config(config_path, seed, out)
    out_dir = _out(cfg, "generated")
    stories = _load_stories(data)[:limit]
    if not (narrator_dir or style_dir):
        raise click.UsageError("give --narrator and/or --style")
    result = {}
    if narrator_dir:
        model = _narrator(cfg, narrator_dir)
        ins = VOCAB.encode(INSTRUCTIONS["generate"][0])
        result["stories"] = [
            {"story_id": s.story_id, "plots": generate_story(model, s.images, ins).plots} for s in stories
        ]
    if style_dir:
        model = _style_model(cfg, style_dir)
        k = cfg.experiment.context_images
        ctx = np.stack([s.images[:k] for s in stories])
        gseed = cfg.stage_seed("generate")
        for j in cfg.experiment.target_positions:
            cond = model.condition([s.shapes[j] for s in stories], ctx)
            images = sample_image(model.denoiser, model.schedule, cond, gseed + j)
            save_generated(images, out_dir, f"plot{j + 1}", gseed + j, model.schedule, cond)
        result["images"] = str(out_dir)
    (out_dir / "stories.json").write_text(json.dumps(result, indent=2))
    _emit(result)


@main.command()
@common
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--narrator", "narrator_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("-k", "k", type=int, required=True, help="Number of observed images (1..N-1).")
@click.option("--limit", type=int, default=8, show_default=True)
def predict(config_path, seed, out, data, narrator_dir, k, limit):
    """Story prediction: the first k images in, the full N-plot story out."""
    from .narrator import INSTRUCTIONS, predict_story
    from .synth import VOCAB

    cfg = _config(config_path, seed, out)
    model = _narrator(cfg, narrator_dir)
    ins = VOCAB.encode(INSTRUCTIONS["predict"][0])
    rows = [
        {"story_id": s.story_id, "k": k, "plots": predict_story(model, s.images[:k], ins).plots}
        for s in _load_stories(data)[:limit]
    ]
    out_dir = _out(cfg, "predicted")
    (out_dir / "stories.json").write_text(json.dumps(rows, indent=2))
    _emit(rows)


@main.command("eval-aggregate")
@common
@click.option("--ratings", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Ratings CSV; omit to check the embedded published tables instead.")
def eval_aggregate(config_path, seed, out, ratings):
    """Win+/Lose+ table from a ratings file, or reproduction of the embedded tables."""
    from .evalstats import read_ratings, reproduction_report, winrate_report

    cfg = _config(config_path, seed, out)
    out_dir = _out(cfg, "eval")
    if ratings:
        text, data = winrate_report(read_ratings(ratings))
        ok = True
    else:
        text, data = reproduction_report()
        ok = data["mismatches"] == 0
    (out_dir / "aggregate.txt").write_text(text)
    (out_dir / "aggregate.json").write_text(json.dumps(data, indent=2, sort_keys=True))
    click.echo(text)
    if not ok:
        click.echo(f"{data['mismatches']} cell(s) outside ±{data['tolerance']}", err=True)
        sys.exit(1)


@main.command("icc-report")
@common
@click.option("--ratings", type=click.Path(exists=True, dir_okay=False), required=True)
def icc_report_cmd(config_path, seed, out, ratings):
    """ICC(2,k) inter-rater reliability per method pair and metric."""
    from .evalstats import icc_report, read_ratings

    cfg = _config(config_path, seed, out)
    out_dir = _out(cfg, "eval")
    text, data = icc_report(read_ratings(ratings), cfg.eval.mapping)
    (out_dir / "icc.txt").write_text(text)
    (out_dir / "icc.json").write_text(json.dumps(data, indent=2, sort_keys=True))
    click.echo(text)


@main.command("run-experiment")
@common
@click.argument("name")
def run_experiment_cmd(config_path, seed, out, name):
    """Run a named experiment; exits 1 if its check fails, 2 if a stage errors."""
    from .experiments import EXPERIMENTS, run_experiment

    if name not in EXPERIMENTS:
        raise click.BadParameter(f"choose from {sorted(EXPERIMENTS)}", param_hint="NAME")
    cfg = _config(config_path, seed, out)
    try:
        report = run_experiment(name, cfg)
    except StageError as exc:
        click.echo(f"stage failed: {exc}", err=True)
        sys.exit(2)
    _emit(report)
    if not report.get("passed", False):
        sys.exit(1)


if __name__ == "__main__":
    main()
