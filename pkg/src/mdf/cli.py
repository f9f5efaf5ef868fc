"""Command line entry points: dataset generation, training, evaluation.

Every report-producing command writes machine-readable JSON next to the
human-readable markdown; any error exits nonzero with a one-line message.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from . import evaluation as ev
from .simworld import SimConfig, generate_dataset, load_dataset
from .training import (
    TrainConfig,
    load_model,
    pretrain_encoders,
    train,
    train_config_from_toml,
)


def _seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip() != "")
    except ValueError:
        raise click.ClickException(f"bad seed list {text!r}; expected "
                                   "comma-separated integers")


def _subset(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _schedule(text: str) -> list:
    """'0:rgb+depth+proprio,5:rgb+proprio' -> [(0, (...)), (5, (...))]."""
    out = []
    for part in text.split(","):
        try:
            t, mods = part.split(":")
            out.append((int(t), tuple(m.strip() for m in mods.split("+"))))
        except ValueError:
            raise click.ClickException(f"bad schedule entry {part!r}; "
                                       "expected step:mod+mod")
    return out


def _load(data):
    try:
        return load_dataset(data)
    except (OSError, ValueError, KeyError) as exc:
        raise click.ClickException(str(exc))


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        raise click.ClickException(str(exc))


@click.group()
@click.version_option(package_name="mdf", prog_name="mdf")
def main():
    """Multimodal differentiable filtering: simulate, train, evaluate."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="dataset directory")
@click.option("--trials", default=2000, show_default=True)
@click.option("--steps", default=30, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--image-hw", default=32, show_default=True)
def gen(out, trials, steps, seed, image_hw):
    """Generate a synthetic arm dataset."""
    cfg = SimConfig(trials=trials, steps=steps, seed=seed, image_hw=image_hw)
    _guard(generate_dataset, cfg, out)
    size = (Path(out) / "trials.bin").stat().st_size
    click.echo(f"wrote {trials} trials x {steps} steps to {out} "
               f"({size / 1e6:.1f} MB)")


@main.command(name="train")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="TOML with [train] and [model] sections")
@click.option("--steps", default=None, type=int, help="override step count")
@click.option("--seed", default=None, type=int, help="override seed")
@click.option("--attention-mode", default=None,
              type=click.Choice(["exclusive", "hadamard"]))
@click.option("--init-from", default=None, type=click.Path(exists=True),
              help="checkpoint to continue from")
@click.option("--pretrain", is_flag=True,
              help="sensor-loss warmup only (encoders and decoder)")
def train_cmd(data, out, config_path, steps, seed, attention_mode, init_from,
              pretrain):
    """Train the attention filter on a recorded dataset."""
    cfg = _guard(train_config_from_toml, config_path) if config_path \
        else TrainConfig()
    overrides = {k: v for k, v in [("steps", steps), ("seed", seed),
                                   ("attention_mode", attention_mode)]
                 if v is not None}
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    dataset = _load(data)
    model = _guard(load_model, init_from) if init_from else None
    runner = pretrain_encoders if pretrain else train
    ckpt = _guard(runner, cfg, dataset, out, model)
    click.echo(f"checkpoint at {ckpt}")


@main.command(name="eval")
@click.option("--checkpoint", default=None, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--method", default="amdf", show_default=True,
              type=click.Choice(ev.METHODS))
@click.option("--subset", default="rgb,depth,proprio", show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--trials", default=None, type=int,
              help="cap on validation trials")
@click.option("--start", default=None, type=int,
              help="first filtered step (defaults to the history length)")
@click.option("--out", default=None, type=click.Path())
def eval_cmd(checkpoint, data, method, subset, seeds, trials, start, out):
    """MAE of one estimator over the held-out trials."""
    rep = _guard(ev.evaluate, checkpoint, _load(data), method=method,
                 subset=_subset(subset), seeds=_seeds(seeds),
                 max_trials=trials, start=start)
    table = "\n".join([ev.MD_HEADER, rep.markdown_row()])
    click.echo(table)
    if out:
        outp = Path(out)
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "eval.json").write_text(
            json.dumps(rep.to_dict(), indent=1) + "\n")
        (outp / "eval.md").write_text(table + "\n")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--trials", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
def ablate(checkpoint, data, seeds, trials, out):
    """Evaluate the attention filter on all 7 modality subsets."""
    reports = _guard(ev.ablate, checkpoint, _load(data), seeds=_seeds(seeds),
                     out_dir=out, max_trials=trials)
    for rep in reports.values():
        click.echo(rep.markdown_row())
    click.echo(f"reports in {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--schedule", default=None,
              help="mask switches, e.g. 0:rgb+depth+proprio,15:rgb+proprio")
@click.option("--seeds", default="0", show_default=True)
@click.option("--trials", default=1, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--plot", is_flag=True, help="also write an SVG")
def attn(checkpoint, data, schedule, seeds, trials, out, plot):
    """Per-step attention mass trace of the attention filter."""
    sched = _schedule(schedule) if schedule else None
    outp = Path(out)
    outp.mkdir(parents=True, exist_ok=True)
    recs = _guard(ev.attention_report, checkpoint, _load(data),
                  schedule=sched, seeds=_seeds(seeds), max_trials=trials,
                  out_path=outp / "attention.jsonl", plot=plot)
    click.echo(f"{len(recs)} steps -> {outp / 'attention.jsonl'}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--lams", default="0,0.25,0.5,0.75,1", show_default=True)
@click.option("--background-seed", default=0, show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--trials", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--plot", is_flag=True)
def drift(checkpoint, data, lams, background_seed, seeds, trials, out, plot):
    """EE MAE under a progressively blended RGB background."""
    try:
        grid = tuple(float(l) for l in lams.split(","))
    except ValueError:
        raise click.ClickException(f"bad blend grid {lams!r}")
    curve = _guard(ev.drift, checkpoint, _load(data), lams=grid,
                   background_seed=background_seed, seeds=_seeds(seeds),
                   max_trials=trials, out_dir=out, plot=plot)
    click.echo(curve.markdown())


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--steps", default=100, show_default=True)
@click.option("--reps", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, type=click.Path())
def bench(checkpoint, data, steps, reps, seed, out):
    """Per-step latency, single versus all modalities."""
    rows = _guard(ev.bench, checkpoint, _load(data), steps=steps, reps=reps,
                  seed=seed, out_dir=out)
    for r in rows:
        err = "n/a" if r["stderr_s"] is None else f"{r['stderr_s']:.2e}"
        click.echo(f"{r['subset']}: {r['median_s']:.4f} s/step ± {err}")


if __name__ == "__main__":
    main()
