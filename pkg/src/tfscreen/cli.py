"""Command line entry point: ``tfscreen run | simulate | report``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .pipeline import STEPS, THREADS_ENV, ConfigError, Pipeline, PipelineError, load_config
from .simulate import SimConfig, SimConfigError, simulate_screen, write_simulation

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )


def _parse_steps(text: str | None):
    if text is None:
        return None
    steps = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in steps if s not in STEPS]
    if bad:
        raise click.BadParameter(f"unknown step {bad[0]!r}; choose from {', '.join(STEPS)}")
    return steps


def _load(config: str, seed: int | None):
    cfg = load_config(config)
    if seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.version_option(package_name="artifact")
def main(verbose):
    """Analyze pooled transcription-factor overexpression screens."""
    _setup_logging(verbose)


@main.command()
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="Pipeline TOML file.")
@click.option("--steps", default=None, help=f"Comma-separated subset of: {','.join(STEPS)}.")
@click.option("--force", is_flag=True, help="Recompute steps even when up to date.")
@click.option("--strict", is_flag=True, default=None, help="Fail on stale outputs instead of recomputing.")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help=f"Worker threads for DE (default: ${THREADS_ENV} or config).")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
def run(config, steps, force, strict, threads, seed):
    """Run pipeline steps in dependency order, skipping up-to-date ones."""
    try:
        cfg = _load(config, seed)
        pipe = Pipeline(cfg, force=force, threads=threads, strict=strict, log=click.echo)
        res = pipe.run(_parse_steps(steps))
    except PipelineError as exc:
        click.echo(f"[tfscreen] step={exc.step} action=fail", err=True)
        raise click.ClickException(str(exc))
    except ConfigError as exc:
        raise click.ClickException(f"config: {exc}")
    click.echo(f"[tfscreen] run executed={len(res.executed)} skipped={len(res.skipped)}")


@main.command()
@click.option("--config", "config", default=None, type=click.Path(dir_okay=False),
              help="Simulation TOML file (defaults to the demo settings).")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
def simulate(config, out, seed):
    """Write a synthetic screen with truth tables and a ready-to-run config."""
    data = {}
    if config is not None:
        try:
            with open(config, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise click.ClickException(f"{config}: {exc}")
    if seed is not None:
        data["seed"] = seed
    try:
        cfg = SimConfig.from_mapping(data)
    except SimConfigError as exc:
        raise click.ClickException(f"invalid simulation config: {exc}")
    result = simulate_screen(cfg)
    write_simulation(result, out)
    n_assigned = sum(1 for lab in result.truth.cell_label.values() if lab in set(cfg.tf_names))
    click.echo(
        f"simulated cells={result.counts.n_cells} genes={result.counts.n_genes} tfs={cfg.n_tfs} "
        f"assigned={n_assigned} seed={cfg.seed} out={Path(out)}"
    )


@main.command()
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="Pipeline TOML file.")
def report(config):
    """Summarize existing outputs (runs the report step only) and print it."""
    try:
        cfg = load_config(config)
        Pipeline(cfg, log=click.echo).run(["report"])
    except PipelineError as exc:
        click.echo(f"[tfscreen] step={exc.step} action=fail", err=True)
        raise click.ClickException(str(exc))
    except ConfigError as exc:
        raise click.ClickException(f"config: {exc}")
    click.echo((Path(cfg.output_dir) / "report" / "report.md").read_text(), nl=False)


if __name__ == "__main__":
    main()
