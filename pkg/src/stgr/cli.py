"""Command-line entry point: generate, train, eval, audit-params, golden.

Exit codes: 0 success, 1 usage or configuration error, 2 invalid input data,
3 runtime or numeric failure. Set ``STGR_LOG_LEVEL`` (e.g. ``DEBUG``) for
more log output on stderr.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import checkpoint
from .config import HEADS, RunConfig, load_config, preset
from .errors import (ArgumentError, ConfigError, ContractError, DegenerateInputError, ParseError,
                     ShapeError, STGRError, ValidationError)
from .estimator import MaskSelector, check_scenes
from .evaluation import canonical_head, emit_report, evaluate_scenes, render_table, run_cv, CVResult
from .network import SelectorNetwork
from .synth import generate_dataset, load_dataset, load_scene
from .training import load_network, train_loop

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3
LOG_ENV = "STGR_LOG_LEVEL"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, click.UsageError)):
        return EXIT_USAGE
    if isinstance(exc, (ValidationError, ParseError, ShapeError, DegenerateInputError)):
        return EXIT_INPUT
    if isinstance(exc, ArgumentError):
        return EXIT_USAGE
    return EXIT_RUNTIME


class _Group(click.Group):
    """Maps library errors onto the exit-code contract."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)
        except click.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_RUNTIME)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except (STGRError, OSError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exit_code_for(exc))
        if not standalone_mode:
            return rv
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"{LOG_ENV}: unknown log level {level!r}")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(config_path, preset_name, seed, threads, overrides) -> RunConfig:
    """File or preset first, then ``--set`` overrides, then dedicated flags."""
    cfg = load_config(config_path) if config_path else preset(preset_name)
    if overrides:
        d = cfg.to_dict()
        for text in overrides:
            key, value = _parse_override(text)
            if key.startswith("phantom."):
                d["phantom"] = {**d["phantom"], key.split(".", 1)[1]: value}
            else:
                d[key] = value
        cfg = RunConfig.from_dict(d)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if threads is not None:
        cfg = cfg.replace(threads=threads)
    return cfg


def common_options(out_default: str | None):
    def wrap(f):
        f = click.option("--threads", type=int, default=None,
                         help="Worker threads for per-scene gradients [default: config value, 1].")(f)
        f = click.option("--seed", type=int, default=None,
                         help="Master seed [default: config value, 0].")(f)
        f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                         help="Override one config key (JSON value; phantom.KEY for generator knobs). "
                              "Repeatable. [default: none]")(f)
        f = click.option("--preset", "preset_name", default="default", show_default=True,
                         type=click.Choice(["default", "overfit", "benchmark", "tiny"]),
                         help="Built-in configuration used when --config is absent.")(f)
        f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                         default=None, help="JSON run config; unknown keys are rejected. [default: none]")(f)
        if out_default is not None:
            f = click.option("--out", type=click.Path(file_okay=False), default=out_default, show_default=True,
                             help="Output directory.")(f)
        return f
    return wrap


def _echo_config(cfg: RunConfig, out: Path) -> None:
    checkpoint.atomic_write(out / "effective_config.json", cfg.to_json())


@click.group(cls=_Group, context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Graph-based candidate mask selection with attribute guidance."""
    _setup_logging()


@cli.command()
@common_options("data")
@click.option("--n", "n_scenes", type=int, default=10, show_default=True, help="Number of scenes.")
def generate(config_path, preset_name, overrides, seed, threads, out, n_scenes):
    """Write a synthetic dataset (scenes + manifest)."""
    cfg = resolve_config(config_path, preset_name, seed, threads, overrides)
    out = Path(out)
    manifest = generate_dataset(cfg.phantom, n_scenes, cfg.seed, out, cfg.match_threshold)
    _echo_config(cfg, out)
    click.echo(f"wrote {len(manifest['scenes'])} scenes to {out}")


def _print_audit(label: str, sums: dict) -> None:
    for group, digest in sums.items():
        click.echo(f"frozen-audit {label} {group} {digest}")


@cli.command()
@common_options("run")
@click.option("--data", type=click.Path(exists=True), required=True,
              help="Dataset directory or manifest file.")
@click.option("--head", type=click.Choice(HEADS), default=None,
              help="Selector head [default: config value, stgr].")
def train(config_path, preset_name, overrides, seed, threads, out, data, head):
    """Train one head; writes checkpoint.ckpt, train_log.jsonl, effective_config.json."""
    cfg = resolve_config(config_path, preset_name, seed, threads, overrides)
    if head:
        cfg = cfg.replace(head=head)
    scenes = check_scenes(load_dataset(data), cfg.d_v, require_labels=True, match_threshold=cfg.match_threshold)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_loop(scenes, cfg, out_dir=out)
    _print_audit("start", result.frozen_checksums_start)
    _print_audit("end", result.frozen_checksums_end)
    if result.frozen_checksums_start != result.frozen_checksums_end:
        raise ContractError("frozen parameters changed during training")
    last = result.log[-1] if result.log else {}
    click.echo(f"trained {cfg.head} for {cfg.epochs} epochs on {len(scenes)} scenes; "
               f"final loss {last.get('loss', float('nan')):.6f}; "
               f"trainable fraction {result.registry.trainable_fraction():.3e}")


@cli.command(name="eval")
@common_options("eval")
@click.option("--data", type=click.Path(exists=True), required=True,
              help="Dataset directory or manifest file.")
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Score a trained checkpoint on all scenes instead of cross-validating. [default: none]")
@click.option("--head", "heads", multiple=True, type=click.Choice(HEADS + ("cosine-threshold",)),
              help="Head(s) to cross-validate. Repeatable. [default: stgr and linear]")
def eval_cmd(config_path, preset_name, overrides, seed, threads, out, data, ckpt, heads):
    """Cross-validate heads (or score a checkpoint); writes report.json and report.tsv."""
    scenes = load_dataset(data)
    out = Path(out)
    if ckpt:
        network = load_network(ckpt)
        cfg = network.config
        if heads and {canonical_head(h) for h in heads} != {network.head}:
            raise ArgumentError(f"checkpoint holds a {network.head!r} head")
        est = MaskSelector.from_network(network)
        results = [CVResult(network.head, [evaluate_scenes(est, scenes, network.head, 0)])]
    else:
        cfg = resolve_config(config_path, preset_name, seed, threads, overrides)
        heads = [canonical_head(h) for h in (heads or ("stgr", "linear"))]
        results = [run_cv(scenes, cfg, h) for h in dict.fromkeys(heads)]
    emit_report(results, out, cfg)
    _echo_config(cfg, out)
    click.echo(render_table(results), nl=False)


@cli.command(name="audit-params")
@common_options(None)
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Audit a saved checkpoint instead of a fresh model. [default: none]")
@click.option("--head", type=click.Choice(HEADS), default=None,
              help="Selector head for a fresh model [default: config value, stgr].")
@click.option("--json", "as_json", is_flag=True, default=False, help="Print JSON instead of a table.")
def audit_params(config_path, preset_name, overrides, seed, threads, ckpt, head, as_json):
    """Parameter counts per group and the trainable fraction."""
    if ckpt:
        network = load_network(ckpt)
    else:
        cfg = resolve_config(config_path, preset_name, seed, threads, overrides)
        network = SelectorNetwork(cfg, head=head)
    registry = network.registry(network.config.virtual_backbones)
    counts = registry.counts()
    fraction = registry.trainable_fraction()
    if as_json:
        click.echo(json.dumps({**counts, "trainable_fraction": fraction}, indent=2, sort_keys=True))
        return
    rows = [(g, str(r["trainable"]), str(r["frozen"])) for g, r in counts["by_group"].items()]
    rows += [(f"virtual:{name}", "0", str(n)) for name, n in counts["virtual"].items()]
    rows.append(("total", str(counts["trainable"]), str(counts["frozen"] + counts["virtual_total"])))
    click.echo("group\ttrainable\tfrozen")
    for row in rows:
        click.echo("\t".join(row))
    click.echo(f"trainable_fraction\t{fraction:.6e}")


def golden_record(scene, network: SelectorNetwork) -> str:
    """Canonical JSON for one scene's selection; floats carry 12 significant digits."""
    pred = MaskSelector.from_network(network).predict([scene])[0]
    rec = pred.to_record()
    for key in ("scores", "predicted_iou"):
        rec[key] = [float(f"{v:.12g}") for v in rec[key]]
    rec["head"] = network.head
    return json.dumps(rec, indent=2, sort_keys=True) + "\n"


@cli.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Scene file.")
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Checkpoint file.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write the record here instead of stdout. [default: stdout]")
def golden(scene_path, ckpt, out):
    """Emit the SelectionResult record used by golden-file tests."""
    text = golden_record(load_scene(scene_path), load_network(ckpt))
    if out:
        checkpoint.atomic_write(out, text)
    else:
        click.echo(text, nl=False)


def main(argv=None):
    cli.main(args=argv, prog_name="stgr")


if __name__ == "__main__":
    main()
