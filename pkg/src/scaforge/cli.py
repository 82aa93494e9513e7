"""Command-line interface: synthesis, training, crafting, calibration,
search, attack evaluation, experiment runs, and report rendering.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .arch import ModelArch
from .crafting import quantize, universal_pgd
from .ctc import ler
from .extraction import VARIANT_CONFIGS, AttackModel, evaluate_ler, train
from .harness import (
    ConfigError, ExperimentConfig, Lab, build_deploy_table, make_dataset,
    measure_drops, run_experiment, spawn_seed, split_zoo, write_report,
)
from .noisegen import NoiseSchedule, calibrate


def _load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    config = (ExperimentConfig.load(path) if path
              else ExperimentConfig.from_dict({}))
    if seed is not None:
        config = config.with_seed(seed)
    return config


def _out_dir(config: ExperimentConfig, out: str | None) -> Path:
    path = Path(out) if out else Path(config["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


CONFIG_OPT = click.option("--config", "config_path", type=str, default=None,
                          help="YAML config file (defaults otherwise).")
SEED_OPT = click.option("--seed", type=int, default=None,
                        help="Override the config seed.")
OUT_OPT = click.option("--out", type=str, default=None,
                       help="Output directory (defaults to config out_dir).")


@click.group()
def cli():
    """Side-channel extraction lab: sensors, noise, attacks, defenses."""


@cli.command()
@CONFIG_OPT
@SEED_OPT
@OUT_OPT
@click.option("--split", type=click.Choice(["train", "val", "holdout"]),
              default="train", help="Zoo split to synthesize traces for.")
def synth(config_path, seed, out, split):
    """Generate a clean readout-trace dataset for one zoo split."""
    config = _load_config(config_path, seed)
    lab = Lab.from_config(config)
    archs = getattr(split_zoo(config), split)
    base = spawn_seed(config["zoo.seed"], "dataset")
    records = make_dataset(lab, archs, config["zoo.traces_per_arch"],
                           split if split == "train" else f"{split}-traces",
                           base)
    path = _out_dir(config, out) / f"traces-{split}.jsonl"
    harness.save_traces(path, records)
    click.echo(f"wrote {len(records)} traces to {path}")


@cli.command(name="train")
@CONFIG_OPT
@SEED_OPT
@OUT_OPT
@click.option("--variant", type=int, default=None,
              help="Attack model variant (default: config surrogate).")
def train_cmd(config_path, seed, out, variant):
    """Train an attack-model variant on the zoo (cached by config)."""
    config = _load_config(config_path, seed)
    lab = Lab.from_config(config)
    if variant is None:
        variant = config["attack.surrogate_variant"]
    model = harness.trained_attacker(config, lab, variant)
    path = _out_dir(config, out) / f"attacker-{variant}.npz"
    model.save(path)
    zoo = split_zoo(config)
    base = spawn_seed(config["zoo.seed"], "dataset")
    holdout = harness.as_pairs(make_dataset(lab, zoo.holdout, 1, "cli-eval", base))
    click.echo(f"saved model to {path}; held-out LER "
               f"{evaluate_ler(model, holdout):.4f}")


@cli.command()
@CONFIG_OPT
@SEED_OPT
@OUT_OPT
@click.option("--mode", type=click.Choice(["similarity", "utility"]),
              default="utility", help="Which defense's noise to craft.")
def craft(config_path, seed, out, mode):
    """Craft adversarial noise against the trained surrogate."""
    config = _load_config(config_path, seed)
    lab = Lab.from_config(config)
    model = harness.trained_attacker(config, lab,
                                     config["attack.surrogate_variant"])
    run_seed = config["seed"]
    out_path = _out_dir(config, out) / f"noise-{mode}.npz"
    if mode == "similarity":
        arch = split_zoo(config).holdout[0]
        logical = harness._craft_fgsm(lab, config, model, arch,
                                      spawn_seed(run_seed, "fgsm", 0))
        np.savez(out_path, logical=logical, label=arch.labels())
    else:
        task = harness._proxy_task(config)
        target, _ = harness.find_decoy(config, task)
        victim, _ = harness.pick_victim(config, task)
        budget = config["evaluation.utility_budget"]
        drops = measure_drops(lab, 1.0, spawn_seed(run_seed, "cal", 1.0))
        table = build_deploy_table(drops, budget)
        traces = [lab.clean_trace(victim, spawn_seed(run_seed, "ucraft", r))
                  for r in range(config["crafting.repeats"])]
        noise = universal_pgd(model, traces, target.labels(),
                              eps=table.eps_taps,
                              k=config["crafting.pgd_steps"],
                              epochs=config["crafting.pgd_epochs"])
        logical = quantize(noise, config["crafting.quantize_mode"]).levels
        np.savez(out_path, logical=logical, delta=noise.delta,
                 victim=victim.labels(), target=target.labels())
    click.echo(f"wrote crafted noise to {out_path}")


@cli.command(name="calibrate")
@CONFIG_OPT
@SEED_OPT
@click.option("--eta", type=float, default=1.0, help="PDN coupling factor.")
@click.option("--length", type=int, default=64,
              help="Length of the random probe schedule.")
def calibrate_cmd(config_path, seed, eta, length):
    """Run iterative noise calibration on a random probe schedule."""
    config = _load_config(config_path, seed)
    lab = Lab.from_config(config)
    rng = np.random.default_rng(spawn_seed(config["seed"], "cal-probe"))
    schedule = NoiseSchedule(rng.integers(0, 321, size=length))
    sim = lab.board(eta, seed=spawn_seed(config["seed"], "cal-sim"),
                    high_res=True)
    result = calibrate(schedule, sim)
    click.echo(f"converged={result.converged} iterations={result.iterations} "
               f"error_sum={result.error_sum} history={result.history}")
    if not result.converged:
        raise click.ClickException("calibration did not converge")


@cli.command()
@CONFIG_OPT
@SEED_OPT
@OUT_OPT
def nas(config_path, seed, out):
    """Search for the worst-performing feasible decoy architecture."""
    config = _load_config(config_path, seed)
    target, accuracy = harness.find_decoy(config)
    click.echo(f"decoy arch: {target.describe()}")
    click.echo(f"proxy accuracy: {accuracy:.4f}")


@cli.command()
@CONFIG_OPT
@SEED_OPT
@click.option("--model", "model_path", type=str, required=True,
              help="Trained attack model checkpoint (.npz).")
@click.option("--variant", type=int, default=0, help="Model variant id.")
@click.option("--traces", "traces_path", type=str, required=True,
              help="JSONL trace dataset to decode.")
def attack(config_path, seed, model_path, variant, traces_path):
    """Decode a trace dataset with a trained model and report mean LER."""
    if variant not in VARIANT_CONFIGS:
        raise click.UsageError(f"unknown variant {variant}")
    for path in (model_path, traces_path):
        if not Path(path).is_file():
            raise ConfigError(f"file not found: {path}")
    model = AttackModel.from_file(model_path, VARIANT_CONFIGS[variant])
    records = harness.load_traces(traces_path)
    if not records:
        raise ConfigError(f"no traces in {traces_path}")
    score = evaluate_ler(model, harness.as_pairs(records))
    click.echo(f"mean LER over {len(records)} traces: {score:.4f}")


@cli.command()
@click.argument("name")
@CONFIG_OPT
@SEED_OPT
@OUT_OPT
def experiment(name, config_path, seed, out):
    """Run one experiment (similarity|utility|transferability|robustness)."""
    config = _load_config(config_path, seed)
    rows = run_experiment(name, config)
    path = _out_dir(config, out) / f"report-{name}.csv"
    write_report(rows, path)
    click.echo(f"wrote {len(rows)} rows to {path}")


@cli.command()
@CONFIG_OPT
@SEED_OPT
@OUT_OPT
@click.argument("reports", nargs=-1, type=str)
def report(config_path, seed, out, reports):
    """Render report CSVs into a summary table, charts, and a static page."""
    config = _load_config(config_path, seed)
    out_path = _out_dir(config, out)
    paths = [Path(p) for p in reports]
    if not paths:
        paths = sorted(out_path.glob("report-*.csv"))
    if not paths:
        raise ConfigError(f"no report files given or found in {out_path}")
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"report file not found: {p}")
    page = harness.render_report(paths, out_path)
    click.echo(f"wrote summary page to {page}")


def main(argv=None) -> int:
    """Entry point mapping errors onto the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (ConfigError, click.UsageError, click.BadParameter) as exc:
        message = exc.format_message() if isinstance(exc, click.UsageError) \
            else str(exc)
        click.echo(f"error: {message}", err=True)
        return 1
    except click.exceptions.Exit as exc:
        return 0 if exc.exit_code == 0 else exc.exit_code
    except click.Abort:
        return 1
    except Exception as exc:  # runtime failure
        click.echo(f"runtime failure: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
