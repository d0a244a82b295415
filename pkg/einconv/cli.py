import functools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np
import pandas as pd
import questionary

from einconv.archive import SearchArchive
from einconv.config import OPTIMIZERS, Config
from einconv.datasets import Dataset, load_dataset_dir, synthetic_separable
from einconv.enumeration import (
    REFERENCE_COUNTS,
    count_summary,
    enumerate_graphs,
    rule_variant_report,
    summary_rows,
)
from einconv.errors import EinconvError, ValidationError
from einconv.graph import ConvGeometry, EinconvGraph, canonical_hash, validate
from einconv.layer import complexity
from einconv.reduction import reduce_to_fixpoint
from einconv.search import (
    SurrogateEvaluator,
    TrainerEvaluator,
    fast_nondominated_sort,
    initial_population,
    pareto_front,
    search as run_search,
)
from einconv.trainer import PRESETS, NetworkSpec, TrainConfig, load_network, save_network, train as run_training
from einconv.utils import (
    echo_err,
    echo_failure_json,
    echo_info,
    echo_success,
    echo_warning,
    header_line,
    write_with_header,
)


def _handle_errors(func):
    """Turn library errors into the documented exit codes plus a JSON line on stderr."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except EinconvError as e:
            error, exit_code = e, e.exit_code
        except (ValueError, FileNotFoundError) as e:
            error, exit_code = e, 2
        echo_err(str(error))
        echo_failure_json(error, exit_code)
        sys.exit(exit_code)
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool):
    if verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _parse_filter(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in value.lower().split("x"))
    except ValueError as e:
        raise ValidationError(f"Bad filter {value!r}, expected e.g. 3x3") from e


def _read_graph(path: str) -> EinconvGraph:
    return EinconvGraph.from_json(Path(path).read_text())


def _read_graph_lines(path: str) -> list[EinconvGraph]:
    lines = Path(path).read_text().splitlines()
    return [EinconvGraph.from_json(line) for line in lines if line.strip() and not line.startswith("#")]


def _set_config() -> Config:
    config = Config.load_or_default()

    try:
        config.jobs = click.prompt("Worker processes for enumeration and search", type=int, default=config.jobs)
        config.candidate_cap = click.prompt(
            "Maximum candidate vertex sets per enumeration", type=int, default=config.candidate_cap
        )
        config.rank_dim = click.prompt("Default rank dim", type=int, default=config.rank_dim)
        config.enum_spatial = click.prompt(
            "Spatial size used to cost enumerated graphs", type=int, default=config.enum_spatial
        )
        config.enum_channels = click.prompt(
            "Channel count used to cost enumerated graphs", type=int, default=config.enum_channels
        )
        optimizer = questionary.select(
            "Default optimizer",
            choices=list(OPTIMIZERS),
            default=config.default_optimizer,
        ).ask()
    except (KeyError, KeyboardInterrupt, TypeError):
        echo_err("Config setup cancelled.")
        sys.exit(0)

    if optimizer:
        config.default_optimizer = optimizer
    config.save()
    echo_success("Configuration saved!")
    return config


@cli.command()
def setup():
    """Edit the saved defaults."""
    _set_config()


@cli.command(name="enumerate")
@click.option("--dims", type=click.Choice(["2", "3"]), default="2", help="Spatial dimensions.")
@click.option("--filter", "filter_spec", default="3x3", help="Filter size, e.g. 3x3 or 3x3x3.")
@click.option("--max-rank-indices", type=int, default=2)
@click.option("--rank-dim", type=int, default=None, help="Dim of every rank index (config default).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--jobs", type=int, default=None)
@click.option("--rule-report", is_flag=True, help="Also count under each redundancy-rule interpretation.")
@click.option("--progress/--no-progress", default=False)
@_handle_errors
def enumerate_cmd(dims, filter_spec, max_rank_indices, rank_dim, out, jobs, rule_report, progress):
    """Enumerate every nonredundant layer graph and write them with a summary."""
    spatial_dims = int(dims)
    filter = _parse_filter(filter_spec)
    config = Config.load_or_default()
    if jobs is not None:
        config.jobs = max(jobs, 1)
    flags = {
        "dims": spatial_dims, "filter": filter_spec, "max_rank_indices": max_rank_indices,
        "rank_dim": rank_dim if rank_dim is not None else config.rank_dim, "jobs": config.jobs,
    }
    header = header_line("enumerate", flags)

    graphs = enumerate_graphs(spatial_dims, filter, max_rank_indices, rank_dim, config, progress=progress)
    out = Path(out)
    write_with_header(out / "graphs.jsonl", header, "".join(g.to_json() + "\n" for g in graphs))
    write_with_header(out / "summary.csv", header, summary_rows(graphs).to_csv(index=False))
    write_with_header(out / "counts.csv", header, count_summary(graphs).to_csv(index=False))

    reference = REFERENCE_COUNTS.get((spatial_dims, max_rank_indices)) if set(filter) == {3} else None
    mismatch = reference is not None and len(graphs) != reference
    if mismatch:
        echo_warning(f"Found {len(graphs)} graphs where {reference} are expected; writing a rule-variant report.")
    if rule_report or mismatch:
        report = rule_variant_report(config, settings=((spatial_dims, max_rank_indices),))
        write_with_header(out / "rule_variants.csv", header, report.to_csv(index=False))

    click.echo(len(graphs))


@cli.command()
@click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the reduced graph here.")
@_handle_errors
def reduce(graph_path, out):
    """Apply the reduction rules until none applies."""
    trace = reduce_to_fixpoint(_read_graph(graph_path))
    for row in trace.as_rows():
        echo_info(f"{row['step']}: {row['rule']} labels={row['labels']} vertices={row['vertices']}")
    if out:
        Path(out).write_text(trace.result.to_json() + "\n")
    click.echo(f"{len(trace.steps)} steps, hash {canonical_hash(trace.result)}")


@cli.command()
@click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--geometry", default=None, help="HxW[xD]:C:C'[:P[:S]], overrides the graph's geometry.")
@_handle_errors
def analyze(graph_path, geometry):
    """Print parameter count, FLOPs and canonical hash of a graph."""
    graph = _read_graph(graph_path)
    if geometry:
        graph = graph.with_geometry(ConvGeometry.parse(geometry, graph.effective_filter))
    report = validate(graph)
    if not report.ok:
        raise ValidationError("; ".join(report.violations))

    params, flops = complexity(graph)
    click.echo(f"params: {params}")
    click.echo(f"flops: {flops}")
    click.echo(f"hash: {canonical_hash(graph)}")

    trace = reduce_to_fixpoint(graph)
    if trace.steps:
        echo_warning(f"Redundant graph, {len(trace.steps)} reduction steps:")
        for row in trace.as_rows():
            click.echo(f"  {row['step']}: {row['rule']} labels={row['labels']} vertices={row['vertices']}")


def _load_data(data: str, cfg: TrainConfig, sample_shape: Optional[tuple[int, ...]] = None) -> tuple[Dataset, Dataset]:
    if data == "synthetic":
        size = sample_shape[0] if sample_shape else 8
        depth = sample_shape[2] if sample_shape and len(sample_shape) == 4 else 0
        n_train = cfg.train_samples or 64
        n_test = cfg.test_samples or 64
        return (
            synthetic_separable(n_train, size, cfg.seed, depth),
            synthetic_separable(n_test, size, cfg.seed + 1, depth),
        )
    train_set, test_set = load_dataset_dir(data)
    if cfg.train_samples:
        train_set = train_set.subset(cfg.train_samples, cfg.seed)
    if cfg.test_samples:
        test_set = test_set.subset(cfg.test_samples, cfg.seed)
    return train_set, test_set


def _load_net(net: str, layer: Optional[str], data: Dataset):
    template = _read_graph(layer) if layer else None
    if net in PRESETS:
        return NetworkSpec.from_preset(net, data.sample_shape, data.n_classes, template), None
    path = Path(net)
    if path.is_dir():
        return load_network(path)
    if path.is_file():
        return NetworkSpec.from_recipe(path.read_text().strip(), data.sample_shape, data.n_classes, template), None
    raise FileNotFoundError(f"{net} is neither a preset ({', '.join(PRESETS)}) nor a recipe file or checkpoint")


@cli.command()
@click.option("--net", required=True, help="Preset name, recipe file or checkpoint directory.")
@click.option("--data", required=True, help="Directory of IDX files, or 'synthetic'.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--layer", type=click.Path(exists=True, dir_okay=False), default=None, help="Graph JSON for Einconv blocks.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--progress/--no-progress", default=False)
@_handle_errors
def train(net, data, config_path, layer, out, progress):
    """Train a network and write its history and checkpoint."""
    cfg = TrainConfig.load(config_path) if config_path else TrainConfig(optimizer=Config.load_or_default().default_optimizer)
    train_set, test_set = _load_data(data, cfg)
    spec, params = _load_net(net, layer, train_set)

    result = run_training(spec, train_set, cfg, test=test_set, params=params, progress=progress)
    out = Path(out)
    header = header_line("train", {"net": net, "data": data, "config": config_path, "layer": layer, "seed": cfg.seed})
    write_with_header(out / "history.csv", header, result.history_frame().to_csv(index=False))
    save_network(spec, result.params, out / "checkpoint")

    if result.history:
        last = result.history[-1]
        echo_success(f"train acc {last.train_acc:.4f}, test acc {last.test_acc:.4f}")
    else:
        echo_info("No epochs run.")


def _pareto_lines(individuals) -> str:
    return "".join(
        json.dumps({
            "canonical_hash": canonical_hash(ind.genome.graph),
            "params": ind.params,
            "flops": ind.flops,
            "accuracy": ind.accuracy,
            "generation": ind.generation,
            "order_seed": ind.genome.order_seed,
            "graph": ind.genome.graph.to_dict(),
        }) + "\n"
        for ind in individuals
    )


@cli.command()
@click.option("--preset", type=click.Choice(list(PRESETS)), default="lenet-mini")
@click.option("--pop", "pop_size", type=int, default=24)
@click.option("--generations", type=int, default=5)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--surrogate", is_flag=True, help="Score layers with a cheap surrogate instead of training.")
@click.option("--data", default="synthetic", help="Directory of IDX files, or 'synthetic'.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--pool", "pool_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Enumeration JSONL to sample extra initial layers from.")
@click.option("--eval-budget", type=int, default=None)
@click.option("--jobs", type=int, default=None)
@click.option("--resume", is_flag=True, help="Continue from the archive in --out.")
@click.option("--progress/--no-progress", default=False)
@_handle_errors
def search(preset, pop_size, generations, seed, out, surrogate, data, config_path, pool_path, eval_budget, jobs,
           resume, progress):
    """Search layer graphs for the accuracy / parameter-count tradeoff."""
    if pop_size < 1:
        raise ValidationError("--pop must be positive")
    config = Config.load_or_default()
    jobs = max(jobs if jobs is not None else config.jobs, 1)
    chosen = PRESETS[preset]

    if surrogate:
        evaluator = SurrogateEvaluator()
        objective = "surrogate accuracy (log parameter count)"
    else:
        cfg = TrainConfig.load(config_path) if config_path else TrainConfig(epochs=2, seed=seed)
        train_set, test_set = _load_data(data, cfg)
        evaluator = TrainerEvaluator(preset, train_set, test_set, cfg)
        objective = f"test accuracy of {preset} after {cfg.epochs} epochs"

    rng = np.random.default_rng(seed)
    pool = _read_graph_lines(pool_path) if pool_path else ()
    initial = initial_population(pop_size, rng, pool, chosen.ndim, chosen.filter, config.rank_dim, config)

    archive = SearchArchive(out)
    try:
        if not resume:
            archive.reset()
        else:
            previous = archive.runs()
            if not previous.empty and previous["objective"].iloc[-1] != objective:
                echo_warning(
                    f"Resuming a run scored by {previous['objective'].iloc[-1]!r} with {objective!r}; "
                    "archived accuracies are not comparable"
                )
        flags = {
            "preset": preset, "pop": pop_size, "generations": generations, "seed": seed,
            "surrogate": surrogate, "data": data, "eval_budget": eval_budget, "resume": resume,
        }
        archive.record_run(seed, pop_size, generations, objective, flags)
        result = run_search(
            initial, generations, evaluator, seed=seed, pop_size=pop_size, eval_budget=eval_budget,
            jobs=jobs, archive=archive, resume=resume, progress=progress,
        )
        header = header_line("search", flags) + f" objective={objective!r}"
        out = Path(out)
        write_with_header(out / "archive.csv", header, archive.to_frame().to_csv(index=False))
        write_with_header(out / "pareto.jsonl", header, _pareto_lines(pareto_front(archive.individuals())))
    finally:
        archive.close()

    echo_success(f"{result.evaluations} layers evaluated, {len(result.pareto)} on the Pareto front")


def _read_archive_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=["params", "accuracy"])


def nondominated(df: pd.DataFrame) -> pd.DataFrame:
    """Rows no other row beats on both accuracy (higher) and params (lower)."""
    if df.empty:
        return df
    objectives = np.column_stack([df["accuracy"].to_numpy(float), -df["params"].to_numpy(float)])
    front = sorted(fast_nondominated_sort(objectives)[0])
    return df.iloc[front].sort_values(["params", "accuracy"]).reset_index(drop=True)


@cli.command()
@click.option("--archive", "archive_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="TSV path; stdout when omitted.")
@_handle_errors
def pareto(archive_path, out):
    """Extract the nondominated (params, accuracy) points of an archive CSV."""
    front = nondominated(_read_archive_csv(archive_path))
    columns = [c for c in ("params", "accuracy", "canonical_hash") if c in front.columns]
    body = "# " + "\t".join(columns) + "\n" + front[columns].to_csv(sep="\t", index=False, header=False)
    header = header_line("pareto", {"archive": archive_path})
    if out:
        write_with_header(Path(out), header, body)
        echo_info(f"{len(front)} nondominated points written to {out}")
    else:
        click.echo(header)
        click.echo(body, nl=False)


if __name__ == '__main__':
    cli()
