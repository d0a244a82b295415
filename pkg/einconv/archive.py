"""DuckDB store for GA runs: every evaluated individual and each generation's population."""
import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import pandas as pd

from einconv.graph import EinconvGraph, canonical_hash
from einconv.migrations import make_migrations
from einconv.search import Genome, Individual, archive_rows
from einconv.utils import close_duckdb_conn, execute_query, get_duckdb_conn, get_query_by_name

logger = logging.getLogger(__name__)

ARCHIVE_FILE = "archive.duckdb"


def _genome(row: dict) -> Genome:
    return Genome(EinconvGraph.from_json(row["graph_json"]), int(row["order_seed"]))


def _individual(row: dict, generation: Optional[int] = None) -> Individual:
    return Individual(
        _genome(row),
        accuracy=row["accuracy"],
        params=row["params"],
        flops=row["flops"],
        generation=row["generation"] if generation is None else generation,
        failed=bool(row["failed"]),
    )


class SearchArchive:
    """Persists a search so it can be resumed or exported."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.db_path = self.directory / ARCHIVE_FILE
        make_migrations(self.db_path)

    @property
    def conn(self):
        return get_duckdb_conn(self.db_path)

    def close(self) -> None:
        close_duckdb_conn(self.db_path)

    def reset(self) -> None:
        """Forget everything recorded so far, earlier run records included."""
        self.truncate_after(-1)
        self.conn.execute(get_query_by_name("delete_search_runs.sql"))

    def truncate_after(self, generation: int) -> None:
        for name in ("delete_individuals_after.sql", "delete_population_after.sql"):
            self.conn.execute(get_query_by_name(name), {"generation": generation})

    def record_individuals(self, individuals: Sequence[Individual]) -> None:
        if not individuals:
            return
        df = pd.DataFrame([
            {
                "eval_key": ind.genome.eval_key,
                "canonical_hash": canonical_hash(ind.genome.graph),
                "generation": ind.generation,
                "accuracy": ind.accuracy,
                "params": ind.params,
                "flops": ind.flops,
                "failed": ind.failed,
                "order_seed": ind.genome.order_seed,
                "graph_json": ind.genome.graph.to_json(),
                "n_rank_indices": len(ind.genome.graph.rank_labels),
            }
            for ind in individuals
        ])
        self.conn.register("_individuals", df)
        self.conn.execute(get_query_by_name("insert_individual.sql"))
        self.conn.unregister("_individuals")
        logger.debug("Archived %d individuals", len(df))

    def record_population(self, generation: int, population: Sequence[Individual]) -> None:
        self.conn.execute(get_query_by_name("delete_population_after.sql"), {"generation": generation - 1})
        df = pd.DataFrame([
            {
                "generation": generation,
                "position": n,
                "eval_key": ind.genome.eval_key,
                "order_seed": ind.genome.order_seed,
                "graph_json": ind.genome.graph.to_json(),
            }
            for n, ind in enumerate(population)
        ])
        if df.empty:
            return
        self.conn.register("_population", df)
        self.conn.execute(get_query_by_name("insert_population.sql"))
        self.conn.unregister("_population")

    def individuals(self) -> list[Individual]:
        rows = execute_query(self.conn, get_query_by_name("get_individuals.sql"))
        return [_individual(row) for row in rows]

    def latest_population(self) -> Optional[tuple[int, list[Individual]]]:
        rows = execute_query(self.conn, get_query_by_name("get_latest_population.sql"))
        if not rows:
            return None
        generation = int(rows[0]["generation"])
        population = [_individual(row, generation) for row in rows]
        return generation, population

    def record_run(self, seed: int, pop_size: int, generations: int, objective: str, details: dict) -> None:
        self.conn.execute(
            get_query_by_name("insert_search_run.sql"),
            {
                "seed": seed,
                "pop_size": pop_size,
                "generations": generations,
                "objective": objective,
                "details": json.dumps(details, sort_keys=True),
            },
        )

    def runs(self) -> pd.DataFrame:
        """Every recorded invocation, oldest first, with ``details`` decoded."""
        rows = execute_query(self.conn, get_query_by_name("get_search_runs.sql"))
        for row in rows:
            row["details"] = json.loads(row["details"]) if row["details"] else {}
        return pd.DataFrame(rows, columns=["timepoint", "seed", "pop_size", "generations", "objective", "details"])

    def to_frame(self) -> pd.DataFrame:
        """One row per evaluated individual, front ranks computed over the whole archive."""
        rows = execute_query(self.conn, get_query_by_name("get_individuals.sql"))
        columns = ["canonical_hash", "n_rank_indices", "params", "flops", "accuracy", "generation", "front_rank"]
        frame = pd.DataFrame(archive_rows([_individual(row) for row in rows]), columns=columns)
        frame["n_rank_indices"] = [int(row["n_rank_indices"]) for row in rows]
        return frame
