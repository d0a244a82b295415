import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import duckdb

from einconv.utils import get_duckdb_conn

logger = logging.getLogger(__name__)


@dataclass
class TableMigration:
    version: int
    table_name: str
    sql: str


_MIGRATIONS = [
    TableMigration(
        version=1,
        table_name="individual",
        sql="""
            CREATE TABLE individual
            (
                eval_key        VARCHAR,
                canonical_hash  VARCHAR,
                generation      INTEGER,
                accuracy        DOUBLE,
                params          BIGINT,
                flops           BIGINT,
                failed          BOOLEAN,
                order_seed      BIGINT,
                graph_json      VARCHAR
            );
            """
    ),
    TableMigration(
        version=1,
        table_name="population",
        sql="""
            CREATE TABLE population
            (
                generation      INTEGER,
                position        INTEGER,
                eval_key        VARCHAR,
                order_seed      BIGINT,
                graph_json      VARCHAR
            );
            """
    ),
    TableMigration(
        version=1,
        table_name="search_run",
        sql="""
            CREATE TABLE search_run
            (
                timepoint       TIMESTAMP_NS,
                seed            BIGINT,
                pop_size        INTEGER,
                generations     INTEGER,
                objective       VARCHAR,
                details         VARCHAR
            );
            """
    ),
    TableMigration(
        version=2,
        table_name="individual",
        sql="""
            ALTER TABLE individual ADD COLUMN n_rank_indices INTEGER DEFAULT 0;
            """
    ),
]


def apply_migration(migration: TableMigration, cursor: duckdb.DuckDBPyConnection) -> None:
    """Apply a single migration to the database."""
    logger.info("Applying migration - version: %d, table: %s", migration.version, migration.table_name)

    try:
        cursor.execute(migration.sql)

        cursor.execute("""
                       INSERT INTO schema_versions (table_name, version)
                       VALUES (?, ?) ON CONFLICT(table_name) DO
                       UPDATE SET version = EXCLUDED.version
                       """, (migration.table_name, migration.version))

    except duckdb.Error as e:
        raise RuntimeError(
            f"Failed to apply migration {migration.version} to {migration.table_name}: {e}"
        )


def make_migrations(db_path: Union[str, Path]):
    db_conn = get_duckdb_conn(db_path)

    try:
        db_conn.execute("""
        CREATE TABLE IF NOT EXISTS schema_versions
        (
          table_name VARCHAR PRIMARY KEY,
          version INTEGER
        );
        """)

        table_migration_map: Dict[str, List[TableMigration]] = defaultdict(list)
        for migration in _MIGRATIONS:
            table_migration_map[migration.table_name].append(migration)

        db_conn.begin()
        try:
            for table_name, table_migrations in table_migration_map.items():
                table_migrations.sort(key=lambda m: m.version)

                db_conn.execute("""
                               SELECT COALESCE(MAX(version), 0)
                               FROM schema_versions
                               WHERE table_name = ?
                               """, (table_name,))

                result = db_conn.fetchone()
                current_version = result[0] if result else 0

                for migration in table_migrations:
                    if migration.version > current_version:
                        apply_migration(migration, db_conn)
        except BaseException:
            db_conn.rollback()
            raise
        db_conn.commit()

    except duckdb.Error as e:
        raise RuntimeError(f"Failed to apply migrations: {e}")
