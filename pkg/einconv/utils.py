import functools
import json
import os
import sys
from pathlib import Path
from threading import Lock
from typing import Optional, Union

import click
import duckdb

from einconv import QUERY_PATH, __VERSION__

_db_conns: dict[str, duckdb.DuckDBPyConnection] = {}
_lock = Lock()


@functools.cache
def get_data_dir() -> Path:
    """
    Get the appropriate user data directory for each platform
    following OS conventions
    """
    app_name = "einconv"

    if custom_path := os.getenv("EINCONV_CUSTOM_PATH"):
        path = Path(custom_path).expanduser()
    elif sys.platform == "win32":
        base = os.environ.get("LOCALAPPDATA", os.path.expanduser("~\\AppData\\Local"))
        path = Path(base) / app_name
    elif sys.platform == "darwin":
        path = Path.home() / "Library" / "Application Support" / app_name
    else:
        xdg_data_home = os.environ.get("XDG_DATA_HOME", os.path.expanduser("~/.local/share"))
        path = Path(xdg_data_home) / app_name

    path.mkdir(parents=True, exist_ok=True)
    return path


def get_duckdb_conn(db_path: Union[str, Path]) -> duckdb.DuckDBPyConnection:
    key = str(Path(db_path).resolve())
    with _lock:
        conn = _db_conns.get(key)
        if conn is not None:
            try:
                # Test if connection is still valid
                conn.execute("SELECT 1")
                return conn
            except duckdb.Error:
                pass

        conn = duckdb.connect(key)
        _db_conns[key] = conn
        return conn


def close_duckdb_conn(db_path: Union[str, Path]) -> None:
    key = str(Path(db_path).resolve())
    with _lock:
        if conn := _db_conns.pop(key, None):
            conn.close()


def execute_query(
    db_conn: duckdb.DuckDBPyConnection,
    query: str,
    query_params: Optional[dict] = None,
) -> list[dict]:
    q = db_conn.execute(query, query_params if query_params is not None else {})
    rows = q.fetchall()
    assert q.description
    column_names = [desc[0] for desc in q.description]
    return [dict(zip(column_names, row)) for row in rows]


def get_query_by_name(file_name: str) -> str:
    return QUERY_PATH.joinpath(file_name).read_text()


def header_line(command: str, flags: dict) -> str:
    """The comment line every output file starts with."""
    flag_str = " ".join(f"--{k.replace('_', '-')}={v}" for k, v in sorted(flags.items()))
    return f"# einconv {__VERSION__} {command} {flag_str}".rstrip()


def write_with_header(path: Path, header: str, body: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        f.write(body)


def echo_err(message):
    click.secho(f'\n❌  {message}\n', fg='red', bold=True, err=True)


def echo_failure_json(error: Exception, exit_code: int):
    click.echo(
        json.dumps({"error": type(error).__name__, "message": str(error), "exit_code": exit_code}),
        err=True,
    )


def echo_success(message):
    click.secho(f'\n✅  {message}', fg='green', bold=True)


def echo_warning(message):
    click.secho(f'\n⚠️  {message}', fg='yellow')


def echo_info(message):
    click.secho(f'{message}', fg='blue')
