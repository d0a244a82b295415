"""
Entry point for ``python -m einconv``.
"""
from einconv.cli import cli

if __name__ == "__main__":
    cli()
