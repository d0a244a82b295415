from pathlib import Path

__VERSION__ = "0.1.0"

QUERY_PATH = Path(__file__).parent.joinpath("queries")
