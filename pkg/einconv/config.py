import configparser
import os
from dataclasses import dataclass, field

from einconv.utils import get_data_dir

_CONFIG_PATH = get_data_dir().joinpath("config.ini")

OPTIMIZERS = ("sgd", "momentum-sgd", "adam")


def _default_jobs() -> int:
    return os.cpu_count() or 1


@dataclass
class Config:
    jobs: int = field(default_factory=_default_jobs)
    # Enumeration aborts instead of truncating past this many candidate vertex sets
    candidate_cap: int = 10**7
    rank_dim: int = 2
    # Geometry given to enumerated graphs, only used for param/flop columns
    enum_spatial: int = 8
    enum_channels: int = 4
    default_optimizer: str = "adam"

    def __post_init__(self):
        if self.default_optimizer not in OPTIMIZERS:
            raise ValueError(f"Invalid optimizer: {self.default_optimizer}")
        if self.jobs < 1:
            self.jobs = 1

    @classmethod
    def load(cls) -> "Config":
        """Load configuration from file."""
        if not _CONFIG_PATH.exists():
            raise FileNotFoundError(f"Config file not found at {_CONFIG_PATH}")

        parser = configparser.ConfigParser()
        parser.read(_CONFIG_PATH)
        return cls(
            jobs=parser.getint('DEFAULT', 'jobs', fallback=_default_jobs()),
            candidate_cap=parser.getint('DEFAULT', 'candidate_cap', fallback=10**7),
            rank_dim=parser.getint('DEFAULT', 'rank_dim', fallback=2),
            enum_spatial=parser.getint('DEFAULT', 'enum_spatial', fallback=8),
            enum_channels=parser.getint('DEFAULT', 'enum_channels', fallback=4),
            default_optimizer=parser.get('DEFAULT', 'default_optimizer', fallback="adam"),
        )

    @classmethod
    def load_or_default(cls) -> "Config":
        try:
            return cls.load()
        except FileNotFoundError:
            return cls()

    def save(self):
        """Save configuration to file."""
        parser = configparser.ConfigParser()
        parser['DEFAULT'] = {
            'jobs': str(self.jobs),
            'candidate_cap': str(self.candidate_cap),
            'rank_dim': str(self.rank_dim),
            'enum_spatial': str(self.enum_spatial),
            'enum_channels': str(self.enum_channels),
            'default_optimizer': self.default_optimizer,
        }

        with open(_CONFIG_PATH, 'w') as f:
            parser.write(f)
