import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing as t
from pathlib import Path

import dotenv

REPO_ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = REPO_ROOT / "configs" / "main.toml"


class Config:
    """Global defaults loaded from configs/main.toml."""
    def __init__(self, path: t.Optional[str] = None):
        dotenv.load_dotenv()
        if path is None:
            path = os.environ.get("PATHFLOW_CONFIG", str(DEFAULT_CONFIG))
        self.path = Path(path)
        with open(self.path, "rb") as f:
            self.values = tomllib.load(f)
        self.verbose = self.values.get("verbose", False)

    def section(self, name: str) -> t.Dict[str, t.Any]:
        return self.values.get(name, {})

    def get(self, section: str, key: str, default: t.Any = None) -> t.Any:
        return self.section(section).get(key, default)

    @property
    def working_stage(self) -> Path:
        stage = Path(self.values.get("working_stage", "./working_stage"))
        if not stage.is_absolute():
            stage = REPO_ROOT / stage
        return stage

    @property
    def threads(self) -> int:
        """Worker cap. PATHFLOW_THREADS wins over the config file."""
        env = os.environ.get("PATHFLOW_THREADS")
        if env is not None and env.strip() != "":
            return max(1, int(env))
        return max(1, int(self.values.get("threads", 1)))


CONFIG = Config()
