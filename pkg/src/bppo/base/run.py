from dataclasses import dataclass, field
from datetime import datetime
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union
from bppo.base.exceptions import ConfigurationException
from bppo.base.io import ARTIFACT_VERSION, read_json, write_json

MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"
SUMMARY_FILE = "summary.json"
ABORT_FILE = "abort_dump.json"
FINAL_CHECKPOINT = "final.ckpt"
CHECKPOINT_DIR = "checkpoints"


def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Identity of one invocation, written once into its run directory
    before any work is done.

    Attributes:
        subcommand:         CLI subcommand which created the directory.
        seed:               The single seed all randomness flows from.
        config:             Fully resolved config.
        artifact_version:   Version of the file formats in the directory.
        started_at:         Local start time (ISO 8601).
    """

    subcommand: str
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    artifact_version: int = ARTIFACT_VERSION
    started_at: str = field(default_factory=_now)

    def to_dict(self) -> dict:
        return dict(
            subcommand=self.subcommand,
            seed=self.seed,
            config=self.config,
            artifact_version=self.artifact_version,
            started_at=self.started_at,
        )

    @classmethod
    def read(cls, run_dir: Union[str, Path]) -> "RunManifest":
        values = read_json(Path(run_dir) / MANIFEST_FILE)
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationException(f"Invalid manifest in {run_dir} ({str(e)})")


def default_run_dir(seed: int, root: Union[str, Path] = "runs") -> Path:
    """
    runs/<YYYYmmdd-HHMMSS-ffffff>-seed<seed>, with a counter before the
    seed when that name is already taken.
    """

    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = Path(root) / f"{stamp}-seed{seed}"

    n = 1
    while run_dir.exists():
        n += 1
        run_dir = Path(root) / f"{stamp}-{n}-seed{seed}"

    return run_dir


def open_run_dir(
    run_dir: Optional[Union[str, Path]],
    manifest: RunManifest
) -> Path:
    """
    Create the run directory and write its manifest and config echo.

    A directory which already holds a manifest belongs to another run
    and is refused.
    """

    if run_dir is None:
        run_dir = default_run_dir(manifest.seed)

    run_dir = Path(run_dir)

    if (run_dir / MANIFEST_FILE).exists():
        raise ConfigurationException(f"Run directory already holds a run: {run_dir}")

    run_dir.mkdir(parents=True, exist_ok=True)
    logging.info(f"Run directory: {run_dir}")

    write_json(run_dir / MANIFEST_FILE, manifest.to_dict())
    write_json(run_dir / CONFIG_FILE, manifest.config)

    return run_dir


def checkpoint_path(run_dir: Union[str, Path], step: int) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"step_{step:06d}.ckpt"
