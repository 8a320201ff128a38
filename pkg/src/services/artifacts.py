"""Artifact storage for pipeline runs: output guarding, input lookup and manifests."""

import logging
import platform
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy
import pydantic
import sklearn
import torch

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models.reports import RunManifest
from utils.config import RunConfig
from utils.errors import ArtifactExistsError, MissingArtifactError
from utils.io_utils import ensure_dir, sha256_file, sha256_json, write_json

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "torch": torch.__version__,
        "scikit-learn": sklearn.__version__,
        "pydantic": pydantic.VERSION,
    }


def checksum_path(path: Path) -> str:
    """sha256 of a file, or of the sorted (name, sha256) list of a directory's files."""
    path = Path(path)
    if path.is_dir():
        entries = [
            [str(child.relative_to(path)), sha256_file(child)]
            for child in sorted(path.rglob("*"))
            if child.is_file() and not child.name.startswith(".")
        ]
        return sha256_json(entries)
    return sha256_file(path)


class ArtifactManager:
    """Manages one run directory. Outputs are never overwritten unless force is set."""

    def __init__(self, root: Path, force: bool = False):
        self.root = Path(root)
        self.force = force

    def stage_dir(self, *parts: str) -> Path:
        return ensure_dir(self.root.joinpath(*parts))

    def guard_outputs(self, paths: Iterable[Path]) -> None:
        """Refuse to start a command whose outputs already exist, unless forced."""
        existing = [str(p) for p in paths if Path(p).exists()]
        if existing and not self.force:
            raise ArtifactExistsError(
                "Outputs already exist; rerun with --force to replace them",
                details={"existing": existing},
            )
        for path in existing:
            logger.info("Replacing existing artifact %s", path)

    def require(self, path: Path, what: str, produced_by: Optional[str] = None) -> Path:
        """Return path if it exists, else raise MissingArtifactError naming the producing command."""
        path = Path(path)
        if not path.exists():
            hint = f"; run `{produced_by}` first" if produced_by else ""
            raise MissingArtifactError(
                f"Missing {what}: {path}{hint}",
                details={"path": str(path), "produced_by": produced_by},
            )
        return path

    def write_manifest(
        self,
        directory: Path,
        command: str,
        config: RunConfig,
        inputs: Dict[str, Path],
        outputs: List[Path],
        summary: Optional[Dict[str, Any]] = None,
        name: str = MANIFEST_FILE,
    ) -> RunManifest:
        """Record config hash, seed, input checksums and library versions next to the outputs."""
        manifest = RunManifest(
            command=command,
            config_hash=sha256_json(config.to_dict()),
            seed=config.seed,
            inputs={label: checksum_path(path) for label, path in inputs.items()},
            outputs=[self.relative(path) for path in outputs],
            versions=library_versions(),
            summary=summary or {},
        )
        write_json(Path(directory) / name, manifest.model_dump(mode="json"))
        return manifest

    def relative(self, path: Path) -> str:
        path = Path(path)
        try:
            return str(path.relative_to(self.root))
        except ValueError:
            return str(path)

    def get_storage_stats(self) -> Dict[str, Any]:
        """File count and size of the run directory."""
        files = [p for p in self.root.rglob("*") if p.is_file()] if self.root.exists() else []
        total_bytes = sum(p.stat().st_size for p in files)
        return {
            "root": str(self.root),
            "total_files": len(files),
            "total_bytes": total_bytes,
            "total_mb": round(total_bytes / (1024 * 1024), 2),
        }
