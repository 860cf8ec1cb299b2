import json
import logging
import os
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

logger = logging.getLogger("qsd-scenarios")

PACKAGE_NAME = "qsd-toolkit"
PACKAGE_VERSION = "0.1.0"

# Load environment variables
load_dotenv()


def resolve_output_dir(scenario_name: str, out: Optional[str] = None) -> Path:
    """--out beats QSD_OUTPUT_DIR, which beats ./output/<scenario name>"""
    if out:
        return Path(out)
    base = os.getenv("QSD_OUTPUT_DIR")
    if base:
        return Path(base) / scenario_name
    return Path("./output") / scenario_name


def library_versions() -> Dict[str, str]:
    versions = {PACKAGE_NAME: PACKAGE_VERSION, "python": platform.python_version()}
    for package in ("numpy", "scipy", "pandas", "pydantic", "PyYAML"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _plain(value: Any) -> Any:
    """JSON-friendly copy of numpy scalars, arrays and nested containers"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


class ArtifactWriter:
    """Writes CSV artifacts and the run manifest into one output directory"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: List[str] = []

    def _prepare(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        """Comma-separated, '.' decimals, header row, LF line endings"""
        self._prepare()
        path = self.out_dir / f"{name}.csv"
        frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
        self.files.append(path.name)
        logger.debug(f"Wrote {path}")
        return path

    def write_manifest(self, manifest: Dict[str, Any]) -> Path:
        self._prepare()
        path = self.out_dir / "manifest.json"
        body = dict(manifest)
        body["files"] = sorted(self.files)
        body["versions"] = library_versions()
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(_plain(body), f, indent=2, sort_keys=True)
            f.write("\n")
        return path
