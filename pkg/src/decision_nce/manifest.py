"""Run manifests: what a subcommand was asked to do and which inputs it read."""

import dataclasses
import hashlib
import logging
from pathlib import Path
from typing import Any

from decision_nce.reports import write_json

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def blob_hash(path: str | Path) -> str:
    """Content hash computed the way git hashes a blob."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict[str, Any]
    seed: int
    inputs: dict[str, str] = dataclasses.field(default_factory=dict)
    outputs: list[str] = dataclasses.field(default_factory=list)
    results: dict[str, Any] = dataclasses.field(default_factory=dict)

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = blob_hash(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(str(path))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def sibling_path(output: str | Path, suffix: str) -> Path:
    """`output` with `suffix` appended to its file name."""
    output = Path(output)
    return output.with_name(output.name + suffix)


def manifest_path(output: str | Path) -> Path:
    return sibling_path(output, MANIFEST_SUFFIX)


def is_manifest(data: dict[str, Any]) -> bool:
    """True for a mapping read back from a manifest file rather than a plain config."""
    return {"subcommand", "config", "seed"} <= data.keys() and isinstance(data["config"], dict)


def write_manifest(manifest: RunManifest, output: str | Path) -> Path:
    """Write the manifest beside `output` and return its path."""
    path = manifest_path(output)
    write_json(path, manifest.to_dict())
    return path
