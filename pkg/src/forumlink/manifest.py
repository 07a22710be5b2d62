"""Run manifests: input/output hashes plus the resolved configuration.

Each pipeline subcommand writes manifest.json into its output directory.
A manifest pins everything needed to re-run the step bit-identically in
deterministic mode: tool version, subcommand, resolved config, and SHA-256
digests of inputs and outputs. Output paths are stored relative to the run
directory so a rerun into a fresh directory produces the same manifest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

TOOL_NAME = "forumlink"
TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def write_manifest(
    run_dir,
    command: str,
    config: dict,
    inputs: dict[str, Path | str],
    outputs: dict[str, Path | str],
    unhashed_outputs: dict[str, Path | str] | None = None,
) -> Path:
    """Hash inputs and outputs and write manifest.json into run_dir.

    unhashed_outputs are recorded by path only (files that legitimately
    vary between reruns, such as wall-clock training logs).
    """
    run_dir = Path(run_dir)
    manifest = {
        "tool": TOOL_NAME,
        "tool_version": TOOL_VERSION,
        "command": command,
        "config": config,
        "inputs": {
            role: {"path": str(path), "sha256": sha256_file(path)}
            for role, path in sorted(inputs.items())
        },
        "outputs": {
            role: {"path": _relative(path, run_dir), "sha256": sha256_file(path)}
            for role, path in sorted(outputs.items())
        },
        "unhashed_outputs": {
            role: {"path": _relative(path, run_dir)}
            for role, path in sorted((unhashed_outputs or {}).items())
        },
    }
    out_path = run_dir / MANIFEST_NAME
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return out_path


def _relative(path, run_dir: Path) -> str:
    path = Path(path)
    try:
        return str(path.relative_to(run_dir))
    except ValueError:
        return str(path)


def load_manifest(run_dir) -> dict:
    with open(Path(run_dir) / MANIFEST_NAME, "r", encoding="utf-8") as fh:
        return json.load(fh)


def verify_manifest(run_dir) -> list[str]:
    """Re-hash the manifest's outputs; returns a description per mismatch."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    problems = []
    for role, entry in sorted(manifest.get("outputs", {}).items()):
        path = Path(entry["path"])
        if not path.is_absolute():
            path = run_dir / path
        if not path.exists():
            problems.append(f"{role}: missing file {path}")
            continue
        actual = sha256_file(path)
        if actual != entry["sha256"]:
            problems.append(f"{role}: hash mismatch for {path}")
    return problems
