"""Reproducibility manifest written alongside every CLI run."""

import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)

    def __post_init__(self):
        import numpy
        import pandas

        from . import __version__
        self.versions.setdefault("practivar", __version__)
        self.versions.setdefault("numpy", numpy.__version__)
        self.versions.setdefault("pandas", pandas.__version__)
        self.versions.setdefault("python", platform.python_version())
        self._stage_start = None

    def add_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path):
        self.outputs[str(Path(path).name)] = sha256_file(path)

    def time_stage(self, name):
        return _StageTimer(self, name)

    def write(self, out_dir, name="manifest.json"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_seconds": self.timings,
            "versions": self.versions,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        path = out_dir / name
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        return path


class _StageTimer:
    def __init__(self, manifest, name):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings[self.name] = round(time.perf_counter() - self.start, 4)
        return False
