"""Single-file checkpoint container.

A checkpoint is an ``.npz`` archive holding a versioned, self-describing JSON header
(``__header__``) next to one array per named weight. Generator, encoder, classifier
and feature-extractor checkpoints all use it.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from latentaug.exception import CheckpointError
from latentaug.utils.hashing import state_hash

FORMAT_NAME = "latentaug-checkpoint"
FORMAT_VERSION = 1
HEADER_KEY = "__header__"


def module_state(module):
    """Copy a module's ``state_dict`` into numpy arrays."""

    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_state(module, state):

    try:
        module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()}, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"weights do not fit {type(module).__name__}: {e}") from e
    return module


@dataclass
class Checkpoint:

    kind: str
    config: dict
    state: dict
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def header(self):

        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "seed": int(self.seed),
            "meta": self.meta,
        }

    def state_hash(self):

        return state_hash(self.state)

    def save(self, path):

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        if HEADER_KEY in self.state:
            raise CheckpointError(f"weight name {HEADER_KEY!r} is reserved")

        header = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        arrays = {HEADER_KEY: np.frombuffer(header, dtype=np.uint8)}
        arrays.update(self.state)

        # a file handle keeps numpy from appending ".npz"
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

        return path

    @classmethod
    def load(cls, path, kind=None):

        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")

        try:
            with np.load(path, allow_pickle=False) as data:
                header = json.loads(bytes(data[HEADER_KEY]).decode("utf-8"))
                state = {k: data[k] for k in data.files if k != HEADER_KEY}
        except (KeyError, ValueError, OSError) as e:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} file ({e})") from e

        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
        if kind is not None and header.get("kind") != kind:
            raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")

        return cls(
            kind=header["kind"],
            config=header["config"],
            state=state,
            seed=header.get("seed", 0),
            meta=header.get("meta", {}),
        )
