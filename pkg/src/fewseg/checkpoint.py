"""Checkpoint archive: named parameter tensors plus a JSON header.

The header records the model configuration and a hash of it; loading a
checkpoint against a different configuration is an error, so an archive
can never be silently poured into the wrong architecture.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

HEADER_KEY = "__header__"


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_checkpoint(path: str, state: dict[str, np.ndarray],
                    config: dict) -> None:
    if HEADER_KEY in state:
        raise ValueError(f"parameter name {HEADER_KEY!r} is reserved")
    header = {
        "config": config,
        "config_hash": config_hash(config),
        "names": sorted(state),
        "shapes": {name: list(np.shape(arr)) for name, arr in state.items()},
    }
    encoded = np.frombuffer(json.dumps(header, sort_keys=True).encode(),
                            dtype=np.uint8)
    np.savez(path, **{HEADER_KEY: encoded}, **state)


def load_checkpoint(path: str, expected_config: dict | None = None
                    ) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as archive:
        if HEADER_KEY not in archive:
            raise CheckpointError(f"{path} has no checkpoint header")
        header = json.loads(bytes(archive[HEADER_KEY].tobytes()).decode())
        state = {name: archive[name] for name in archive.files
                 if name != HEADER_KEY}
    if expected_config is not None:
        expected = config_hash(expected_config)
        if expected != header.get("config_hash"):
            raise CheckpointError(
                f"checkpoint config hash {header.get('config_hash')} does not "
                f"match the expected configuration {expected}")
    return state, header


def parameter_count(state: dict[str, np.ndarray]) -> int:
    return int(sum(np.size(arr) for arr in state.values()))
