"""File utility functions: checksums, table/JSON writers, raw draw export, seeds."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from config.config import settings

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DRAWS_FILENAME = "draws.bin"
DRAWS_INDEX_FILENAME = "draws_index.json"


def file_checksum(path: PathLike) -> str:
    """SHA-256 of a file's bytes, as ``sha256:<hex>``."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return f"sha256:{digest.hexdigest()}"


def derive_seed(seed: int, *keys: Any) -> int:
    """Deterministic child seed for a named sub-task (replication, masked study, structure).

    Depends only on the parent seed and the keys, never on scheduling.
    """
    text = "|".join([str(seed), *(str(key) for key in keys)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def ensure_dir(path: PathLike) -> Path:
    directory = Path(path)
    os.makedirs(directory, exist_ok=True)
    return directory


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write a table with the configured float rendering and LF line endings."""
    path = Path(path)
    frame.to_csv(path, index=False, float_format=settings.float_format, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_json(payload: Any, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def write_draws(chains: List[Dict[str, np.ndarray]], directory: PathLike) -> Path:
    """Export raw draws as little-endian float64, C order, chains concatenated.

    ``chains[c][name]`` is a 1-D or 2-D array of retained draws. The index file
    lists, per chain and block, the byte offset, shape and name.
    """
    directory = ensure_dir(directory)
    entries = []
    offset = 0
    with open(directory / DRAWS_FILENAME, "wb") as f:
        for chain_index, blocks in enumerate(chains):
            for name, values in blocks.items():
                array = np.ascontiguousarray(values, dtype="<f8")
                f.write(array.tobytes(order="C"))
                entries.append(
                    {"chain": chain_index, "name": name, "offset": offset, "shape": list(array.shape)}
                )
                offset += array.nbytes
    write_json(
        {"dtype": "<f8", "order": "C", "total_bytes": offset, "blocks": entries},
        directory / DRAWS_INDEX_FILENAME,
    )
    return directory / DRAWS_FILENAME


def read_draws(directory: PathLike) -> List[Dict[str, np.ndarray]]:
    """Inverse of ``write_draws``."""
    directory = Path(directory)
    with open(directory / DRAWS_INDEX_FILENAME, encoding="utf-8") as f:
        index = json.load(f)
    raw = (directory / DRAWS_FILENAME).read_bytes()
    chains: List[Dict[str, np.ndarray]] = []
    for entry in index["blocks"]:
        while len(chains) <= entry["chain"]:
            chains.append({})
        count = int(np.prod(entry["shape"]))
        array = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        chains[entry["chain"]][entry["name"]] = array.reshape(entry["shape"])
    return chains
