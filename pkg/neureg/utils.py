import hashlib
import json
import logging
import os
import uuid
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from neureg.config import DomainSpec


def load_domain_specs(
    path: str = "./configuration/domains",
    name_filter: list[str] | None = None,
) -> list[DomainSpec]:
    """Load and validate domain specifications from JSON files in a directory.

    Files that fail validation are skipped and an error is logged.

    Args:
        path: Directory containing one JSON file per domain.
        name_filter: Optional list of exact domain names to keep, in the
            order given. Pass None to load every domain, sorted by name.

    Returns:
        List of validated DomainSpec objects.

    Raises:
        FileNotFoundError: If *path* does not exist.
    """
    specs: dict[str, DomainSpec] = {}
    for filename in sorted(os.listdir(path)):
        if not filename.endswith(".json"):
            continue
        fpath = os.path.join(path, filename)
        with open(fpath, "r") as file:
            data = json.load(file)
        try:
            spec = DomainSpec(**data)
        except ValidationError as e:
            logging.error(f"Invalid domain config in {fpath}: {e}")
            continue
        logging.debug(f"Loaded domain {spec.name} from {fpath}")
        specs[spec.name] = spec

    if name_filter is None:
        return [specs[name] for name in sorted(specs)]
    logging.info(f"Domain filter applied: {name_filter}")
    missing = [n for n in name_filter if n not in specs]
    if missing:
        logging.warning(f"Domains not found in {path}: {missing}")
    return [specs[n] for n in name_filter if n in specs]


def persist_metric(
    name: str,
    columns: list[str],
    df: pd.DataFrame,
    output_path: str = "./output/metrics",
) -> str:
    """Save a subset of DataFrame columns to a uniquely named CSV file.

    Args:
        name: Metric label used as the filename prefix.
        columns: Column names to include.
        df: Source DataFrame.
        output_path: Directory where the CSV will be written.

    Returns:
        Path of the written file.
    """
    if not os.path.exists(output_path):
        os.makedirs(output_path)

    file_path = os.path.join(output_path, f"{name}_{uuid.uuid1()}.csv")
    df = df[columns].reset_index(drop=True)
    df.to_csv(file_path, index=False)
    logging.info(f"Metric {name} saved to {file_path}")
    return file_path


def sha256_file(path: str | Path) -> str:
    """Return the SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
