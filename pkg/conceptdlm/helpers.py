import json
from hashlib import md5
from itertools import count
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd


def add_run_info_to_df(
    data: pd.DataFrame,
    run_id: str,
    seed: int,
    dimensions: Dict[str, Any],
    wall_time: Optional[float] = None,
) -> pd.DataFrame:
    """
    Add general run info to the front of a dataframe.

    Args:
        data: Dataframe to add the info to.
        run_id: Run ID.
        seed: Seed of the run.
        dimensions: Dictionary with the settings that distinguish the run.
        wall_time: Wall time of the run in seconds.
    """
    index = count()
    data.insert(next(index), "run_id", run_id)
    data.insert(next(index), "seed", seed)
    data.insert(next(index), "wall_time", wall_time)

    # Add info about dimensions
    for dimension in sorted(dimensions.keys()):
        if dimension != "seed":
            data.insert(next(index), dimension, dimensions[dimension])
    return data


def stable_hash(parameters: Dict[str, Any]) -> str:
    """md5 of the sorted JSON dump, stable across interpreter runs."""
    # See https://stackoverflow.com/questions/5884066/hashing-a-dictionary/22003440#22003440
    return md5(json.dumps(parameters, sort_keys=True).encode("utf-8")).hexdigest()


def read_counter(output_dir: Path, increment: bool = True) -> int:
    """
    Read (and by default advance) the run counter of an output directory.

    Args:
        output_dir: Directory holding ``counter.txt``.
        increment: Whether to increment the counter after reading.

    Returns:
        The current value of the counter.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    counter_filepath = output_dir / "counter.txt"
    if counter_filepath.is_file():
        with open(counter_filepath, "r") as fp:
            run_no = int(fp.read())
    else:
        run_no = 0
    if increment:
        run_no += 1
    with open(counter_filepath, "w") as fp:
        fp.write(str(run_no))
    return run_no
