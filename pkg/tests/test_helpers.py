import logging

import pandas as pd
import pytest

from conceptdlm.helpers import add_run_info_to_df, read_counter, stable_hash
from conceptdlm.logger import logger, set_verbosity
from conceptdlm.parallel import parallel_map


class TestHelpers:
    def test_add_run_info(self):
        df = add_run_info_to_df(
            pd.DataFrame({"accuracy": [0.5]}),
            run_id="abc",
            seed=3,
            dimensions={"seed": 3, "align": "on"},
            wall_time=1.5,
        )
        assert list(df.columns) == ["run_id", "seed", "wall_time", "align", "accuracy"]
        assert df.iloc[0].tolist() == ["abc", 3, 1.5, "on", 0.5]

    def test_stable_hash(self):
        assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
        assert stable_hash({"a": 1}) != stable_hash({"a": 2})

    def test_read_counter(self, temp_dir):
        assert read_counter(temp_dir) == 1
        assert read_counter(temp_dir) == 2
        assert read_counter(temp_dir, increment=False) == 2
        assert (temp_dir / "counter.txt").read_text() == "2"


class TestParallelMap:
    def test_serial_order(self):
        assert parallel_map(lambda x: x * x, [3, 1, 2]) == [9, 1, 4]

    def test_threads_keep_order(self):
        assert parallel_map(lambda x: x + 1, list(range(20)), n_jobs=2) == list(range(1, 21))

    def test_serial_exceptions_surface(self):
        def fail(x):
            raise KeyError(x)

        with pytest.raises(KeyError):
            parallel_map(fail, [1])


class TestLogger:
    def test_verbosity(self):
        set_verbosity(True)
        assert logger.level == logging.DEBUG
        set_verbosity(False)
        assert logger.level == logging.INFO
