import numpy as np
import pandas as pd
import pytest

from utils.run_writer import RunWriter
from utils.wten import read_wten


def test_dataframe_with_header_comment(tmp_path):
    writer = RunWriter(str(tmp_path))
    assert writer.write_dataframe(pd.DataFrame({"step": [1], "loss": [0.123456789]}), "r.csv", "note")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["# note", "step,loss", "1,0.12345679"]


def test_tensors(tmp_path):
    RunWriter(str(tmp_path)).write_tensors({"w": np.ones((2, 2), dtype=np.float32)}, "t.wten")
    assert read_wten(str(tmp_path / "t.wten"))["w"].shape == (2, 2)


@pytest.mark.parametrize("write", [
    lambda w: w.write_text("x", "blocked"),
    lambda w: w.write_json({"a": 1}, "blocked"),
    lambda w: w.write_tensors({"w": np.zeros(1, dtype=np.float32)}, "blocked"),
])
def test_failed_write_is_raised(tmp_path, capsys, write):
    (tmp_path / "blocked").mkdir()
    with pytest.raises(OSError):
        write(RunWriter(str(tmp_path)))
    assert "❌ Write failed" in capsys.readouterr().out
