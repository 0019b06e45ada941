import json
import os
from typing import Any, Callable, Dict, Mapping, TextIO

import numpy as np
import pandas as pd

from utils.wten import write_wten


class RunWriter:
    """Owns one run directory and writes every artifact a run produces.

    A failed write prints the ❌ line and re-raises, so the command that asked
    for the artifact can map it to a non-zero exit code.
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise PermissionError(f"output directory is not writable: {out_dir}")

    def path(self, filename: str) -> str:
        return os.path.join(self.out_dir, filename)

    def _write(self, filename: str, write: Callable[[str], None]) -> bool:
        target = self.path(filename)
        try:
            write(target)
        except OSError as e:
            print(f"❌ Write failed: {e}")
            raise
        print(f"✅ Wrote {target}")
        return True

    def _write_file(self, filename: str, body: Callable[[TextIO], None], newline=None) -> bool:
        def write(target):
            with open(target, "w", encoding="utf-8", newline=newline) as f:
                body(f)

        return self._write(filename, write)

    def write_json(self, data: Dict[Any, Any], filename: str) -> bool:
        """Write a JSON sidecar with stable key order"""
        return self._write_file(filename, lambda f: f.write(json.dumps(data, indent=2, sort_keys=True)))

    def write_dataframe(self, df: pd.DataFrame, filename: str, header_comment: str = "") -> bool:
        """Write a DataFrame as CSV; an optional '#' comment line goes first"""
        def body(f):
            if header_comment:
                f.write(f"# {header_comment}\n")
            df.to_csv(f, index=False, float_format="%.8g")

        return self._write_file(filename, body, newline="")

    def write_text(self, text: str, filename: str) -> bool:
        return self._write_file(filename, lambda f: f.write(text))

    def write_tensors(self, tensors: Mapping[str, np.ndarray], filename: str) -> bool:
        return self._write(filename, lambda target: write_wten(target, tensors))
