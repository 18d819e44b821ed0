
import datetime
from pathlib import Path

import pandas as pd


class HistoryLogger:
    """
    Logs pipeline steps for traceability.

    Entries are append-only; `get_log()` returns them as a DataFrame with the
    columns Timestamp, Action, Details, Value.
    """
    COLUMNS = ["Timestamp", "Action", "Details", "Value"]

    def __init__(self, clock=None):
        self.log = []
        # Injectable so that reproducibility runs can pin timestamps.
        self._clock = clock or (lambda: datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S"))

    def add_entry(self, action: str, details: str, value=None):
        self.log.append({
            "Timestamp": self._clock(),
            "Action": action,
            "Details": details,
            "Value": value,
        })

    def get_log(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=self.COLUMNS)

    def save(self, path) -> Path:
        path = Path(path)
        self.get_log().to_csv(path, index=False)
        return path

    def __len__(self):
        return len(self.log)


def loss_frame(losses, **columns) -> pd.DataFrame:
    """
    Builds the per-step trace table used by every optimization loop.

    Args:
        losses: Per-step loss values.
        **columns: Extra per-step columns of the same length.

    Returns:
        pd.DataFrame: Columns step (1-based), loss, then the extra columns.
    """
    frame = pd.DataFrame({"step": range(1, len(losses) + 1), "loss": list(losses)})
    for name, values in columns.items():
        frame[name] = list(values)
    return frame
