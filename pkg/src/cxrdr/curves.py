"""Per-epoch training/validation series shared by the trainer and the harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SERIES = ("train_acc", "val_acc", "train_loss", "val_loss")


@dataclass
class TrainingCurve:
    run_id: str
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        lengths = {len(getattr(self, s)) for s in SERIES}
        if len(lengths) > 1:
            raise ValueError(f"series lengths differ: {lengths}")
        for s in ("train_acc", "val_acc"):
            if any(not 0.0 <= v <= 1.0 for v in getattr(self, s)):
                raise ValueError(f"{s} outside [0, 1]")
        for s in ("train_loss", "val_loss"):
            if any(v < 0 for v in getattr(self, s)):
                raise ValueError(f"{s} negative")

    @property
    def epochs(self) -> int:
        return len(self.train_acc)

    def __len__(self):
        return self.epochs

    def append(self, train_acc, val_acc, train_loss, val_loss):
        self.train_acc.append(float(train_acc))
        self.val_acc.append(float(val_acc))
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))

    def as_array(self) -> np.ndarray:
        """(epochs, 4) array in SERIES column order."""
        return np.array([getattr(self, s) for s in SERIES], dtype=np.float64).T.reshape(-1, 4)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, **{s: list(getattr(self, s)) for s in SERIES}}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingCurve":
        return cls(data["run_id"], *[list(map(float, data[s])) for s in SERIES])

    def to_csv(self) -> str:
        lines = ["epoch," + ",".join(SERIES)]
        for e in range(self.epochs):
            lines.append(f"{e}," + ",".join(repr(getattr(self, s)[e]) for s in SERIES))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, run_id: str = "run") -> "TrainingCurve":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        cols = list(zip(*rows)) if rows else [()] * 5
        return cls(run_id, *[list(map(float, c)) for c in cols[1:5]])
