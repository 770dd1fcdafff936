"""CSV and aligned-markdown writers for histories, reports and attention matrices."""

import csv
import io
from collections.abc import Sequence
from pathlib import Path

import numpy as np

Cell = str | int | float


def _format(cell: Cell) -> str:
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def to_csv(header: Sequence[str], rows: Sequence[Sequence[Cell]]) -> str:
    """Render rows as CSV text with a header line."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([_format(c) for c in row] for row in rows)
    return buffer.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence[Cell]]) -> None:
    """Write rows as a CSV file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(header, rows), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV file written by `write_csv`."""
    with Path(path).open(encoding="utf-8", newline="") as f:
        header, *rows = list(csv.reader(f))
    return header, rows


def to_markdown(header: Sequence[str], rows: Sequence[Sequence[Cell]]) -> str:
    """Render a markdown table with columns padded to equal width."""
    table = [[str(h) for h in header], *[[str(c) for c in row] for row in rows]]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]

    def _line(cells: Sequence[str]) -> str:
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths, strict=True)) + " |"

    separator = "| " + " | ".join("-" * w for w in widths) + " |"
    return "\n".join([_line(table[0]), separator, *(_line(r) for r in table[1:])]) + "\n"


def write_history(path: str | Path, history: Sequence[dict]) -> None:
    """Write per-epoch training history: epoch, train_loss, dev_score, best."""
    write_csv(
        path,
        ["epoch", "train_loss", "dev_score", "best"],
        [[h["epoch"], h["train_loss"], h["dev_score"], int(h["best"])] for h in history],
    )


def write_attention_matrix(
    path: str | Path,
    weights: np.ndarray,
    row_labels: Sequence[str],
    column_labels: Sequence[str],
) -> None:
    """Write an attention matrix, one row per output token."""
    write_csv(
        path,
        ["token", *column_labels],
        [[label, *map(float, row)] for label, row in zip(row_labels, weights, strict=True)],
    )
