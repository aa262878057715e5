from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Union
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from .errors import DfkdError, ShapeError
from .models import EpochRecord

METRICS_COLUMNS = ["epoch", "l_kd", "l_bn", "l_mhad", "l_sfcl", "gen_obj", "stu_obj", "accuracy", "seconds"]

PathLike = Union[str, Path]


def append_metrics_row(path: PathLike, record: Union[EpochRecord, Mapping[str, Any]]) -> None:
    path = Path(path)
    row = record.model_dump() if isinstance(record, EpochRecord) else dict(record)
    missing = [c for c in METRICS_COLUMNS if c not in row]
    if missing:
        raise DfkdError(f"metrics row lacks {', '.join(missing)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not path.exists() or path.stat().st_size == 0
    pd.DataFrame([[row[c] for c in METRICS_COLUMNS]], columns=METRICS_COLUMNS).to_csv(
        path, mode="a", header=write_header, index=False
    )


def read_metrics(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DfkdError(f"no metrics file at {path}")
    df = pd.read_csv(path)
    if list(df.columns) != METRICS_COLUMNS:
        raise DfkdError(f"unexpected metrics header in {path}: {list(df.columns)}")
    return df


def plot_history(history: Union[pd.DataFrame, Mapping[str, List[float]]], path: PathLike, title: str = "") -> Path:
    """Loss curves on the left axis, accuracy curves on the right."""
    df = history if isinstance(history, pd.DataFrame) else pd.DataFrame(dict(history))
    if df.empty:
        raise DfkdError("No history to plot")
    x = df["epoch"] if "epoch" in df.columns else pd.Series(range(1, len(df) + 1))
    acc_cols = [c for c in df.columns if "accuracy" in c]
    loss_cols = [c for c in df.columns if c not in acc_cols and c not in ("epoch", "seconds", "lr")]

    fig, ax = plt.subplots(figsize=(7, 4))
    for col in loss_cols:
        ax.plot(x, df[col], label=col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if acc_cols:
        ax2 = ax.twinx()
        for col in acc_cols:
            ax2.plot(x, df[col], linestyle="--", color="black", label=col)
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0.0, 1.0)
        ax2.legend(loc="upper right")
    if loss_cols:
        ax.legend(loc="upper left", fontsize="small")
    if title:
        ax.set_title(title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", bbox_inches="tight")
    plt.close(fig)
    return path


def image_grid(images: torch.Tensor, nrow: int) -> np.ndarray:
    """Tile N x 3 x H x W images in [-1, 1] into a uint8 H' x W' x 3 array, row-major."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"images must be N x 3 x H x W, got {tuple(images.shape)}")
    if nrow < 1:
        raise DfkdError(f"nrow must be >= 1, got {nrow}")
    n, _, h, w = images.shape
    rows = -(-n // nrow)
    pixels = ((images.detach().cpu().float().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    grid = torch.zeros(rows * h, nrow * w, 3, dtype=torch.uint8)
    for i in range(n):
        r, c = divmod(i, nrow)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = pixels[i].permute(1, 2, 0)
    return grid.numpy()


def save_image_grid(images: torch.Tensor, path: PathLike, nrow: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    plt.imsave(buf, image_grid(images, nrow), format="png")
    path.write_bytes(buf.getvalue())
    return path


def summarize_runs(rows: Iterable[Mapping[str, Any]]) -> pd.DataFrame:
    """Mean/std accuracy per experiment row across seeds, in first-seen row order."""
    df = pd.DataFrame(list(rows))
    if df.empty:
        return pd.DataFrame(columns=["experiment", "runs", "mean_accuracy", "std_accuracy"])
    for col in ("experiment", "accuracy"):
        if col not in df.columns:
            raise DfkdError(f"run rows need an {col!r} column")
    grouped = df.groupby("experiment", sort=False)["accuracy"]
    summary = pd.DataFrame(
        {
            "runs": grouped.count(),
            "mean_accuracy": grouped.mean(),
            "std_accuracy": grouped.std(ddof=0),
        }
    ).reset_index()
    return summary


def build_workbook(tables: Dict[str, pd.DataFrame], path: PathLike, title: str = "DFKD-FGVC") -> Path:
    buf = io.BytesIO()
    with pd.ExcelWriter(buf, engine="xlsxwriter") as writer:
        meta = pd.DataFrame([[title, datetime.now(timezone.utc).isoformat()]], columns=["title", "generated_at"])
        meta.to_excel(writer, sheet_name="_meta", index=False)
        for name, df in tables.items():
            sheet = name[:31] or "Sheet"
            df.to_excel(writer, sheet_name=sheet, index=False)
            ws = writer.sheets[sheet]
            for i, col in enumerate(df.columns):
                width = 10
                if not df.empty:
                    width = max(10, min(60, int(df[col].astype(str).str.len().quantile(0.9)) + 3))
                ws.set_column(i, i, width)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path
