"""Result tables as CSV, JSON and optional Excel workbooks with embedded charts."""

import json
import logging
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from openpyxl import load_workbook  # noqa: E402
from openpyxl.drawing.image import Image  # noqa: E402

from tensor_io import write_text_atomic  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def _plain(value):
    """Convert numpy scalars and non-finite floats into JSON-safe values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def write_json(path, payload):
    """Write a JSON artifact with sorted keys; inf and nan become strings."""
    write_text_atomic(path, json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n")
    logger.debug("wrote %s", path)


def write_csv(path, df):
    """Write a DataFrame as CSV in its own column order, without the index."""
    write_text_atomic(path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    logger.debug("wrote %s (%d rows)", path, len(df))


def write_series(path, x, y, series=None):
    """
    Plot-data file: one (series, x, y) row per point.

    Args:
        path: Output CSV path
        x: x values
        y: y values
        series: Optional per-point series labels
    """
    frame = pd.DataFrame({"series": series if series is not None else ["0"] * len(x), "x": x, "y": y})
    write_csv(path, frame)


def plot_training_curve(metrics, file_name, title="Training Loss"):
    """Generate and save the per-step loss chart of one run.

    Args:
        metrics: DataFrame with step and loss columns
        file_name: Output file path for the chart image
        title: Chart title
    """
    plt.figure(figsize=(12, 7))
    plt.plot(metrics["step"], metrics["loss"], label="Training Loss", color="blue")
    plt.yscale("log")
    plt.title(title)
    plt.xlabel("Step")
    plt.ylabel("Loss")
    plt.legend(loc="upper right")
    plt.grid(True)
    plt.tight_layout()
    plt.savefig(file_name)
    plt.close()


def plot_pareto(points, file_name):
    """Generate and save the memory vs final-loss chart of a sweep.

    Args:
        points: DataFrame with bits, rank, group_size, memory_bytes, metric and dominated columns
        file_name: Output file path for the chart image
    """
    plt.figure(figsize=(12, 7))
    for bits, frame in points.groupby("bits"):
        frame = frame.sort_values("memory_bytes")
        plt.plot(frame["memory_bytes"], frame["metric"], marker="o", label=f"GSE-INT{bits}")
        for _, row in frame.iterrows():
            plt.annotate(f"r={row['rank']} N={row['group_size']}", (row["memory_bytes"], row["metric"]), fontsize=8)
    frontier = points[~points["dominated"]].sort_values("memory_bytes")
    plt.plot(frontier["memory_bytes"], frontier["metric"], linestyle="--", color="black", label="Pareto frontier")
    plt.title("Memory vs Final Eval Loss (lower is better)")
    plt.xlabel("Memory (bytes)")
    plt.ylabel("Final Eval Loss")
    plt.legend(loc="upper right")
    plt.grid(True)
    plt.tight_layout()
    plt.savefig(file_name)
    plt.close()


def plot_format_sqnr(table, file_name):
    """Generate and save a grouped bar chart of SQNR per format and tensor."""
    finite = table.replace([np.inf, -np.inf], np.nan)
    pivot = finite.pivot(index="format", columns="tensor", values="sqnr_db")
    pivot.plot(kind="bar", figsize=(12, 7))
    plt.title("SQNR by Format")
    plt.xlabel("Format")
    plt.ylabel("SQNR (dB)")
    plt.grid(True, axis="y")
    plt.tight_layout()
    plt.savefig(file_name)
    plt.close()


def plot_memory_breakdown(table, file_name):
    """Generate and save a stacked bar chart of memory parts per config."""
    parts = ["frozen_weights_bytes", "adapter_bytes", "activation_bytes", "gradient_bytes", "optimizer_bytes"]
    (table.set_index("notation")[parts] / 2 ** 30).plot(kind="bar", stacked=True, figsize=(12, 7))
    plt.title("Fine-tuning Memory by Component")
    plt.xlabel("Config")
    plt.ylabel("Memory (GiB)")
    plt.grid(True, axis="y")
    plt.tight_layout()
    plt.savefig(file_name)
    plt.close()


def auto_adjust_column_width(file_name):
    """Auto-adjust column widths in Excel file to fit content.

    Args:
        file_name: Path to the Excel file
    """
    workbook = load_workbook(file_name)
    for sheet in workbook.worksheets:
        for col in sheet.columns:
            width = max((len(str(cell.value)) for cell in col if cell.value is not None), default=0)
            sheet.column_dimensions[col[0].column_letter].width = width + 2
    workbook.save(file_name)


def embed_chart_in_excel(file_name, image_file):
    """Embed chart image into the "Graph" sheet of an Excel file.

    Args:
        file_name: Path to the Excel file
        image_file: Path to the chart image file
    """
    workbook = load_workbook(file_name)
    if "Graph" not in workbook.sheetnames:
        workbook.create_sheet("Graph")
    img = Image(image_file)
    img.anchor = "A1"
    workbook["Graph"].add_image(img)
    workbook.save(file_name)


def export_to_excel(sheets, file_name, number_formats=None):
    """Export result tables to one workbook, a sheet per table.

    Args:
        sheets: Dict of sheet name -> DataFrame
        file_name: Output Excel file path
        number_formats: Optional dict of column name -> Excel number format
    """
    number_formats = number_formats or {}
    os.makedirs(os.path.dirname(os.path.abspath(file_name)), exist_ok=True)
    with pd.ExcelWriter(file_name, engine="openpyxl") as writer:
        for name, df in sheets.items():
            df.replace([np.inf, -np.inf], np.nan).to_excel(writer, index=False, sheet_name=name)
    workbook = load_workbook(file_name)
    for name, df in sheets.items():
        sheet = workbook[name]
        for col_name, fmt in number_formats.items():
            if col_name not in df.columns:
                continue
            col_letter = sheet.cell(row=1, column=df.columns.get_loc(col_name) + 1).column_letter
            for row in range(2, sheet.max_row + 1):
                sheet[f"{col_letter}{row}"].number_format = fmt
    workbook.save(file_name)


def write_workbook(file_name, sheets, chart, number_formats=None):
    """
    Excel report: data sheets, a chart drawn by `chart(image_path)` on a Graph sheet, fitted columns.

    The chart PNG is kept next to the workbook.
    """
    image_file = os.path.splitext(file_name)[0] + ".png"
    chart(image_file)
    export_to_excel(sheets, file_name, number_formats)
    embed_chart_in_excel(file_name, image_file)
    auto_adjust_column_width(file_name)
    logger.info("wrote workbook %s", file_name)
