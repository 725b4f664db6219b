import logging
import os
from datetime import datetime
from typing import Dict, Optional

import pandas as pd
from openpyxl.styles import Font, PatternFill
from openpyxl.worksheet.worksheet import Worksheet

logger = logging.getLogger(__name__)

FILL_OK = PatternFill(start_color="E2EFDA", end_color="E2EFDA", fill_type="solid")  # light green
FILL_ERROR = PatternFill(start_color="FCE4D6", end_color="FCE4D6", fill_type="solid")  # light red
FILL_WARN = PatternFill(start_color="FFF2CC", end_color="FFF2CC", fill_type="solid")  # light yellow
HEADER_FONT = Font(bold=True)
# created/modified stamp written into every workbook
WORKBOOK_TIMESTAMP = datetime(2024, 1, 1)


def _autofit(ws: Worksheet):
    for column_cells in ws.columns:
        length = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column_cells)
        ws.column_dimensions[column_cells[0].column_letter].width = min(length + 2, 60)


def _style_status(ws: Worksheet, status_column: str):
    header = [cell.value for cell in ws[1]]
    for cell in ws[1]:
        cell.font = HEADER_FONT
    if status_column not in header:
        return
    col = header.index(status_column) + 1
    for row in ws.iter_rows(min_row=2):
        status = str(row[col - 1].value or "")
        if status in ("OK", "HIT"):
            fill = FILL_OK
        elif status.startswith("MISSING") or status in ("SKIPPED", "PSEUDO_HIT", "FILTERED"):
            fill = FILL_WARN
        else:
            fill = FILL_ERROR
        for cell in row:
            cell.fill = fill


def write_sheets(output_path: str, sheets: Dict[str, pd.DataFrame], status_column: Optional[str] = "status") -> str:
    """One sheet per frame, bold headers, rows colored by their status value."""
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    with pd.ExcelWriter(output_path, engine="openpyxl") as writer:
        for name, frame in sheets.items():
            frame.to_excel(writer, sheet_name=name[:31], index=False)
            ws = writer.sheets[name[:31]]
            if status_column:
                _style_status(ws, status_column)
            _autofit(ws)
        writer.book.properties.created = WORKBOOK_TIMESTAMP
        writer.book.properties.modified = WORKBOOK_TIMESTAMP
    logger.info(f"Excel report saved to: {output_path}")
    return output_path


def generate_study_workbook(summary: pd.DataFrame, design_summary: pd.DataFrame, conditions: pd.DataFrame,
                            output_path: str) -> str:
    return write_sheets(
        output_path, {"Method Summary": summary, "Design Summary": design_summary, "Conditions": conditions}
    )


def generate_campaign_workbook(plates: pd.DataFrame, hits: pd.DataFrame, totals: Dict[str, float],
                               output_path: str) -> str:
    totals_frame = pd.DataFrame([{"metric": k, "value": v} for k, v in totals.items()])
    path = write_sheets(
        output_path,
        {"Campaign Totals": totals_frame, "Plates": plates, "Hits": hits},
    )
    return path
