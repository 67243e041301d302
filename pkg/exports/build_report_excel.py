"""
Build the Excel report of a destination-prediction experiment.

Sheets:
1. Results          – mean / median EDS per city and model
2. Reg_vs_Class     – regression vs classification head, per model
3. EDS_Histogram    – per-sample error distribution in 0.5 km bins
4. Method           – what each model row means
"""

import pandas as pd
import xlsxwriter

MODEL_NOTES = [
    ("nn", "Centroid nearest to the current pick-up"),
    ("mmlp", "MLP, 500 ReLUs, first 5 + last 5 GPS points of the previous ride and the pick-up"),
    ("mmlp_seq", "MLP, 500 ReLUs, the flattened pick-up / drop-off sequence"),
    ("lstm", "Attention LSTM; driver and time embeddings, trainable random zone embedding"),
    ("lstm_boc", "lstm + Bag-of-Concepts POI counts per zone"),
    ("lstm_boc_w2v", "lstm_boc + frozen CBOW zone embedding"),
    ("[classification]", "Same backbone, cross-entropy loss, output = probability-weighted centroid mean"),
]


def build_report_workbook(path, results: pd.DataFrame, comparison: pd.DataFrame,
                          histograms: pd.DataFrame) -> None:
    wb = xlsxwriter.Workbook(str(path))

    # ─── Format Definitions ─────────────────────────────────────────
    fmt = {}
    fmt["title"] = wb.add_format({"bold": True, "font_size": 16, "font_color": "#1e3a5f", "bottom": 2, "bottom_color": "#1e3a5f"})
    fmt["th"] = wb.add_format({"bold": True, "font_size": 10, "font_color": "white", "bg_color": "#1e3a5f", "border": 1, "text_wrap": True, "align": "center", "valign": "vcenter"})
    fmt["text"] = wb.add_format({"font_size": 10, "font_color": "#374151"})
    fmt["km"] = wb.add_format({"num_format": "0.000"})
    fmt["km_alt"] = wb.add_format({"bg_color": "#f8fafc", "num_format": "0.000"})
    fmt["int"] = wb.add_format({"num_format": "#,##0"})
    fmt["int_alt"] = wb.add_format({"bg_color": "#f8fafc", "num_format": "#,##0"})
    fmt["row_alt"] = wb.add_format({"bg_color": "#f8fafc"})
    fmt["best"] = wb.add_format({"bold": True, "font_color": "#166534", "bg_color": "#f0fdf4", "num_format": "0.000"})
    fmt["label_bold"] = wb.add_format({"font_size": 10, "font_color": "#374151", "bold": True, "valign": "vcenter"})
    fmt["hint"] = wb.add_format({"font_size": 9, "font_color": "#9ca3af", "italic": True, "text_wrap": True, "valign": "vcenter"})

    def write_table(ws, first_row, frame: pd.DataFrame, number_fmt: dict):
        for col, name in enumerate(frame.columns):
            ws.write(first_row, col, name, fmt["th"])
        for i, record in enumerate(frame.itertuples(index=False), start=1):
            alt = i % 2 == 0
            for col, (name, value) in enumerate(zip(frame.columns, record)):
                kind = number_fmt.get(name)
                if kind is None:
                    ws.write(first_row + i, col, value, fmt["row_alt"] if alt else None)
                else:
                    ws.write_number(first_row + i, col, float(value), fmt[f"{kind}_alt" if alt else kind])
        return first_row + len(frame)

    # ═══════════════════════════════════════════════════════════════════
    # SHEET 1: RESULTS
    # ═══════════════════════════════════════════════════════════════════
    ws = wb.add_worksheet("Results")
    ws.hide_gridlines(2)
    ws.set_tab_color("#1e3a5f")
    ws.set_column("A:B", 26)
    ws.set_column("C:G", 14)
    ws.merge_range(0, 0, 0, 6, "Error Distance Score (km)", fmt["title"])
    last = write_table(ws, 2, results, {"mean_eds_km": "km", "median_eds_km": "km", "n_test": "int",
                                        "seed": "int", "wall_s": "km"})
    if len(results):
        # highlight each city's best mean EDS
        for city, group in results.groupby("city"):
            best = group["mean_eds_km"].idxmin()
            ws.write_number(3 + int(best), 2, float(results.loc[best, "mean_eds_km"]), fmt["best"])
    ws.freeze_panes(3, 0)
    ws.autofilter(2, 0, max(last, 3), len(results.columns) - 1)

    # ═══════════════════════════════════════════════════════════════════
    # SHEET 2: REGRESSION VS CLASSIFICATION
    # ═══════════════════════════════════════════════════════════════════
    ws = wb.add_worksheet("Reg_vs_Class")
    ws.hide_gridlines(2)
    ws.set_tab_color("#5b21b6")
    ws.set_column("A:B", 22)
    ws.set_column("C:E", 18)
    ws.merge_range(0, 0, 0, 4, "Regression vs classification head", fmt["title"])
    if len(comparison):
        write_table(ws, 2, comparison, {"regression_mean_eds_km": "km",
                                        "classification_mean_eds_km": "km", "delta_km": "km"})
        chart = wb.add_chart({"type": "column"})
        n = len(comparison)
        for col, colour in ((2, "#1e3a5f"), (3, "#5b21b6")):
            chart.add_series({
                "name": ["Reg_vs_Class", 2, col],
                "categories": ["Reg_vs_Class", 3, 1, 2 + n, 1],
                "values": ["Reg_vs_Class", 3, col, 2 + n, col],
                "fill": {"color": colour},
            })
        chart.set_title({"name": "Mean EDS (km)"})
        chart.set_size({"width": 620, "height": 320})
        ws.insert_chart(4 + n, 0, chart)
    else:
        ws.write(2, 0, "No model was run in both modes.", fmt["hint"])

    # ═══════════════════════════════════════════════════════════════════
    # SHEET 3: EDS HISTOGRAM
    # ═══════════════════════════════════════════════════════════════════
    ws = wb.add_worksheet("EDS_Histogram")
    ws.hide_gridlines(2)
    ws.set_tab_color("#166534")
    ws.set_column("A:B", 22)
    ws.set_column("C:E", 14)
    ws.merge_range(0, 0, 0, 4, "Per-sample error distribution", fmt["title"])
    write_table(ws, 2, histograms, {"bin_start_km": "km", "bin_end_km": "km", "count": "int"})

    # ═══════════════════════════════════════════════════════════════════
    # SHEET 4: METHOD
    # ═══════════════════════════════════════════════════════════════════
    ws = wb.add_worksheet("Method")
    ws.hide_gridlines(2)
    ws.set_column("A:A", 22)
    ws.set_column("B:B", 90)
    ws.merge_range(0, 0, 0, 1, "Models", fmt["title"])
    for row, (name, note) in enumerate(MODEL_NOTES, start=2):
        ws.write(row, 0, name, fmt["label_bold"])
        ws.write(row, 1, note, fmt["text"])
    ws.write(len(MODEL_NOTES) + 3, 0,
             "EDS = haversine distance (R = 6371 km) between predicted and true drop-off.", fmt["hint"])

    wb.close()
