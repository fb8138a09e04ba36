"""
Evaluation PDF report for Silhouette Lab.
A4 report with one horizontal bar per aggregate metric and a per-scene table.
"""

import logging

from reportlab.lib.colors import HexColor
from reportlab.lib.pagesizes import A4
from reportlab.pdfgen import canvas

logger = logging.getLogger(__name__)

# ────────────── CONSTANTS ──────────────

PAGE_WIDTH, PAGE_HEIGHT = A4
MARGIN_LEFT = 50
MARGIN_RIGHT = 50
MARGIN_TOP = 40
MARGIN_BOTTOM = 50

FONT_REGULAR = "Helvetica"
FONT_BOLD = "Helvetica-Bold"
LINE_HEIGHT = 14

# metrics drawn as bars; (key, label, lower bound, upper bound)
BAR_METRICS = (
    ("mask2d_iou_input", "Mask2D IoU (input view)", 0.0, 1.0),
    ("mask2d_iou_views", "Mask2D IoU (other views)", 0.0, 1.0),
    ("mask2d_iou_heldout", "Mask2D IoU (held-out views)", 0.0, 1.0),
    ("box2d_giou_input", "Box2D gIoU (input view)", -1.0, 1.0),
    ("box2d_giou_views", "Box2D gIoU (other views)", -1.0, 1.0),
    ("f1_at_0p1", "F1 @ 0.1", 0.0, 1.0),
)
TABLE_COLUMNS = (
    ("scene_id", "Scene", 0),
    ("mask2d_iou_views", "IoU views", 100),
    ("box2d_giou_views", "gIoU views", 165),
    ("depth_l1_views", "Depth L1", 235),
    ("chamfer3d", "Chamfer", 300),
    ("f1_at_0p1", "F1", 365),
    ("depth_rel_error", "z rel err", 420),
)


# ────────────── HELPERS ──────────────

def _new_page_if_needed(c, y, threshold=MARGIN_BOTTOM + 40):
    if y < threshold:
        c.showPage()
        y = PAGE_HEIGHT - MARGIN_TOP
    return y


def _draw_heading(c, y, title):
    """Bold uppercase heading with a rule below it."""
    y = _new_page_if_needed(c, y)
    c.setFont(FONT_BOLD, 12)
    c.drawString(MARGIN_LEFT, y, title.upper())
    y -= 4
    c.setStrokeColorRGB(0.08, 0.08, 0.08)
    c.setLineWidth(0.5)
    c.line(MARGIN_LEFT, y, PAGE_WIDTH - MARGIN_RIGHT, y)
    return y - 18


def _format(value):
    return "n/a" if value is None else f"{value:.3f}"


def _draw_metric_bar(c, x, y, width, label, value, lo, hi):
    """Label line, then a grey track with the value filled in from the left."""
    bar_height = 12
    c.setFont(FONT_REGULAR, 9)
    c.setFillColor(HexColor("#64748b"))
    c.drawString(x, y + 4, f"{label}: {_format(value)}")
    y -= 16

    c.setFillColor(HexColor("#e5e7eb"))
    c.roundRect(x, y, width, bar_height, 5, fill=1, stroke=0)
    if value is not None:
        fraction = min(max((value - lo) / (hi - lo), 0.0), 1.0)
        if fraction > 0:
            c.setFillColor(HexColor("#6366f1"))
            c.roundRect(x, y, fraction * width, bar_height, 5, fill=1, stroke=0)
    c.setFillColor(HexColor("#000000"))
    return y - 16


# ────────────── REPORT ──────────────

def generate_report_pdf(report, filepath):
    """
    Write an evaluation report.

    Args:
        report:   EvalReport (aggregate dict + per-scene rows).
        filepath: path of the PDF to write.
    """
    aggregate = report.aggregate
    c = canvas.Canvas(filepath, pagesize=A4)
    y = PAGE_HEIGHT - MARGIN_TOP - 10

    c.setFont(FONT_BOLD, 18)
    c.drawString(MARGIN_LEFT, y, "Silhouette Fit Evaluation")
    y -= 20
    c.setFont(FONT_REGULAR, 9)
    c.setFillColor(HexColor("#64748b"))
    c.drawString(MARGIN_LEFT, y, f"{aggregate.get('num_scenes', len(report.scenes))} scenes")
    c.setFillColor(HexColor("#000000"))
    y -= 30

    y = _draw_heading(c, y, "Aggregate metrics")
    for key, label, lo, hi in BAR_METRICS:
        y = _new_page_if_needed(c, y, MARGIN_BOTTOM + 40)
        y = _draw_metric_bar(c, MARGIN_LEFT + 20, y, 350, label, aggregate.get(key), lo, hi)

    c.setFont(FONT_REGULAR, 10)
    for key, label in (("depth_l1_input", "Depth L1 (input view)"), ("depth_l1_views", "Depth L1 (other views)"),
                       ("depth_l1_heldout", "Depth L1 (held-out views)"), ("chamfer3d", "Chamfer 3D"),
                       ("depth_rel_error", "Relative depth error")):
        y = _new_page_if_needed(c, y)
        c.drawString(MARGIN_LEFT + 20, y, f"{label}: {_format(aggregate.get(key))}")
        y -= LINE_HEIGHT
    y -= 16

    y = _draw_heading(c, y, "Per-scene results")

    def header(y):
        c.setFont(FONT_BOLD, 9)
        for _, title, offset in TABLE_COLUMNS:
            c.drawString(MARGIN_LEFT + offset, y, title)
        return y - LINE_HEIGHT

    y = header(y)
    for row in report.scenes:
        if y < MARGIN_BOTTOM + 20:
            c.showPage()
            y = header(PAGE_HEIGHT - MARGIN_TOP)
        c.setFont(FONT_REGULAR, 9)
        for key, _, offset in TABLE_COLUMNS:
            text = row[key] if key == "scene_id" else _format(row.get(key))
            c.drawString(MARGIN_LEFT + offset, y, str(text))
        y -= LINE_HEIGHT

    c.save()
    logger.info("Wrote evaluation PDF for %d scenes to %s", len(report.scenes), filepath)
    return filepath
