"""Static SVG plots: the embedding scatter and the truth/prediction line chart."""
import xml.etree.ElementTree as ET

import numpy as np

SVG_NS = "http://www.w3.org/2000/svg"
SIGN_COLORS = {"negative": "#1f5fbf", "near-zero": "#8c8c8c", "positive": "#2ca02c"}
TRUTH_COLOR = "#1f77b4"
PRED_COLOR = "#ff7f0e"
ID_COLORS = ("#7b3fa0", "#b5651d")


def _num(v):
    return f"{v:.2f}"


class _Axis:
    """Linear map from data range to a pixel span; a flat range is widened."""

    def __init__(self, values, lo_px, hi_px, pad=0.05):
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        span = hi - lo
        self.lo, self.hi = lo - pad * span, hi + pad * span
        self.lo_px, self.hi_px = lo_px, hi_px

    def __call__(self, v):
        return self.lo_px + (v - self.lo) / (self.hi - self.lo) * (self.hi_px - self.lo_px)

    def ticks(self, n=5):
        return np.linspace(self.lo, self.hi, n)


def _root(width, height, title):
    root = ET.Element("svg", xmlns=SVG_NS, width=str(width), height=str(height),
                      viewBox=f"0 0 {width} {height}")
    ET.SubElement(root, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    if title:
        t = ET.SubElement(root, "text", x=str(width // 2), y="18", attrib={"text-anchor": "middle",
                                                                          "font-size": "14"})
        t.text = title
    return root


def _frame(parent, xa, ya, x_label="", y_label=""):
    """Axes box with tick labels."""
    g = ET.SubElement(parent, "g", attrib={"class": "axes", "font-size": "10"})
    x0, x1 = xa.lo_px, xa.hi_px
    y0, y1 = ya.lo_px, ya.hi_px
    ET.SubElement(g, "rect", x=_num(x0), y=_num(y1), width=_num(x1 - x0), height=_num(y0 - y1),
                  fill="none", stroke="black")
    for v in xa.ticks():
        px = xa(v)
        ET.SubElement(g, "line", x1=_num(px), y1=_num(y0), x2=_num(px), y2=_num(y0 + 4), stroke="black")
        ET.SubElement(g, "text", x=_num(px), y=_num(y0 + 15), attrib={"text-anchor": "middle"}).text = f"{v:.3g}"
    for v in ya.ticks():
        py = ya(v)
        ET.SubElement(g, "line", x1=_num(x0 - 4), y1=_num(py), x2=_num(x0), y2=_num(py), stroke="black")
        ET.SubElement(g, "text", x=_num(x0 - 6), y=_num(py + 3), attrib={"text-anchor": "end"}).text = f"{v:.3g}"
    if x_label:
        ET.SubElement(g, "text", x=_num((x0 + x1) / 2), y=_num(y0 + 30),
                      attrib={"text-anchor": "middle"}).text = x_label
    if y_label:
        ET.SubElement(g, "text", x=_num(x0 - 40), y=_num((y0 + y1) / 2),
                      attrib={"text-anchor": "middle",
                              "transform": f"rotate(-90 {_num(x0 - 40)} {_num((y0 + y1) / 2)})"}).text = y_label
    return g


def _polyline(parent, xs, ys, xa, ya, color, name):
    pts = " ".join(f"{_num(xa(x))},{_num(ya(y))}" for x, y in zip(xs, ys))
    return ET.SubElement(parent, "polyline", points=pts, fill="none", stroke=color,
                         attrib={"stroke-width": "1.5", "class": name})


def _legend(parent, x, y, entries):
    for i, (label, color) in enumerate(entries):
        ET.SubElement(parent, "rect", x=_num(x), y=_num(y + 14 * i - 8), width="10", height="10", fill=color)
        ET.SubElement(parent, "text", x=_num(x + 14), y=_num(y + 14 * i + 1),
                      attrib={"font-size": "10"}).text = label


def _serialize(root):
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def scatter_svg(coords, labels, centroids=None, centroid_color="red", title="", width=560, height=480):
    """Points coloured by sign label (negative / near-zero / positive), centroids as crosses."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    everything = coords if centroids is None else np.vstack([coords, np.asarray(centroids).reshape(-1, 2)])
    root = _root(width, height, title)
    xa = _Axis(everything[:, 0], 60, width - 110)
    ya = _Axis(everything[:, 1], height - 45, 30)
    _frame(root, xa, ya, "t-SNE x", "t-SNE y")
    pts = ET.SubElement(root, "g", attrib={"class": "points"})
    for (x, y), lab in zip(coords, labels):
        ET.SubElement(pts, "circle", cx=_num(xa(x)), cy=_num(ya(y)), r="2.5",
                      fill=SIGN_COLORS.get(lab, "black"), attrib={"fill-opacity": "0.8"})
    entries = [(k, v) for k, v in SIGN_COLORS.items()]
    if centroids is not None:
        cg = ET.SubElement(root, "g", attrib={"class": "centroids"})
        for x, y in np.asarray(centroids).reshape(-1, 2):
            cx, cy = xa(x), ya(y)
            for dx, dy in ((5, 5), (5, -5)):
                ET.SubElement(cg, "line", x1=_num(cx - dx), y1=_num(cy - dy), x2=_num(cx + dx),
                              y2=_num(cy + dy), stroke=centroid_color, attrib={"stroke-width": "2"})
        entries.append(("centroid", centroid_color))
    _legend(root, width - 100, 40, entries)
    return _serialize(root)


def line_chart_svg(n, truth, predicted, sub_ids=None, title="", width=720, height=420):
    """Truth (blue) and predicted (orange) angle over n; sub-id components in a lower panel."""
    n = np.asarray(n, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    ids = None if sub_ids is None else np.asarray(sub_ids, dtype=np.float64)
    has_ids = ids is not None and ids.ndim == 2 and ids.shape[1] > 0 and len(ids) == len(n)
    total_h = height + (180 if has_ids else 0)
    root = _root(width, total_h, title)
    xa = _Axis(n, 70, width - 120, pad=0.0)
    ya = _Axis(np.concatenate([truth, predicted]), height - 45, 30)
    top = ET.SubElement(root, "g", attrib={"class": "angles"})
    _frame(top, xa, ya, "sample n", "angle (rad)")
    if len(n):
        _polyline(top, n, truth, xa, ya, TRUTH_COLOR, "truth")
        _polyline(top, n, predicted, xa, ya, PRED_COLOR, "predicted")
    _legend(top, width - 110, 40, [("truth", TRUTH_COLOR), ("predicted", PRED_COLOR)])
    if has_ids:
        panel = ET.SubElement(root, "g", attrib={"class": "subroutine-ids"})
        ia = _Axis(ids.ravel(), total_h - 40, height + 10)
        _frame(panel, xa, ia, "", "subroutine id")
        entries = []
        for j in range(ids.shape[1]):
            color = ID_COLORS[j % len(ID_COLORS)]
            _polyline(panel, n, ids[:, j], xa, ia, color, f"sub-id-{j}")
            entries.append((f"id[{j}]", color))
        _legend(panel, width - 110, height + 20, entries)
    return _serialize(root)


def write_svg(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
