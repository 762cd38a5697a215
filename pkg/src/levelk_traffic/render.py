"""Static rendering of trace records as SVG frames or an ASCII strip."""

from __future__ import annotations

from xml.sax.saxutils import quoteattr

DEFAULT_META = {"n_lanes": 3, "lane_width": 3.6, "safe_zone_length": 6.0, "safe_zone_width": 2.0}
EGO_ID = 0


def _meta(meta: dict | None) -> dict:
    out = dict(DEFAULT_META)
    out.update(meta or {})
    return out


def render_svg(record: dict, meta: dict | None = None, half_window: float = 80.0,
               scale: float = 6.0, arrow_scale: float = 0.8) -> str:
    """One frame centred on the ego: lane lines, safe zones, velocity arrows.

    Only cars within ``half_window`` meters of the ego are drawn. The ego's
    zone is highlighted and, on a violation step, flagged.
    """
    m = _meta(meta)
    cars = record["cars"]
    ego = next((c for c in cars if c["id"] == EGO_ID), cars[0])
    n_lanes, lw = int(m["n_lanes"]), float(m["lane_width"])
    L, W = float(m["safe_zone_length"]), float(m["safe_zone_width"])
    width = 2 * half_window * scale
    height = n_lanes * lw * scale
    margin = 10

    def px(x):
        return (x - ego["x"] + half_window) * scale

    def py(y):
        # lane 1 (rightmost) at the bottom
        return margin + height - y * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
             f'height="{height + 2 * margin:.0f}" data-step="{record["step"]}">']
    for k in range(n_lanes + 1):
        y = py(k * lw)
        dash = "" if k in (0, n_lanes) else ' stroke-dasharray="8,6"'
        parts.append(f'<line class="lane-boundary" x1="0" y1="{y:.2f}" x2="{width:.0f}" '
                     f'y2="{y:.2f}" stroke="#555"{dash}/>')
    violated = bool(record.get("violation"))
    for c in cars:
        if abs(c["x"] - ego["x"]) > half_window:
            continue
        is_ego = c["id"] == ego["id"]
        cls = "car ego" if is_ego else "car"
        fill = "#d62728" if is_ego else "#f2c12e"
        extra = ""
        if is_ego and violated:
            cls += " violation"
            extra = ' stroke="#ff00ff" stroke-width="3" data-violation="true"'
        x0, y0 = px(c["x"] - L / 2), py(c["y"] + W / 2)
        parts.append(f'<rect class={quoteattr(cls)} data-id="{c["id"]}" x="{x0:.2f}" y="{y0:.2f}" '
                     f'width="{L * scale:.2f}" height="{W * scale:.2f}" fill="{fill}"{extra}/>')
        xs, ys = px(c["x"]), py(c["y"])
        xe = xs + c["vx"] * arrow_scale * scale / 4
        parts.append(f'<line class="velocity" x1="{xs:.2f}" y1="{ys:.2f}" x2="{xe:.2f}" '
                     f'y2="{ys:.2f}" stroke="#000" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def render_ascii(record: dict, meta: dict | None = None, half_window: float = 80.0,
                 cell: float = 2.0) -> str:
    """Text strip, one row per lane (leftmost lane on top); ``E`` is the ego, ``#`` others."""
    m = _meta(meta)
    cars = record["cars"]
    ego = next((c for c in cars if c["id"] == EGO_ID), cars[0])
    n_lanes, lw = int(m["n_lanes"]), float(m["lane_width"])
    n_cols = int(2 * half_window / cell) + 1
    grid = [["." for _ in range(n_cols)] for _ in range(n_lanes)]
    for c in cars:
        col = int(round((c["x"] - ego["x"] + half_window) / cell))
        lane = min(max(int(c["y"] // lw), 0), n_lanes - 1)
        if 0 <= col < n_cols:
            mark = "E" if c["id"] == ego["id"] else "#"
            if mark == "E" and record.get("violation"):
                mark = "X"
            grid[n_lanes - 1 - lane][col] = mark
    head = f"step {record['step']}" + (" VIOLATION" if record.get("violation") else "")
    return "\n".join([head] + ["".join(row) for row in grid])
