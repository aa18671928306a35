"""CSV report emitters with provenance headers, plus minimal SVG charts.

CSV is the contract; the self-contained SVG renderer is best-effort eye
candy for loss curves and histograms. Every writer formats floats with
repr() so that identical inputs yield byte-identical files.
"""

import csv
import hashlib
import io


def fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows, provenance=None):
    """Write rows with an optional `# key = value` provenance preamble."""
    out = io.StringIO()
    if provenance:
        for key, value in provenance.items():
            out.write(f"# {key} = {value}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(out.getvalue())


def read_csv(path):
    """Read a CSV written by write_csv; returns (provenance, header, rows)."""
    provenance = {}
    rows = []
    header = None
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    provenance[k.strip()] = v.strip()
                continue
            parsed = next(csv.reader([line]))
            if header is None:
                header = parsed
            elif parsed:
                rows.append(parsed)
    return provenance, header, rows


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# --- tiny SVG renderer --------------------------------------------------------

_SVG_HEAD = ('<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             'viewBox="0 0 {w} {h}">\n'
             '<rect width="{w}" height="{h}" fill="white"/>\n')
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _scale(vals, lo_out, hi_out):
    lo, hi = min(vals), max(vals)
    if hi == lo:
        hi = lo + 1.0
    span = hi - lo
    return lambda v: lo_out + (v - lo) / span * (hi_out - lo_out), lo, hi


def svg_line_chart(path, series, title="", width=640, height=400):
    """series: mapping label -> list of (x, y) points."""
    margin = 50
    parts = [_SVG_HEAD.format(w=width, h=height)]
    parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" '
                 f'font-family="monospace" font-size="14">{title}</text>\n')
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    if xs:
        to_x, _, _ = _scale(xs, margin, width - margin)
        to_y, y_lo, y_hi = _scale(ys, height - margin, margin)
        parts.append(f'<text x="8" y="{margin}" font-family="monospace" font-size="10">'
                     f'{y_hi:.4g}</text>\n')
        parts.append(f'<text x="8" y="{height - margin}" font-family="monospace" '
                     f'font-size="10">{y_lo:.4g}</text>\n')
        for i, (label, pts) in enumerate(series.items()):
            color = _COLORS[i % len(_COLORS)]
            coords = " ".join(f"{to_x(x):.2f},{to_y(y):.2f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                         f'stroke-width="1.5"/>\n')
            parts.append(f'<text x="{margin}" y="{margin + 14 * i}" fill="{color}" '
                         f'font-family="monospace" font-size="11">{label}</text>\n')
    parts.append("</svg>\n")
    with open(path, "w") as fh:
        fh.write("".join(parts))


def svg_bar_chart(path, labels, values, title="", width=640, height=400):
    margin = 50
    parts = [_SVG_HEAD.format(w=width, h=height)]
    parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" '
                 f'font-family="monospace" font-size="14">{title}</text>\n')
    if len(values):
        top = max(max(values), 0.0)
        top = top if top > 0 else 1.0
        slot = (width - 2 * margin) / len(values)
        for i, (label, value) in enumerate(zip(labels, values)):
            bar_h = max(0.0, value) / top * (height - 2 * margin)
            x = margin + i * slot
            y = height - margin - bar_h
            parts.append(f'<rect x="{x + slot * 0.1:.2f}" y="{y:.2f}" '
                         f'width="{slot * 0.8:.2f}" height="{bar_h:.2f}" '
                         f'fill="{_COLORS[i % len(_COLORS)]}"/>\n')
            parts.append(f'<text x="{x + slot / 2:.2f}" y="{height - margin + 14}" '
                         f'text-anchor="middle" font-family="monospace" font-size="10">'
                         f'{label}</text>\n')
            parts.append(f'<text x="{x + slot / 2:.2f}" y="{y - 4:.2f}" '
                         f'text-anchor="middle" font-family="monospace" font-size="10">'
                         f'{value:.3f}</text>\n')
    parts.append("</svg>\n")
    with open(path, "w") as fh:
        fh.write("".join(parts))
