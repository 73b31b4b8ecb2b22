"""Plain-text SVG output for heatmaps and filter grids."""

from typing import Dict, List, Sequence, Tuple

import numpy as np

CELL = 12
MARGIN = 40
LABEL_WIDTH = 110

# Anchor colors of the heatmap ramp (dark blue -> teal -> green -> yellow).
_ANCHORS = np.array(
    [
        [68, 1, 84],
        [59, 82, 139],
        [33, 145, 140],
        [94, 201, 98],
        [253, 231, 37],
    ],
    dtype=np.float64,
)


def _build_colormap(steps: int = 256) -> Tuple[str, ...]:
    positions = np.linspace(0.0, len(_ANCHORS) - 1, steps)
    lower = np.minimum(np.floor(positions).astype(int), len(_ANCHORS) - 2)
    frac = (positions - lower)[:, None]
    rgb = np.rint(_ANCHORS[lower] * (1 - frac) + _ANCHORS[lower + 1] * frac).astype(int)
    return tuple(f'#{r:02x}{g:02x}{b:02x}' for r, g, b in rgb)


COLORMAP = _build_colormap()


def log_normalize(values: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """
    Map values to ``[0, 1]`` on a log scale spanning the array's range.

    A constant array maps to 0.5.
    """
    logs = np.log(np.maximum(np.asarray(values, dtype=np.float64), 0.0) + eps)
    low, high = logs.min(), logs.max()
    if high - low < 1e-12:
        return np.full(logs.shape, 0.5)
    return (logs - low) / (high - low)


def color_of(level: float) -> str:
    index = int(np.clip(round(level * (len(COLORMAP) - 1)), 0, len(COLORMAP) - 1))
    return COLORMAP[index]


class SVG:
    def __init__(self):
        self.svg = ""

    def header(self, width, height):
        self.svg += (
            '<?xml version="1.0" standalone="no"?>\n'
            f'<svg version="1.1" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" xmlns="http://www.w3.org/2000/svg">\n'
        )

    def group_start(self, attr: Dict[str, str]):
        g_attr = [f'{key}="{value}"' for key, value in attr.items() if key in ['id', 'class']]
        self.svg += f'<g {" ".join(g_attr)}>\n'
        if 'title' in attr:
            self.svg += f'<title>{attr["title"]}</title>\n'

    def group_end(self):
        self.svg += '</g>\n'

    def filled_rectangle(self, x1, y1, x2, y2, fill, extra=""):
        width = x2 - x1
        height = y2 - y1
        self.svg += (
            f'<rect x="{x1:.1f}" y="{y1:.1f}" width="{width:.1f}" height="{height:.1f}" '
            f'fill="{fill}" {extra}/>\n'
        )

    def text(self, x, y, string, extra=""):
        self.svg += f'<text x="{x:.1f}" y="{y:.1f}" {extra}>{string}</text>\n'

    def get_svg(self):
        return f"{self.svg}</svg>\n"


def heatmap_svg(panels: Sequence[Tuple[str, np.ndarray, List[str]]]) -> str:
    """
    Render one heatmap panel per kernel-size group.

    Parameters
    ----------
    panels : sequence of (title, matrix, layer labels)
        ``matrix`` is ``(basis filters, layers)`` with basis filters in
        frequency order (lowest at the top). Each panel is log-normalized on
        its own.

    Returns
    -------
    svg : str
        The SVG document.
    """
    widths = [LABEL_WIDTH + CELL * m.shape[1] for _, m, _ in panels]
    heights = [CELL * m.shape[0] + 3 * CELL for _, m, _ in panels]
    width = 2 * MARGIN + (max(widths) if widths else 0)
    height = 2 * MARGIN + sum(heights) + MARGIN * max(len(panels) - 1, 0)
    doc = SVG()
    doc.header(width, height)
    y0 = MARGIN
    for (title, matrix, labels), panel_height in zip(panels, heights):
        levels = log_normalize(matrix) if matrix.size else matrix
        doc.group_start({'class': 'panel', 'title': title})
        doc.text(MARGIN, y0 + CELL, title, 'font-family="monospace" font-size="11"')
        top = y0 + 2 * CELL
        for row in range(matrix.shape[0]):
            doc.text(MARGIN, top + CELL * (row + 1) - 2, str(row), 'font-size="8"')
            for col in range(matrix.shape[1]):
                x = MARGIN + LABEL_WIDTH + CELL * col
                y = top + CELL * row
                doc.filled_rectangle(
                    x, y, x + CELL, y + CELL, color_of(levels[row, col]),
                    f'data-layer="{labels[col]}" data-energy="{matrix[row, col]:.6g}"',
                )
        doc.group_end()
        y0 += panel_height + MARGIN
    return doc.get_svg()


def filter_grid_svg(kernels: np.ndarray, columns: int = 8) -> str:
    """
    Draw ``(n, h, w)`` kernels side by side in gray scale.

    Every kernel is scaled symmetrically by its own largest magnitude, so
    zero is mid gray.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    n, h, w = kernels.shape
    columns = max(1, min(columns, n)) if n else 1
    rows = -(-n // columns) if n else 0
    gap = CELL
    width = 2 * MARGIN + columns * (w * CELL + gap)
    height = 2 * MARGIN + rows * (h * CELL + gap)
    doc = SVG()
    doc.header(width, height)
    for k in range(n):
        scale = np.abs(kernels[k]).max()
        levels = 0.5 + 0.5 * kernels[k] / scale if scale > 0 else np.full((h, w), 0.5)
        ox = MARGIN + (k % columns) * (w * CELL + gap)
        oy = MARGIN + (k // columns) * (h * CELL + gap)
        doc.group_start({'class': 'kernel', 'title': f'kernel {k}'})
        for i in range(h):
            for j in range(w):
                g = int(round(255 * levels[i, j]))
                x, y = ox + j * CELL, oy + i * CELL
                doc.filled_rectangle(x, y, x + CELL, y + CELL, f'#{g:02x}{g:02x}{g:02x}')
        doc.group_end()
    return doc.get_svg()
