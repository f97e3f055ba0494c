"""Binary portable-pixmap (P6) I/O, image grids and a tiny line-chart renderer."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` uint8."""
    x = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def from_bytes(pix: np.ndarray) -> np.ndarray:
    """``[H, W, 3]`` uint8 -> ``[3, H, W]`` in [-1, 1]."""
    return pix.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def write_ppm(path, img: np.ndarray) -> None:
    pix = to_bytes(img)
    h, w, _ = pix.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 pixmaps are supported")
    w, h = int(fields[1]), int(fields[2])
    pix = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return from_bytes(pix.reshape(h, w, 3))


def image_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile ``[3, s, s]`` images (equal size) into one image with a dark gutter."""
    s = rows[0][0].shape[-1]
    n_cols = max(len(r) for r in rows)
    H = len(rows) * (s + pad) + pad
    W = n_cols * (s + pad) + pad
    out = -np.ones((3, H, W))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (s + pad), pad + j * (s + pad)
            out[:, y:y + s, x:x + s] = img
    return out


_SERIES_COLORS = [(0.9, 0.2, 0.1), (0.1, 0.4, 0.95), (0.1, 0.75, 0.25), (0.95, 0.75, 0.1)]


def line_chart(series: dict[str, tuple[list[float], list[float]]], width: int = 320, height: int = 200) -> np.ndarray:
    """Plot ``{name: (xs, ys)}`` as polylines on a white canvas; returns ``[3, H, W]`` in [-1, 1].

    There are no axis labels; the CSV alongside is the record, the chart a glance.
    """
    canvas = np.ones((3, height, width))
    margin = 12
    canvas[:, height - margin, margin:width - margin] = 0.0
    canvas[:, margin:height - margin, margin] = 0.0
    pts = [(np.asarray(x, float), np.asarray(y, float)) for x, y in series.values() if len(x)]
    if not pts:
        return canvas
    xs = np.concatenate([p[0] for p in pts])
    ys = np.concatenate([p[1] for p in pts])
    ys = ys[np.isfinite(ys)]
    if ys.size == 0:
        return canvas
    x0, x1 = xs.min(), max(xs.max(), xs.min() + 1e-9)
    y0, y1 = ys.min(), max(ys.max(), ys.min() + 1e-9)

    def to_px(x, y):
        px = margin + (x - x0) / (x1 - x0) * (width - 2 * margin - 1)
        py = height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin - 1)
        return px, py

    for k, (x, y) in enumerate(pts):
        color = np.array(_SERIES_COLORS[k % len(_SERIES_COLORS)])[:, None]
        px, py = to_px(x, y)
        for a in range(len(px) - 1):
            if not (np.isfinite(py[a]) and np.isfinite(py[a + 1])):
                continue
            n = int(max(abs(px[a + 1] - px[a]), abs(py[a + 1] - py[a]))) + 1
            t = np.linspace(0.0, 1.0, n + 1)
            cols = np.rint(px[a] + t * (px[a + 1] - px[a])).astype(int)
            rows = np.rint(py[a] + t * (py[a + 1] - py[a])).astype(int)
            canvas[:, rows, cols] = color
        if len(px) == 1 and np.isfinite(py[0]):
            canvas[:, int(round(py[0])), int(round(px[0]))] = color[:, 0]
    return canvas * 2.0 - 1.0
