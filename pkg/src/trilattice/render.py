"""SVG export of density fields, tangent streamlines and lattices.

All drawings share one coordinate frame: design units with ``y`` up, flipped
into SVG's ``y``-down frame by a single group transform.  Output is plain
text with fixed number formatting, so it is reproducible.
"""

from __future__ import annotations

import numpy as np

from . import rank3

LAYER_COLORS = ("#c0392b", "#2471a3", "#229954")


def _f(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def _points(poly) -> str:
    return " ".join(f"{_f(x)},{_f(y)}" for x, y in poly)


class SvgCanvas:
    """Minimal SVG builder in design coordinates (y up)."""

    def __init__(self, width: float, height: float, pixels: float = 800.0):
        self.width, self.height = float(width), float(height)
        self.scale = pixels / max(self.width, self.height)
        self.items: list[str] = []

    def add(self, item: str) -> None:
        self.items.append(item)

    def to_string(self) -> str:
        w, h = self.width * self.scale, self.height * self.scale
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w)}" height="{_f(h)}" '
            f'viewBox="0 0 {_f(self.width)} {_f(self.height)}">\n'
            f'<g transform="translate(0,{_f(self.height)}) scale(1,-1)">\n'
        )
        return head + "\n".join(self.items) + "\n</g>\n</svg>\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_string())


def density_underlay(canvas: SvgCanvas, design, levels: int = 32, opacity: float = 1.0) -> None:
    """Gray-scale cell rectangles, darker for denser cells, merged along rows."""
    nx, ny = design.shape
    cs = design.cell_size
    img = design.image(design.density, fill=np.nan)
    q = np.where(np.isnan(img), -1, np.clip(np.round(img * (levels - 1)), 0, levels - 1)).astype(int)
    rects = []
    for j in range(ny):
        row = q[j]
        i = 0
        while i < nx:
            k = i
            while k + 1 < nx and row[k + 1] == row[i]:
                k += 1
            if row[i] >= 0:
                g = int(round(255 * (1.0 - row[i] / (levels - 1))))
                rects.append(
                    f'<rect x="{_f(i * cs)}" y="{_f(j * cs)}" width="{_f((k - i + 1) * cs)}" '
                    f'height="{_f(cs)}" fill="rgb({g},{g},{g})"/>'
                )
            i = k + 1
    canvas.add(f'<g opacity="{_f(opacity)}" shape-rendering="crispEdges">\n' + "\n".join(rects) + "\n</g>")


def layer_tangents(design) -> np.ndarray:
    """``(n_cells, 3)`` tangent angles of the three layer families."""
    theta = np.asarray(design.theta, dtype=float)
    normals = theta if design.free else rank3.layer_thetas(theta)
    return normals + np.pi / 2


def trace_streamline(seed, angle_img, active, cell_size: float, step: float = 0.5, max_steps: int = 2000):
    """Midpoint-rule integration of a pi-periodic direction field from ``seed``.

    ``angle_img`` is an ``(ny, nx)`` image of line directions; the field is
    sampled at the containing cell.  The curve is traced both ways and stops
    when it leaves the active region.  ``step`` is in cells.
    """
    ny, nx = active.shape
    h = step * cell_size

    def direction(p, ref):
        i, j = int(np.floor(p[0] / cell_size)), int(np.floor(p[1] / cell_size))
        if not (0 <= i < nx and 0 <= j < ny) or not active[j, i]:
            return None
        a = angle_img[j, i]
        d = np.array([np.cos(a), np.sin(a)])
        return -d if d @ ref < 0 else d

    halves = []
    for sign in (1.0, -1.0):
        p = np.asarray(seed, dtype=float)
        d0 = direction(p, np.array([1.0, 0.0]))
        if d0 is None:
            return np.zeros((0, 2))
        ref = sign * d0
        pts = [p]
        for _ in range(max_steps):
            d1 = direction(p, ref)
            if d1 is None:
                break
            mid = p + 0.5 * h * d1
            d2 = direction(mid, d1)
            if d2 is None:
                break
            p = p + h * d2
            ref = d2
            pts.append(p)
        halves.append(np.array(pts))
    back, fwd = halves[1][::-1], halves[0]
    return np.concatenate([back[:-1], fwd])


def streamlines(canvas: SvgCanvas, design, stride: int | None = None, step: float = 0.5, width: float | None = None) -> int:
    """Draw the three tangent families, seeded on a stride grid of cells.

    The default stride gives about fifteen seeds along the longer side.
    """
    nx, ny = design.shape
    stride = stride or max(4, max(nx, ny) // 15)
    cs = design.cell_size
    tang = layer_tangents(design)
    seeds = [((i + 0.5) * cs, (j + 0.5) * cs) for j in range(stride // 2, ny, stride) for i in range(stride // 2, nx, stride)]
    seeds = [s for s in seeds if design.active[int(s[1] / cs), int(s[0] / cs)]]
    width = width if width is not None else 0.3 * cs
    count = 0
    for n in range(3):
        img = design.image(tang[:, n], fill=0.0)
        lines = []
        for s in seeds:
            pts = trace_streamline(s, img, design.active, cs, step=step, max_steps=4 * max(nx, ny))
            if len(pts) >= 2:
                lines.append(f'<polyline points="{_points(pts)}"/>')
        count += len(lines)
        canvas.add(
            f'<g fill="none" stroke="{LAYER_COLORS[n]}" stroke-width="{_f(width)}" stroke-opacity="0.8">\n'
            + "\n".join(lines)
            + "\n</g>"
        )
    return count


def lattice_fill(canvas: SvgCanvas, lattice, color: str = "black") -> None:
    """Solid lattice: each triangle minus its void (even-odd rule) plus gap patches."""
    paths = []
    for k in range(lattice.mesh.n_triangles):
        if not lattice.kept[k]:
            continue
        tri = lattice.triangle_points(k)
        d = "M" + " L".join(f"{_f(x)},{_f(y)}" for x, y in tri) + " Z"
        void = lattice.void(k)
        if len(void) >= 3:
            d += " M" + " L".join(f"{_f(x)},{_f(y)}" for x, y in void) + " Z"
        paths.append(f'<path d="{d}"/>')
    for p in lattice.patches:
        paths.append(f'<polygon points="{_points(p)}"/>')
    canvas.add(f'<g fill="{color}" fill-rule="evenodd" stroke="none">\n' + "\n".join(paths) + "\n</g>")


def mesh_outline(canvas: SvgCanvas, mesh, width: float = 0.5) -> None:
    segs = mesh.vertices[mesh.edges]
    lines = [f'<line x1="{_f(a[0])}" y1="{_f(a[1])}" x2="{_f(b[0])}" y2="{_f(b[1])}"/>' for a, b in segs]
    canvas.add(f'<g stroke="#555555" stroke-width="{_f(width)}">\n' + "\n".join(lines) + "\n</g>")


def _canvas_for(design) -> SvgCanvas:
    nx, ny = design.shape
    return SvgCanvas(nx * design.cell_size, ny * design.cell_size)


def render_density(path, design) -> None:
    c = _canvas_for(design)
    density_underlay(c, design)
    c.save(path)


def render_streamlines(path, design, stride: int | None = None) -> None:
    c = _canvas_for(design)
    density_underlay(c, design, opacity=0.35)
    streamlines(c, design, stride=stride)
    c.save(path)


def render_lattice(path, lattice, design=None, show_mesh: bool = False) -> None:
    if design is not None:
        c = _canvas_for(design)
        density_underlay(c, design, opacity=0.35)
    else:
        hi = lattice.mesh.vertices.max(axis=0)
        c = SvgCanvas(hi[0], hi[1])
    lattice_fill(c, lattice)
    if show_mesh:
        mesh_outline(c, lattice.mesh, width=0.02 * lattice.mesh.h)
    c.save(path)
