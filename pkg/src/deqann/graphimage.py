"""Structure ingestion: XYZ parsing, cutoff neighbor graphs, graph images, labels.

Images are rendered by projecting atoms onto the two principal axes of their
coordinates, drawing every neighbor pair as a 1-pixel gray segment and every
atom as a filled disk in its element's color on a white field.  Rendering is
pure integer rasterization, so identical inputs give identical bytes.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elements import ATOMIC_NUMBER, BACKGROUND, COLOR_TABLE, EDGE_COLOR

logger = logging.getLogger(__name__)

COMPOUND_CUTOFF = 2.0
MOF_CUTOFF = 3.4


class XYZParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class MolecularStructure:
    id: str
    elements: list
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.elements) == 0:
            raise ValueError("a structure needs at least one atom")
        if len(self.elements) != len(self.positions):
            raise ValueError("elements and positions differ in length")
        for sym in self.elements:
            if sym not in ATOMIC_NUMBER:
                raise ValueError(f"unknown element symbol {sym!r}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("atom positions must be finite")

    def __len__(self):
        return len(self.elements)


@dataclass
class NeighborGraph:
    nodes: list
    edges: set
    cutoff: float

    @property
    def n_edges(self):
        return len(self.edges)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    source_id: str = ""


def parse_xyz(text, id=""):
    """Parse one XYZ block: atom count, comment line, then ``symbol x y z`` lines.

    Extra columns after the coordinates are ignored; trailing blank lines are
    allowed.  Errors carry the 1-based line number.
    """
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise XYZParseError("missing atom count", 1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise XYZParseError(f"atom count is not an integer: {lines[0].strip()!r}", 1) from None
    if count < 1:
        raise XYZParseError("atom count must be positive", 1)
    body = lines[2:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != count:
        raise XYZParseError(f"header declares {count} atoms but {len(body)} atom lines follow",
                            1)
    elements = []
    positions = []
    for offset, line in enumerate(body):
        lineno = offset + 3
        parts = line.split()
        if len(parts) < 4:
            raise XYZParseError(f"expected 'symbol x y z', got {line.strip()!r}", lineno)
        sym = parts[0]
        if sym not in ATOMIC_NUMBER:
            # tolerate case variants such as 'CL' or 'cl'
            fixed = sym[:1].upper() + sym[1:].lower()
            if fixed not in ATOMIC_NUMBER:
                raise XYZParseError(f"unknown element {sym!r}", lineno)
            sym = fixed
        try:
            xyz = [float(v) for v in parts[1:4]]
        except ValueError:
            raise XYZParseError(f"malformed coordinate in {line.strip()!r}", lineno) from None
        if not all(np.isfinite(xyz)):
            raise XYZParseError("non-finite coordinate", lineno)
        elements.append(sym)
        positions.append(xyz)
    return MolecularStructure(id, elements, np.array(positions))


def read_xyz(path):
    path = Path(path)
    return parse_xyz(path.read_text(), id=path.stem)


def format_xyz(s, comment=""):
    lines = [str(len(s)), comment]
    lines += [f"{e} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for e, p in zip(s.elements, s.positions)]
    return "\n".join(lines) + "\n"


def build_neighbor_graph(s, cutoff):
    """Edges between every pair of distinct atoms at distance ``<= cutoff``."""
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    pos = s.positions
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    i, j = np.nonzero(np.triu(dist <= cutoff, k=1))
    return NeighborGraph(list(s.elements), set(zip(i.tolist(), j.tolist())), float(cutoff))


def element_color(symbol):
    """Fixed, collision-free RGB color of an element."""
    try:
        return COLOR_TABLE[ATOMIC_NUMBER[symbol]]
    except KeyError:
        raise ValueError(f"unknown element symbol {symbol!r}") from None


def principal_plane(positions):
    """2-d coordinates of ``positions`` on their two leading principal axes.

    Axis signs are fixed so the largest-magnitude component of each axis is
    positive, which keeps the projection reproducible.
    """
    centered = positions - positions.mean(axis=0)
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1][:, :2].copy()
    for k in range(2):
        j = np.argmax(np.abs(axes[:, k]))
        if axes[j, k] < 0:
            axes[:, k] = -axes[:, k]
    return centered @ axes


def node_radius(width):
    return max(2, width // 64)


def layout_pixels(s, width, height):
    """Integer pixel centers ``(col, row)`` of every atom."""
    uv = principal_plane(s.positions)
    r = node_radius(width)
    margin = r + 2
    extent = np.max(np.abs(uv)) if len(uv) else 0.0
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    # isotropic scale keeps the projected geometry undistorted
    if extent <= 1e-9:
        scale = 0.0
    else:
        scale = (min(width, height) / 2.0 - margin) / extent
    cols = np.rint(cx + scale * uv[:, 0]).astype(int)
    rows = np.rint(cy - scale * uv[:, 1]).astype(int)
    return cols, rows


def _line_pixels(c0, r0, c1, r1):
    """Bresenham segment between two integer points, inclusive."""
    pts = []
    dc, dr = abs(c1 - c0), -abs(r1 - r0)
    sc = 1 if c0 < c1 else -1
    sr = 1 if r0 < r1 else -1
    err = dc + dr
    c, r = c0, r0
    while True:
        pts.append((c, r))
        if c == c1 and r == r1:
            return pts
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c += sc
        if e2 <= dc:
            err += dc
            r += sr


def render_graph_image(g, s, width=64, height=64):
    """Render a neighbor graph as an ``(height, width, 3)`` uint8 image."""
    if width < 32 or height < 32:
        raise ValueError("images must be at least 32x32 pixels")
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    cols, rows = layout_pixels(s, width, height)
    for i, j in sorted(g.edges):
        for c, r in _line_pixels(cols[i], rows[i], cols[j], rows[j]):
            if 0 <= c < width and 0 <= r < height:
                img[r, c] = EDGE_COLOR
    rad = node_radius(width)
    yy, xx = np.mgrid[-rad:rad + 1, -rad:rad + 1]
    disk = xx * xx + yy * yy <= rad * rad
    for k, sym in enumerate(g.nodes):
        color = element_color(sym)
        for dy, dx in zip(yy[disk], xx[disk]):
            r, c = rows[k] + dy, cols[k] + dx
            if 0 <= c < width and 0 <= r < height:
                img[r, c] = color
    return img


def write_ppm(path, pixels):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path):
    """Read a binary (P6, maxval 255) PPM into an ``(H, W, 3)`` uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: only binary 8-bit PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    payload = data[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def image_to_tensor(pixels):
    """``(H, W, 3)`` uint8 pixels to a ``(3, H, W)`` float array in [0, 1]."""
    return np.asarray(pixels, dtype=np.float64).transpose(2, 0, 1) / 255.0


def stack_images(data):
    """Stack labeled images into ``(X, y)`` with ``X`` shaped ``(n, 3, H, W)``."""
    if not data:
        return np.zeros((0, 3, 1, 1)), np.zeros(0, dtype=np.int64)
    X = np.stack([image_to_tensor(item.pixels) for item in data])
    y = np.array([item.label for item in data], dtype=np.int64)
    return X, y


# -- labels ---------------------------------------------------------------

TASKS = {
    "dipole": ("dipole", ("weakly_polar", "strongly_polar")),
    "pore": ("pore_diameter", ("no_fit", "fits")),
    "bandgap": ("band_gap", ("metal", "semiconductor", "insulator")),
}


@dataclass(frozen=True)
class Thresholds:
    """Class boundaries; ``pore`` has no default and must be configured."""

    dipole: float = 4.803
    pore: float = None
    gap_metal_max: float = 0.1
    gap_insulator_min: float = 3.0

    def as_dict(self):
        return {"dipole": self.dipole, "pore": self.pore, "gap_metal_max": self.gap_metal_max,
                "gap_insulator_min": self.gap_insulator_min}


def n_classes_for(task):
    return len(TASKS[task][1])


def property_column(task):
    try:
        return TASKS[task][0]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None


def read_property_table(path):
    """``{id: {column: float}}`` from a CSV with an ``id`` column.

    Empty cells are left out of the row so lookups for them fail like any
    other missing property.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return {}, []
        columns = [c.strip() for c in reader.fieldnames]
        if "id" not in columns:
            raise ValueError(f"{path}: property CSV needs an 'id' column, got {columns}")
        table = {}
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            values = {}
            for k, v in row.items():
                if k == "id" or v == "":
                    continue
                try:
                    values[k] = float(v)
                except ValueError:
                    raise ValueError(f"{path}, line {lineno}: {k}={v!r} is not a number") from None
            table[row["id"]] = values
    return table, columns


def derive_label(props, id, task, thresholds=None):
    """Class index of structure ``id`` under the physical thresholds of ``task``."""
    thresholds = thresholds or Thresholds()
    column = property_column(task)
    try:
        value = props[id][column]
    except KeyError:
        raise KeyError(f"no {column!r} value for structure {id!r}") from None
    if not np.isfinite(value):
        raise ValueError(f"{column} of {id!r} is not finite")
    if task == "dipole":
        return int(abs(value) >= thresholds.dipole)
    if task == "pore":
        if thresholds.pore is None:
            raise ValueError("pore-size task needs an explicit pore threshold")
        return int(value >= thresholds.pore)
    if value <= thresholds.gap_metal_max:
        return 0
    if value < thresholds.gap_insulator_min:
        return 1
    return 2


MANIFEST_HEADER = ["id", "image_path", "label"]


@dataclass
class Manifest:
    path: Path
    rows: list = field(default_factory=list)

    def class_counts(self, n_classes=None):
        labels = [int(r[2]) for r in self.rows]
        n = n_classes or (max(labels) + 1 if labels else 0)
        return [labels.count(c) for c in range(n)]


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def read_manifest(path):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: not a manifest (header {header})")
        rows = [(r[0], r[1], int(r[2])) for r in reader]
    return Manifest(path, rows)


def load_manifest_images(manifest):
    base = Path(manifest.path).parent
    return [LabeledImage(read_ppm(base / p), label, id) for id, p, label in manifest.rows]


def _write_dataset(out_dir, items, meta, skipped):
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for item in sorted(items, key=lambda it: it.source_id):
        rel = f"images/{item.source_id}.ppm"
        write_ppm(out_dir / rel, item.pixels)
        rows.append((item.source_id, rel, item.label))
    write_manifest(out_dir / "manifest.csv", rows)
    with open(out_dir / "manifest_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "skipped.txt", "w") as fh:
        for id, reason in sorted(skipped):
            fh.write(f"{id}: {reason}\n")
    return Manifest(out_dir / "manifest.csv", rows)


def structure_image(s, cutoff, width=64, height=64):
    return render_graph_image(build_neighbor_graph(s, cutoff), s, width, height)


def prepare_dataset(structure_dir, property_csv, task, cutoff, out_dir, thresholds=None,
                    size=64):
    """Render and label every ``*.xyz`` structure that has the task's property.

    Writes ``images/<id>.ppm``, ``manifest.csv`` (``id,image_path,label``,
    sorted by id), ``manifest_meta.json`` (task, cutoff, thresholds) and
    ``skipped.txt``.  Returns the :class:`Manifest`.
    """
    structure_dir = Path(structure_dir)
    files = sorted(structure_dir.glob("*.xyz")) if structure_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no .xyz structures found in {structure_dir}")
    column = property_column(task)
    thresholds = thresholds or Thresholds()
    table, columns = read_property_table(property_csv)
    if columns and column not in columns:
        raise ValueError(f"{property_csv}: task {task!r} needs a {column!r} column, "
                         f"got {columns}")
    items, skipped = [], []
    for path in files:
        id = path.stem
        if id not in table or column not in table[id]:
            skipped.append((id, f"missing {column}"))
            continue
        try:
            s = read_xyz(path)
        except XYZParseError as exc:
            skipped.append((id, f"parse error: {exc}"))
            continue
        label = derive_label(table, id, task, thresholds)
        items.append(LabeledImage(structure_image(s, cutoff, size, size), label, id))
    for id, reason in skipped:
        logger.info("skipping %s: %s", id, reason)
    meta = {"task": task, "cutoff": cutoff, "size": size, "thresholds": thresholds.as_dict(),
            "source": "structures"}
    return _write_dataset(out_dir, items, meta, skipped)


# -- synthetic data ---------------------------------------------------------

SYNTHETIC_ELEMENTS = ("C", "N", "O", "S", "P", "B", "Si", "Cl")
BOND = 1.5
JITTER = 0.1


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synthetic_structure(kind, n_atoms, rng, id=""):
    """Zigzag chain or regular ring of ``n_atoms`` with 1.5 A bonds, jittered and rotated.

    Bonded neighbors stay within 2 A and all other pairs beyond 2.5 A, so a
    2 A cutoff recovers exactly ``n - 1`` (chain) or ``n`` (ring) edges.
    """
    idx = np.arange(n_atoms)
    if kind == "chain":
        half = np.deg2rad(60.0)
        pos = np.stack([idx * BOND * np.sin(half), (idx % 2) * BOND * np.cos(half),
                        np.zeros(n_atoms)], axis=1)
    elif kind == "ring":
        radius = BOND / (2.0 * np.sin(np.pi / n_atoms))
        theta = 2.0 * np.pi * idx / n_atoms
        pos = np.stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros(n_atoms)],
                       axis=1)
    else:
        raise ValueError(f"unknown synthetic topology {kind!r}")
    pos = pos + rng.uniform(-JITTER, JITTER, size=pos.shape)
    pos = pos @ _random_rotation(rng).T
    elements = [SYNTHETIC_ELEMENTS[k] for k in rng.integers(0, len(SYNTHETIC_ELEMENTS),
                                                             n_atoms)]
    return MolecularStructure(id, elements, pos)


def generate_synthetic_structures(n_per_class, seed=0, min_atoms=6, max_atoms=12):
    """Seeded ``(structure, label)`` pairs, chains labeled 0 and rings 1, interleaved."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    if min_atoms < 6:
        raise ValueError("synthetic rings need at least 6 atoms")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for label, kind in enumerate(("chain", "ring")):
            n = int(rng.integers(min_atoms, max_atoms + 1))
            out.append((synthetic_structure(kind, n, rng, f"{kind}_{i:05d}"), label))
    return out


def generate_synthetic_dataset(n_per_class, seed=0, size=32, cutoff=COMPOUND_CUTOFF):
    """Chain-vs-ring graph images rendered through the real pipeline."""
    return [LabeledImage(structure_image(s, cutoff, size, size), label, s.id)
            for s, label in generate_synthetic_structures(n_per_class, seed)]


def write_synthetic_dataset(out_dir, n_per_class, seed=0, size=32, cutoff=COMPOUND_CUTOFF):
    items = generate_synthetic_dataset(n_per_class, seed, size, cutoff)
    meta = {"task": "topology", "cutoff": cutoff, "size": size, "seed": seed,
            "n_per_class": n_per_class, "source": "synthetic"}
    return _write_dataset(out_dir, items, meta, [])
