"""Grid worlds with unit-cell obstacles and continuous beacon positions.

Cell ``(x, y)`` covers ``[x, x+1) x [y, y+1)`` in world units. In the ASCII
map format, text row ``y`` lists the cells ``(0, y) .. (W-1, y)``.
"""
from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import MapFormatError, ValidationError

K_MEASURE = 5
BUNDLED_MAPS = {
    "world10": "world10.map",
    "world18": "world18.map",
    "world27": "world27.map",
    "labyrinth": "labyrinth.map",
}


class Environment:
    """Immutable grid world.

    Parameters
    ----------
    width, height : int
        World size in cells.
    obstacles : iterable of (int, int)
        Blocked cells as ``(x, y)``.
    beacons : array_like, shape (n, 2)
        Beacon positions in world units.
    k_measure : int
        Minimum number of beacons required.
    """

    def __init__(self, width, height, obstacles=(), beacons=(), k_measure=K_MEASURE, name=None):
        if int(width) <= 0 or int(height) <= 0:
            raise ValidationError(f"world size must be positive, got {width}x{height}")
        self.width = int(width)
        self.height = int(height)
        self.name = name
        cells = frozenset((int(x), int(y)) for x, y in obstacles)
        for x, y in cells:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValidationError(f"obstacle cell {(x, y)} outside {self.width}x{self.height} world")
        self.obstacles = cells
        b = np.asarray(beacons, dtype=np.float64).reshape(-1, 2)
        if len(b) == 0:
            raise ValidationError("environment has no beacons")
        if len(b) < k_measure:
            raise ValidationError(f"environment has {len(b)} beacons, need at least {k_measure}")
        if np.any(b < 0) or np.any(b[:, 0] > self.width) or np.any(b[:, 1] > self.height):
            raise ValidationError("beacon outside world rectangle")
        for i, (bx, by) in enumerate(b):
            cell = (min(int(bx), self.width - 1), min(int(by), self.height - 1))
            if cell in cells:
                raise ValidationError(f"beacon {i} at ({bx}, {by}) lies inside obstacle cell {cell}")
        b.setflags(write=False)
        self.beacons = b
        grid = np.zeros((self.height, self.width), dtype=bool)
        for x, y in cells:
            grid[y, x] = True
        grid.setflags(write=False)
        self.grid = grid

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.obstacles == other.obstacles
            and self.beacons.shape == other.beacons.shape
            and bool(np.all(self.beacons == other.beacons))
        )

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return (f"Environment{label}({self.width}x{self.height}, "
                f"{len(self.obstacles)} obstacles, {len(self.beacons)} beacons)")

    @property
    def n_beacons(self):
        return len(self.beacons)

    @property
    def area(self):
        return self.width * self.height

    def is_colliding(self, c, radius=0.0):
        return bool(self.colliding_mask(np.asarray(c, dtype=np.float64)[None, :], radius)[0])

    def colliding_mask(self, points, radius=0.0):
        """Vectorized collision test for ``points`` of shape (n, 2)."""
        if radius < 0:
            raise ValueError("radius must be non-negative")
        pts = np.asarray(points, dtype=np.float64)
        px, py = pts[:, 0], pts[:, 1]
        hit = (px - radius < 0) | (py - radius < 0) | (px + radius > self.width) | (py + radius > self.height)
        hit |= ~np.isfinite(px) | ~np.isfinite(py)
        if not self.obstacles:
            return hit
        reach = int(math.ceil(radius))
        fx = np.floor(np.where(np.isfinite(px), px, -1)).astype(np.int64)
        fy = np.floor(np.where(np.isfinite(py), py, -1)).astype(np.int64)
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                cx, cy = fx + dx, fy + dy
                inside = (cx >= 0) & (cx < self.width) & (cy >= 0) & (cy < self.height)
                blocked = np.zeros_like(hit)
                blocked[inside] = self.grid[cy[inside], cx[inside]]
                if not blocked.any():
                    continue
                # distance from point to the closed cell rectangle
                ddx = np.maximum(np.maximum(cx - px, px - (cx + 1)), 0.0)
                ddy = np.maximum(np.maximum(cy - py, py - (cy + 1)), 0.0)
                hit |= blocked & (ddx * ddx + ddy * ddy <= radius * radius)
        return hit

    def k_nearest_beacon_distances(self, c, k=K_MEASURE):
        if k > self.n_beacons:
            raise ValidationError(f"requested {k} nearest beacons but environment has {self.n_beacons}")
        d = np.hypot(self.beacons[:, 0] - c[0], self.beacons[:, 1] - c[1])
        order = np.argsort(d, kind="stable")[:k]
        return d[order]

    def nearest_distances_batch(self, points, k=K_MEASURE):
        """Sorted k nearest beacon distances for each row of ``points``."""
        if k > self.n_beacons:
            raise ValidationError(f"requested {k} nearest beacons but environment has {self.n_beacons}")
        pts = np.asarray(points, dtype=np.float64)
        diff = pts[:, None, :] - self.beacons[None, :, :]
        d = np.hypot(diff[..., 0], diff[..., 1])
        if k < d.shape[1]:
            d = np.partition(d, k - 1, axis=1)[:, :k]
        return np.sort(d, axis=1)

    def nearest_beacon_indices(self, points, k=K_MEASURE):
        """Indices of the k nearest beacons per point, nearest first."""
        pts = np.asarray(points, dtype=np.float64)
        diff = pts[:, None, :] - self.beacons[None, :, :]
        d = np.hypot(diff[..., 0], diff[..., 1])
        return np.argsort(d, axis=1, kind="stable")[:, :k]

    def sample_free_position(self, rng, radius=0.0, max_tries=100000):
        for _ in range(max_tries):
            c = rng.uniform((0.0, 0.0), (self.width, self.height))
            if not self.is_colliding(c, radius):
                return c
        raise ValidationError("could not find a collision-free position")

    def sample_free_positions(self, n, rng, radius=0.0):
        out = np.empty((n, 2))
        todo = np.arange(n)
        while len(todo):
            cand = rng.uniform((0.0, 0.0), (self.width, self.height), size=(len(todo), 2))
            ok = ~self.colliding_mask(cand, radius)
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
        return out

    def rasterize(self):
        """Two-channel (obstacle, beacon) occupancy image of shape (2, H, W)."""
        img = np.zeros((2, self.height, self.width))
        img[0] = self.grid
        for bx, by in self.beacons:
            img[1, min(int(by), self.height - 1), min(int(bx), self.width - 1)] = 1.0
        return img


def is_colliding(env, c, radius=0.0):
    return env.is_colliding(c, radius)


def k_nearest_beacon_distances(env, c, k=K_MEASURE):
    return env.k_nearest_beacon_distances(c, k)


def parse_map(text, k_measure=K_MEASURE, name=None):
    """Parse the ASCII map format into an :class:`Environment`."""
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MapFormatError("empty map", line=1)
    header = lines[0].split()
    if len(header) != 2:
        raise MapFormatError("header must be 'W H'", line=1)
    try:
        width, height = int(header[0]), int(header[1])
    except ValueError:
        raise MapFormatError(f"non-integer size {lines[0]!r}", line=1) from None
    if width <= 0 or height <= 0:
        raise MapFormatError("size must be positive", line=1)
    if len(lines) < 1 + height:
        raise MapFormatError(f"expected {height} grid rows, found {len(lines) - 1}", line=len(lines) + 1)

    obstacles, cells = [], []
    for y in range(height):
        row = lines[1 + y]
        if len(row) != width:
            raise MapFormatError(f"row has {len(row)} characters, expected {width}", line=2 + y)
        for x, ch in enumerate(row):
            if ch == "#":
                obstacles.append((x, y))
            elif ch == "B":
                cells.append((x, y))
            elif ch != ".":
                raise MapFormatError(f"unexpected character {ch!r}", line=2 + y)

    beacons = [(x + 0.5, y + 0.5) for x, y in cells]
    for lineno, raw in enumerate(lines[1 + height:], start=2 + height):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] != "beacon" or len(parts) != 4:
            raise MapFormatError(f"expected 'beacon <index> <x> <y>', got {raw!r}", line=lineno)
        try:
            idx, bx, by = int(parts[1]), float(parts[2]), float(parts[3])
        except ValueError:
            raise MapFormatError(f"bad beacon override {raw!r}", line=lineno) from None
        if not 0 <= idx < len(beacons):
            raise MapFormatError(f"beacon index {idx} out of range (map has {len(beacons)})", line=lineno)
        beacons[idx] = (bx, by)
    if not beacons:
        raise ValidationError("map has zero beacons")
    return Environment(width, height, obstacles, beacons, k_measure=k_measure, name=name)


def serialize_map(env):
    """Inverse of :func:`parse_map`.

    Beacons must be listed in row-major order of their cells, one per cell.
    """
    rows = [["."] * env.width for _ in range(env.height)]
    for x, y in env.obstacles:
        rows[y][x] = "#"
    overrides = []
    prev = None
    for i, (bx, by) in enumerate(env.beacons):
        cx, cy = min(int(bx), env.width - 1), min(int(by), env.height - 1)
        if prev is not None and (cy, cx) <= prev:
            raise ValidationError("beacons must occupy distinct cells in row-major order to serialize")
        prev = (cy, cx)
        rows[cy][cx] = "B"
        if bx != cx + 0.5 or by != cy + 0.5:
            overrides.append(f"beacon {i} {float(bx)!r} {float(by)!r}")
    out = [f"{env.width} {env.height}"] + ["".join(r) for r in rows] + overrides
    return "\n".join(out) + "\n"


def load_map(path_or_name, k_measure=K_MEASURE):
    """Load a map file, or a bundled map by name (``world10``, ``labyrinth``...)."""
    key = str(path_or_name)
    if key in BUNDLED_MAPS:
        text = resources.files("beaconloc.maps").joinpath(BUNDLED_MAPS[key]).read_text()
        return parse_map(text, k_measure=k_measure, name=key)
    path = Path(key)
    return parse_map(path.read_text(), k_measure=k_measure, name=path.stem)


def bundled_environments():
    return {name: load_map(name) for name in BUNDLED_MAPS}
