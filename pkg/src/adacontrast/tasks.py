"""Synthetic domain-shift tasks: rotated two moons, translated Gaussian blobs,
and corrupted glyph digits.

Every task is deterministic given (spec string, seed): source and target are
disjoint draws from the same label space, with the target generator composed
with the named shift. Target labels ride along for evaluation only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .augment import derive_rng

STREAM_SOURCE = 0
STREAM_TARGET = 1


@dataclass(frozen=True)
class ShiftTask:
    name: str
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    shift: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(max(self.source_y.max(), self.target_y.max())) + 1

    @property
    def input_dim(self) -> int:
        return int(self.source_x.shape[1])


# ---------------------------------------------------------------------------
# two moons under rotation
# ---------------------------------------------------------------------------

def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_up = n // 2
    n_down = n - n_up
    t_up = rng.uniform(0.0, np.pi, size=n_up)
    t_down = rng.uniform(0.0, np.pi, size=n_down)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1.0 - np.cos(t_down), 0.5 - np.sin(t_down)])
    x = np.vstack([upper, lower]) - np.array([0.5, 0.25])  # center the manifold
    y = np.concatenate([np.zeros(n_up, dtype=np.int64), np.ones(n_down, dtype=np.int64)])
    x = x + rng.normal(0.0, noise, size=x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def _rotation(theta_deg: float) -> np.ndarray:
    theta = np.deg2rad(theta_deg)
    return np.array([[np.cos(theta), -np.sin(theta)],
                     [np.sin(theta), np.cos(theta)]])


def two_moons_rotate(seed: int, n_source: int, n_target: int,
                     theta: float = 30.0, noise: float = 0.12,
                     dim: int = 16, lift_noise: float = 0.1) -> ShiftTask:
    """Source: two moons. Target: an independent draw rotated by theta degrees.

    The rotation acts in the moon plane; with ``dim`` > 2 the plane is then
    embedded into ``dim`` dimensions through a seeded orthogonal map plus
    isotropic off-plane noise, which gives each sample an instance signature
    while keeping the decision boundary a rotated nonlinear curve.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    xs, ys = _moons(n_source, noise, derive_rng(seed, STREAM_SOURCE))
    xt, yt = _moons(n_target, noise, derive_rng(seed, STREAM_TARGET))
    xt = xt @ _rotation(theta).T
    if dim > 2:
        basis, _ = np.linalg.qr(derive_rng(seed, 7).normal(size=(dim, dim)))

        def embed(x, stream):
            lifted = np.zeros((len(x), dim))
            lifted[:, :2] = x
            jitter = derive_rng(seed, 8, stream).normal(size=(len(x), dim))
            return lifted @ basis.T + lift_noise * jitter

        xs, xt = embed(xs, STREAM_SOURCE), embed(xt, STREAM_TARGET)
    return ShiftTask(f"two_moons_rotate_{_fmt(theta)}", xs, ys, xt, yt,
                     {"kind": "rotation", "theta_deg": theta, "noise": noise,
                      "dim": dim, "lift_noise": lift_noise})


# ---------------------------------------------------------------------------
# Gaussian blobs under mean translation
# ---------------------------------------------------------------------------

def gauss_blobs_shift(seed: int, n_source: int, n_target: int,
                      delta: float = 5.0, num_classes: int = 12,
                      dim: int = 16) -> ShiftTask:
    """Source: isotropic class blobs. Target: every sample translated by a
    fixed random direction of length delta."""
    layout = derive_rng(seed, 7)
    centers = layout.normal(0.0, 1.0, size=(num_classes, dim)) * 1.2
    direction = layout.normal(size=dim)
    direction /= np.linalg.norm(direction)

    def draw(n, rng):
        y = rng.integers(0, num_classes, size=n)
        x = centers[y] + rng.normal(0.0, 1.0, size=(n, dim))
        return x, y.astype(np.int64)

    xs, ys = draw(n_source, derive_rng(seed, STREAM_SOURCE))
    xt, yt = draw(n_target, derive_rng(seed, STREAM_TARGET))
    xt = xt + delta * direction
    return ShiftTask(f"gauss_blobs_shift_{_fmt(delta)}", xs, ys, xt, yt,
                     {"kind": "translation", "delta": delta,
                      "num_classes": num_classes, "dim": dim})


# ---------------------------------------------------------------------------
# glyph digits under corruption
# ---------------------------------------------------------------------------

_GLYPHS = [
    # 8x8 templates for digits 0-9; '#' marks lit pixels
    "..####.. .#....#. .#....#. .#....#. .#....#. .#....#. .#....#. ..####..",
    "...##... ..###... ...##... ...##... ...##... ...##... ...##... ..####..",
    "..####.. .#....#. ......#. .....#.. ....#... ...#.... ..#..... .######.",
    "..####.. .#....#. ......#. ...###.. ......#. ......#. .#....#. ..####..",
    "....##.. ...#.#.. ..#..#.. .#...#.. .######. .....#.. .....#.. .....#..",
    ".######. .#...... .#...... .#####.. ......#. ......#. .#....#. ..####..",
    "..####.. .#...... .#...... .#####.. .#....#. .#....#. .#....#. ..####..",
    ".######. ......#. .....#.. ....#... ....#... ...#.... ...#.... ...#....",
    "..####.. .#....#. .#....#. ..####.. .#....#. .#....#. .#....#. ..####..",
    "..####.. .#....#. .#....#. ..#####. ......#. ......#. ......#. ..####..",
]


def _glyph_templates() -> np.ndarray:
    grids = []
    for glyph in _GLYPHS:
        rows = glyph.split()
        grid = np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
        grids.append(grid)
    return np.stack(grids)  # (10, 8, 8)


def _box_blur(images: np.ndarray) -> np.ndarray:
    """3x3 box filter on (n, 8, 8) images with edge padding."""
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(images)
    for di in range(3):
        for dj in range(3):
            out += padded[:, di:di + 8, dj:dj + 8]
    return out / 9.0


def digits_corrupt(seed: int, n_source: int, n_target: int,
                   severity: float = 1.0) -> ShiftTask:
    """Source: noisy glyph renders. Target: additionally blurred, noisier,
    and with dropped pixels, all scaled by severity."""
    if severity < 0:
        raise ValueError("severity must be >= 0")
    templates = _glyph_templates()

    def draw(n, rng, corrupt):
        y = rng.integers(0, 10, size=n)
        imgs = templates[y] * rng.uniform(0.7, 1.3, size=(n, 1, 1))
        imgs = imgs + rng.normal(0.0, 0.25, size=imgs.shape)
        if corrupt:
            blur = min(0.9, 0.35 * severity)
            imgs = (1.0 - blur) * imgs + blur * _box_blur(imgs)
            imgs = imgs + rng.normal(0.0, 0.30 * severity, size=imgs.shape)
            keep = rng.uniform(size=imgs.shape) >= min(0.5, 0.10 * severity)
            imgs = imgs * keep
        return imgs.reshape(n, 64), y.astype(np.int64)

    xs, ys = draw(n_source, derive_rng(seed, STREAM_SOURCE), corrupt=False)
    xt, yt = draw(n_target, derive_rng(seed, STREAM_TARGET), corrupt=True)
    return ShiftTask(f"digits_corrupt_{_fmt(severity)}", xs, ys, xt, yt,
                     {"kind": "corruption", "severity": severity})


# ---------------------------------------------------------------------------
# spec-string front end
# ---------------------------------------------------------------------------

_GENERATORS = {
    "two_moons_rotate": (two_moons_rotate, ("theta", "noise", "dim", "lift_noise")),
    "gauss_blobs_shift": (gauss_blobs_shift, ("delta", "num_classes", "dim")),
    "digits_corrupt": (digits_corrupt, ("severity",)),
}

_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")

CACHE_FORMAT_VERSION = 1


def save_task(task: ShiftTask, path) -> None:
    """Binary dataset cache with a versioned header (npz container)."""
    np.savez_compressed(
        path,
        format_version=np.array([CACHE_FORMAT_VERSION]),
        name=np.array([task.name]),
        shift=np.array([repr(task.shift)]),
        source_x=task.source_x, source_y=task.source_y,
        target_x=task.target_x, target_y=task.target_y)


def load_task(path) -> ShiftTask:
    """Inverse of save_task; rejects unknown cache versions."""
    import ast

    with np.load(path, allow_pickle=False) as blob:
        version = int(blob["format_version"][0])
        if version != CACHE_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset cache version {version}")
        return ShiftTask(str(blob["name"][0]),
                         blob["source_x"], blob["source_y"],
                         blob["target_x"], blob["target_y"],
                         ast.literal_eval(str(blob["shift"][0])))


def _fmt(value: float) -> str:
    return f"{value:g}".replace(".", "p").replace("-", "m")


def make_task(spec: str, seed: int, n_source: int = 2000, n_target: int = 2000) -> ShiftTask:
    """Build a task from a compact spec string.

    Examples: ``two_moons_rotate(30)``, ``gauss_blobs_shift(2.5, 12, 16)``,
    ``digits_corrupt(1.0)``. Positional arguments are optional and follow the
    generator's parameter order.
    """
    match = _SPEC_RE.match(spec)
    if not match:
        raise ValueError(f"cannot parse task spec {spec!r}")
    name, arg_text = match.group(1), match.group(2)
    if name not in _GENERATORS:
        raise ValueError(f"unknown task {name!r}; known: {sorted(_GENERATORS)}")
    generator, param_names = _GENERATORS[name]
    kwargs = {}
    if arg_text and arg_text.strip():
        values = [float(part) for part in arg_text.split(",")]
        if len(values) > len(param_names):
            raise ValueError(f"too many arguments for {name}: {spec!r}")
        for pname, value in zip(param_names, values):
            if pname in ("num_classes", "dim"):
                value = int(value)
            kwargs[pname] = value
    return generator(seed, n_source, n_target, **kwargs)
