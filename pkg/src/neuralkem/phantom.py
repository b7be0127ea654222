"""Dynamic brain-like phantom, count simulation and composite prior frames."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .tomo import Grid, SparseMatrix, forward_project

REGION_NAMES = ("background", "gray", "white", "blood", "tumor")

# Ellipses in mm relative to the grid centre, painted in order (later wins).
DEFAULT_SHAPES = (
    {"region": "gray", "center_mm": (0.0, 0.0), "semi_axes_mm": (72.0, 87.0)},
    {"region": "white", "center_mm": (0.0, -3.0), "semi_axes_mm": (56.0, 70.0)},
    {"region": "gray", "center_mm": (-20.0, 8.0), "semi_axes_mm": (9.0, 15.0), "angle_deg": 15.0},
    {"region": "gray", "center_mm": (20.0, 8.0), "semi_axes_mm": (9.0, 15.0), "angle_deg": -15.0},
    {"region": "blood", "center_mm": (-36.0, 54.0), "semi_axes_mm": (9.0, 5.0), "angle_deg": 60.0},
    {"region": "blood", "center_mm": (36.0, 54.0), "semi_axes_mm": (9.0, 5.0), "angle_deg": -60.0},
    {"region": "tumor", "center_mm": (28.5, -28.5), "semi_axes_mm": (7.5, 7.5)},
)

# 24-frame protocol and the three frames (2, 12, 24) used at desk scale.
PROTOCOL_DURATIONS = (20.0,) * 4 + (40.0,) * 4 + (60.0,) * 4 + (180.0,) * 4 + (300.0,) * 8
DESK_FRAMES = (1, 11, 23)

# Composite priors: three 20-minute windows of a companion full-protocol scan.
PRIOR_WINDOWS = ((0.0, 1200.0), (1200.0, 2400.0), (2400.0, 3600.0))
PRIOR_TOTAL_COUNTS = 8e6
PRIOR_FRAME_OFFSET = 1000      # separates the prior scan's noise streams from the study's

# FDG kinetics per region: K1, k2, k3 (1/min) and fractional blood volume.
DEFAULT_KINETICS = {
    "gray": (0.102, 0.130, 0.062, 0.05),
    "white": (0.054, 0.109, 0.045, 0.03),
    "tumor": (0.200, 0.150, 0.100, 0.08),
}
BOLUS_DELAY_S = 10.0


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Phantom:
    label_map: np.ndarray
    grid: Grid
    region_names: tuple[str, ...] = REGION_NAMES

    def __post_init__(self):
        labels = np.asarray(self.label_map)
        if labels.shape != (self.grid.n_pixels,):
            raise PhantomError("label map does not match grid")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.region_names)):
            raise PhantomError("label outside region list")

    def mask(self, region: str) -> np.ndarray:
        return self.label_map == self.region_names.index(region)


@dataclass(frozen=True)
class FramingSchedule:
    """Frame durations in seconds; start times default to back-to-back frames."""

    durations: tuple[float, ...]
    starts: tuple[float, ...] | None = None

    def __post_init__(self):
        d = tuple(float(v) for v in self.durations)
        if not d or any(v <= 0 for v in d):
            raise PhantomError("frame durations must be > 0")
        starts = tuple(np.concatenate([[0.0], np.cumsum(d)[:-1]])) if self.starts is None else tuple(map(float, self.starts))
        if len(starts) != len(d):
            raise PhantomError("need one start time per frame")
        ends = np.add(starts, d)
        if np.any(np.asarray(starts[1:]) < ends[:-1] - 1e-9):
            raise PhantomError("frames overlap")
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "starts", tuple(float(s) for s in starts))

    @property
    def n_frames(self) -> int:
        return len(self.durations)

    @property
    def ends(self) -> tuple[float, ...]:
        return tuple(s + d for s, d in zip(self.starts, self.durations))

    @classmethod
    def protocol(cls) -> "FramingSchedule":
        return cls(PROTOCOL_DURATIONS)

    @classmethod
    def desk(cls) -> "FramingSchedule":
        full = cls.protocol()
        return cls(tuple(full.durations[i] for i in DESK_FRAMES), tuple(full.starts[i] for i in DESK_FRAMES))


@dataclass(frozen=True)
class TacTable:
    """Frame-averaged activity, one row per region and one column per frame."""

    region_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.region_names):
            raise PhantomError("TAC table needs one row per region")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise PhantomError("TAC values must be finite and >= 0")
        object.__setattr__(self, "values", v)

    def row(self, region: str) -> np.ndarray:
        return self.values[self.region_names.index(region)]


class FrameCounts(NamedTuple):
    noisy: np.ndarray
    background: np.ndarray
    scale: float
    expected: np.ndarray


@dataclass
class DynamicStudy:
    grid: Grid
    schedule: FramingSchedule
    true_images: np.ndarray          # (M, J)
    noisefree_sinos: np.ndarray      # (M, N) expected trues, scale * duration * P x
    background_sinos: np.ndarray     # (M, N)
    noisy_sinos: np.ndarray          # (M, N) integer-valued counts
    frame_scales: np.ndarray         # (M,) counts per unit activity per second per unit P
    seed: int
    realization: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.schedule.n_frames

    def frame_factor(self, m: int) -> float:
        """Multiplier turning P into the effective system matrix of frame m."""
        return float(self.frame_scales[m] * self.schedule.durations[m])


def _shape_coverage(grid: Grid, shape: dict, supersample: int) -> np.ndarray:
    cx, cy = shape["center_mm"]
    a, b = shape["semi_axes_mm"]
    phi = np.deg2rad(shape.get("angle_deg", 0.0))
    ps = grid.pixel_size
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    xx, yy = grid.pixel_centers()
    x = xx[..., None, None] + ps * offs[None, None, None, :] - cx
    y = yy[..., None, None] + ps * offs[None, None, :, None] - cy
    u = x * np.cos(phi) + y * np.sin(phi)
    v = -x * np.sin(phi) + y * np.cos(phi)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return inside.reshape(grid.ny, grid.nx, -1)


def make_phantom(grid: Grid, shapes: Sequence[dict] | None = DEFAULT_SHAPES,
                 region_names: Sequence[str] = REGION_NAMES, supersample: int = 5) -> Phantom:
    """Rasterise ellipses; a pixel takes a shape's label when >= half of it is covered.

    3D grids replicate the in-plane map along z.
    """
    region_names = tuple(region_names)
    shapes = list(shapes or [])
    half_x = 0.5 * grid.nx * grid.pixel_size
    half_y = 0.5 * grid.ny * grid.pixel_size
    labels = np.zeros((grid.ny, grid.nx), dtype=np.int64)
    hits = {}
    for shape in shapes:
        if shape["region"] not in region_names:
            raise PhantomError(f"unknown region {shape['region']!r}")
        a, b = shape["semi_axes_mm"]
        if a <= 0 or b <= 0:
            raise PhantomError("semi-axes must be > 0")
        r = max(a, b)
        cx, cy = shape["center_mm"]
        if abs(cx) + r > half_x or abs(cy) + r > half_y:
            raise PhantomError(f"shape {shape} does not fit inside the grid")
        cover = _shape_coverage(grid, shape, supersample)
        hits.setdefault(shape["region"], np.zeros_like(cover))
        hits[shape["region"]] |= cover
        labels[cover.mean(axis=-1) >= 0.5] = region_names.index(shape["region"])
    if "blood" in hits and "tumor" in hits and np.any(hits["blood"] & hits["tumor"]):
        raise PhantomError("blood and tumor regions overlap")
    flat = labels.ravel()
    if grid.nz is not None:
        flat = np.tile(flat, grid.nz)
    return Phantom(flat, grid, region_names)


def feng_input(t_s: np.ndarray, delay_s: float = BOLUS_DELAY_S) -> np.ndarray:
    """Plasma input function (Feng model), time in seconds."""
    A1, A2, A3 = 851.1225, 21.8798, 20.8113
    l1, l2, l3 = -4.133859, -0.01043449, -0.1190996
    tm = np.maximum(t_s - delay_s, 0.0) / 60.0
    c = (A1 * tm - A2 - A3) * np.exp(l1 * tm) + A2 * np.exp(l2 * tm) + A3 * np.exp(l3 * tm)
    return np.where(t_s > delay_s, c, 0.0)


def default_tac_table(schedule: FramingSchedule, region_names: Sequence[str] = REGION_NAMES,
                      kinetics: dict | None = None, dt_s: float = 0.05) -> TacTable:
    """Frame averages of an irreversible two-tissue FDG model driven by a Feng input."""
    kinetics = DEFAULT_KINETICS if kinetics is None else kinetics
    t_end = max(schedule.ends)
    t = (np.arange(int(np.ceil(t_end / dt_s))) + 0.5) * dt_s
    cp = feng_input(t)
    curves = {"background": np.zeros_like(t), "blood": cp}
    for name, (K1, k2, k3, vb) in kinetics.items():
        irf = K1 / (k2 + k3) * (k3 + k2 * np.exp(-(k2 + k3) * t / 60.0))
        ct = np.convolve(cp, irf)[: t.size] * (dt_s / 60.0)
        curves[name] = (1.0 - vb) * ct + vb * cp
    values = np.zeros((len(region_names), schedule.n_frames))
    for r, name in enumerate(region_names):
        if name not in curves:
            raise PhantomError(f"no kinetic model for region {name!r}")
        for m, (a, b) in enumerate(zip(schedule.starts, schedule.ends)):
            sel = (t >= a) & (t < b)
            values[r, m] = curves[name][sel].mean()
    return TacTable(tuple(region_names), values)


def synthesize_frames(phantom: Phantom, tacs: TacTable, schedule: FramingSchedule) -> np.ndarray:
    """Piecewise-constant activity images, shape (M, J)."""
    if tacs.values.shape[1] != schedule.n_frames:
        raise PhantomError("TAC table does not cover every frame")
    missing = [n for n in phantom.region_names if n not in tacs.region_names]
    if missing:
        raise PhantomError(f"TAC table lacks regions {missing}")
    lookup = np.stack([tacs.row(n) for n in phantom.region_names])  # (R, M)
    return lookup[phantom.label_map].T.copy()


def frame_rng(seed: int, realization: int = 0, frame: int = 0) -> np.random.Generator:
    """Independent stream per (seed, realization, frame) via SeedSequence mixing."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, realization, frame])))


def poisson_sample(expected: np.ndarray, seed: int, realization: int = 0, frame: int = 0) -> np.ndarray:
    expected = np.asarray(expected, dtype=np.float64)
    if np.any(expected < 0) or not np.all(np.isfinite(expected)):
        raise ValueError("Poisson means must be finite and >= 0")
    return frame_rng(seed, realization, frame).poisson(expected).astype(np.float64)


def simulate_counts(P: SparseMatrix, x_true: np.ndarray, duration_s: float, background_fraction: float,
                    target_total_counts: float | None = None, seed: int = 0, *, scale: float | None = None,
                    realization: int = 0, frame: int = 0) -> FrameCounts:
    """Noisy counts ``Poisson(scale*duration*P x + r)`` with uniform ``r``.

    Either ``target_total_counts`` (expected total events of this frame) or an
    explicit ``scale`` fixes the count level. ``r`` makes up
    ``background_fraction`` of the expected total.
    """
    if not 0.0 <= background_fraction < 1.0:
        raise ValueError("background_fraction must lie in [0, 1)")
    if (target_total_counts is None) == (scale is None):
        raise ValueError("give exactly one of target_total_counts or scale")
    trues_unit = duration_s * forward_project(P, x_true)
    if scale is None:
        if not target_total_counts > 0:
            raise ValueError("target_total_counts must be > 0")
        if trues_unit.sum() <= 0:
            raise ValueError("expected counts are all zero; cannot reach a count target")
        scale = (1.0 - background_fraction) * target_total_counts / trues_unit.sum()
    trues = scale * trues_unit
    r_total = background_fraction / (1.0 - background_fraction) * trues.sum()
    background = np.full(P.n_rows, r_total / P.n_rows)
    expected = trues + background
    noisy = poisson_sample(expected, seed, realization, frame)
    return FrameCounts(noisy, background, float(scale), expected)


def simulate_study(P: SparseMatrix, grid: Grid, true_images: np.ndarray, schedule: FramingSchedule,
                   background_fraction: float = 0.2, target_total_counts: float | None = None,
                   frame_counts: Sequence[float] | None = None, seed: int = 0,
                   realization: int = 0, frame_offset: int = 0) -> DynamicStudy:
    """Simulate every frame of one noise realisation.

    ``target_total_counts`` applies one global scale so the whole study has that
    many expected events; ``frame_counts`` instead fixes each frame's expectation.
    """
    M = schedule.n_frames
    true_images = np.asarray(true_images, dtype=np.float64)
    if true_images.shape != (M, P.n_cols):
        raise ValueError("true_images must be (n_frames, J)")
    if (target_total_counts is None) == (frame_counts is None):
        raise ValueError("give exactly one of target_total_counts or frame_counts")
    unit = np.array([schedule.durations[m] * forward_project(P, true_images[m]).sum() for m in range(M)])
    if frame_counts is not None:
        if len(frame_counts) != M:
            raise ValueError("need one count target per frame")
        if np.any(unit <= 0):
            raise ValueError("a frame has zero expected counts")
        scales = (1.0 - background_fraction) * np.asarray(frame_counts, dtype=np.float64) / unit
    else:
        if not target_total_counts > 0 or unit.sum() <= 0:
            raise ValueError("cannot scale an all-zero study to the count target")
        scales = np.full(M, (1.0 - background_fraction) * target_total_counts / unit.sum())
    noisefree, background, noisy = [], [], []
    for m in range(M):
        fc = simulate_counts(P, true_images[m], schedule.durations[m], background_fraction,
                             seed=seed, scale=scales[m], realization=realization, frame=frame_offset + m)
        noisefree.append(fc.expected - fc.background)
        background.append(fc.background)
        noisy.append(fc.noisy)
    return DynamicStudy(grid, schedule, true_images, np.array(noisefree), np.array(background),
                        np.array(noisy), scales, seed, realization,
                        meta={"background_fraction": background_fraction})


def window_frames(schedule: FramingSchedule, windows: Sequence[tuple[float, float]]) -> list[list[int]]:
    """Frame indices per window; windows must tile the frames at frame boundaries."""
    starts, ends = np.array(schedule.starts), np.array(schedule.ends)
    boundaries = np.concatenate([starts, ends])
    groups, used = [], np.zeros(schedule.n_frames, dtype=int)
    for a, b in windows:
        if not b > a:
            raise PhantomError(f"empty window ({a}, {b})")
        if not (np.isclose(boundaries, a).any() and np.isclose(boundaries, b).any()):
            raise PhantomError(f"window ({a}, {b}) is not aligned to frame boundaries")
        sel = np.flatnonzero((starts >= a - 1e-9) & (ends <= b + 1e-9))
        partial = np.flatnonzero((starts < b - 1e-9) & (ends > a + 1e-9))
        if sel.size != partial.size or sel.size == 0:
            raise PhantomError(f"window ({a}, {b}) splits a frame or holds none")
        used[sel] += 1
        groups.append(sel.tolist())
    if np.any(used != 1):
        raise PhantomError("windows must cover every frame exactly once")
    return groups


def composite_frames(study: DynamicStudy, windows: Sequence[tuple[float, float]], P: SparseMatrix,
                     n_iter: int = 60, source: str = "noisy") -> np.ndarray:
    """ML-EM reconstructions of rebinned (summed) frames, one per window, shape (C, J).

    ``source="noisy"`` sums measured counts; ``"noisefree"`` sums expected trues
    plus background. The effective system matrix of a composite is the sum of
    its frames' factors, so images come out in frame-averaged activity units.
    """
    from .recon import run_mlem

    if source not in ("noisy", "noisefree"):
        raise ValueError("source must be 'noisy' or 'noisefree'")
    out = []
    for frames in window_frames(study.schedule, windows):
        if source == "noisy":
            y = study.noisy_sinos[frames].sum(axis=0)
        else:
            y = (study.noisefree_sinos[frames] + study.background_sinos[frames]).sum(axis=0)
        r = study.background_sinos[frames].sum(axis=0)
        factor = sum(study.frame_factor(m) for m in frames)
        res = run_mlem(P.scaled(factor), y, r, n_iter=n_iter)
        out.append(res.x)
    return np.array(out)


def prior_composites(P: SparseMatrix, phantom: Phantom, total_counts: float = PRIOR_TOTAL_COUNTS,
                     windows: Sequence[tuple[float, float]] = PRIOR_WINDOWS, background_fraction: float = 0.2,
                     seed: int = 0, realization: int = 0, n_iter: int = 60, source: str = "noisy",
                     kinetics: dict | None = None) -> np.ndarray:
    """Composite prior images from a full 24-frame scan of the same phantom.

    The scan is simulated at ``total_counts`` with one global scale and its
    own noise streams, then rebinned into ``windows`` and reconstructed.
    """
    full = FramingSchedule.protocol()
    tacs = default_tac_table(full, phantom.region_names, kinetics)
    X = synthesize_frames(phantom, tacs, full)
    scan = simulate_study(P, phantom.grid, X, full, background_fraction, target_total_counts=total_counts,
                          seed=seed, realization=realization, frame_offset=PRIOR_FRAME_OFFSET)
    return composite_frames(scan, windows, P, n_iter, source)
