"""Grid functions on the chart, tube averages along geodesics, and the Nikodym maximal function."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtri
from scipy.stats import qmc

from .errors import ChartDomainError, NikodymError, ResolutionError
from .geodesic_flow import CotangentState, integrate_batch
from .metric import CometricModel, check_in_chart, submanifold_dim

MIN_RESOLUTION = 8


# --------------------------------------------------------------------------
# grid functions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridFunction:
    """``|f|`` sampled at the cell centres of a uniform grid on ``(-halfwidth, halfwidth)^D``.

    The represented function is ``scale * values``; keeping the scale
    separate lets indicators stay in ``uint8`` and makes ``c * f`` exact.
    """

    values: np.ndarray
    halfwidth: float = 0.5
    scale: float = 1.0
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim < 2 or len(set(v.shape)) != 1:
            raise ValueError(f"values must be a cubic array, got shape {v.shape}")
        if v.shape[0] < MIN_RESOLUTION:
            raise ResolutionError(f"grid resolution must be >= {MIN_RESOLUTION}",
                                  min_resolution=MIN_RESOLUTION)
        if not (self.scale >= 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be finite and non-negative")
        if v.dtype.kind == "f":
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError("grid values must be finite and non-negative")
        elif v.dtype.kind == "i" and np.any(v < 0):
            raise ValueError("grid values must be non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def n_per_axis(self) -> int:
        return self.values.shape[0]

    @property
    def cell_width(self) -> float:
        return 2.0 * self.halfwidth / self.n_per_axis

    @property
    def cell_volume(self) -> float:
        return self.cell_width ** self.dim

    def ticks(self) -> np.ndarray:
        n = self.n_per_axis
        return -self.halfwidth + (np.arange(n) + 0.5) * self.cell_width

    def max_value(self) -> float:
        return self.scale * float(self.values.max())

    def scaled(self, c: float) -> "GridFunction":
        if not c > 0:
            raise ValueError("scale factor must be positive")
        return GridFunction(self.values, self.halfwidth, self.scale * c, self.label)

    def lookup(self, y: np.ndarray):
        """Nearest-cell values at points ``y[..., D]`` and an in-grid mask.

        Values are returned unscaled; points outside the grid give 0.
        """
        n = self.n_per_axis
        idx = np.floor((y + self.halfwidth) / self.cell_width).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < n), axis=-1)
        np.clip(idx, 0, n - 1, out=idx)
        flat = np.zeros(idx.shape[:-1], dtype=np.int64)
        for k in range(self.dim):
            flat = flat * n + idx[..., k]
        vals = self.values.reshape(-1)[flat]
        return np.where(inside, vals, 0), inside

    @classmethod
    def constant(cls, dim: int, n: int, value: float = 1.0, halfwidth: float = 0.5):
        return cls(np.ones((n,) * dim, dtype=np.uint8), halfwidth, float(value), "constant")

    @classmethod
    def from_function(cls, fn, dim: int, n: int, halfwidth: float = 0.5):
        """Sample ``fn(points[..., D])`` at cell centres."""
        t = -halfwidth + (np.arange(n) + 0.5) * (2.0 * halfwidth / n)
        mesh = np.stack(np.meshgrid(*([t] * dim), indexing="ij"), axis=-1)
        return cls(np.abs(np.asarray(fn(mesh), dtype=float)), halfwidth, 1.0, "sampled")


def counterexample_f(delta: float, d_total: int, resolution: int, halfwidth: float = 0.5,
                     min_cells: float = 2.0) -> GridFunction:
    """Indicator of ``{x_1 < 0, |x_normal| < delta}`` on a ``resolution^D`` grid."""
    width = 2.0 * halfwidth / resolution
    if delta < min_cells * width:
        need = int(math.ceil(min_cells * 2.0 * halfwidth / delta))
        raise ResolutionError(
            f"delta={delta} spans {delta / width:.2f} cells; need resolution >= {need}",
            min_resolution=need,
        )
    n_sub = submanifold_dim(d_total)
    t = -halfwidth + (np.arange(resolution) + 0.5) * width
    half = (t < 0).astype(np.uint8)
    r2 = np.zeros((resolution,) * (d_total - n_sub))
    for k in range(d_total - n_sub):
        shape = [1] * (d_total - n_sub)
        shape[k] = resolution
        r2 = r2 + (t ** 2).reshape(shape)
    slab = (r2 < delta ** 2).astype(np.uint8)
    full = (half.reshape((resolution,) + (1,) * (d_total - 1))
            * slab.reshape((1,) * n_sub + slab.shape))
    full = np.broadcast_to(full, (resolution,) * d_total)
    return GridFunction(np.ascontiguousarray(full), halfwidth, 1.0, f"slab delta={delta!r}")


# --------------------------------------------------------------------------
# tubes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TubeSpec:
    """Geodesic tube of radius ``delta`` around a segment ``[-beta, beta]``."""

    delta: float
    beta: float = 0.4
    n_axial: int = 32
    n_transversal: int = 32
    min_cells: float = 2.0
    substeps: int = 2

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("tube radius must be positive")
        if not 0 < self.beta <= 0.4:
            raise ValueError("beta must lie in (0, 0.4]")
        if self.n_axial < 32 or self.n_axial % 2:
            raise ValueError("n_axial must be an even number >= 32")
        if self.n_transversal < 1:
            raise ValueError("n_transversal must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be positive")

    def check(self, grid_fn: GridFunction, model: CometricModel) -> None:
        if self.delta > model.delta0 / 4:
            raise ValueError(f"tube radius {self.delta} exceeds a quarter of the chart half-width")
        if self.delta < self.min_cells * grid_fn.cell_width:
            need = int(math.ceil(self.min_cells * 2 * grid_fn.halfwidth / self.delta))
            raise ResolutionError(
                f"tube radius {self.delta} is not resolved by a {grid_fn.n_per_axis}-cell grid",
                min_resolution=need,
            )
        if grid_fn.dim != model.dim:
            raise ValueError("grid and model dimensions differ")


def ball_pattern(dim: int, count: int) -> np.ndarray:
    """First ``count`` Halton points that fall in the closed unit ``dim``-ball."""
    if dim == 1:
        return np.linspace(-1.0, 1.0, count)[:, None] if count > 1 else np.zeros((1, 1))
    sampler = qmc.Halton(dim, scramble=False)
    out = np.empty((0, dim))
    while len(out) < count:
        pts = 2.0 * sampler.random(max(64, 4 * count)) - 1.0
        out = np.concatenate([out, pts[np.sum(pts ** 2, axis=1) <= 1.0]])
    return out[:count]


def householder_complement(u: np.ndarray) -> np.ndarray:
    """Orthonormal bases ``(N, D, D-1)`` of the Euclidean complements of unit ``u``."""
    N, D = u.shape
    sign = np.where(u[:, 0] >= 0, 1.0, -1.0)
    v = u.copy()
    v[:, 0] += sign
    H = np.eye(D)[None] - 2.0 * v[:, :, None] * v[:, None, :] / np.sum(v * v, axis=1)[:, None, None]
    return H[:, :, 1:]


def normal_frames(model: CometricModel, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Metric-orthonormal frames of the normal space to the geodesic at ``(x, p)``.

    The normal space is ``{w : p.w = 0}``; the velocity ``G p`` is its
    metric complement.  A Euclidean basis is orthonormalised in the metric
    ``G^{-1}`` by a Cholesky factorisation (Gram-Schmidt in matrix form).
    """
    G = model.cometric(x)
    u = p / np.linalg.norm(p, axis=1, keepdims=True)
    B = householder_complement(u)
    GB = np.linalg.solve(G, B)
    M = np.einsum("nij,nik->njk", B, GB)
    L = np.linalg.cholesky(M)
    Wt = np.linalg.solve(L, B.transpose(0, 2, 1))
    return Wt.transpose(0, 2, 1)


def tube_average_batch(grid_fn: GridFunction, model: CometricModel, x: np.ndarray,
                       p: np.ndarray, tube: TubeSpec, offsets: np.ndarray | None = None):
    """Tube averages for a batch of centres ``x`` and momenta ``p``.

    Returns ``(values, truncated)``; ``truncated`` flags tubes whose
    geodesic or transversal samples left the grid.
    """
    B, D = x.shape
    if offsets is None:
        offsets = ball_pattern(D - 1, tube.n_transversal)
    K = tube.n_axial // 2
    xs, ps, alive = integrate_batch(model, np.concatenate([x, x]), np.concatenate([p, -p]),
                                    tube.beta / K, K, tube.substeps)
    X = np.concatenate([xs[:0:-1, B:], xs[:, :B]], axis=0)  # (2K+1, B, D)
    P = np.concatenate([-ps[:0:-1, B:], ps[:, :B]], axis=0)
    A = np.concatenate([alive[:0:-1, B:], alive[:, :B]], axis=0)
    X = X.transpose(1, 0, 2).reshape(-1, D)
    P = P.transpose(1, 0, 2).reshape(-1, D)
    A = A.T.reshape(-1)
    if np.any(offsets):
        W = normal_frames(model, X, P)
        Y = np.repeat(X[:, None, :], len(offsets), axis=1)
        for j in range(D - 1):
            Y += (tube.delta * W[:, None, :, j]) * offsets[None, :, j, None]
    else:
        Y = X[:, None, :]
    vals, inside = grid_fn.lookup(Y)
    inside &= A[:, None]
    vals = np.where(inside, vals, 0).astype(np.float64).reshape(B, -1)
    counts = inside.reshape(B, -1).sum(axis=1)
    if np.any(counts == 0):
        raise ChartDomainError("tube lies entirely outside the chart")
    means = np.sum(vals, axis=1) / counts
    return grid_fn.scale * means, counts < vals.shape[1]


def tube_average(grid_fn: GridFunction, model: CometricModel, center: CotangentState,
                 tube: TubeSpec) -> float:
    """Equal-weight average of ``|f|`` over the tube around the geodesic through ``center``."""
    tube.check(grid_fn, model)
    check_in_chart(model, center.x[None, :])
    vals, _ = tube_average_batch(grid_fn, model, center.x[None, :], center.p[None, :], tube)
    return float(vals[0])


# --------------------------------------------------------------------------
# direction search
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpec:
    """Direction search: screening net, coarse net, then shrinking local grids.

    ``n_coarse=None`` uses ``max(64, ceil(1/delta))``; ``grid_k=None`` uses
    5 points per tangent axis in 3D and 3 otherwise.  The screening pass
    scores a much denser net by the average of ``|f|`` along the geodesic
    core alone (no transversal offsets), with spacing about ``delta/beta``
    and at most ``max_screen`` directions; its ``n_seeds`` best directions
    join the coarse net.  ``screen=False`` disables it.  Local refinement
    starts from the ``n_starts`` best coarse directions.
    """

    n_coarse: int | None = None
    rounds: int = 3
    shrink: float = 4.0
    grid_k: int | None = None
    seed: int = 0
    screen: bool = True
    max_screen: int = 20000
    n_seeds: int = 8
    n_starts: int = 3

    def coarse_count(self, delta: float) -> int:
        return self.n_coarse if self.n_coarse else max(64, int(math.ceil(1.0 / delta)))

    def screen_count(self, dim: int, tube: "TubeSpec") -> int:
        if not self.screen:
            return 0
        target = _log_hemisphere_area(dim) - (dim - 1) * math.log(tube.delta / tube.beta)
        return int(min(self.max_screen, math.ceil(math.exp(target))))

    def k(self, dim: int) -> int:
        return self.grid_k if self.grid_k else (5 if dim == 3 else 3)


def _log_hemisphere_area(dim: int) -> float:
    return math.log(math.pi) * dim / 2 - gammaln(dim / 2)


def hemisphere_net(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """Nearly uniform unit vectors with non-negative first component.

    Fibonacci spiral in 3D; scrambled Halton points pushed through the
    normal quantile function and normalised in higher dimensions.
    """
    if dim == 2:
        ang = (np.arange(count) + 0.5) / count * np.pi - np.pi / 2
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if dim == 3:
        i = np.arange(count)
        z = 1.0 - (i + 0.5) / count
        r = np.sqrt(1.0 - z * z)
        phi = i * math.pi * (3.0 - math.sqrt(5.0))
        return np.stack([z, r * np.cos(phi), r * np.sin(phi)], axis=1)
    pts = qmc.Halton(dim, scramble=True, rng=seed).random(count)
    g = ndtri(np.clip(pts, 1e-12, 1 - 1e-12))
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    return np.where(u[:, :1] < 0, -u, u)


def net_spacing(dim: int, count: int) -> float:
    """Typical angular spacing of ``count`` points on a hemisphere of ``S^{dim-1}``."""
    return math.exp((_log_hemisphere_area(dim) - math.log(count)) / (dim - 1))


def refinement_grid(u: np.ndarray, radius: float, k: int) -> np.ndarray:
    """``k^{D-1}`` unit vectors on a tangent grid of half-width ``radius`` around ``u``."""
    D = u.size
    E = householder_complement(u[None, :])[0]
    t = np.linspace(-radius, radius, k)
    mesh = np.stack(np.meshgrid(*([t] * (D - 1)), indexing="ij"), axis=-1).reshape(-1, D - 1)
    cand = u[None, :] + mesh @ E.T
    return cand / np.linalg.norm(cand, axis=1, keepdims=True)


def unit_energy(model: CometricModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Rescale covector directions ``u`` at ``x`` so that ``g^{ij} p_i p_j = 1``."""
    G = model.cometric(np.broadcast_to(x, u.shape))
    q = np.einsum("bij,bi,bj->b", G, u, u)
    return u / np.sqrt(q)[:, None]


SCREEN_BATCH = 4096


def _search(grid_fn, model, x, tube, search, offsets):
    D = model.dim

    def evaluate(U, offs=offsets):
        P = unit_energy(model, x, U)
        vals, trunc = tube_average_batch(grid_fn, model, np.broadcast_to(x, U.shape).copy(),
                                         P, tube, offs)
        return vals, P, trunc

    n0 = search.coarse_count(tube.delta)
    U = hemisphere_net(D, n0, search.seed)
    rho = net_spacing(D, n0)
    n_screen = search.screen_count(D, tube)
    if n_screen > n0:
        S = hemisphere_net(D, n_screen, search.seed)
        core = np.zeros((1, D - 1))
        score = np.concatenate([evaluate(S[i:i + SCREEN_BATCH], core)[0]
                                for i in range(0, n_screen, SCREEN_BATCH)])
        top = np.argsort(-score, kind="stable")[:search.n_seeds]
        U = np.concatenate([U, S[np.sort(top)]])
        rho = net_spacing(D, n_screen)
    vals, P, trunc = evaluate(U)
    overall = None
    for i in np.argsort(-vals, kind="stable")[:max(1, search.n_starts)]:
        best, best_u, best_p, best_t = float(vals[i]), U[i], P[i], bool(trunc[i])
        for r in range(search.rounds):
            R = refinement_grid(best_u, rho / search.shrink ** r, search.k(D))
            rv, rp, rt = evaluate(R)
            j = int(np.argmax(rv))
            if rv[j] > best:
                best, best_u, best_p, best_t = float(rv[j]), R[j], rp[j], bool(rt[j])
        if overall is None or best > overall[0]:
            overall = (best, best_p, best_t)
    return overall


def maximal_at(grid_fn: GridFunction, model: CometricModel, x, tube: TubeSpec,
               search: SearchSpec | None = None):
    """Approximate ``sup`` of tube averages over unit-energy directions at ``x``.

    Returns ``(value, witness_momentum)``.
    """
    search = search or SearchSpec()
    tube.check(grid_fn, model)
    x = np.asarray(x, dtype=float)
    check_in_chart(model, x[None, :])
    offsets = ball_pattern(model.dim - 1, tube.n_transversal)
    value, p, _ = _search(grid_fn, model, x, tube, search, offsets)
    return value, p


def dense_net_sup(grid_fn: GridFunction, model: CometricModel, x, tube: TubeSpec,
                  count: int, seed: int = 0, batch: int = 512):
    """Brute-force maximum over a single dense hemisphere net (no refinement)."""
    x = np.asarray(x, dtype=float)
    offsets = ball_pattern(model.dim - 1, tube.n_transversal)
    U = hemisphere_net(model.dim, count, seed)
    best, best_p = -np.inf, None
    for start in range(0, count, batch):
        P = unit_energy(model, x, U[start:start + batch])
        vals, _ = tube_average_batch(grid_fn, model, np.broadcast_to(x, P.shape).copy(), P,
                                     tube, offsets)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, best_p = float(vals[i]), P[i]
    return best, best_p


# --------------------------------------------------------------------------
# maximal field over a region
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Cell-centred sample grid of a ball (or box) inside the chart."""

    center: tuple
    radius: float
    n_per_axis: int = 9
    shape: str = "ball"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ValueError("region radius must be positive")
        if self.n_per_axis < 1:
            raise ValueError("region resolution must be positive")
        if self.shape not in ("ball", "box"):
            raise ValueError(f"unknown region shape {self.shape!r}")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def spacing(self) -> float:
        return 2.0 * self.radius / self.n_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    def points(self) -> np.ndarray:
        t = -self.radius + (np.arange(self.n_per_axis) + 0.5) * self.spacing
        mesh = np.stack(np.meshgrid(*([t] * self.dim), indexing="ij"), axis=-1)
        offs = mesh.reshape(-1, self.dim)
        if self.shape == "ball":
            offs = offs[np.sum(offs ** 2, axis=1) <= self.radius ** 2 * (1 + 1e-12)]
        return np.asarray(self.center)[None, :] + offs

    def describe(self) -> dict:
        return {"center": list(self.center), "radius": self.radius,
                "n_per_axis": self.n_per_axis, "shape": self.shape}


@dataclass(frozen=True)
class MaximalField:
    region: Region
    points: np.ndarray
    values: np.ndarray
    witnesses: np.ndarray
    truncated: np.ndarray
    failures: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.values)

    def summary(self) -> dict:
        v = self.values[self.ok]
        center = np.asarray(self.region.center)
        c0 = float(self.values[int(np.argmin(np.sum((self.points - center) ** 2, axis=1)))])
        return {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean()),
                "c0": c0, "n_points": int(v.size), "n_failed": len(self.failures)}


def worker_count(threads: int | None = None) -> int:
    """Worker threads: explicit value, else ``NIKODYM_THREADS`` (0 means one per CPU)."""
    if threads is None:
        raw = os.environ.get("NIKODYM_THREADS", "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise ValueError(f"NIKODYM_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ValueError("thread count must be >= 0")
    return threads if threads > 0 else (os.cpu_count() or 1)


CHUNK = 16


def maximal_field(grid_fn: GridFunction, model: CometricModel, region: Region, tube: TubeSpec,
                  search: SearchSpec | None = None, threads: int | None = None) -> MaximalField:
    """Evaluate :func:`maximal_at` at every region point.

    Points are processed in fixed chunks and each point is computed
    independently, so results do not depend on the worker count.  A point
    whose evaluation fails gets ``nan`` and an entry in ``failures``.
    """
    search = search or SearchSpec()
    tube.check(grid_fn, model)
    pts = region.points()
    if region.dim != model.dim:
        raise ValueError("region and model dimensions differ")
    check_in_chart(model, pts)
    offsets = ball_pattern(model.dim - 1, tube.n_transversal)
    N = len(pts)
    values = np.full(N, np.nan)
    wit = np.full((N, model.dim), np.nan)
    trunc = np.zeros(N, dtype=bool)
    failures = {}

    def run(chunk):
        out = []
        for i in chunk:
            try:
                out.append((i, _search(grid_fn, model, pts[i], tube, search, offsets), None))
            except (NikodymError, ValueError, np.linalg.LinAlgError) as exc:
                out.append((i, None, f"{type(exc).__name__}: {exc}"))
        return out

    chunks = [range(s, min(s + CHUNK, N)) for s in range(0, N, CHUNK)]
    workers = min(worker_count(threads), max(1, len(chunks)))
    if workers == 1:
        results = map(run, chunks)
    else:
        pool = ThreadPoolExecutor(workers)
        results = pool.map(run, chunks)
    for batch in results:
        for i, res, err in batch:
            if err is None:
                values[i], wit[i], trunc[i] = res
            else:
                failures[i] = err
    if workers != 1:
        pool.shutdown()
    return MaximalField(region, pts, values, wit, trunc, failures)


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------

SUM_CHUNK = 1 << 22


def _power_sum(values: np.ndarray, p: float, scale: float = 1.0) -> float:
    flat = values.reshape(-1)
    partial = []
    for start in range(0, flat.size, SUM_CHUNK):
        block = flat[start:start + SUM_CHUNK].astype(np.float64)
        if scale != 1.0:
            block *= scale
        partial.append(np.sum(block if p == 1 else block ** p))
    return float(np.sum(np.array(partial)))


def lp_norm(obj, p: float, domain=None) -> float:
    """``(sum |f|^p * cell_volume)^{1/p}`` in coordinate Lebesgue measure.

    ``obj`` is a :class:`GridFunction` or a :class:`MaximalField`;
    ``domain`` is an optional boolean mask over its samples.  Failed
    maximal-field points are left out.
    """
    if not p >= 1:
        raise ValueError("p must be >= 1")
    if isinstance(obj, GridFunction):
        vals, vol, scale = obj.values, obj.cell_volume, obj.scale
    elif isinstance(obj, MaximalField):
        vals, vol, scale = obj.values, obj.region.cell_volume, 1.0
        mask = obj.ok if domain is None else (np.asarray(domain, dtype=bool) & obj.ok)
        domain = mask
    else:
        raise TypeError(f"cannot take a norm of {type(obj).__name__}")
    if domain is not None:
        mask = np.asarray(domain, dtype=bool)
        if mask.shape != vals.shape:
            raise ValueError("domain mask shape does not match the samples")
        vals = vals[mask]
    if vals.size == 0:
        raise ChartDomainError("norm over an empty domain")
    return (_power_sum(vals, p, scale) * vol) ** (1.0 / p)
