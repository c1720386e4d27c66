"""Cometric models in normal form around a totally geodesic submanifold.

Coordinates are split as ``x = (x_1, x_tan, x_normal)``: the first
``n_sub = ceil((D + 1) / 2)`` coordinates parametrise the submanifold
``{x_normal = 0}`` and the remaining ``m = D - n_sub`` are normal to it.
All evaluation methods are batched: they take ``x`` of shape ``(B, D)``
and return arrays with a leading batch axis.  Models are immutable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import exp1

from .errors import (
    ChartDomainError,
    ConstructionError,
    NumericError,
    UnsupportedModelError,
)

DEFAULT_DELTA0 = 0.5


def submanifold_dim(d_total: int) -> int:
    """Dimension ``ceil((d_total + 1) / 2)`` of the totally geodesic leaf."""
    return (d_total + 2) // 2


def normal_dim(d_total: int) -> int:
    return d_total - submanifold_dim(d_total)


def parity_of(d_total: int) -> str:
    return "odd" if d_total % 2 else "even"


def coupling_pairs(d_total: int) -> list[tuple[int, int]]:
    """0-based index pairs ``(j, j + m)`` that carry the perturbation.

    Odd dimension 2d+1 couples tangential slots 2..d+1 with d+2..2d+1
    (1-based); even dimension 2d couples 3..d+1 with d+2..2d.  In both
    cases these are the last ``m`` tangential slots.
    """
    n = submanifold_dim(d_total)
    m = d_total - n
    return [(j, j + m) for j in range(n - m, n)]


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError(f"expected a point or a batch of points, got shape {arr.shape}")
    return arr, False


# --------------------------------------------------------------------------
# perturbation profile
# --------------------------------------------------------------------------


class UnitCutoff:
    """The cutoff that is identically 1 on the working chart."""

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.ones(x.shape[0])

    def grad(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)


@dataclass(frozen=True)
class PerturbationProfile:
    """Bump ``alpha(t) = epsilon * exp(-scale / t)`` for ``t > 0``, else 0.

    ``epsilon = 0`` gives the degenerate profile ``alpha == 0``.
    """

    epsilon: float
    scale: float = 0.05
    phi: UnitCutoff = field(default_factory=UnitCutoff, compare=False)

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConstructionError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConstructionError(f"bump scale must be positive, got {self.scale}")

    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = self.epsilon * np.exp(-self.scale / t[pos])
        return out

    def alpha_prime(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        tp = t[pos]
        out[pos] = self.epsilon * np.exp(-self.scale / tp) * self.scale / tp**2
        return out

    def alpha_antiderivative(self, t):
        """Closed form of the integral of alpha from 0 to t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        tp = t[pos]
        z = self.scale / tp
        out[pos] = self.epsilon * (tp * np.exp(-z) - self.scale * exp1(z))
        return out

    def describe(self) -> dict:
        return {"epsilon": self.epsilon, "bump_scale": self.scale, "cutoff": "unit"}


# --------------------------------------------------------------------------
# smooth synthetic coefficients
# --------------------------------------------------------------------------


class TrigField:
    """Tensor-valued trigonometric polynomial ``c_e(x) = sum_r A[e,r] cos(w_r.x + phi_r)``.

    Every entry is bounded by ``amplitude``.  ``active`` masks the
    coordinates the field may depend on.
    """

    def __init__(self, shape, dim, rng, amplitude, n_terms=3, frequency=2.0, active=None):
        self.shape = tuple(shape)
        self.dim = dim
        self.freqs = rng.normal(size=(n_terms, dim)) * frequency
        if active is not None:
            self.freqs[:, ~np.asarray(active, dtype=bool)] = 0.0
        self.phases = rng.uniform(0.0, 2 * np.pi, size=n_terms)
        self.amps = rng.uniform(-1.0, 1.0, size=self.shape + (n_terms,)) * (amplitude / n_terms)

    def symmetrize(self, *axis_pairs):
        for a, b in axis_pairs:
            axes = list(range(self.amps.ndim))
            axes[a], axes[b] = axes[b], axes[a]
            self.amps = 0.5 * (self.amps + self.amps.transpose(axes))
        return self

    def _flat_amps(self):
        return self.amps.reshape(-1, self.amps.shape[-1])

    def value(self, x):
        arg = np.einsum("bd,kd->bk", x, self.freqs) + self.phases
        vals = np.einsum("ek,bk->be", self._flat_amps(), np.cos(arg))
        return vals.reshape((x.shape[0],) + self.shape)

    def grad(self, x):
        arg = np.einsum("bd,kd->bk", x, self.freqs) + self.phases
        g = -np.einsum("ek,bk,kd->bed", self._flat_amps(), np.sin(arg), self.freqs)
        return g.reshape((x.shape[0],) + self.shape + (self.dim,))

    def weighted_grad(self, x, coef):
        """Gradient of ``sum_e coef[b, e] c_e(x)`` for ``x``-independent weights."""
        arg = x @ self.freqs.T + self.phases
        a = coef @ self._flat_amps()
        return -(a * np.sin(arg)) @ self.freqs


class ZeroField:
    def __init__(self, shape, dim):
        self.shape = tuple(shape)
        self.dim = dim

    def value(self, x):
        return np.zeros((x.shape[0],) + self.shape)

    def grad(self, x):
        return np.zeros((x.shape[0],) + self.shape + (self.dim,))

    def weighted_grad(self, x, coef):
        return np.zeros((x.shape[0], self.dim))


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


class CometricModel:
    """Base class: inverse metric ``g^{ij}(x)`` on the cube ``(-delta0, delta0)^D``."""

    variant = "generic"

    def __init__(self, dim: int, delta0: float = DEFAULT_DELTA0):
        if dim < 2:
            raise ConstructionError(f"dimension must be >= 2, got {dim}")
        if not delta0 > 0:
            raise ConstructionError(f"chart half-width must be positive, got {delta0}")
        self.dim = int(dim)
        self.delta0 = float(delta0)

    # sizes -----------------------------------------------------------------
    @property
    def n_sub(self) -> int:
        return submanifold_dim(self.dim)

    @property
    def n_normal(self) -> int:
        return self.dim - self.n_sub

    # evaluation (batched, unchecked) ---------------------------------------
    def cometric(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def partials(self, x: np.ndarray) -> np.ndarray:
        return fd_partials(self, x)

    def field(self, x: np.ndarray, p: np.ndarray):
        """Hamiltonian vector field ``(dH/dp, -dH/dx)`` for ``H = g^{ij} p_i p_j / 2``."""
        G = self.cometric(x)
        dG = self.partials(x)
        dx = np.einsum("bij,bj->bi", G, p)
        dp = -0.5 * np.einsum("bijk,bi,bj->bk", dG, p, p)
        return dx, dp

    def hamiltonian(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return 0.5 * np.einsum("bij,bi,bj->b", self.cometric(x), p, p)

    def axis_coefficients(self, s):
        """Taylor coefficients ``(h^{1kl}, f^{11kl})`` along ``(s, 0, 0)``."""
        raise UnsupportedModelError(
            f"{self.variant} model does not expose Taylor coefficients"
        )

    def perturbation_alpha(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    # bookkeeping -----------------------------------------------------------
    def describe(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "delta0": self.delta0,
                "instance": id(self)}

    @property
    def model_id(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def in_chart(self, x: np.ndarray) -> np.ndarray:
        return np.all(np.abs(x) < self.delta0, axis=-1)

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"


class Flat(CometricModel):
    variant = "flat"

    def cometric(self, x):
        return np.broadcast_to(np.eye(self.dim), (x.shape[0], self.dim, self.dim)).copy()

    def partials(self, x):
        return np.zeros((x.shape[0],) + (self.dim,) * 3)

    def field(self, x, p):
        return p.copy(), np.zeros_like(p)

    def hamiltonian(self, x, p):
        return 0.5 * np.einsum("bi,bi->b", p, p)

    def axis_coefficients(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        m = self.n_normal
        return np.zeros((s.size, m, m)), np.zeros((s.size, m, m))

    def describe(self):
        return {"variant": "flat", "dim": self.dim, "delta0": self.delta0}


class ConstantCurvature(CometricModel):
    """Projective (gnomonic / Beltrami-Klein) chart of curvature ``K``.

    ``g^{ij} = (1 + K|x|^2)(delta_ij + K x_i x_j)``; geodesics are straight
    lines (reparametrised), so every coordinate subspace is totally geodesic.
    """

    variant = "constant_curvature"

    def __init__(self, dim, curvature, delta0=DEFAULT_DELTA0):
        super().__init__(dim, delta0)
        self.curvature = float(curvature)
        if self.curvature < 0 and abs(self.curvature) * dim * delta0**2 >= 1:
            raise ConstructionError(
                "chart does not fit inside the hyperbolic model: need |K| D delta0^2 < 1"
            )

    def cometric(self, x):
        K = self.curvature
        w = 1.0 + K * np.einsum("bi,bi->b", x, x)
        G = np.eye(self.dim) + K * np.einsum("bi,bj->bij", x, x)
        return w[:, None, None] * G

    def partials(self, x):
        K = self.curvature
        D = self.dim
        w = 1.0 + K * np.einsum("bi,bi->b", x, x)
        G0 = np.eye(D) + K * np.einsum("bi,bj->bij", x, x)
        eye = np.eye(D)
        term1 = 2.0 * K * np.einsum("bk,bij->bijk", x, G0)
        outer = np.einsum("ik,bj->bijk", eye, x) + np.einsum("bi,jk->bijk", x, eye)
        return term1 + (w * K)[:, None, None, None] * outer

    def describe(self):
        return {"variant": "constant_curvature", "dim": self.dim, "delta0": self.delta0,
                "curvature": self.curvature}


def constant_curvature(dim, curvature, delta0=DEFAULT_DELTA0) -> CometricModel:
    """Constant-curvature chart; ``K = 0`` gives the flat model."""
    if curvature == 0:
        return Flat(dim, delta0)
    return ConstantCurvature(dim, curvature, delta0)


class TaylorCometric(CometricModel):
    """Cometric in Taylor normal form about ``{x_normal = 0}``.

    ``g = diag(1, gtilde(x_1..x_n), I_m) + (E + E^T) + F`` with
    ``E[i, k] = sum_l x_l h^{ikl}(x)`` (column ``k`` normal) and
    ``F[i, j] = 2 sum_{kl} x_k x_l f^{ijkl}(x)`` on the tangential block.

    ``gtilde`` must return ``(B, n-1, n-1)``, ``h`` ``(B, D, m, m)`` and
    ``f`` ``(B, n, n, m, m)``; each also provides ``grad`` with a trailing
    derivative axis of length ``D``.
    """

    variant = "taylor"

    def __init__(self, dim, gtilde, h, f, delta0=DEFAULT_DELTA0, meta=None):
        super().__init__(dim, delta0)
        self.gtilde = gtilde
        self.h = h
        self.f = f
        self.meta = dict(meta or {})

    def cometric(self, x):
        return self._assemble(x, self.h.value(x), self.f.value(x))

    def _assemble(self, x, hv, fv):
        n, m, D = self.n_sub, self.n_normal, self.dim
        xn = x[:, n:]
        B = x.shape[0]
        G = np.zeros((B, D, D))
        G[:, 0, 0] = 1.0
        G[:, 1:n, 1:n] = self.gtilde.value(x)
        G[:, n:, n:] = np.eye(m)
        E = np.sum(hv * xn[:, None, None, :], axis=3)
        G[:, :, n:] += E
        G[:, n:, :] += E.transpose(0, 2, 1)
        xx = xn[:, :, None] * xn[:, None, :]
        G[:, :n, :n] += 2.0 * np.sum(fv * xx[:, None, None], axis=(3, 4))
        return G

    def field(self, x, p):
        """``(G p, -grad_x(p.G.p)/2)`` with ``p`` contracted before differentiating."""
        n, D = self.n_sub, self.dim
        B = x.shape[0]
        xn, pn = x[:, n:], p[:, n:]
        hv, fv = self.h.value(x), self.f.value(x)
        G = self._assemble(x, hv, fv)
        dx = np.sum(G * p[:, None, :], axis=2)

        pt = p[:, 1:n]
        grad = self.gtilde.weighted_grad(x, (pt[:, :, None] * pt[:, None, :]).reshape(B, -1))

        u = p[:, :, None] * pn[:, None, :]
        grad[:, n:] += 2.0 * np.sum(u[..., None] * hv, axis=(1, 2))
        coef = (u[..., None] * xn[:, None, None, :]).reshape(B, -1)
        grad += 2.0 * self.h.weighted_grad(x, coef)

        ptt = p[:, :n, None] * p[:, None, :n]
        T = np.sum(ptt[..., None, None] * fv, axis=(1, 2))
        grad[:, n:] += 2.0 * (np.sum(T * xn[:, None, :], axis=2) + np.sum(T * xn[:, :, None], axis=1))
        xx = xn[:, :, None] * xn[:, None, :]
        coef = (ptt[..., None, None] * xx[:, None, None]).reshape(B, -1)
        grad += 2.0 * self.f.weighted_grad(x, coef)
        return dx, -0.5 * grad

    def partials(self, x):
        n, D = self.n_sub, self.dim
        xn = x[:, n:]
        B = x.shape[0]
        P = np.zeros((B, D, D, D))
        P[:, 1:n, 1:n, :] = self.gtilde.grad(x)

        hv = self.h.value(x)
        dE = np.einsum("biklq,bl->bikq", self.h.grad(x), xn)
        dE[:, :, :, n:] += hv
        P[:, :, n:, :] += dE
        P[:, n:, :, :] += dE.transpose(0, 2, 1, 3)

        fv = self.f.value(x)
        dF = 2.0 * np.einsum("bijklq,bk,bl->bijq", self.f.grad(x), xn, xn)
        dF[:, :, :, n:] += 2.0 * (
            np.einsum("bijrl,bl->bijr", fv, xn) + np.einsum("bijkr,bk->bijr", fv, xn)
        )
        P[:, :n, :n, :] += dF
        return P

    def axis_coefficients(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pts = np.zeros((s.size, self.dim))
        pts[:, 0] = s
        h1 = self.h.value(pts)[:, 0, :, :]
        f11 = self.f.value(pts)[:, 0, 0, :, :]
        return h1, f11

    def describe(self):
        d = {"variant": "taylor", "dim": self.dim, "delta0": self.delta0}
        d.update(self.meta if self.meta else {"instance": id(self)})
        return d


def synthetic_taylor(dim, seed=0, amplitude=0.4, gtilde_amplitude=0.1, n_terms=3,
                     frequency=2.0, delta0=DEFAULT_DELTA0) -> TaylorCometric:
    """Taylor-form cometric with bounded trigonometric coefficients.

    ``|h^{ikl}|, |f^{ijkl}| <= amplitude``; ``gtilde = I + S`` with
    ``|S_ij| <= gtilde_amplitude`` depending on tangential coordinates only.
    """
    n = submanifold_dim(dim)
    m = dim - n
    rng = np.random.default_rng(seed)
    active = np.zeros(dim, dtype=bool)
    active[:n] = True

    S = TrigField((n - 1, n - 1), dim, rng, gtilde_amplitude, n_terms, frequency, active)
    S.symmetrize((0, 1))
    gt = _ShiftedIdentity(S, n - 1)
    h = TrigField((dim, m, m), dim, rng, amplitude, n_terms, frequency)
    f = TrigField((n, n, m, m), dim, rng, amplitude, n_terms, frequency)
    f.symmetrize((0, 1), (2, 3))
    meta = {"coeff_seed": seed, "coeff_amplitude": amplitude,
            "gtilde_amplitude": gtilde_amplitude, "n_terms": n_terms, "frequency": frequency}
    return TaylorCometric(dim, gt, h, f, delta0, meta=meta)


class _ShiftedIdentity:
    def __init__(self, inner, size):
        self.inner = inner
        self.eye = np.eye(size)

    def value(self, x):
        return self.eye + self.inner.value(x)

    def grad(self, x):
        return self.inner.grad(x)

    def weighted_grad(self, x, coef):
        return self.inner.weighted_grad(x, coef)


class CustomCometric(CometricModel):
    """Wraps a user function ``fn(x: (B, D)) -> (B, D, D)``; partials by finite differences."""

    variant = "custom"

    def __init__(self, dim, fn, delta0=DEFAULT_DELTA0, name="custom"):
        super().__init__(dim, delta0)
        self._fn = fn
        self.name = name

    def cometric(self, x):
        return np.asarray(self._fn(x), dtype=float)

    def describe(self):
        return {"variant": "custom", "name": self.name, "dim": self.dim,
                "delta0": self.delta0, "instance": id(self)}


class Perturbed(CometricModel):
    """``g_eps = g + phi(x) alpha(x_1)`` placed symmetrically in the coupling slots."""

    variant = "perturbed"

    def __init__(self, base: CometricModel, profile: PerturbationProfile, parity: str,
                 threshold: float):
        super().__init__(base.dim, base.delta0)
        self.base = base
        self.profile = profile
        self.parity = parity
        self.threshold = threshold
        self.pairs = coupling_pairs(base.dim)
        C = np.zeros((self.dim, self.dim))
        for i, j in self.pairs:
            C[i, j] = C[j, i] = 1.0
        self._coupling = C

    def _amplitude(self, x):
        phi = self.profile.phi.value(x)
        a = self.profile.alpha(x[:, 0])
        grad = self.profile.phi.grad(x) * a[:, None]
        grad[:, 0] += phi * self.profile.alpha_prime(x[:, 0])
        return phi * a, grad

    def cometric(self, x):
        c, _ = self._amplitude(x)
        return self.base.cometric(x) + c[:, None, None] * self._coupling

    def partials(self, x):
        _, dc = self._amplitude(x)
        return self.base.partials(x) + np.einsum("ij,bk->bijk", self._coupling, dc)

    def field(self, x, p):
        dx, dp = self.base.field(x, p)
        c, dc = self._amplitude(x)
        cross = np.zeros(x.shape[0])
        for i, j in self.pairs:
            dx[:, i] += c * p[:, j]
            dx[:, j] += c * p[:, i]
            cross += p[:, i] * p[:, j]
        dp -= dc * cross[:, None]
        return dx, dp

    def hamiltonian(self, x, p):
        c, _ = self._amplitude(x)
        cross = sum(p[:, i] * p[:, j] for i, j in self.pairs)
        return self.base.hamiltonian(x, p) + c * cross

    def axis_coefficients(self, s):
        return self.base.axis_coefficients(s)

    def perturbation_alpha(self, s):
        return self.profile.alpha(s)

    def describe(self):
        return {"variant": "perturbed", "base": self.base.describe(),
                "profile": self.profile.describe(), "parity": self.parity}


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def check_in_chart(model: CometricModel, x: np.ndarray) -> None:
    bad = ~model.in_chart(x)
    if np.any(bad):
        pt = x[np.argmax(bad)]
        raise ChartDomainError(
            f"point {pt.tolist()} lies outside the chart (-{model.delta0}, {model.delta0})^{model.dim}"
        )


def _checked(values, what):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values in {what}")
    return values


def cometric_eval(model: CometricModel, x) -> np.ndarray:
    """Symmetric ``g^{ij}(x)``; a single point gives ``(D, D)``, a batch ``(B, D, D)``."""
    xb, single = _as_batch(x)
    check_in_chart(model, xb)
    G = _checked(model.cometric(xb), "cometric")
    return G[0] if single else G


def cometric_partials(model: CometricModel, x) -> np.ndarray:
    """``dg^{ij}/dx_k`` indexed ``[i, j, k]`` (with a leading batch axis for batches)."""
    xb, single = _as_batch(x)
    check_in_chart(model, xb)
    P = _checked(model.partials(xb), "cometric partials")
    return P[0] if single else P


def fd_partials(model: CometricModel, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences with one Richardson extrapolation, ``O(step^4)``."""
    B, D = x.shape

    def central(h):
        out = np.empty((B, D, D, D))
        for k in range(D):
            e = np.zeros(D)
            e[k] = h
            out[..., k] = (model.cometric(x + e) - model.cometric(x - e)) / (2 * h)
        return out

    return (4.0 * central(step / 2) - central(step)) / 3.0


def chart_sample_grid(dim, delta0, per_axis=None) -> np.ndarray:
    """Regular sample grid over the closed chart cube (endpoints pulled inside)."""
    if per_axis is None:
        per_axis = max(3, int(round(40000 ** (1.0 / dim))))
    ticks = np.linspace(-delta0, delta0, per_axis) * (1 - 1e-9)
    mesh = np.meshgrid(*([ticks] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def positivity_threshold(base: CometricModel, per_axis=None) -> float:
    """Smallest eigenvalue of the base cometric over a chart sample grid.

    Adding a symmetric coupling of size ``|alpha| < threshold`` keeps the
    cometric positive definite at every sampled point, since the coupling
    matrix has spectral norm ``|alpha|``.
    """
    pts = chart_sample_grid(base.dim, base.delta0, per_axis)
    lam = np.inf
    for chunk in np.array_split(pts, max(1, len(pts) // 8192)):
        lam = min(lam, float(np.linalg.eigvalsh(base.cometric(chunk))[:, 0].min()))
    return lam


def build_perturbed(base: CometricModel, profile: PerturbationProfile,
                    parity: str | None = None, threshold: float | None = None) -> Perturbed:
    """Perturb ``base`` by ``2 phi alpha_eps(x_1) sum p_j p_{j+m}``.

    Raises :class:`ConstructionError` when ``profile.epsilon`` is not below
    the positivity threshold of the base.
    """
    if isinstance(base, Perturbed):
        raise ConstructionError("base model is already perturbed")
    expected = parity_of(base.dim)
    if parity is None:
        parity = expected
    if parity != expected:
        raise ConstructionError(
            f"parity {parity!r} does not match dimension {base.dim} ({expected})"
        )
    if threshold is None:
        threshold = positivity_threshold(base)
    if threshold <= 0:
        raise ConstructionError(
            f"base cometric is not positive definite on the chart (min eigenvalue {threshold:.3g})"
        )
    if profile.epsilon >= threshold:
        raise ConstructionError(
            f"epsilon={profile.epsilon} is not below the positivity threshold {threshold:.6g}"
        )
    return Perturbed(base, profile, parity, threshold)
