"""Build models, tubes, searches and regions from an :class:`ExperimentConfig`."""

from __future__ import annotations

from .config import ExperimentConfig
from .metric import (
    CometricModel,
    Flat,
    PerturbationProfile,
    build_perturbed,
    constant_curvature,
    synthetic_taylor,
)
from .nikodym_maximal import Region, SearchSpec, TubeSpec
from .scaling_lab import GridRule, default_q


def coefficient_seed(cfg: ExperimentConfig) -> int:
    seed = cfg.get("metric", "coeff_seed")
    return cfg.get("run", "seed") if seed is None else seed


def _base_model(cfg: ExperimentConfig, kind: str) -> CometricModel:
    m = cfg["metric"]
    if kind == "flat":
        return Flat(m["dim"], m["delta0"])
    if kind == "constant_curvature":
        return constant_curvature(m["dim"], m["curvature"], m["delta0"])
    return synthetic_taylor(m["dim"], seed=coefficient_seed(cfg), amplitude=m["coeff_amplitude"],
                            frequency=m["coeff_frequency"], delta0=m["delta0"])


def model_from_config(cfg: ExperimentConfig) -> CometricModel:
    m = cfg["metric"]
    if m["variant"] != "perturbed":
        return _base_model(cfg, m["variant"])
    base = _base_model(cfg, m["base"])
    parity = None if m["parity"] == "auto" else m["parity"]
    return build_perturbed(base, PerturbationProfile(m["epsilon"], m["bump_scale"]), parity)


def tube_from_config(cfg: ExperimentConfig, delta: float | None = None) -> TubeSpec:
    mx = cfg["maximal"]
    return TubeSpec(mx["delta"] if delta is None else delta, cfg.get("flow", "beta"),
                    mx["n_axial"], mx["n_transversal"], mx["min_cells"])


def search_from_config(cfg: ExperimentConfig) -> SearchSpec:
    mx = cfg["maximal"]
    return SearchSpec(n_coarse=mx["coarse_net"] or None, seed=cfg.get("run", "seed"),
                      screen=mx["screen"], max_screen=mx["max_screen"])


def region_from_config(cfg: ExperimentConfig) -> Region:
    mx = cfg["maximal"]
    return Region(mx["region_center"], mx["region_halfwidth"], mx["region_n"], mx["region_shape"])


def grid_rule_from_config(cfg: ExperimentConfig) -> GridRule:
    sw = cfg["sweep"]
    return GridRule(sw["grid_floor"], sw["cells_per_delta"], sw["grid_cap"])


def sweep_exponents(cfg: ExperimentConfig) -> tuple[float, float]:
    """``(p, q)`` with ``q`` defaulting to ``(dim - 1) p'``."""
    sw = cfg["sweep"]
    q = sw["q"] if sw["q"] is not None else default_q(sw["p"], cfg.get("metric", "dim"))
    return sw["p"], q
