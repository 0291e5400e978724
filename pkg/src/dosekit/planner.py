"""Ground-truth plan factory.

A simplified ray/attenuation model builds a sparse dose-influence matrix for
equispaced coplanar beams; fluence maps are optimized against a weighted
per-structure least-squares objective with a nonnegativity constraint, solved
by the Chambolle-Pock first-order primal-dual iteration; sampling the
structure tradeoff weights sweeps the Pareto surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DosekitError, ValidationError
from .phantom import PatientCase
from .seeds import derive_seed
from .volume import StructureMask, StructureSet, VoxelGrid, read_volume, write_volume

DEFAULT_WEIGHT_BOUNDS = (0.01, 1.0)


class PlannerError(DosekitError):
    pass


class PlannerGeometryError(PlannerError):
    """Beam arrangement leaves target voxels with zero influence."""


class SolverDivergenceError(PlannerError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite iterate at iteration {iteration}")


@dataclass(frozen=True)
class BeamConfig:
    """Equispaced coplanar beams with Gaussian beamlet falloff."""

    n_beams: int = 7
    beamlet_grid: tuple[int, int] = (8, 6)  # (lateral, axial) beamlets per beam
    attenuation_mu: float = 0.005  # per mm
    lateral_sigma: float = 5.0  # mm
    lateral_cutoff: float = 15.0  # mm
    field_margin_mm: float = 5.0
    ray_step_mm: float = 2.5

    def __post_init__(self):
        if self.n_beams < 1:
            raise ValidationError("n_beams must be >= 1")
        if any(v <= 0 for v in (*self.beamlet_grid, self.attenuation_mu,
                                self.lateral_sigma, self.lateral_cutoff,
                                self.field_margin_mm, self.ray_step_mm)):
            raise ValidationError("beam parameters must be strictly positive")

    def to_json_dict(self) -> dict:
        return {
            "n_beams": self.n_beams,
            "beamlet_grid": list(self.beamlet_grid),
            "attenuation_mu": self.attenuation_mu,
            "lateral_sigma": self.lateral_sigma,
            "lateral_cutoff": self.lateral_cutoff,
            "field_margin_mm": self.field_margin_mm,
            "ray_step_mm": self.ray_step_mm,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BeamConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown beam config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "beamlet_grid" in kwargs:
            kwargs["beamlet_grid"] = tuple(kwargs["beamlet_grid"])
        return cls(**kwargs)


def beamlet_weight(depth_mm: float, lateral_mm: float, cfg: BeamConfig) -> float:
    """exp(-mu*depth) * exp(-r^2 / (2 sigma^2)), zero beyond the lateral cutoff."""
    if lateral_mm > cfg.lateral_cutoff:
        return 0.0
    return float(
        np.exp(-cfg.attenuation_mu * depth_mm)
        * np.exp(-(lateral_mm**2) / (2.0 * cfg.lateral_sigma**2))
    )


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """Sparse beamlet-to-voxel dose map over the body voxels.

    Row i corresponds to the body voxel with raster index voxel_indices[i];
    columns are beamlets ordered beam-major, lateral index next, axial last.
    """

    matrix: sp.csr_matrix
    voxel_indices: np.ndarray
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.matrix.shape[0] != self.voxel_indices.size:
            raise ValidationError("row count must match the voxel index map")
        if self.matrix.nnz and self.matrix.data.min() < 0:
            raise ValidationError("influence entries must be nonnegative")

    @property
    def row_offsets(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def column_indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    @property
    def n_beamlets(self) -> int:
        return self.matrix.shape[1]

    def rows_for(self, mask: StructureMask) -> np.ndarray:
        """Row positions of a structure's voxels (all lie inside the body)."""
        wanted = mask.linear_indices()
        pos = np.searchsorted(self.voxel_indices, wanted)
        if pos.size and (pos.max() >= self.voxel_indices.size or
                         np.any(self.voxel_indices[pos] != wanted)):
            raise ValidationError(f"structure {mask.name!r} has voxels outside the body rows")
        return pos.astype(np.int64)


def build_influence_matrix(case: PatientCase, cfg: BeamConfig) -> InfluenceMatrix:
    """Ray-march depths and Gaussian lateral falloff for every (voxel, beamlet)."""
    structures = case.structures
    dims = structures.dims
    spacing = np.asarray(structures.spacing, dtype=np.float64)
    body = structures.body
    body_arr = body.bool_array()
    body_idx = body.linear_indices()

    nx, ny, _ = dims
    gx = body_idx % nx
    gy = (body_idx // nx) % ny
    gz = body_idx // (nx * ny)
    centers = (np.stack([gx, gy, gz], axis=1).astype(np.float64) + 0.5) * spacing

    ptv_union = np.zeros(dims, dtype=bool)
    for ptv in structures.ptvs:
        ptv_union |= ptv.bool_array()
    ptv_pts = (np.stack(np.nonzero(ptv_union), axis=1).astype(np.float64) + 0.5) * spacing
    iso = ptv_pts.mean(axis=0)

    diag = float(np.linalg.norm(np.asarray(dims) * spacing))
    steps = np.arange(1, int(np.ceil(diag / cfg.ray_step_mm)) + 1, dtype=np.float64)
    steps *= cfg.ray_step_mm

    nu, nv = cfg.beamlet_grid
    z_rel = ptv_pts[:, 2] - iso[2]
    z_lo, z_hi = z_rel.min() - cfg.field_margin_mm, z_rel.max() + cfg.field_margin_mm
    z_offsets = np.linspace(z_lo, z_hi, nv)

    blocks = []
    for b in range(cfg.n_beams):
        phi = 2.0 * np.pi * b / cfg.n_beams
        d = np.array([np.cos(phi), np.sin(phi), 0.0])
        u = np.array([-np.sin(phi), np.cos(phi), 0.0])

        pu_ptv = (ptv_pts - iso) @ u
        u_lo, u_hi = pu_ptv.min() - cfg.field_margin_mm, pu_ptv.max() + cfg.field_margin_mm
        u_offsets = np.linspace(u_lo, u_hi, nu)

        # material path length upstream of each voxel along -d
        pos = centers[None, :, :] - steps[:, None, None] * d[None, None, :]
        cell = np.floor(pos / spacing).astype(np.int64)
        valid = np.all((cell >= 0) & (cell < np.asarray(dims)), axis=2)
        cell_clipped = np.clip(cell, 0, np.asarray(dims) - 1)
        inside = body_arr[cell_clipped[..., 0], cell_clipped[..., 1], cell_clipped[..., 2]]
        depth = cfg.ray_step_mm * (inside & valid).sum(axis=0).astype(np.float64)

        pu = (centers - iso) @ u
        pz = centers[:, 2] - iso[2]
        uu, zz = np.meshgrid(u_offsets, z_offsets, indexing="ij")
        r2 = (pu[:, None] - uu.ravel()[None, :]) ** 2 + (pz[:, None] - zz.ravel()[None, :]) ** 2
        block = np.exp(-cfg.attenuation_mu * depth)[:, None] * np.exp(
            -r2 / (2.0 * cfg.lateral_sigma**2)
        )
        block[r2 > cfg.lateral_cutoff**2] = 0.0
        blocks.append(sp.csr_matrix(block))

    matrix = sp.hstack(blocks, format="csr")

    infl = InfluenceMatrix(
        matrix=matrix,
        voxel_indices=body_idx,
        dims=dims,
        spacing=tuple(structures.spacing),
    )
    reach = np.diff(matrix.indptr) > 0
    for ptv in structures.ptvs:
        rows = infl.rows_for(ptv)
        missed = int(np.count_nonzero(~reach[rows]))
        if missed:
            raise PlannerGeometryError(
                f"{missed} voxels of {ptv.name!r} receive no beamlet influence"
            )
    return infl


@dataclass(frozen=True)
class PlanWeights:
    """Tradeoff weight per objective structure (every PTV and OAR)."""

    weights: dict[str, float]
    bounds: tuple[float, float] = DEFAULT_WEIGHT_BOUNDS

    def __post_init__(self):
        if any(w <= 0 for w in self.weights.values()):
            raise ValidationError("all tradeoff weights must be positive")

    def __getitem__(self, name: str) -> float:
        return self.weights[name]


def sample_weights(
    structures: StructureSet,
    bounds: tuple[float, float] = DEFAULT_WEIGHT_BOUNDS,
    seed: int = 0,
) -> PlanWeights:
    """PTV weights pinned at 1; OAR weights log-uniform within bounds."""
    lo, hi = bounds
    if lo <= 0 or hi <= 0 or lo > hi:
        raise ValidationError(f"weight bounds must be positive with lo <= hi, got {bounds}")
    rng = np.random.default_rng(seed)
    weights: dict[str, float] = {}
    for ptv in structures.ptvs:
        weights[ptv.name] = 1.0
    for oar in structures.oars:
        if lo == hi:
            weights[oar.name] = float(lo)
        else:
            weights[oar.name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return PlanWeights(weights=weights, bounds=(float(lo), float(hi)))


@dataclass(frozen=True)
class CpParams:
    tau: float
    sigma: float
    operator_norm: float
    theta: float = 1.0
    max_iters: int = 2000
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValidationError("tolerance must be positive")
        if self.tau * self.sigma * self.operator_norm**2 > 1.0 + 1e-9:
            raise ValidationError("step sizes violate tau*sigma*|A|^2 <= 1")


def default_cp_params(operator_norm: float, max_iters: int = 2000,
                      tolerance: float = 1e-6) -> CpParams:
    step = 0.95 / max(operator_norm, 1e-12)
    return CpParams(
        tau=step, sigma=step, operator_norm=operator_norm,
        max_iters=max_iters, tolerance=tolerance,
    )


def estimate_operator_norm(matrix, seed: int, iters: int = 50) -> float:
    """Power iteration on A^T A with a seed-fixed start vector."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(matrix.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matrix.T @ (matrix @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))


@dataclass(frozen=True)
class PlanDiagnostics:
    iterations: int
    converged: bool
    final_objective: float
    objective_at_zero: float
    objective_at_mid: float
    operator_norm: float

    def to_json_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True, eq=False)
class Plan:
    patient_id: str
    index: int
    weights: PlanWeights
    fluence: np.ndarray
    dose: VoxelGrid
    diagnostics: PlanDiagnostics

    def __post_init__(self):
        if self.fluence.size and self.fluence.min() < 0:
            raise ValidationError("fluence must be nonnegative")


def _stacked_objective(A_stack, c_vec, p_vec, x) -> float:
    r = A_stack @ x - p_vec
    return float(np.sum(c_vec * r * r))


def solve_stacked(A_stack, c_vec, p_vec, params: CpParams):
    """Chambolle-Pock on min_x>=0 sum_i c_i (a_i.x - p_i)^2.

    Dual prox is the conjugate prox of the weighted quadratic,
    prox_{sigma f*}(v) = (v - sigma p) / (1 + sigma / (2c)), applied rowwise.
    """
    n = A_stack.shape[1]
    x = np.zeros(n)
    xbar = x.copy()
    y = np.zeros(A_stack.shape[0])
    denom = 1.0 + params.sigma / (2.0 * c_vec)
    obj0 = _stacked_objective(A_stack, c_vec, p_vec, x)
    obj_mid = obj0
    mid_iter = max(params.max_iters // 2, 1)
    iterations = 0
    converged = False
    for it in range(1, params.max_iters + 1):
        iterations = it
        with np.errstate(over="ignore", invalid="ignore"):
            y = (y + params.sigma * (A_stack @ xbar) - params.sigma * p_vec) / denom
            x_old = x
            x = x - params.tau * (A_stack.T @ y)
            np.maximum(x, 0.0, out=x)
            xbar = x + params.theta * (x - x_old)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise SolverDivergenceError(it)
        if it == mid_iter:
            obj_mid = _stacked_objective(A_stack, c_vec, p_vec, x)
        step = float(np.linalg.norm(x - x_old))
        scale = max(float(np.linalg.norm(x)), 1e-30)
        if step / scale < params.tolerance:
            converged = True
            break
    obj_final = _stacked_objective(A_stack, c_vec, p_vec, x)
    if iterations < mid_iter:
        obj_mid = obj_final
    return x, PlanDiagnostics(
        iterations=iterations,
        converged=converged,
        final_objective=obj_final,
        objective_at_zero=obj0,
        objective_at_mid=obj_mid,
        operator_norm=params.operator_norm,
    )


def _objective_blocks(infl: InfluenceMatrix, structures: StructureSet,
                      weights: PlanWeights):
    rows_list, c_list, p_list = [], [], []
    for s in (*structures.ptvs, *structures.oars):
        if s.name not in weights.weights:
            raise ValidationError(f"no tradeoff weight for structure {s.name!r}")
        rows = infl.rows_for(s)
        if rows.size == 0:
            continue
        c = weights[s.name] / rows.size
        p = s.prescription if s.kind == "PTV" else 0.0
        rows_list.append(rows)
        c_list.append(np.full(rows.size, c))
        p_list.append(np.full(rows.size, p))
    all_rows = np.concatenate(rows_list)
    return (
        infl.matrix[all_rows],
        np.concatenate(c_list),
        np.concatenate(p_list),
    )


def objective(infl: InfluenceMatrix, structures: StructureSet,
              weights: PlanWeights, fluence: np.ndarray) -> float:
    """sum_s (w_s / N_s) * ||A_s x - p_s||^2 with p = prescription (PTV) or 0 (OAR)."""
    fluence = np.asarray(fluence, dtype=np.float64)
    if fluence.shape != (infl.n_beamlets,):
        raise ValidationError(
            f"fluence length {fluence.shape} does not match {infl.n_beamlets} beamlets"
        )
    A_stack, c_vec, p_vec = _objective_blocks(infl, structures, weights)
    return _stacked_objective(A_stack, c_vec, p_vec, fluence)


def scatter_dose(infl: InfluenceMatrix, fluence: np.ndarray) -> VoxelGrid:
    """Map body-row doses back onto the full grid (zero outside the body)."""
    dose_rows = infl.matrix @ np.asarray(fluence, dtype=np.float64)
    flat = np.zeros(int(np.prod(infl.dims)), dtype=np.float64)
    flat[infl.voxel_indices] = dose_rows
    return VoxelGrid(infl.dims, infl.spacing, flat.reshape(infl.dims, order="F").astype(np.float32))


def solve_fluence(
    infl: InfluenceMatrix,
    structures: StructureSet,
    weights: PlanWeights,
    params: CpParams | None = None,
    seed: int = 0,
    patient_id: str = "",
    index: int = 0,
) -> Plan:
    A_stack, c_vec, p_vec = _objective_blocks(infl, structures, weights)
    if params is None:
        norm = estimate_operator_norm(A_stack, derive_seed(seed, "operator-norm"))
        params = default_cp_params(norm)
    x, diagnostics = solve_stacked(A_stack, c_vec, p_vec, params)
    return Plan(
        patient_id=patient_id,
        index=index,
        weights=weights,
        fluence=x,
        dose=scatter_dose(infl, x),
        diagnostics=diagnostics,
    )


def generate_plans(
    case: PatientCase,
    cfg: BeamConfig,
    plan_count: int,
    seed: int,
    weight_bounds: tuple[float, float] = DEFAULT_WEIGHT_BOUNDS,
    max_iters: int = 2000,
    tolerance: float = 1e-6,
) -> list[Plan]:
    """Pseudo-random Pareto samples: one weight draw and one solve per plan."""
    if plan_count < 1:
        raise ValidationError("plan_count must be >= 1")
    infl = build_influence_matrix(case, cfg)
    probe = sample_weights(case.structures, weight_bounds, derive_seed(seed, "weights", 0))
    A_stack, _, _ = _objective_blocks(infl, case.structures, probe)
    norm = estimate_operator_norm(A_stack, derive_seed(seed, "operator-norm"))
    params = default_cp_params(norm, max_iters=max_iters, tolerance=tolerance)
    plans = []
    for i in range(plan_count):
        weights = sample_weights(case.structures, weight_bounds, derive_seed(seed, "weights", i))
        try:
            plans.append(
                solve_fluence(
                    infl, case.structures, weights, params,
                    patient_id=case.id, index=i,
                )
            )
        except PlannerError as exc:
            raise PlannerError(f"plan {i} for {case.id}: {exc}") from exc
    return plans


PLAN_JSON = "plan.json"
DOSE_FILE = "dose.dvol"
FLUENCE_FILE = "fluence.f32"


def save_plan(directory, plan: Plan) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(plan.dose, directory / DOSE_FILE)
    (directory / FLUENCE_FILE).write_bytes(
        np.asarray(plan.fluence, dtype="<f4").tobytes()
    )
    meta = {
        "patient_id": plan.patient_id,
        "index": plan.index,
        "weights": plan.weights.weights,
        "weight_bounds": list(plan.weights.bounds),
        "diagnostics": plan.diagnostics.to_json_dict(),
    }
    (directory / PLAN_JSON).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_plan(directory) -> Plan:
    directory = Path(directory)
    meta = json.loads((directory / PLAN_JSON).read_text())
    dose = read_volume(directory / DOSE_FILE)
    fluence = np.frombuffer((directory / FLUENCE_FILE).read_bytes(), dtype="<f4").astype(np.float64)
    return Plan(
        patient_id=meta["patient_id"],
        index=meta["index"],
        weights=PlanWeights(
            weights={k: float(v) for k, v in meta["weights"].items()},
            bounds=tuple(meta["weight_bounds"]),
        ),
        fluence=fluence,
        dose=dose,
        diagnostics=PlanDiagnostics(**meta["diagnostics"]),
    )
