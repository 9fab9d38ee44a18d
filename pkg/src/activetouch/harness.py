"""Trial loop, metrics, experiments and prior promotion."""

from __future__ import annotations

import csv
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .exploration import ExplorationLimits, enforce_contact, rrt_explore, select_target_dhd, select_target_gpis
from .geometry import OrientedPoint, Pose, TriangleMesh, compose_transform, directed_hausdorff, two_way_hausdorff
from .gpis import ReconstructionCollapse, SurfaceEstimate, extract_surface, gpis_fit, gpis_predict, optimize_kernel_scale
from .measurement import NoiseParams, Observation
from .mesh_io import load_mesh, save_obj, save_vertex_csv
from .objects import CATALOG, Library, desk_library, load_library, model_from_entry
from .particle_filter import ParticleFilter, PfConfig, StepReport
from .sdf import ObjectModel, SdfSource, sdf_eval, sdf_gradient
from .simulator import WORKSPACE, Probe, World, random_pose

STEP_HEADER = ["step", "map_class", "pose_twd", "dhd", "evidence_pp", "particles", "known"]


@dataclass
class Params:
    sigma_d: float = 0.50
    sigma_n: float = 1.50
    sigma: float = 1e-4
    a0: float = 1.00
    eps: float = 0.60
    n_s: int = 30
    lam: float = 0.97

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"parameter {k} must be positive")


@dataclass
class TrialConfig:
    seed: int = 0
    object_id: str = "box"
    library: str | None = None  # manifest path; None = built-in desk set
    params: Params = field(default_factory=Params)
    exploration: str = "gpis_dhd"  # or "rrt"
    max_steps: int | None = None  # default 300 for known objects, 400 for novel
    out_dir: str | None = None
    normal_noise: float = 0.0
    kernel_radius: float = 12.0
    max_train: int = 400
    twd_samples: int = 2000
    gpis_cell: float = 2 * WORKSPACE / 63
    pf: PfConfig = field(default_factory=PfConfig)
    limits: ExplorationLimits = field(default_factory=ExplorationLimits)

    def __post_init__(self):
        if isinstance(self.params, dict):
            self.params = Params(**self.params)
        if isinstance(self.pf, dict):
            self.pf = PfConfig(**self.pf)
        if isinstance(self.limits, dict):
            self.limits = ExplorationLimits(**self.limits)
        if self.exploration not in ("gpis_dhd", "rrt"):
            raise ValueError(f"unknown exploration procedure {self.exploration!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def trial_id(self) -> str:
        return f"{self.object_id}-{self.exploration}-s{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialConfig":
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    map_class: int
    map_name: str
    pose_twd: float
    dhd: float
    evidence_pp: float
    particles: int
    known: bool
    n_pos: int
    n_neg: int
    phase: int

    def csv_row(self) -> list:
        return [self.step, self.map_class, f"{self.pose_twd:.6f}", f"{self.dhd:.6f}", f"{self.evidence_pp:.6f}",
                self.particles, int(self.known)]


@dataclass
class TrialResult:
    config: dict
    truth_name: str
    truth_pose: dict
    in_library: bool
    records: list[StepRecord] = field(default_factory=list)
    terminated_at: int | None = None
    converged: bool = False
    final_class: str | None = None
    final_known: bool | None = None
    reconstruction_twd: float | None = None
    map_shape_twd: float | None = None
    mesh_path: str | None = None
    init_particle_count: int = 0
    max_particles: int = 0
    failed: bool = False
    failure: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["records"] = [asdict(r) for r in self.records]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialResult":
        d = dict(d)
        d["records"] = [StepRecord(**r) for r in d["records"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def steps_csv(self) -> str:
        lines = [",".join(STEP_HEADER)] + [",".join(str(v) for v in r.csv_row()) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        tid = TrialConfig.from_dict(self.config).trial_id
        (out / "trials").mkdir(parents=True, exist_ok=True)
        (out / "steps").mkdir(parents=True, exist_ok=True)
        (out / "trials" / f"{tid}.json").write_text(self.to_json())
        (out / "steps" / f"{tid}.csv").write_text(self.steps_csv())
        return out / "trials" / f"{tid}.json"


# ---------------------------------------------------------------------------
# metrics


def posed_samples(model: ObjectModel, pose: Pose, count: int) -> np.ndarray:
    return compose_transform(pose, model.surface_samples(count))


def pose_error_twd(map_model: ObjectModel, map_pose: Pose, truth_model: ObjectModel, truth_pose: Pose,
                   sample_count: int = 2000) -> float:
    """TWD between surface samples of the MAP shape and of the ground truth."""
    return two_way_hausdorff(posed_samples(map_model, map_pose, sample_count),
                             posed_samples(truth_model, truth_pose, sample_count))


def mesh_samples(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    return mesh.sample_surface(count, np.random.default_rng(seed))[0]


# ---------------------------------------------------------------------------
# trial


def _truth_model(cfg: TrialConfig, library: Library) -> tuple[ObjectModel, bool]:
    try:
        return library.by_name(cfg.object_id), True
    except KeyError:
        pass
    if cfg.object_id not in CATALOG:
        raise KeyError(f"object {cfg.object_id!r} is neither in the library nor in the catalog")
    return _catalog_model(cfg.object_id), False


_TRUTH_CACHE: dict[str, ObjectModel] = {}


def _catalog_model(name: str) -> ObjectModel:
    if name not in _TRUTH_CACHE:
        _TRUTH_CACHE[name] = model_from_entry({"name": name}, -1)
    return _TRUTH_CACHE[name]


def _library(cfg: TrialConfig) -> Library:
    return desk_library() if cfg.library is None else load_library(cfg.library)


class _Estimate:
    """Current shape estimate: either the posed MAP model or a GPIS surface."""

    def __init__(self, model: ObjectModel, pose: Pose, gp=None, surface: SurfaceEstimate | None = None):
        self.model, self.pose, self.gp, self.surface = model, pose, gp, surface
        self._verts = None

    @property
    def vertices(self) -> np.ndarray:
        if self.surface is not None:
            return self.surface.vertices
        if self._verts is None:
            self._verts = compose_transform(self.pose, self.model.display_mesh.vertices)
        return self._verts

    def __call__(self, x):
        if self.gp is not None:
            mean, _ = gpis_predict(self.gp, np.reshape(x, (1, 3)))
            return float(mean[0, 0]), mean[0, 1:]
        return sdf_eval(self.model, self.pose, x), sdf_gradient(self.model, self.pose, x)


def _fit_surface(cfg: TrialConfig, contacts: list[Observation], model: ObjectModel, pose: Pose,
                 a: float) -> tuple[object, SurfaceEstimate]:
    pts = [OrientedPoint(o.x, o.n) for o in contacts]
    gp = gpis_fit(pts, (model, pose), a, cfg.kernel_radius, cfg.params.sigma, cfg.max_train)
    optimize_kernel_scale(gp)
    V = compose_transform(pose, model.display_mesh.vertices)
    X = np.array([o.x for o in contacts])
    lo = np.maximum(np.minimum(V.min(axis=0), X.min(axis=0)) - 1.0, -WORKSPACE)
    hi = np.minimum(np.maximum(V.max(axis=0), X.max(axis=0)) + 1.0, WORKSPACE)
    return gp, extract_surface(gp, lo, hi, cfg.gpis_cell)


def run_trial(cfg: TrialConfig) -> TrialResult:
    library = _library(cfg)
    truth, in_lib = _truth_model(cfg, library)
    max_steps = cfg.max_steps or (300 if in_lib else 400)
    ss = np.random.SeedSequence(cfg.seed)
    rng_pose, rng_first, rng_pf, rng_rrt = (np.random.default_rng(s) for s in ss.spawn(4))
    truth_pose = random_pose(rng_pose, truth)
    world = World(truth, truth_pose, cfg.params.sigma, cfg.normal_noise, cfg.seed)
    probe = Probe(world, cfg.limits.march_step)
    noise = NoiseParams(cfg.params.sigma_d, cfg.params.sigma_n)
    pf_cfg = PfConfig(**{**asdict(cfg.pf), "n_s": cfg.params.n_s, "lam": cfg.params.lam})
    pf = ParticleFilter(library.models, library.table, noise, pf_cfg, rng_pf)
    result = TrialResult(cfg.to_dict(), truth.name, truth_pose.to_dict(), in_lib)

    a = cfg.params.a0
    est: _Estimate | None = None
    last_surface: SurfaceEstimate | None = None
    step = 1
    try:
        first = probe.first_contact(rng_first)
        report = pf.initialize(Observation.contact(first.x, first.n, 1))
        result.init_particle_count = pf.init_particle_count
        phase = 0
        while True:
            est = _estimate(cfg, pf, report, library, a)
            if est.gp is not None:
                a = est.gp.a
                last_surface = est.surface
            contacts = np.array([o.x for o in pf.contacts])
            dhd = directed_hausdorff(est.vertices, contacts)
            m = library.models[report.map.class_id]
            twd = pose_error_twd(m, report.map.pose, truth, truth_pose, cfg.twd_samples)
            result.records.append(StepRecord(step, report.map.class_id, m.name, twd, dhd, report.evidence_per_point,
                                             report.particle_count, report.known, report.n_pos, report.n_neg, phase))
            if step > 1:
                result.max_particles = max(result.max_particles, report.particle_count)
            if dhd <= cfg.params.eps:
                result.terminated_at, result.converged = step, True
                break
            if step >= max_steps:
                result.terminated_at = step
                break
            step += 1
            if cfg.exploration == "rrt":
                outcome = rrt_explore(contacts, probe, rng_rrt, cfg.limits, step)
            else:
                if est.surface is not None:
                    target = select_target_gpis(est.surface)
                else:
                    target = select_target_dhd(est.vertices, contacts)
                outcome = enforce_contact(target, est, probe, contacts, cfg.limits, step, rng_rrt)
            phase = outcome.phase
            report = pf.step(outcome.observations())
    except Exception as exc:  # a failed trial is recorded, not raised
        result.failed = True
        result.failure = f"step {step}: {type(exc).__name__}: {exc}"
        result.terminated_at = step
        if not isinstance(exc, (ReconstructionCollapse, RuntimeError, ValueError, np.linalg.LinAlgError)):
            result.failure += "\n" + traceback.format_exc(limit=3)

    if result.records:
        last = result.records[-1]
        result.final_class = last.map_name
        result.map_shape_twd = last.pose_twd
        result.final_known = last.known
        if last_surface is not None:
            samples = mesh_samples(last_surface.mesh, cfg.twd_samples, cfg.seed)
            result.reconstruction_twd = two_way_hausdorff(samples, posed_samples(truth, truth_pose, cfg.twd_samples))
            if cfg.out_dir is not None:
                mesh_dir = Path(cfg.out_dir) / "meshes"
                path = mesh_dir / f"{cfg.trial_id}.obj"
                save_obj(last_surface.mesh, path)
                save_vertex_csv(last_surface.vertex_variance, path.with_suffix(".variance.csv"))
                result.mesh_path = str(path)
    return result


def _estimate(cfg: TrialConfig, pf: ParticleFilter, report: StepReport, library: Library, a: float) -> _Estimate:
    m = library.models[report.map.class_id]
    if report.known:
        return _Estimate(m, report.map.pose)
    gp, surface = _fit_surface(cfg, pf.contacts, m, report.map.pose, a)
    return _Estimate(m, report.map.pose, gp, surface)


# ---------------------------------------------------------------------------
# experiments


def t_interval(values, level: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided Student-t confidence band."""
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, mean, mean
    half = float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / np.sqrt(len(v)))
    return mean, mean - half, mean + half


def _run_one(cfg_dict: dict) -> dict:
    return run_trial(TrialConfig.from_dict(cfg_dict)).to_dict()


def expand_manifest(manifest: dict) -> list[TrialConfig]:
    """``{"objects": [...], "trials": n, "procedures": [...], "seed": s, ...}`` -> trial configs."""
    base = {k: v for k, v in manifest.items() if k not in ("objects", "trials", "procedures", "seed", "seeds")}
    seeds = manifest.get("seeds") or [manifest.get("seed", 0) + i for i in range(manifest.get("trials", 10))]
    cfgs = []
    for proc in manifest.get("procedures", ["gpis_dhd"]):
        for obj in manifest["objects"]:
            for s in seeds:
                cfgs.append(TrialConfig(**{**base, "seed": int(s), "object_id": obj, "exploration": proc}))
    return cfgs


def summarize(results: list[TrialResult], max_step: int | None = None) -> list[dict]:
    """Per-procedure, per-step mean and 95% t-interval of pose TWD and DHD.

    A trial that terminated early contributes its final values to later steps.
    """
    rows = []
    procs = sorted({r.config["exploration"] for r in results if r.records})
    for proc in procs:
        rs = [r for r in results if r.config["exploration"] == proc and r.records]
        horizon = max_step or max(len(r.records) for r in rs)
        for k in range(1, horizon + 1):
            pose = [r.records[min(k, len(r.records)) - 1].pose_twd for r in rs]
            dhd = [r.records[min(k, len(r.records)) - 1].dhd for r in rs]
            pm, plo, phi = t_interval(pose)
            dm, dlo, dhi = t_interval(dhd)
            rows.append({"procedure": proc, "step": k, "n": len(rs), "pose_twd_mean": pm, "pose_twd_lo": plo,
                         "pose_twd_hi": phi, "dhd_mean": dm, "dhd_lo": dlo, "dhd_hi": dhi,
                         "band": "t-interval 95%"})
    return rows


def write_summary(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def load_results(out_dir) -> list[TrialResult]:
    return [TrialResult.from_dict(json.loads(p.read_text())) for p in sorted(Path(out_dir, "trials").glob("*.json"))]


def run_experiment(manifest: dict, out_dir, jobs: int = 1) -> tuple[list[TrialResult], list[dict]]:
    out = Path(out_dir)
    cfgs = expand_manifest(manifest)
    for c in cfgs:
        c.out_dir = str(out)
    dicts = [c.to_dict() for c in cfgs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            raw = list(ex.map(_run_one, dicts))
    else:
        raw = [_run_one(d) for d in dicts]
    results = [TrialResult.from_dict(r) for r in raw]
    for r in results:
        r.save(out)
    rows = summarize(results)
    write_summary(rows, out / "summary.csv")
    return results, rows


# ---------------------------------------------------------------------------
# continual learning


def promote_learned_prior(result: TrialResult | dict, manifest_path, name: str | None = None,
                          resolution: int = 64) -> Library:
    """Turn a trial's reconstruction into a new prior class and rewrite the manifest."""
    if isinstance(result, dict):
        result = TrialResult.from_dict(result)
    if result.mesh_path is None:
        raise ValueError("trial has no reconstruction mesh to promote")
    manifest_path = Path(manifest_path).resolve()
    entries = json.loads(manifest_path.read_text())["classes"]
    mesh = load_mesh(result.mesh_path).largest_component()
    if not mesh.is_watertight():
        raise ValueError(f"reconstruction is not closed ({len(mesh.open_edges())} open edges); "
                         "repair the mesh externally before promoting")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    mesh = TriangleMesh(mesh.vertices - 0.5 * (lo + hi), mesh.triangles)
    name = name or f"learned_{result.truth_name}"
    stem = name.replace("/", "_")
    save_obj(mesh, manifest_path.parent / f"{stem}.obj")
    entry = {"name": name, "mesh": f"{stem}.obj", "sdf": f"{stem}.sdf", "source": SdfSource.GPIS.value,
             "resolution": resolution}
    entries = [e for e in entries if e["name"] != name] + [entry]
    manifest_path.write_text(json.dumps({"classes": entries}, indent=2) + "\n")
    return load_library(manifest_path)
