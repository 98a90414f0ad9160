"""Scene configuration, dataset generation, binary containers and images.

Configs are JSON with sorted keys and two-space indentation so that
parse -> emit round trips are byte-identical. Array payloads (checkpoints,
ground-truth particle dumps) use a chunked little-endian container with
magic "PACS".
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DatasetIncompleteError,
    SimulationBlowupError,
    UnsupportedVersionError,
)
from .materials import (
    Elastic,
    MaterialParams,
    NewtonianFluid,
    NonNewtonianFluid,
    Plasticine,
    Sand,
    pack_kernel_params,
)
from .mpm_core import (
    Collider,
    Cylinder,
    HalfSpace,
    MpmGrid,
    ParticleState,
    cfl_substeps,
    sample_particles,
)
from .radiance_field import FEAT_DIM, SIGMA_EMPTY, ColorNet, VoxelField
from .renderer import Camera, render_image
from .sysid_pipeline import Observations, StageSchedule, _skew

CONTAINER_MAGIC = b"PACS"
CONTAINER_VERSION = 1

_FAMILIES = {
    "elastic": Elastic,
    "plasticine": Plasticine,
    "newtonian": NewtonianFluid,
    "non_newtonian": NonNewtonianFluid,
    "sand": Sand,
}


def material_from_dict(d: dict) -> MaterialParams:
    d = dict(d)
    family = d.pop("family")
    if family not in _FAMILIES:
        raise ConfigError(f"unknown material family {family!r}")
    return _FAMILIES[family](**d)


def material_to_dict(m: MaterialParams) -> dict:
    out = {"family": m.family}
    out.update({k: float(v) for k, v in asdict(m).items()})
    return out


def collider_from_dict(d: dict) -> Collider:
    d = dict(d)
    kind = d.pop("type")
    if kind == "half_space":
        return HalfSpace(**d)
    if kind == "cylinder":
        return Cylinder(**d)
    raise ConfigError(f"unknown collider type {kind!r}")


def collider_to_dict(c: Collider) -> dict:
    if isinstance(c, HalfSpace):
        return {
            "type": "half_space", "normal": [float(x) for x in c.normal],
            "offset": float(c.offset), "mode": c.mode, "friction": float(c.friction),
        }
    return {
        "type": "cylinder", "point": [float(x) for x in c.point],
        "axis": [float(x) for x in c.axis], "radius": float(c.radius),
        "mode": c.mode, "friction": float(c.friction),
    }


@dataclass
class SceneConfig:
    """Everything needed to generate a dataset or run identification on one."""

    name: str = "scene"
    seed: int = 0
    domain_size: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)
    sim_res: int = 32
    field_res: int = 32
    frame_dt: float = 0.02
    n_frames: int = 12
    substeps: int = 0  # 0: derive from a sound-speed CFL rule
    gravity: tuple = (0.0, 0.0, -9.8)
    rho0: float = 1000.0
    material: dict = dc_field(default_factory=lambda: {"family": "elastic", "E": 1e5, "nu": 0.3})
    init_material: dict | None = None
    object: dict = dc_field(
        default_factory=lambda: {
            "shape": "sphere", "center": [0.5, 0.5, 0.6], "radius": 0.15,
            "sigma_fill": 12.0, "velocity": [0.0, 0.0, 0.0], "omega": [0.0, 0.0, 0.0],
            "color_seed": 5,
        }
    )
    colliders: list = dc_field(
        default_factory=lambda: [
            {"type": "half_space", "normal": [0.0, 0.0, 1.0], "offset": 0.12,
             "mode": "separate", "friction": 0.4}
        ]
    )
    camera_count: int = 4
    camera_radius: float = 1.5
    camera_elevation_deg: float = 25.0
    image_size: int = 64
    fov_deg: float = 35.0
    background: tuple = (1.0, 1.0, 1.0)
    schedule: dict = dc_field(default_factory=dict)
    param_bounds: dict | None = None
    mass_eps: float = 0.0
    blowup_vmax: float = 100.0
    reproducible: bool = False

    def material_params(self) -> MaterialParams:
        return material_from_dict(self.material)

    def init_params(self) -> MaterialParams:
        if self.init_material is None:
            return self.material_params()
        return material_from_dict(self.init_material)

    def collider_objects(self) -> list[Collider]:
        return [collider_from_dict(d) for d in self.colliders]

    def make_grid(self) -> MpmGrid:
        return MpmGrid.cube(self.sim_res, self.origin, self.domain_size)

    def stage_schedule(self) -> StageSchedule:
        return StageSchedule(**self.schedule)

    def effective_substeps(self) -> int:
        if self.substeps > 0:
            return self.substeps
        fam, kp = pack_kernel_params(self.material_params())
        mu = max(kp[0], kp[5], 1.0)
        lam = max(kp[1], kp[4])
        dx = self.domain_size / self.sim_res
        return cfl_substeps(dx, self.frame_dt, self.rho0, mu, lam)

    def cameras(self) -> list[Camera]:
        center = np.asarray(self.origin) + 0.5 * self.domain_size
        cams = []
        el = np.deg2rad(self.camera_elevation_deg)
        for i in range(self.camera_count):
            az = 2.0 * np.pi * i / self.camera_count
            eye = center + self.camera_radius * np.array(
                [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
            )
            cams.append(
                Camera.look_at(eye, center, self.image_size, self.image_size, self.fov_deg)
            )
        return cams

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "SceneConfig":
        d = json.loads(text)
        known = set(SceneConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = SceneConfig(**d)
        cfg.material_params()  # validate early
        for c in cfg.colliders:
            collider_from_dict(c)
        return cfg

    @staticmethod
    def load(path) -> "SceneConfig":
        return SceneConfig.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


# ---------------------------------------------------------------------------
# Chunked binary container
# ---------------------------------------------------------------------------

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1,
                np.dtype("int64"): 2, np.dtype("uint8"): 3}


def write_container(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays: magic, version, then length-prefixed sections."""
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            for s in arr.shape:
                f.write(struct.pack("<Q", s))
            f.write(arr.tobytes())


def read_container(path) -> dict[str, np.ndarray]:
    """Exact inverse of write_container; validates magic/version/sizes."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CONTAINER_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(
            f"{path}: file version {version}, supported version {CONTAINER_VERSION}"
        )
    out: dict[str, np.ndarray] = {}
    ofs = 8
    n = len(data)
    while ofs < n:
        try:
            (nlen,) = struct.unpack_from("<I", data, ofs)
            ofs += 4
            name = data[ofs : ofs + nlen].decode("utf-8")
            if len(data[ofs : ofs + nlen]) != nlen:
                raise struct.error("truncated name")
            ofs += nlen
            code, ndim = struct.unpack_from("<BB", data, ofs)
            ofs += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, ofs)
            ofs += 8 * ndim
        except struct.error as e:
            raise CorruptCheckpointError(f"{path}: truncated section header: {e}") from e
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{path}: unknown dtype code {code}")
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * dt.itemsize
        if ofs + nbytes > n:
            raise CorruptCheckpointError(
                f"{path}: truncated payload for section {name!r}"
            )
        arr = np.frombuffer(data[ofs : ofs + nbytes], dtype=dt).reshape(shape).copy()
        ofs += nbytes
        out[name] = arr
    return out


def particles_to_arrays(st: ParticleState) -> dict[str, np.ndarray]:
    return {f"particles/{k}": getattr(st, k) for k in st.__dataclass_fields__}


def particles_from_arrays(arrays: dict[str, np.ndarray]) -> ParticleState:
    kw = {}
    for k in ParticleState.__dataclass_fields__:
        kw[k] = np.ascontiguousarray(arrays[f"particles/{k}"])
    return ParticleState(**kw)


def field_to_arrays(fld: VoxelField, net: ColorNet | None = None) -> dict[str, np.ndarray]:
    out = {"field/sigma": fld.sigma, "field/feat": fld.feat,
           "field/lo": fld.lo, "field/hi": fld.hi}
    if net is not None:
        out.update({f"net/{k}": v for k, v in net.params().items()})
    return out


def field_from_arrays(arrays) -> tuple[VoxelField, ColorNet | None]:
    fld = VoxelField(
        sigma=np.ascontiguousarray(arrays["field/sigma"]),
        feat=np.ascontiguousarray(arrays["field/feat"]),
        lo=arrays["field/lo"].copy(),
        hi=arrays["field/hi"].copy(),
    )
    net = None
    if "net/w1" in arrays:
        net = ColorNet(
            w1=np.ascontiguousarray(arrays["net/w1"]), b1=np.ascontiguousarray(arrays["net/b1"]),
            w2=np.ascontiguousarray(arrays["net/w2"]), b2=np.ascontiguousarray(arrays["net/b2"]),
        )
    return fld, net


# ---------------------------------------------------------------------------
# Images (PNG via Pillow, PPM/PGM fallback)
# ---------------------------------------------------------------------------

try:
    from PIL import Image as _PILImage
except ImportError:  # pragma: no cover
    _PILImage = None


def write_image(path, img: np.ndarray) -> None:
    """8-bit image from float [0,1]; RGB for 3 channels, grayscale for 2-d."""
    path = Path(path)
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if _PILImage is not None and path.suffix == ".png":
        mode = "RGB" if arr.ndim == 3 else "L"
        _PILImage.fromarray(arr, mode=mode).save(path, format="PNG")
        return
    # PPM/PGM fallback
    path = path.with_suffix(".ppm" if arr.ndim == 3 else ".pgm")
    hdr = ("P6" if arr.ndim == 3 else "P5") + f"\n{arr.shape[1]} {arr.shape[0]}\n255\n"
    with open(path, "wb") as f:
        f.write(hdr.encode("ascii"))
        f.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        for alt in (path.with_suffix(".ppm"), path.with_suffix(".pgm")):
            if alt.exists():
                path = alt
                break
    if _PILImage is not None and path.suffix == ".png":
        return np.asarray(_PILImage.open(path), dtype=np.float64) / 255.0
    with open(path, "rb") as f:
        magic = f.readline().strip()
        w, h = (int(x) for x in f.readline().split())
        f.readline()
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if magic == b"P6":
        return raw.reshape(h, w, 3).astype(np.float64) / 255.0
    return raw.reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Ground-truth scene construction and dataset generation
# ---------------------------------------------------------------------------


def inside_fn_for(obj: dict):
    shape = obj["shape"]
    center = np.asarray(obj["center"], dtype=np.float64)
    if shape == "sphere":
        r = float(obj["radius"])
        return lambda pts: np.linalg.norm(pts - center, axis=-1) <= r
    if shape == "box":
        he = np.asarray(obj["half_extents"], dtype=np.float64)
        return lambda pts: np.all(np.abs(pts - center) <= he, axis=-1)
    if shape == "torus":
        major = float(obj["major_radius"])
        minor = float(obj["minor_radius"])

        def inside(pts):
            q = pts - center
            ring = np.sqrt(q[:, 0] ** 2 + q[:, 1] ** 2) - major
            return ring**2 + q[:, 2] ** 2 <= minor**2

        return inside
    raise ConfigError(f"unknown object shape {shape!r}")


def build_gt_field(cfg: SceneConfig) -> tuple[VoxelField, ColorNet]:
    """Analytic occupancy filled onto the voxel field, random color texture."""
    res = cfg.field_res
    lo = np.asarray(cfg.origin, dtype=np.float64)
    hi = lo + cfg.domain_size
    fld = VoxelField.empty(res, lo, hi)
    inside = inside_fn_for(cfg.object)
    shape = fld.sigma.shape
    idx = np.indices(shape).reshape(3, -1).T
    nodes = lo + idx * fld.dx
    mask = inside(nodes).reshape(shape)
    fld.sigma[mask] = float(cfg.object.get("sigma_fill", 12.0))
    rng = np.random.default_rng(int(cfg.object.get("color_seed", 5)))
    fld.feat[:] = rng.normal(0.0, 1.0, fld.feat.shape)
    net = ColorNet.create(int(cfg.object.get("color_seed", 5)) + 1)
    return fld, net


def gt_initial_state(cfg: SceneConfig, fld: VoxelField) -> ParticleState:
    st = sample_particles(fld, seed=cfg.seed, rho0=cfg.rho0, prune=True)
    v0 = np.asarray(cfg.object.get("velocity", (0.0, 0.0, 0.0)), dtype=np.float64)
    om = np.asarray(cfg.object.get("omega", (0.0, 0.0, 0.0)), dtype=np.float64)
    st.v[:] = v0 + np.cross(om, st.x - st.x.mean(axis=0))
    st.C[:] = _skew(om)
    return st


def generate_dataset(cfg: SceneConfig, out_dir) -> Path:
    """Forward simulate and render the ground-truth scene to disk."""
    from .adjoint_engine import SimSession, simulate_forward

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    cams = cfg.cameras()
    (out / "cameras.json").write_text(
        json.dumps([c.to_dict() for c in cams], indent=2, sort_keys=True) + "\n"
    )
    for v in range(len(cams)):
        (out / f"view_{v:02d}").mkdir(exist_ok=True)
    if cfg.n_frames == 0:
        return out

    fld, net = build_gt_field(cfg)
    state = gt_initial_state(cfg, fld)
    init_arrays = particles_to_arrays(state)
    sess = SimSession(
        params=cfg.material_params(), colliders=cfg.collider_objects(),
        gravity=np.asarray(cfg.gravity), grid=cfg.make_grid(),
        dt_frame=cfg.frame_dt, substeps=cfg.effective_substeps(),
        mass_eps=cfg.mass_eps,
    )
    gt_clouds: dict[str, np.ndarray] = {}

    lo = np.asarray(cfg.origin, dtype=np.float64)
    hi = lo + cfg.domain_size

    def frame_cb(t: int, st: ParticleState):
        vmax = float(np.abs(st.v).max()) if st.n else 0.0
        if vmax > cfg.blowup_vmax:
            raise SimulationBlowupError(f"|v|={vmax:.3g} exceeded limit at frame {t}")
        from .sysid_pipeline import deposit_field

        frame_field, _, _, _ = deposit_field(
            st.x, st.sigma_p, st.feat_p, cfg.field_res, lo, hi
        )
        for v, cam in enumerate(cams):
            img, tend = render_image(frame_field, net, cam, cfg.background, with_aux=True)
            write_image(out / f"view_{v:02d}" / f"frame_{t:04d}.png", img)
            write_image(out / f"view_{v:02d}" / f"mask_{t:04d}.png", (tend < 0.99).astype(np.float64))
        gt_clouds[f"gt/x_{t:04d}"] = st.x.copy()

    simulate_forward(sess, state, cfg.n_frames, frame_cb=frame_cb)
    arrays = dict(init_arrays)
    arrays.update(gt_clouds)
    arrays["gt/v0"] = np.asarray(cfg.object.get("velocity", (0, 0, 0)), dtype=np.float64)
    arrays["gt/omega"] = np.asarray(cfg.object.get("omega", (0, 0, 0)), dtype=np.float64)
    write_container(out / "gt_particles.pacs", arrays)
    return out


def load_observations(cfg: SceneConfig, data_dir) -> Observations:
    """Read a dataset directory, verifying completeness first."""
    data = Path(data_dir)
    cam_file = data / "cameras.json"
    if not cam_file.exists():
        raise DatasetIncompleteError(f"missing {cam_file}")
    cams = [Camera.from_dict(d) for d in json.loads(cam_file.read_text())]
    n_frames = cfg.n_frames
    images = []
    masks = []
    for v in range(len(cams)):
        vdir = data / f"view_{v:02d}"
        if not vdir.exists():
            raise DatasetIncompleteError(f"missing view directory {vdir}")
        vi = []
        vm = []
        for t in range(n_frames + 1):
            fp = vdir / f"frame_{t:04d}.png"
            mp = vdir / f"mask_{t:04d}.png"
            if not fp.exists() and not fp.with_suffix(".ppm").exists():
                raise DatasetIncompleteError(f"missing frame {fp}")
            if not mp.exists() and not mp.with_suffix(".pgm").exists():
                raise DatasetIncompleteError(f"missing mask {mp}")
            vi.append(read_image(fp))
            vm.append(read_image(mp) > 0.5)
        images.append(np.stack(vi))
        masks.append(np.stack(vm))
    return Observations(
        cameras=cams, images=np.stack(images), masks=np.stack(masks),
        c_bg=np.asarray(cfg.background, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Identification runner
# ---------------------------------------------------------------------------

STAGES = ("seed", "velocity", "params", "all")


def _loss_csv(rows: list[tuple]) -> str:
    lines = ["stage,iteration,loss"]
    for stage, i, loss in rows:
        lines.append(f"{stage},{i},{loss!r}")
    return "\n".join(lines) + "\n"


def run_identification(
    cfg: SceneConfig,
    data_dir,
    out_dir,
    stage: str = "all",
    oracle: bool = False,
    reproducible: bool | None = None,
) -> dict:
    """Execute the staged pipeline, writing a manifest, loss log and
    checkpoints into ``out_dir``. Returns the manifest dict."""
    from .adjoint_engine import SimSession, simulate_forward
    from .sysid_pipeline import (
        ChamferObjective,
        SimRenderObjective,
        deposit_field,
        estimate_params,
        estimate_velocity,
        oracle_fit,
        seed_geometry,
    )

    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; pick one of {STAGES}")
    if reproducible is None:
        reproducible = cfg.reproducible
    if reproducible:
        import numba

        numba.set_num_threads(1)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obs = load_observations(cfg, data_dir)
    schedule = cfg.stage_schedule()
    lo = np.asarray(cfg.origin, dtype=np.float64)
    hi = lo + cfg.domain_size
    manifest: dict = {"scene": cfg.name, "stages": [], "seed": cfg.seed}
    loss_rows: list[tuple] = []

    run_seed = stage in ("seed", "all")
    run_vel = stage in ("velocity", "all")
    run_par = stage in ("params", "all")

    seed_ck = out / "seed.pacs"
    if run_seed:
        res = seed_geometry(obs, lo, hi, schedule, seed=cfg.seed, rho0=cfg.rho0)
        write_container(
            seed_ck,
            {**field_to_arrays(res.field, res.net), **particles_to_arrays(res.particles)},
        )
        loss_rows += [("seed", i, xl) for i, xl in enumerate(res.loss_history)]
        manifest["stages"].append("seed")
        manifest["seed_stage"] = {
            "iterations": len(res.loss_history),
            "final_loss": res.loss_history[-1],
            "n_particles": res.particles.n,
            "kept_fraction": res.kept_fraction,
        }
    if not (run_vel or run_par):
        _finish_manifest(manifest, out, loss_rows)
        return manifest

    if not seed_ck.exists():
        raise DatasetIncompleteError(f"stage {stage!r} needs {seed_ck} from a seed run")
    arrays = read_container(seed_ck)
    fld, net = field_from_arrays(arrays)
    from .mpm_core import filter_to_inset

    particles = filter_to_inset(particles_from_arrays(arrays), cfg.make_grid())

    objective = SimRenderObjective(
        obs=obs, base=particles, net=net, params=cfg.init_params(),
        colliders=cfg.collider_objects(), gravity=np.asarray(cfg.gravity),
        grid=cfg.make_grid(), dt_frame=cfg.frame_dt, substeps=cfg.effective_substeps(),
        field_res=cfg.field_res, seed=cfg.seed, stage_id=2,
        rays_per_frame_view=schedule.rays_per_frame_view,
        frames_used=list(range(1, schedule.velocity_frames + 1)),
        bg_keep=schedule.bg_keep_fraction,
    )

    vel_ck = out / "velocity.json"
    if run_vel:
        vres = estimate_velocity(objective, schedule)
        vel_ck.write_text(json.dumps(
            {"v0": vres.v0.tolist(), "omega": vres.omega.tolist(),
             "used_fallback": vres.used_fallback},
            indent=2, sort_keys=True) + "\n")
        loss_rows += [("velocity", i, xl) for i, xl in enumerate(vres.loss_history)]
        manifest["stages"].append("velocity")
        manifest["velocity_stage"] = {
            "v0": vres.v0.tolist(), "omega": vres.omega.tolist(),
            "evaluations": len(vres.loss_history),
            "used_fallback": vres.used_fallback,
        }
    if not run_par:
        _finish_manifest(manifest, out, loss_rows)
        return manifest

    if not vel_ck.exists():
        raise DatasetIncompleteError(f"stage params needs {vel_ck} from a velocity run")
    vel = json.loads(vel_ck.read_text())
    v0 = np.asarray(vel["v0"])
    omega = np.asarray(vel["omega"])

    if oracle:
        gt = read_container(Path(data_dir) / "gt_particles.pacs")
        gt_state = particles_from_arrays(gt)
        clouds = [gt[f"gt/x_{t:04d}"] for t in range(1, cfg.n_frames + 1)]
        cobj = ChamferObjective(
            gt_clouds=clouds, base=gt_state, v0=gt["gt/v0"], omega=gt["gt/omega"],
            colliders=cfg.collider_objects(), gravity=np.asarray(cfg.gravity),
            grid=cfg.make_grid(), dt_frame=cfg.frame_dt, substeps=cfg.effective_substeps(),
        )
        pres = oracle_fit(cobj, cfg.init_params(), iters=schedule.param_iters_b,
                          lr=schedule.lr_params, bounds=cfg.param_bounds)
        manifest["stages"].append("oracle")
    else:
        objective.stage_id = 3
        pres = estimate_params(objective, schedule, v0, omega, cfg.init_params(),
                               cfg.n_frames, bounds=cfg.param_bounds)
        manifest["stages"].append("params")
        manifest["warm_window"] = pres.warm_window
    loss_rows += [("params", i, xl) for i, xl in enumerate(pres.loss_history)]
    manifest["estimated_params"] = material_to_dict(pres.params)
    manifest["best_loss"] = pres.best_loss
    gt_params = cfg.material_params()
    manifest["gt_params"] = material_to_dict(gt_params)
    errs = {}
    for nm in gt_params.identified():
        gtv = float(getattr(gt_params, nm))
        ev = float(getattr(pres.params, nm))
        if nm in ("E", "mu", "kappa", "tau_y", "eta"):
            errs[f"abs_dlog10_{nm}"] = abs(np.log10(ev) - np.log10(gtv))
        else:
            errs[f"abs_d{nm}"] = abs(ev - gtv)
    manifest["param_errors"] = errs

    # side-by-side comparison frames (view 0: observed | rendered)
    from .sysid_pipeline import deposit_field as _dep

    st = objective.make_state(v0, omega)
    sess = objective.session(pres.params)
    compare_ts = sorted({1, cfg.n_frames // 2, cfg.n_frames})

    def cb(t, state):
        if t in compare_ts:
            f, _, _, _ = _dep(state.x, particles.sigma_p, particles.feat_p,
                              cfg.field_res, lo, hi)
            img = render_image(f, net, obs.cameras[0], cfg.background)
            obs_img = obs.images[0, t]
            write_image(out / f"compare_{t:04d}.png", np.concatenate([obs_img, img], axis=1))

    simulate_forward(sess, st, cfg.n_frames, frame_cb=cb)
    write_container(out / "final_particles.pacs", particles_to_arrays(st))
    _finish_manifest(manifest, out, loss_rows)
    return manifest


def _finish_manifest(manifest: dict, out: Path, loss_rows):
    (out / "loss.csv").write_text(_loss_csv(loss_rows))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
