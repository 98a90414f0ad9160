"""Shared scene definitions for tests and the acceptance suite.

Closed-loop scenes are sized for CPU budgets: 32^3 grids, 4 views at 64x64,
12 frames, with parameter search bounds that keep the fixed substep count
inside the explicit-integration stability region.
"""

import numpy as np

from pacsim.scene_io import SceneConfig


def ground(offset=0.15, mode="separate", friction=0.4):
    return {"type": "half_space", "normal": [0.0, 0.0, 1.0], "offset": offset,
            "mode": mode, "friction": friction}


def base_schedule(**over):
    sch = dict(
        coarse_res=16, fine_res=32,
        seed_iters_coarse=150, seed_iters_fine=100, seed_rays=2048,
        velocity_frames=3, velocity_iters=12,
        param_iters_a=12, param_iters_b=18, lr_params=0.12,
        rays_per_frame_view=640,
    )
    sch.update(over)
    return sch


def elastic_scene(**over) -> SceneConfig:
    kw = dict(
        name="elastic_drop", seed=3, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=12, substeps=100,
        camera_count=4, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "elastic", "E": 3e5, "nu": 0.3},
        init_material={"family": "elastic", "E": 3e4, "nu": 0.1},
        param_bounds={"E": [1e4, 1e6], "nu": [0.05, 0.42]},
        object={"shape": "sphere", "center": [0.38, 0.5, 0.60], "radius": 0.16,
                "sigma_fill": 12.0, "velocity": [0.8, 0.0, -1.2],
                "omega": [0.0, 0.0, 0.0], "color_seed": 5},
        colliders=[ground()],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)


def newtonian_scene(**over) -> SceneConfig:
    kw = dict(
        name="droplet", seed=4, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=12, substeps=60,
        camera_count=4, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "newtonian", "mu": 200.0, "kappa": 1e5},
        init_material={"family": "newtonian", "mu": 10.0, "kappa": 1e4},
        param_bounds={"mu": [1.0, 2e3], "kappa": [3e3, 1e6]},
        object={"shape": "sphere", "center": [0.42, 0.5, 0.48], "radius": 0.15,
                "sigma_fill": 12.0, "velocity": [0.5, 0.0, -1.0],
                "omega": [0.0, 0.0, 0.0], "color_seed": 7},
        colliders=[ground(offset=0.18)],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)


def plasticine_scene(**over) -> SceneConfig:
    kw = dict(
        name="playdoh", seed=5, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=12, substeps=110,
        camera_count=4, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "plasticine", "E": 1e6, "nu": 0.3, "tau_y": 1.54e4},
        init_material={"family": "plasticine", "E": 3e5, "nu": 0.35, "tau_y": 1e3},
        param_bounds={"E": [1e5, 2e6], "nu": [0.2, 0.42], "tau_y": [1e2, 3e5]},
        object={"shape": "sphere", "center": [0.42, 0.5, 0.55], "radius": 0.15,
                "sigma_fill": 12.0, "velocity": [0.5, 0.0, -1.5],
                "omega": [0.0, 0.0, 0.0], "color_seed": 9},
        colliders=[ground(offset=0.18)],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)


def non_newtonian_scene(**over) -> SceneConfig:
    kw = dict(
        name="toothpaste", seed=6, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=12, substeps=60,
        camera_count=4, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "non_newtonian", "mu": 5e3, "kappa": 1e5,
                  "tau_y": 200.0, "eta": 10.0},
        init_material={"family": "non_newtonian", "mu": 1e3, "kappa": 3e4,
                       "tau_y": 20.0, "eta": 1.0},
        param_bounds={"mu": [1e2, 5e4], "kappa": [1e4, 5e5],
                      "tau_y": [5.0, 5e3], "eta": [0.1, 1e3]},
        object={"shape": "sphere", "center": [0.45, 0.5, 0.5], "radius": 0.15,
                "sigma_fill": 12.0, "velocity": [0.3, 0.0, -1.0],
                "omega": [0.0, 0.0, 0.0], "color_seed": 11},
        colliders=[ground(offset=0.18)],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)


def sand_scene(**over) -> SceneConfig:
    kw = dict(
        name="sandpile", seed=7, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=12, substeps=80,
        camera_count=4, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "sand", "theta_fric": 40.0},
        init_material={"family": "sand", "theta_fric": 10.0},
        object={"shape": "sphere", "center": [0.47, 0.5, 0.52], "radius": 0.15,
                "sigma_fill": 12.0, "velocity": [0.2, 0.0, -1.0],
                "omega": [0.0, 0.0, 0.0], "color_seed": 13},
        colliders=[ground(offset=0.18, friction=0.5)],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)


def seeding_sphere_scene(**over) -> SceneConfig:
    kw = dict(
        name="seed_sphere", seed=11, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=1, substeps=10,
        camera_count=8, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "elastic", "E": 1e5, "nu": 0.3},
        object={"shape": "sphere", "center": [0.5, 0.5, 0.55], "radius": 0.18,
                "sigma_fill": 12.0, "velocity": [0, 0, 0], "omega": [0, 0, 0],
                "color_seed": 5},
        colliders=[],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)


def seeding_box_scene(**over) -> SceneConfig:
    kw = dict(
        name="seed_box", seed=12, sim_res=32, field_res=32,
        frame_dt=0.02, n_frames=1, substeps=10,
        camera_count=8, camera_radius=2.2, fov_deg=45.0, image_size=64,
        material={"family": "elastic", "E": 1e5, "nu": 0.3},
        object={"shape": "box", "center": [0.5, 0.5, 0.55],
                "half_extents": [0.2, 0.14, 0.11],
                "sigma_fill": 12.0, "velocity": [0, 0, 0], "omega": [0, 0, 0],
                "color_seed": 6},
        colliders=[],
        schedule=base_schedule(),
    )
    kw.update(over)
    return SceneConfig(**kw)
