"""Command-line interface.

Subcommands: generate, identify, render, gradcheck, simulate. The
PACS_THREADS environment variable caps the numba worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np


def _setup_threads():
    cap = os.environ.get("PACS_THREADS")
    if cap:
        import numba

        numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))


def cmd_generate(args) -> int:
    from .scene_io import SceneConfig, generate_dataset

    cfg = SceneConfig.load(args.config)
    out = generate_dataset(cfg, args.output)
    print(f"dataset written to {out}")
    return 0


def cmd_simulate(args) -> int:
    from .adjoint_engine import SimSession, simulate_forward
    from .scene_io import (
        SceneConfig,
        build_gt_field,
        gt_initial_state,
        particles_to_arrays,
        write_container,
    )

    cfg = SceneConfig.load(args.config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    fld, _ = build_gt_field(cfg)
    state = gt_initial_state(cfg, fld)
    sess = SimSession(
        params=cfg.material_params(), colliders=cfg.collider_objects(),
        gravity=np.asarray(cfg.gravity), grid=cfg.make_grid(),
        dt_frame=cfg.frame_dt, substeps=cfg.effective_substeps(), mass_eps=cfg.mass_eps,
    )
    clouds = {}

    def cb(t, st):
        clouds[f"trajectory/x_{t:04d}"] = st.x.copy()

    simulate_forward(sess, state, cfg.n_frames, frame_cb=cb)
    arrays = particles_to_arrays(state)
    arrays.update(clouds)
    write_container(out / "trajectory.pacs", arrays)
    print(f"simulated {cfg.n_frames} frames ({cfg.effective_substeps()} substeps each) "
          f"-> {out / 'trajectory.pacs'}")
    return 0


def cmd_identify(args) -> int:
    from .scene_io import SceneConfig, run_identification

    cfg = SceneConfig.load(args.config)
    manifest = run_identification(
        cfg, args.data, args.output, stage=args.stage,
        oracle=args.oracle, reproducible=args.reproducible or None,
    )
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    from .renderer import Camera, render_image
    from .scene_io import field_from_arrays, read_container, write_image

    arrays = read_container(args.checkpoint)
    fld, net = field_from_arrays(arrays)
    if net is None:
        print("checkpoint holds no color network", file=sys.stderr)
        return 1
    cam_path = Path(args.checkpoint).parent.parent / "cameras.json"
    if args.cameras:
        cam_path = Path(args.cameras)
    cams = [Camera.from_dict(d) for d in json.loads(Path(cam_path).read_text())]
    img = render_image(fld, net, cams[args.camera], (1.0, 1.0, 1.0))
    write_image(args.output, img)
    print(f"rendered camera {args.camera} -> {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    from .adjoint_engine import grad_check, reports_to_csv, theta_to_param_grads
    from .scene_io import SceneConfig, build_gt_field, gt_initial_state
    from .sysid_pipeline import ChamferObjective, ParamSpace

    cfg = SceneConfig.load(args.config)
    fld, _ = build_gt_field(cfg)
    state = gt_initial_state(cfg, fld)
    if state.n > 2000:
        print(f"warning: {state.n} particles; finite differences may be slow", file=sys.stderr)
    # target clouds from a slightly perturbed run so gradients are informative
    from .adjoint_engine import SimSession, simulate_forward

    n_frames = min(cfg.n_frames, 2)
    sess = SimSession(
        params=cfg.material_params(), colliders=cfg.collider_objects(),
        gravity=np.asarray(cfg.gravity), grid=cfg.make_grid(),
        dt_frame=cfg.frame_dt, substeps=cfg.effective_substeps(), mass_eps=cfg.mass_eps,
    )
    clouds = []
    st = state.copy()
    st.v += 0.05

    def cb(t, s):
        if t >= 1:
            clouds.append(s.x.copy())

    simulate_forward(sess, st, n_frames, frame_cb=cb)
    obj = ChamferObjective(
        gt_clouds=clouds, base=state,
        v0=np.asarray(cfg.object.get("velocity", (0, 0, 0)), dtype=np.float64),
        omega=np.asarray(cfg.object.get("omega", (0, 0, 0)), dtype=np.float64),
        colliders=cfg.collider_objects(), gravity=np.asarray(cfg.gravity),
        grid=cfg.make_grid(), dt_frame=cfg.frame_dt, substeps=cfg.effective_substeps(),
    )
    space = ParamSpace(cfg.material_params().family)
    template = cfg.material_params()

    def loss_fn(u):
        val, _ = obj.evaluate(space.to_phys(u, template), backward=False)
        return val

    def grad_fn(u):
        params = space.to_phys(u, template)
        _, grads = obj.evaluate(params)
        pg = theta_to_param_grads(params, grads.theta)
        return {k: float(v) for k, v in space.chain_grads(params, pg).items()}

    point = {k: float(v) for k, v in space.to_opt(template).items()}
    names = [args.param] if args.param else None
    reports = grad_check(loss_fn, grad_fn, point, names=names, h=args.h)
    csv = reports_to_csv(reports)
    if args.output:
        Path(args.output).write_text(csv)
    print(csv, end="")
    worst = max((r.rel_error for r in reports), default=0.0)
    return 0 if worst < 5e-2 else 2


def main(argv=None) -> int:
    _setup_threads()
    logging.basicConfig(level=os.environ.get("PACS_LOGLEVEL", "INFO"),
                        format="%(name)s %(message)s", stream=sys.stderr)
    ap = argparse.ArgumentParser(prog="pacsim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="simulate + render a ground-truth dataset")
    g.add_argument("config")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("simulate", help="forward simulation only; dump trajectory")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(fn=cmd_simulate)

    i = sub.add_parser("identify", help="run the staged identification pipeline")
    i.add_argument("config")
    i.add_argument("--data", required=True)
    i.add_argument("-o", "--output", required=True)
    i.add_argument("--stage", default="all", choices=("seed", "velocity", "params", "all"))
    i.add_argument("--oracle", action="store_true",
                   help="fit with Chamfer distance against ground-truth clouds")
    i.add_argument("--reproducible", action="store_true")
    i.set_defaults(fn=cmd_identify)

    r = sub.add_parser("render", help="render a field checkpoint from one camera")
    r.add_argument("checkpoint")
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--cameras", default=None, help="cameras.json (default: sibling of checkpoint)")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(fn=cmd_render)

    c = sub.add_parser("gradcheck", help="adjoint vs central finite differences")
    c.add_argument("config")
    c.add_argument("--param", default=None)
    c.add_argument("--h", type=float, default=1e-3)
    c.add_argument("-o", "--output", default=None)
    c.set_defaults(fn=cmd_gradcheck)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
