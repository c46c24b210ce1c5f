"""Command-line entry point: generate, rf-table, train, infer, evaluate.

Every run echoes its fully-resolved configuration (seed included) so any
result can be reproduced from the printed lines alone. Usage errors exit
with code 2; data and model errors print one machine-parsable line to
stderr and exit with code 1.

Heavy modules are imported inside the handlers so ``--threads`` can pin the
BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import (
    ConfigError,
    format_config,
    load_config_file,
    resolve_config,
)


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _resolved(args, **flag_overrides) -> dict:
    file_values = load_config_file(args.config) if args.config else None
    overrides = {k: v for k, v in flag_overrides.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return resolve_config(file_values, overrides)


def _echo(cfg: dict, extra: str = "") -> None:
    print("resolved configuration:")
    for line in format_config(cfg).splitlines():
        print(f"  {line}")
    if extra:
        print(f"  {extra}")


def _network_config(cfg: dict, kernel: int | None = None):
    from .network import NetworkConfig

    x, y, z = cfg["input"]
    return NetworkConfig(
        input_dims=(z, y, x),
        num_stages=cfg["stages"],
        base_channels=cfg["base_channels"],
        convs_down=cfg["convs_down"],
        convs_up=cfg["convs_up"],
        kernel=kernel if kernel is not None else 5,
    )


def _augment_policy(cfg: dict):
    from .augment import AugmentPolicy

    if not cfg["augment"]:
        return AugmentPolicy.disabled()
    if cfg["deform_order"] != 1:
        raise ConfigError("deform_order: only order-1 (trilinear) interpolation is implemented")
    return AugmentPolicy(
        deform=cfg["deform_sigma"] > 0,
        deform_sigma=cfg["deform_sigma"],
        deform_grid=cfg["deform_grid"],
        hist_match=cfg["hist_match"],
        seed=cfg["augment_seed"],
    )


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args) -> int:
    from .config import _parse_float_triple, _parse_int_triple

    overrides = {}
    if args.dims:
        overrides["input"] = _parse_int_triple(args.dims)
    if args.spacing:
        overrides["spacing"] = _parse_float_triple(args.spacing)
    cfg = _resolved(args, **overrides)
    _echo(cfg, extra=f"generator: shape={args.shape} count={args.count} jitter={args.jitter}")

    import numpy as np

    from .volume import SyntheticSpec, generate_synthetic, save_volume

    x, y, w_z = cfg["input"]
    dims = (w_z, y, x)
    sx, sy, sz = cfg["spacing"]
    spacing = (sz, sy, sx)
    base_radius = args.radius if args.radius is not None else 0.3 * min(dims)
    if args.radii:
        rx, ry, rz = _parse_float_triple(args.radii)
        base_radii = (rz, ry, rx)
        shape = "ellipsoid"
    else:
        base_radii = (base_radius,) * 3
        shape = args.shape

    os.makedirs(args.out, exist_ok=True)
    seed = cfg["seed"]
    for i in range(args.count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        center = tuple(
            (n - 1) / 2.0 + rng.uniform(-args.jitter, args.jitter) * n for n in dims
        )
        factor = 1.0 + rng.uniform(-0.1, 0.1) if args.jitter > 0 else 1.0
        radii = tuple(r * factor for r in base_radii)
        spec = SyntheticSpec(
            dims=dims,
            spacing=spacing,
            kind=shape,
            center=center,
            radii=radii,
            fg_mean=args.fg_mean,
            fg_std=args.fg_std,
            bg_mean=args.bg_mean,
            bg_std=args.bg_std,
            noise_std=args.noise_std,
            seed=int(np.random.SeedSequence([seed, i, 1]).generate_state(1)[0]),
        )
        img, lab = generate_synthetic(spec)
        img_path = os.path.join(args.out, f"case{i:03d}_image.vvol")
        lab_path = os.path.join(args.out, f"case{i:03d}_label.vvol")
        save_volume(img, img_path)
        save_volume(lab, lab_path)
        frac = lab.foreground_count() / lab.data.size
        print(f"wrote {img_path} and {lab_path} (foreground {frac:.4%})")
    return 0


def _cmd_rf_table(args) -> int:
    from .config import full_scale_defaults

    file_values = load_config_file(args.config) if args.config else full_scale_defaults()
    cfg = resolve_config(file_values, {"seed": args.seed} if args.seed is not None else None)
    _echo(cfg)

    from .network import receptive_fields

    net_cfg = _network_config(cfg, kernel=args.kernel)
    print(receptive_fields(net_cfg).as_table())
    return 0


def _cmd_train(args) -> int:
    cfg = _resolved(args)
    _echo(cfg)

    from .network import build
    from .training import TrainConfig, load_checkpoint, load_dataset, train

    triples = load_dataset(args.data)
    dataset = [(img, lab) for _, img, lab in triples]
    train_cfg = TrainConfig(
        minibatch=cfg["minibatch"],
        momentum=cfg["momentum"],
        learning_rate=cfg["lr"],
        lr_decay=cfg["lr_decay"],
        lr_decay_interval=cfg["lr_decay_interval"],
        max_iterations=cfg["max_iterations"],
        loss=cfg["loss"],
        dice_reduction=cfg["dice_reduction"],
        checkpoint_interval=cfg["checkpoint_interval"],
        seed=cfg["seed"],
        normalize=cfg["normalize"],
    )
    policy = _augment_policy(cfg)

    start_iteration = 0
    velocities = None
    if args.resume:
        model, run = load_checkpoint(args.resume)
        start_iteration = run.iteration
        velocities = run.velocities
        print(f"resuming from {args.resume} at iteration {start_iteration}")
    else:
        model = build(_network_config(cfg), seed=cfg["seed"])
    print(f"model parameters: {model.parameter_count}")

    os.makedirs(args.out, exist_ok=True)
    run = train(
        dataset,
        model,
        train_cfg,
        policy=policy,
        out_dir=args.out,
        start_iteration=start_iteration,
        velocities=velocities,
    )
    last = run.history[-1] if run.history else (start_iteration, 0.0, float("nan"), float("nan"))
    print(
        f"finished at iteration {run.iteration}: "
        f"loss {last[2]:.6f}, train dice {last[3]:.4f}"
    )
    print(f"history: {os.path.join(args.out, 'history.csv')}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _resolved(args)
    _echo(cfg)

    from .inference import segment
    from .training import load_checkpoint
    from .volume import LabelVolume, load_volume, save_volume

    model, _ = load_checkpoint(args.model)
    v = load_volume(args.input)
    if isinstance(v, LabelVolume):
        raise ValueError(f"{args.input} is a label volume, expected an image")
    result = segment(model, v, normalize=cfg["normalize"])
    save_volume(result.mask, args.out)
    print(f"wrote {args.out} ({result.mask.foreground_count()} foreground voxels, "
          f"{result.seconds:.3f} s)")
    if args.prob:
        save_volume(result.probabilities, args.prob)
        print(f"wrote {args.prob}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolved(args)
    _echo(cfg)

    from .inference import evaluate
    from .training import load_checkpoint, load_dataset

    model, _ = load_checkpoint(args.model)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset, normalize=cfg["normalize"])
    report.to_csv(args.report)
    print(f"wrote {args.report}")
    print(report.summary())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vnetseg",
        description="Volumetric segmentation: synthetic data, architecture "
        "inspection, training, inference, and evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file overlaying the defaults")
    common.add_argument("--seed", type=int, help="override the configured RNG seed")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="write synthetic volume/label pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dims", help="volume size as x,y,z voxels")
    p.add_argument("--spacing", help="voxel spacing as x,y,z mm")
    p.add_argument("--shape", choices=("sphere", "ellipsoid"), default="sphere")
    p.add_argument("--count", type=int, default=1, help="number of cases")
    p.add_argument("--radius", type=float, help="sphere radius in voxels")
    p.add_argument("--radii", help="ellipsoid radii as x,y,z voxels")
    p.add_argument("--fg-mean", type=float, default=1.0)
    p.add_argument("--fg-std", type=float, default=0.05)
    p.add_argument("--bg-mean", type=float, default=0.0)
    p.add_argument("--bg-std", type=float, default=0.05)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--jitter", type=float, default=0.1,
                   help="per-case center jitter as a fraction of the dims")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("rf-table", parents=[common],
                       help="print theoretical receptive fields per stage")
    p.add_argument("--kernel", type=int, help="stage kernel width (default 5)")
    p.set_defaults(func=_cmd_rf_table)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="directory of *_image/_label.vvol pairs")
    p.add_argument("--out", required=True, help="output directory for checkpoints/history")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", parents=[common], help="segment one volume")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="input volume (.vvol)")
    p.add_argument("--out", required=True, help="output mask (.vvol)")
    p.add_argument("--prob", help="also write the probability volume here")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a model against labeled volumes")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="directory of *_image/_label.vvol pairs")
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
