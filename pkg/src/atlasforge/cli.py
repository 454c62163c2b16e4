"""Command-line entry point.

Subcommands: train, template, register, invert, evaluate, pca,
synth-data, grad-check. Every run that takes --out writes a resolved
configuration snapshot (config.json next to the outputs) before doing
any work, so results are reproducible from the snapshot alone.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime
failure. Set ATLASFORGE_THREADS to cap worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import analyze, autodiff, data, diffeo, nets, train
from .autodiff import ShapeError
from .nets import ArchConfig
from .objective import LossConfig
from .train import Checkpoint, TrainConfig, TrainingError

__all__ = ["run", "entry", "UsageError"]


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="atlasforge",
        description="Learn deformable templates and registration networks.",
    )
    sub = p.add_subparsers(dest="command")

    def common(sp, checkpoint=False, dataset=False, out=True):
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint .dtc path")
        if dataset:
            sp.add_argument("--dataset", required=True, help="image directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="fit template and registration networks")
    common(sp, dataset=True)
    sp.add_argument("--config", help="JSON file with TrainConfig fields")
    sp.add_argument("--mode", choices=nets.MODES, default=None)
    sp.add_argument("--iters", type=int, default=None)
    sp.add_argument("--holdout", default=None, help="e.g. classes=3;scale=0.9:1.1")
    sp.add_argument("--test-fraction", type=float, default=0.0)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")

    sp = sub.add_parser("template", help="emit template image(s) from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output image file (.pgm)")
    sp.add_argument("--class", dest="class_id", type=int, default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--rotation", type=float, default=None)

    sp = sub.add_parser("register", help="register one image to its template")
    common(sp, checkpoint=True)
    sp.add_argument("--image", required=True, help="input .pgm/.png image")
    sp.add_argument("--class", dest="class_id", type=int, default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--rotation", type=float, default=None)

    sp = sub.add_parser("invert", help="export the image-to-template map")
    common(sp, checkpoint=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--class", dest="class_id", type=int, default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--rotation", type=float, default=None)

    sp = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    common(sp, checkpoint=True, dataset=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--test-fraction", type=float, default=0.0)
    sp.add_argument("--holdout", default=None)
    sp.add_argument(
        "--baseline",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="also train and score an exemplar-template baseline",
    )
    sp.add_argument("--baseline-iters", type=int, default=None)

    sp = sub.add_parser("pca", help="principal axes of the velocity fields")
    common(sp, checkpoint=True, dataset=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--test-fraction", type=float, default=0.0)
    sp.add_argument("--holdout", default=None)
    sp.add_argument("--components", type=int, default=5)
    sp.add_argument("--class", dest="class_id", type=int, default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--rotation", type=float, default=None)

    sp = sub.add_parser("synth-data", help="write a synthetic dataset directory")
    common(sp)
    sp.add_argument(
        "--kind", choices=("oracle", "classes"), default="classes"
    )
    sp.add_argument("--template", default="disk", choices=data.TEMPLATE_KINDS)
    sp.add_argument("--classes", default="disk,ring,cross")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--n-per-class", type=int, default=100)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--amplitude", type=float, default=3.0)
    sp.add_argument(
        "--regime", default="class", choices=("class", "class-scale", "class-scale-rot")
    )

    sp = sub.add_parser("grad-check", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--max-entries", type=int, default=25)
    sp.add_argument("--out", default=None)
    return p


def _snapshot(out_dir: Path, args) -> None:
    """Resolved-invocation record, written before any work starts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")


def _load_dataset(args) -> data.Dataset:
    ds = data.load_image_dir(args.dataset)
    frac = getattr(args, "test_fraction", 0.0) or 0.0
    if frac > 0.0:
        if not 0.0 < frac < 1.0:
            raise UsageError(f"--test-fraction must be in (0,1), got {frac}")
        ds = data.split(ds, (1.0 - frac, 0.0, frac), seed=args.seed or 0)
    holdout = getattr(args, "holdout", None)
    if holdout:
        ds = data.holdout_filter(ds, data.parse_holdout(holdout))
    return ds


def _attr_row(ckpt: Checkpoint, args) -> np.ndarray | None:
    """Build one attribute row from --class/--scale/--rotation flags."""
    if ckpt.config.mode != "conditional":
        return None
    attr_len = ckpt.config.arch.attr_len
    extras = (args.scale is not None) + (args.rotation is not None)
    n_classes = attr_len - extras
    if n_classes < 1:
        raise UsageError(
            f"checkpoint expects {attr_len} attribute values; got too many flags"
        )
    class_id = args.class_id if args.class_id is not None else 0
    row = data.encode_attributes(
        class_id, n_classes, scale=args.scale, rotation=args.rotation
    )
    return row.reshape(1, -1)


def _cmd_train(args) -> int:
    ds = _load_dataset(args)
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    base.setdefault("arch", {})
    base["arch"].setdefault("height", ds.height)
    base["arch"].setdefault("width", ds.width)
    if args.mode is not None:
        base["mode"] = args.mode
    if base.get("mode") == "conditional":
        base["arch"].setdefault("attr_len", ds.attr_len)
    if args.iters is not None:
        base["iterations"] = args.iters
    if args.seed is not None:
        base["seed"] = args.seed
    cfg = TrainConfig.from_dict(base)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    resume = train.load_checkpoint(args.resume) if args.resume else None
    ckpt, log = train.train(cfg, ds, out_dir=out, resume_from=resume)
    print(f"trained {ckpt.iteration} iterations -> {out / 'checkpoint.dtc'}")
    print(log[-1])
    return 0


def _cmd_template(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model = train.model_from_checkpoint(ckpt)
    if ckpt.config.mode == "latent":
        raise UsageError("latent-mode templates need an input image; use register")
    a = _attr_row(ckpt, args)
    if a is None:
        a = np.zeros((1, 1), dtype=np.float32)
    t = model.template(attrs=a).data[0, :, :, 0]
    data.write_pgm(out, t)
    print(f"wrote {out}")
    return 0


def _register_products(ckpt: Checkpoint, args):
    model = train.model_from_checkpoint(ckpt)
    x = data.read_image(args.image)
    arch = ckpt.config.arch
    if x.shape != (arch.height, arch.width):
        raise UsageError(
            f"image {x.shape} does not match checkpoint {arch.height}x{arch.width}"
        )
    xb = x[None, :, :, None].astype(np.float32)
    if ckpt.config.mode == "conditional":
        a = _attr_row(ckpt, args)
    else:
        a = np.zeros((1, 1), dtype=np.float32)
    t = model.template(attrs=a, images=xb)
    v = model.velocity(t, xb).data[0]
    steps = ckpt.config.loss.int_steps
    u = diffeo.integrate_ss(v, steps)
    u_inv = diffeo.invert(v, steps)
    return t.data[0, :, :, 0], x, v, u, u_inv


def _cmd_register(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _snapshot(out, args)
    t, x, v, u, u_inv = _register_products(ckpt, args)
    diffeo.save_field_csv(out / "velocity.csv", v)
    diffeo.save_field_csv(out / "displacement.csv", u)
    diffeo.save_field_csv(out / "displacement_inv.csv", u_inv)
    data.write_pgm(out / "template.pgm", t)
    data.write_pgm(out / "warped_template.pgm", diffeo.warp(t, u))
    data.write_pgm(out / "warped_image.pgm", diffeo.warp(x.astype(np.float64), u_inv))
    print(f"wrote registration products to {out}")
    return 0


def _cmd_invert(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _snapshot(out, args)
    _, _, _, _, u_inv = _register_products(ckpt, args)
    diffeo.save_field_csv(out / "displacement_inv.csv", u_inv)
    print(f"wrote {out / 'displacement_inv.csv'}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    out = Path(args.out)
    _snapshot(out, args)
    report = analyze.evaluate_checkpoint(ckpt, ds, split=args.split)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.txt").write_text(report.summary() + "\n")
    print(report.summary())
    if args.baseline:
        cfg = ckpt.config
        if args.baseline_iters:
            cfg = dataclasses.replace(cfg, iterations=args.baseline_iters)
        cfg = dataclasses.replace(cfg, mode="unconditional")
        base_ckpt, ex = analyze.exemplar_baseline(ds, cfg, seed=args.seed or 0)
        base_report = analyze.evaluate_checkpoint(base_ckpt, ds, split=args.split)
        (out / "baseline_metrics.csv").write_text(base_report.to_csv())
        (out / "baseline_metrics.txt").write_text(
            f"exemplar index: {ex}\n" + base_report.summary() + "\n"
        )
        print(f"baseline (exemplar {ex}):")
        print(base_report.summary())
    return 0


def _cmd_pca(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    out = Path(args.out)
    _snapshot(out, args)
    pca = analyze.pca_velocity(ckpt, ds, split=args.split, n_components=args.components)
    store = nets.ParamStore()
    store.add("pca/mean", pca.mean.astype(np.float64))
    store.add("pca/variances", pca.variances.astype(np.float64))
    for i in range(args.components):
        store.add(f"pca/component{i}", pca.components[i].astype(np.float64))
    from .objective import RunningMeanField

    shell = Checkpoint(
        config=ckpt.config,
        params=store,
        state=RunningMeanField.zeros(ckpt.config.arch.height, ckpt.config.arch.width),
        moments={},
        iteration=ckpt.iteration,
    )
    train.save_checkpoint(out / "pca.dtc", shell)
    if pca.degenerate:
        print("all velocity fields identical; no axes to draw")
        return 0
    a = _attr_row(ckpt, args)
    for i in range(args.components):
        sd = float(np.sqrt(pca.variances[i]))
        if sd == 0.0:
            continue
        coeffs = [c * sd for c in (-2.0, -1.0, 0.0, 1.0, 2.0)]
        strip = analyze.synth_along_component(ckpt, a, pca.components[i], coeffs)
        analyze.save_montage(strip, out / f"axis{i}.pgm")
    print(f"wrote PCA products to {out}")
    return 0


def _cmd_synth_data(args) -> int:
    out = Path(args.out)
    _snapshot(out, args)
    seed = args.seed or 0
    if args.kind == "oracle":
        tpl = data.make_template(args.template, args.size, args.size)
        ds, _ = data.synth_oracle_dataset(
            tpl, n=args.n, noise_sigma=args.noise,
            field_amplitude=args.amplitude, seed=seed,
        )
        data.write_pgm(out / "true_template.pgm", tpl)
    else:
        kinds = tuple(k.strip() for k in args.classes.split(",") if k.strip())
        for k in kinds:
            if k not in data.TEMPLATE_KINDS:
                raise UsageError(f"unknown class template {k!r}")
        ds = data.synth_class_dataset(
            kinds, n_per_class=args.n_per_class, regime=args.regime,
            seed=seed, h=args.size, w=args.size,
        )
    data.save_image_dir(ds, out)
    print(f"wrote {ds.n} images to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    from .objective import RunningMeanField, total_loss

    arch = ArchConfig(
        height=16, width=16, attr_len=3, decoder_k=2, unet_features=4,
        unet_depth=2, latent_dim=3,
    )
    cfg = LossConfig(int_steps=2)

    def build(seed):
        model = nets.init_model("conditional", arch, seed=seed, dtype=np.float64)
        r = np.random.default_rng(seed + 900)
        for name, std in (("unet/final/w", 0.5), ("unet/final/b", 0.125)):
            t = model.params[name]
            t.data[...] = r.normal(0.0, std, t.data.shape)
        x = r.uniform(0.1, 0.9, (2, 16, 16))
        a = r.normal(size=(2, 3))
        state = RunningMeanField(mean=0.1 * r.normal(size=(16, 16, 2)), beta=0.99)

        def loss_fn():
            loss, _, _ = total_loss(model, x, a, state, cfg)
            return loss

        return loss_fn, model.params.trainable()

    seed = args.seed
    for trial in range(200):
        loss_fn, params = build(seed + trial)
        if autodiff.kink_margin(loss_fn()) > 1e-4:
            break
    else:
        print("no finite-difference-safe instance found", file=sys.stderr)
        return 2
    report = autodiff.check_gradients(
        loss_fn, params, epsilon=args.epsilon, max_entries=args.max_entries
    )
    print(report.summary())
    if args.out:
        out = Path(args.out)
        _snapshot(out, args)
        (out / "grad_check.txt").write_text(report.summary() + "\n")
    if report.ok(1e-4):
        print("gradient check passed")
        return 0
    print("gradient check FAILED", file=sys.stderr)
    return 1


_COMMANDS = {
    "train": _cmd_train,
    "template": _cmd_template,
    "register": _cmd_register,
    "invert": _cmd_invert,
    "evaluate": _cmd_evaluate,
    "pca": _cmd_pca,
    "synth-data": _cmd_synth_data,
    "grad-check": _cmd_grad_check,
}


def run(argv) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ValueError, ShapeError, FileNotFoundError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(run(sys.argv[1:]))
