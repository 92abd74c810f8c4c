"""Command-line interface: synth, train, fuse, infer, eval, checkgrad, bench.

Exit codes: 0 success, 1 usage error, 2 validation or equivalence failure,
3 numeric failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .groundtruth import SynthSpec, synth_sample
from .losses import IsoheightConfig, LossWeights
from .metrics import evaluate, instance_classes, summarize
from .network import RepSNet, RepSNetConfig, analytic_flops, analytic_param_count, reparameterize
from .postprocess import BvmConfig, segment
from .tensor import ShapeError
from .train import NumericError, PlateauScheduler, Sample, TrainState, fit, make_batch, train_step

log = logging.getLogger("repsnet")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3

# every recognised config key with its default
DEFAULTS = {
    "seed": "0",
    "height": "64",
    "width": "64",
    "count": "200",
    "num_blocks": "4",
    "units_per_block": "2,2,3,2",
    "base_width": "16",
    "repvgg": "1",
    "repupsample": "1",
    "w_np": "1",
    "w_nt": "1",
    "w_bd": "1",
    "w_nb": "1",
    "lr": "1e-4",
    "min_lr": "1e-7",
    "patience": "5",
    "epochs": "30",
    "batch_size": "8",
    "augment": "1",
    "e_t": "3",
    "tau": "5",
    "e": "1.0",
    "r_max": "10",
    "post": "bvm",
    "data_dir": "data",
    "out_dir": "run",
}


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys raise."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            cfg.update(parse_config_text(Path(path).read_text()))
        except OSError as err:
            raise ValidationError(f"cannot read config {path}: {err}") from err
    for item in overrides:
        cfg.update(parse_config_text(item))
    return cfg


def config_text(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in DEFAULTS)


def _num(cfg, key, kind=float):
    try:
        return kind(cfg[key])
    except ValueError as err:
        raise ValidationError(f"config {key}={cfg[key]!r} is not a valid {kind.__name__}") from err


def net_config(cfg) -> RepSNetConfig:
    try:
        return RepSNetConfig(
            num_blocks=_num(cfg, "num_blocks", int),
            units_per_block=[int(u) for u in cfg["units_per_block"].split(",")],
            base_width=_num(cfg, "base_width", int),
            repvgg=bool(_num(cfg, "repvgg", int)),
            repupsample=bool(_num(cfg, "repupsample", int)),
        )
    except ValueError as err:
        raise ValidationError(str(err)) from err


def bvm_config(cfg) -> BvmConfig:
    try:
        return BvmConfig(_num(cfg, "e_t", int), _num(cfg, "r_max"), cfg["post"])
    except ValueError as err:
        raise ValidationError(str(err)) from err


def loss_settings(cfg):
    try:
        weights = LossWeights(_num(cfg, "w_np"), _num(cfg, "w_nt"), _num(cfg, "w_bd"), _num(cfg, "w_nb"))
        iso = IsoheightConfig(_num(cfg, "tau", int), _num(cfg, "e"))
    except ValueError as err:
        raise ValidationError(str(err)) from err
    return weights, iso


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> int:
    out = Path(cfg["out_dir"])
    spec = SynthSpec(height=_num(cfg, "height", int), width=_num(cfg, "width", int))
    try:
        spec.validate()
    except ValueError as err:
        raise ValidationError(str(err)) from err
    seed, count = _num(cfg, "seed", int), _num(cfg, "count", int)
    if count < 1:
        raise ValidationError("count must be positive")
    samples = []
    for i in range(count):
        # one independent stream per sample, derived from the run seed
        image, inst, types = synth_sample(np.random.SeedSequence([seed, i]), spec)
        samples.append(Sample(image, inst, types, f"img{i:05d}"))
    try:
        splits = io.write_dataset(out, samples)
        (out / "config.txt").write_text(config_text(cfg))
    except OSError as err:
        raise ValidationError(f"cannot write dataset to {out}: {err}") from err
    print(f"wrote {count} images to {out} "
          f"(train {len(splits['train'])}, val {len(splits['val'])}, test {len(splits['test'])})")
    return EXIT_OK


def _prepare_out(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ValidationError(f"cannot create {path}: {err}") from err


def cmd_train(cfg, overfit: bool = False) -> int:
    data, out = Path(cfg["data_dir"]), Path(cfg["out_dir"])
    try:
        train_set = io.read_split(data, "train")
        val_set = io.read_split(data, "val")
    except FileNotFoundError as err:
        raise ValidationError(f"{err}; run `repsnet synth` first") from err
    if not train_set:
        raise ValidationError("training split is empty")
    _prepare_out(out)
    (out / "run_config.txt").write_text(config_text(cfg))
    log.info("run config:\n%s", config_text(cfg).rstrip())
    weights, iso = loss_settings(cfg)
    net = RepSNet.create(net_config(cfg), seed=_num(cfg, "seed", int))
    lr = _num(cfg, "lr")
    if overfit:
        return _overfit(net, train_set[0], lr, weights, iso, out)
    scheduler = PlateauScheduler(_num(cfg, "patience", int), 0.5, _num(cfg, "min_lr"))
    epochs = _num(cfg, "epochs", int)

    def report(row, _net):
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  train {row['train_total']:.4f}  "
              f"val {row['val_total']:.4f}", flush=True)

    best, history = fit(net, train_set, val_set, epochs, lr=lr, batch_size=_num(cfg, "batch_size", int),
                        weights=weights, iso=iso, seed=_num(cfg, "seed", int),
                        augmented=bool(_num(cfg, "augment", int)), scheduler=scheduler, on_epoch=report)
    best.save(out / "model.rsck")
    io.write_loss_log(out / "loss_log.csv", history)
    print(f"saved best-validation checkpoint to {out / 'model.rsck'}")
    return EXIT_OK


def _overfit(net, sample, lr, weights, iso, out, steps=200) -> int:
    """Fit a single sample without augmentation; reports first and last loss."""
    x, targets = make_batch([sample], iso.tau)
    state = TrainState(lr=lr)
    first = last = None
    for step in range(steps):
        last, _ = train_step(net, x, targets, state, weights, iso)
        if first is None:
            first = last
    net.save(out / "model.rsck")
    ratio = last / first
    print(f"overfit: initial loss {first:.4f}, final loss {last:.4f} ({100 * ratio:.1f}% of initial)")
    return EXIT_OK if ratio < 0.1 else EXIT_INVALID


def _max_diff(a, b):
    return max(float(np.abs(u - v).max()) for u, v in zip(a, b))


def verify_fusion(net: RepSNet, fused: RepSNet, trials: int = 5, size: int = 64, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    d = net.config.divisor
    size = max(d, size // d * d)
    worst = 0.0
    for _ in range(trials):
        x = rng.uniform(-1, 1, (1, 3, size, size)).astype(np.float32)
        worst = max(worst, _max_diff(net.forward(x), fused.forward(x)))
    return worst


def cmd_fuse(src, dst, tol=1e-3) -> int:
    net = _load_net(src)
    fused = _fuse(net)
    diff = verify_fusion(net, fused)
    if diff > tol:
        print(f"fusion check failed: max abs logit difference {diff:.3e} > {tol:g}; nothing written",
              file=sys.stderr)
        return EXIT_INVALID
    fused.save(dst)
    before, after = net.param_count(), fused.param_count()
    analytic = (analytic_param_count(net.config, fused=net.fused), analytic_param_count(net.config, fused=True))
    if net.fused:
        print("checkpoint already fused; wrote an identical copy")
    print(f"parameters: {before} -> {after} (ratio {after / before:.4f}; analytic {analytic[0]} -> "
          f"{analytic[1]}, ratio {analytic[1] / analytic[0]:.4f})")
    print(f"max abs logit difference over 5 random inputs: {diff:.2e}")
    return EXIT_OK


def _fuse(net: RepSNet) -> RepSNet:
    try:
        return reparameterize(net)
    except ValueError as err:
        raise ValidationError(f"cannot fuse: {err}") from err


def _load_net(path) -> RepSNet:
    try:
        return RepSNet.load(path)
    except (OSError, ValueError, KeyError) as err:
        raise ValidationError(f"cannot load checkpoint {path}: {err}") from err


def _image_paths(src: Path) -> list[Path]:
    if src.is_dir():
        if (src / "images").is_dir():
            src = src / "images"
        return sorted(src.glob("*.png"))
    return [src]


def cmd_infer(checkpoint, images, out_dir, mode="fused", overlay=False, cfg=None) -> int:
    cfg = cfg or dict(DEFAULTS)
    net = _load_net(checkpoint)
    if mode == "fused" and not net.fused:
        net = _fuse(net)
    elif mode == "train" and net.fused:
        raise ValidationError("checkpoint is fused; train mode needs a training checkpoint")
    paths = _image_paths(Path(images))
    if not paths:
        raise ValidationError(f"no PNG images found in {images}")
    out = Path(out_dir)
    _prepare_out(out)
    bvm = bvm_config(cfg)
    for path in paths:
        image = io.load_rgb(path)
        np_l, nt_l, bd = net.forward(image[None])
        inst, classes = segment(np_l[0], nt_l[0], bd[0], bvm)
        io.save_labels(out / f"{path.stem}.png", inst, 16)
        io.write_instance_csv(out / f"{path.stem}.csv", inst, classes)
        if overlay:
            io.save_rgb(out / f"{path.stem}_overlay.png", io.overlay(image, inst, classes))
    print(f"segmented {len(paths)} images into {out}")
    return EXIT_OK


def cmd_eval(pred_dir, gt_dir, out_dir=None) -> int:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    out = Path(out_dir) if out_dir else pred_dir
    _prepare_out(out)
    inst_dir = gt_dir / "instances" if (gt_dir / "instances").is_dir() else gt_dir
    gt_names = {p.stem for p in inst_dir.glob("*.png")}
    pred_names = {p.stem for p in pred_dir.glob("*.png") if not p.stem.endswith("_overlay")}
    unmatched = sorted(gt_names ^ pred_names)
    for name in unmatched:
        side = "prediction" if name in pred_names else "ground truth"
        print(f"skipping {name}: no matching file for this {side}", file=sys.stderr)
    names = sorted(gt_names & pred_names)
    if not names:
        raise ValidationError("no images with matching basenames")
    rows, reports = [], []
    for name in names:
        gt = io.load_labels(inst_dir / f"{name}.png")
        types_path = gt_dir / "types" / f"{name}.png"
        gt_classes = instance_classes(gt, io.load_labels(types_path)) if types_path.exists() else \
            {int(k): 1 for k in np.unique(gt) if k}
        pred = io.load_labels(pred_dir / f"{name}.png")
        csv_path = pred_dir / f"{name}.csv"
        pred_classes = io.read_instance_csv(csv_path) if csv_path.exists() else \
            {int(k): 1 for k in np.unique(pred) if k}
        rep = evaluate(gt, gt_classes, pred, pred_classes)
        reports.append(rep)
        rows.append({"image": name, "dice": rep.dice, "aji": rep.aji, "pq": rep.pq, "mpq": rep.mpq,
                     "tp": rep.detection.tp, "fp": rep.detection.fp, "fn": rep.detection.fn})
    summary = summarize(reports)
    io.write_table(out / "eval_per_image.csv", rows)
    io.write_table(out / "eval_summary.csv", [summary])
    text = "".join(f"{k}: {v:.4f}\n" if isinstance(v, float) else f"{k}: {v}\n" for k, v in summary.items())
    (out / "eval_summary.txt").write_text(text)
    print(text, end="")
    return EXIT_INVALID if unmatched else EXIT_OK


def cmd_checkgrad(seed: int = 0) -> int:
    from .gradcheck import run_all

    results = run_all(seed)
    width = max(len(r.name) for r in results)
    failed = []
    for r in results:
        print(f"{r.name:<{width}}  rel err {r.error:.2e}  {'PASS' if r.passed else 'FAIL'}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return EXIT_INVALID
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def bench(net: RepSNet, batch: int = 4, size: int = 64, repeats: int = 5, seed: int = 0) -> dict:
    """Inference wall time (best of ``repeats``), parameters and analytic FLOPs,
    multi-branch vs. fused, on identical inputs."""
    if net.fused:
        raise ValidationError("bench needs a training-mode checkpoint")
    fused = _fuse(net)
    x = np.random.default_rng(seed).uniform(0, 1, (batch, 3, size, size)).astype(np.float32)
    out = {}
    for name, model, is_fused in (("train", net, False), ("fused", fused, True)):
        model.forward(x)  # warm-up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(x)
            times.append(time.perf_counter() - t0)
        out[name] = {"seconds": min(times), "params": model.param_count(),
                     "flops": analytic_flops(net.config, size, size, is_fused) * batch}
    return out


def cmd_bench(checkpoint, batch=4, size=64, repeats=5) -> int:
    res = bench(_load_net(checkpoint), batch, size, repeats)
    print(f"{'mode':<6} {'time (s)':>10} {'params':>10} {'GFLOPs':>10}")
    for name, r in res.items():
        print(f"{name:<6} {r['seconds']:>10.4f} {r['params']:>10d} {r['flops'] / 1e9:>10.3f}")
    t, f = res["train"], res["fused"]
    print(f"fused/train: time {f['seconds'] / t['seconds']:.3f}, params {f['params'] / t['params']:.4f}, "
          f"FLOPs {f['flops'] / t['flops']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_args(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repsnet", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count; 1 gives fully deterministic runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset split 7:1:2")
    _add_config_args(p)
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="train a network on a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-reparam", action="store_true", help="plain 3x3 units instead of RepVGG units")
    p.add_argument("--no-repupsample", action="store_true", help="single-branch upsampling units")
    p.add_argument("--no-nb-loss", action="store_true", help="drop the boundary (isoheight) loss")
    p.add_argument("--overfit", action="store_true",
                   help="fit one training image for 200 steps; exit 2 unless loss falls below 10%%")

    p = sub.add_parser("fuse", help="re-parameterize a training checkpoint")
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")

    p = sub.add_parser("infer", help="segment images")
    _add_config_args(p)
    p.add_argument("checkpoint")
    p.add_argument("images", help="PNG file, directory of PNGs, or dataset directory")
    p.add_argument("out_dir")
    p.add_argument("--mode", choices=("train", "fused"), default="fused")
    p.add_argument("--overlay", action="store_true", help="also write outline overlays")
    p.add_argument("--post", choices=("bvm", "naive"),
                   help="bvm: boundary voting (pixels with strictly more than e_t votes); "
                        "naive: components of the NP mask")
    p.add_argument("--e-t", type=int, help="vote threshold (boundary needs votes > e_t)")

    p = sub.add_parser("eval", help="score predicted instance maps")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir", help="dataset directory (instances/, types/) or directory of label PNGs")
    p.add_argument("--out", help="report directory (default: pred_dir)")

    p = sub.add_parser("checkgrad", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="time and size of multi-branch vs. fused inference")
    p.add_argument("checkpoint")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    return parser


def _run_config(args) -> dict:
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("count", "count"), ("data", "data_dir"),
                      ("epochs", "epochs"), ("lr", "lr"), ("post", "post"), ("e_t", "e_t")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "no_reparam", False):
        overrides.append("repvgg=0")
    if getattr(args, "no_repupsample", False):
        overrides.append("repupsample=0")
    if getattr(args, "no_nb_loss", False):
        overrides.append("w_nb=0")
    return load_config(args.config, overrides)


def _dispatch(args) -> int:
    c = args.command
    if c == "synth":
        return cmd_synth(_run_config(args))
    if c == "train":
        return cmd_train(_run_config(args), overfit=args.overfit)
    if c == "fuse":
        return cmd_fuse(args.checkpoint_in, args.checkpoint_out)
    if c == "infer":
        return cmd_infer(args.checkpoint, args.images, args.out_dir, args.mode, args.overlay, _run_config(args))
    if c == "eval":
        return cmd_eval(args.pred_dir, args.gt_dir, args.out)
    if c == "checkgrad":
        return cmd_checkgrad(args.seed)
    if c == "bench":
        return cmd_bench(args.checkpoint, args.batch, args.size, args.repeats)
    raise UsageError(f"unknown command {c}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return _dispatch(args)
        return _dispatch(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
