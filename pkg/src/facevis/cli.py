"""Command-line entry point wiring all package capabilities.

One binary with subcommands: model generation, rendering, gradient
checking, batch landmark fitting, toy training and checkpoint
evaluation.  Every subcommand takes --seed and exits nonzero on any
validation failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck as gc
from .camera import ParamVector
from .data import (FaceSample, generate_synthetic_dataset, load_annotation,
                   save_annotation)
from .fitting import FitError, FitOptions, fit_landmarks
from .imageio import save_image
from .losses import format_metrics, nme as nme_metric, write_metrics_csv
from .model import (ModelError, compute_mask2, default_feature_centers,
                    generate_synthetic_model, load_model, save_model)
from .network import (BlockConfig, TrainConfig, TrainingError, evaluate,
                      load_checkpoint, save_checkpoint, train_toy,
                      VisualizationNetwork, default_block_config, finalize_config)
from .raster import RasterConfig, rasterize_forward


def _cmd_gen_model(args) -> int:
    model = generate_synthetic_model(args.seed, q_target=args.vertices,
                                     n_id=args.id_bases, n_exp=args.exp_bases)
    save_model(model, args.out)
    print("wrote model with %d vertices, %d landmarks to %s"
          % (model.num_vertices, model.num_landmarks, args.out))
    return 0


def _rotation_camera(model, yaw, pitch, roll, size, scale_frac):
    from .data import _rotation
    from .camera import CameraMatrix
    from .model import ShapeParams

    rot = _rotation(np.deg2rad(yaw), np.deg2rad(pitch), np.deg2rad(roll))
    shape = model.mean_shape
    rotated = rot @ shape
    extent = max(rotated[0].max() - rotated[0].min(),
                 rotated[1].max() - rotated[1].min())
    scale = scale_frac * size / extent
    m = np.empty(8)
    m[0:3] = scale * rot[0]
    m[4:7] = scale * rot[1]
    centroid = scale * (rot[:2] @ shape.mean(axis=1))
    center = (size - 1) / 2.0  # pixel-grid center, keeps frontal renders symmetric
    m[3] = center - centroid[0]
    m[7] = center - centroid[1]
    return ParamVector(CameraMatrix(m), ShapeParams.zeros(model))


def _cmd_render(args) -> int:
    model = load_model(args.model)
    if args.annotation:
        _, _, params, _ = load_annotation(args.annotation)
        if params is None:
            print("error: annotation %s carries no parameters" % args.annotation,
                  file=sys.stderr)
            return 2
    else:
        params = _rotation_camera(model, args.yaw, args.pitch, args.roll,
                                  args.size, args.scale_frac)
    if args.mask == "1":
        mask = model.mask
    elif args.mask == "2":
        mask = compute_mask2(model, default_feature_centers(model))
    else:
        mask = np.ones(model.num_vertices)
    cfg = RasterConfig(args.size, args.size, sigma=args.sigma,
                       support_radius=args.radius)
    out = rasterize_forward(model, params, cfg, mask=mask)
    save_image(out.image, args.out)
    print("wrote %dx%d render to %s (value range %.4g..%.4g)"
          % (args.size, args.size, args.out, out.image.min(), out.image.max()))
    return 0


def _cmd_gradcheck(args) -> int:
    reports = gc.run_all(seed=args.seed, trials=args.trials)
    failed = False
    for report in reports:
        print(report.line())
        failed = failed or not report.passed
    return 1 if failed else 0


def _cmd_fit(args) -> int:
    model = load_model(args.model)
    names = sorted(n for n in os.listdir(args.annotations) if n.endswith(".json"))
    if not names:
        print("error: no .json annotations in %s" % args.annotations, file=sys.stderr)
        return 2
    os.makedirs(args.out_dir, exist_ok=True)
    opts = FitOptions(max_iters=args.max_iters)
    rows = []
    for name in names:
        path = os.path.join(args.annotations, name)
        bbox, landmarks, _, image_path = load_annotation(path)
        fitted, err = fit_landmarks(model, landmarks, bbox, opts)
        save_annotation(os.path.join(args.out_dir, name), bbox, landmarks,
                        params=fitted, image_path=image_path)
        rows.append({"file": name, "nme": err})
        print("%s  NME %.4f%%" % (name, err))
    if args.csv:
        write_metrics_csv(args.csv, rows)
    mean_err = float(np.mean([r["nme"] for r in rows]))
    print(format_metrics({"faces": len(rows), "mean_nme": mean_err}), end="")
    return 0


_TRAIN_KEYS = {
    "n_blocks", "image_size", "mask", "input_variant", "dropout_rate",
    "sigma", "support_radius", "epochs", "batch_size", "lr", "momentum",
    "weight_decay", "count", "val_count", "max_yaw_deg", "seed",
}


def _load_train_config(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TrainingError("unparseable config %s: %s" % (path, exc)) from exc
    for key in obj:
        if key not in _TRAIN_KEYS:
            raise TrainingError("unknown config key '%s' in %s" % (key, path))
    return obj


def _cmd_train(args) -> int:
    conf = _load_train_config(args.config) if args.config else {}
    # command-line flags override config-file values
    def pick(flag, key, default):
        if flag is not None:
            return flag
        return conf.get(key, default)

    seed = int(pick(args.seed_opt, "seed", 0))
    count = int(pick(args.count, "count", 200))
    val_count = int(pick(args.val_count, "val_count", 60))
    image_size = int(pick(args.image_size, "image_size", 32))
    n_blocks = int(pick(args.blocks, "n_blocks", 2))
    epochs = int(pick(args.epochs, "epochs", 20))
    lr = float(pick(args.lr, "lr", TrainConfig.lr))
    mask_kind = {"1": "standard", "2": "multi", "none": "none"}[
        str(pick(args.mask, "mask", "1"))]

    model = load_model(args.model) if args.model else generate_synthetic_model(
        seed + 1, q_target=400)
    train_set = generate_synthetic_dataset(
        model, seed + 2, count, image_size,
        max_yaw_deg=float(conf.get("max_yaw_deg", 90.0)))
    val_set = generate_synthetic_dataset(
        model, seed + 3, val_count, image_size,
        max_yaw_deg=float(conf.get("max_yaw_deg", 90.0)))
    cfg = default_block_config(
        model, n_blocks=n_blocks, image_size=image_size, mask_kind=mask_kind,
        dropout_rate=float(conf.get("dropout_rate", 0.3)),
        input_variant=str(conf.get("input_variant", "IFV")),
        sigma=float(conf.get("sigma", 1.0)),
        support_radius=int(conf.get("support_radius", 2)))
    hyper = TrainConfig(epochs=epochs, lr=lr, seed=seed,
                        batch_size=int(conf.get("batch_size", 16)),
                        momentum=float(conf.get("momentum", 0.99)),
                        weight_decay=float(conf.get("weight_decay", 0.005)),
                        verbose=args.verbose)
    net, history = train_toy(model, train_set, val_set, cfg, hyper)
    save_checkpoint(net, args.out)
    print("wrote checkpoint to %s" % args.out)
    if args.metrics_csv:
        write_metrics_csv(args.metrics_csv, history)
        print("wrote metrics to %s" % args.metrics_csv)
    final = [r for r in history if r["epoch"] == epochs - 1]
    for row in final:
        print("block %d: final val NME %.4f%%" % (row["block"], row["nme"]))
    return 0


def _init_only_rows(model, dataset, p0):
    from .camera import LandmarkSet, project_all
    from .losses import mape as mape_metric

    nmes, mapes = [], []
    for b, sample in enumerate(dataset):
        params = ParamVector.from_vector(p0[b], model.n_id, model.n_exp)
        pts = project_all(model, params)[:, model.landmark_indices]
        est = LandmarkSet(pts, np.ones(model.num_landmarks, dtype=bool))
        nmes.append(nme_metric(est, sample.landmarks, sample.bbox))
        mapes.append(mape_metric(est, sample.landmarks))
    return [{"block": 0, "nme": float(np.mean(nmes)), "mape": float(np.mean(mapes))}]


def _cmd_eval(args) -> int:
    from .network import _dataset_p0

    model = load_model(args.model)
    dataset = generate_synthetic_dataset(model, args.seed, args.count,
                                         args.image_size)
    if args.init == "truth":
        p0 = np.stack([s.params.as_vector() for s in dataset])
    else:
        p0 = _dataset_p0(model, dataset)
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint, model)
        if net.cfg.image_size != args.image_size:
            print("error: checkpoint expects image size %d" % net.cfg.image_size,
                  file=sys.stderr)
            return 2
        rows = evaluate(net, dataset, p0=p0)
        if args.dump_dir:
            os.makedirs(args.dump_dir, exist_ok=True)
            images = np.stack([s.image for s in dataset])
            fwd = net.forward(images, p0, train=False)
            for bi, renders in enumerate(fwd.renders_per_block):
                for b in range(min(4, renders.shape[0])):
                    save_image(renders[b], os.path.join(
                        args.dump_dir, "sample%d_block%d.pgm" % (b, bi + 1)))
    else:
        rows = _init_only_rows(model, dataset, p0)
    for row in rows:
        print("block %d: NME %.4f%%  MAPE %.4f px"
              % (row["block"], row["nme"], row["mape"]))
    if args.csv:
        write_metrics_csv(args.csv, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facevis",
        description="Differentiable face-model visualization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="generate and save a synthetic face model")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--vertices", type=int, default=500,
                   help="minimum vertex count (at least 50)")
    p.add_argument("--id-bases", type=int, default=8, help="identity basis count")
    p.add_argument("--exp-bases", type=int, default=4, help="expression basis count")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.set_defaults(func=_cmd_gen_model)

    p = sub.add_parser("render", help="render the visualization image of a pose")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--out", required=True, help="output image (.pgm or .png)")
    p.add_argument("--annotation", help="annotation file providing parameters")
    p.add_argument("--yaw", type=float, default=0.0, help="yaw angle in degrees")
    p.add_argument("--pitch", type=float, default=0.0, help="pitch angle in degrees")
    p.add_argument("--roll", type=float, default=0.0, help="roll angle in degrees")
    p.add_argument("--scale-frac", type=float, default=0.85,
                   help="projected face span as a fraction of the image")
    p.add_argument("--size", type=int, default=64, help="output image side in pixels")
    p.add_argument("--sigma", type=float, default=1.0, help="splat kernel width")
    p.add_argument("--radius", type=int, default=2, help="splat support radius")
    p.add_argument("--mask", choices=["1", "2", "none"], default="1",
                   help="vertex weighting: standard, five-center, or none")
    p.add_argument("--seed", type=int, default=0, help="unused; kept for uniformity")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--trials", type=int, default=20,
                   help="random configurations per category")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("fit", help="batch-fit parameters to annotated landmarks")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--annotations", required=True,
                   help="directory of annotation .json files")
    p.add_argument("--out-dir", required=True,
                   help="directory for annotations with fitted parameters")
    p.add_argument("--csv", help="optional per-face NME CSV path")
    p.add_argument("--max-iters", type=int, default=200, help="fit iteration cap")
    p.add_argument("--seed", type=int, default=0, help="unused; kept for uniformity")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("train", help="train the toy visualization-block stack")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model", help="model JSON path (default: generated)")
    p.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p.add_argument("--metrics-csv", help="per-epoch metrics CSV path")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--blocks", type=int, help="number of visualization blocks")
    p.add_argument("--count", type=int, help="training set size")
    p.add_argument("--val-count", type=int, help="validation set size")
    p.add_argument("--image-size", type=int, help="image side in pixels (even)")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--mask", choices=["1", "2", "none"], help="visualization mask")
    p.add_argument("--seed", type=int, dest="seed_opt", help="training seed")
    p.add_argument("--verbose", action="store_true", help="print per-epoch progress")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on synthetic data")
    p.add_argument("--model", required=True, help="model JSON path")
    p.add_argument("--checkpoint", help="checkpoint .npz (omit for init-only metrics)")
    p.add_argument("--count", type=int, default=50, help="evaluation set size")
    p.add_argument("--image-size", type=int, default=32, help="image side in pixels")
    p.add_argument("--init", choices=["bbox", "truth"], default="bbox",
                   help="initialization for the parameter estimates")
    p.add_argument("--csv", help="optional metrics CSV path")
    p.add_argument("--dump-dir", help="directory for per-block render dumps")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelError, FitError, TrainingError, ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
