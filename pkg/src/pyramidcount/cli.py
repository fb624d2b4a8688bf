"""Command-line entry point: ``pyramidcount <command> ...``.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import density as dgt
from .errors import ConfigError, InputError, TrainingDiverged, WeightFileError
from .evaluation import EvalResult, predict_full
from .network import (FUSION_MODES, PRESETS, NetworkConfig, PyramidModel, count_parameters,
                      get_config, load_weights, receptive_field)
from .pgm import read_pgm, write_pgm, write_pgm_normalized
from .synthetic import SyntheticSceneSpec, generate_synthetic_dataset
from .training import TrainConfig, load_optimizer_state, read_log, to_input, train

log = logging.getLogger("pyramidcount")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
CONFIG_VERSION = 1


class CliError(Exception):
    def __init__(self, msg, code=EXIT_INPUT):
        super().__init__(msg)
        self.code = code


def fmt(x):
    return f"{x:.6g}"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config_path=None, seed=None, extra=None, started=None):
    out_dir = Path(out_dir)
    artifacts = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[p.relative_to(out_dir).as_posix()] = _sha256(p)
    doc = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "seed": seed,
        "output_dir": str(out_dir),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from None


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {path}: {e}") from None
    return Path(path)


# -- dataset layout -------------------------------------------------------
def _annotation_dims(doc, ann_path, images_dir):
    if "height" in doc and "width" in doc:
        return int(doc["height"]), int(doc["width"])
    img = Path(images_dir) / f"{doc.get('image', Path(ann_path).stem)}.pgm"
    if not img.exists():
        raise InputError(f"{ann_path}: no height/width and no image {img}")
    return read_pgm(img).shape


def load_dataset(data_dir):
    """(name, image, points) for every annotation in ``data_dir``."""
    data_dir = Path(data_dir)
    ann_dir, img_dir = data_dir / "annotations", data_dir / "images"
    files = sorted(ann_dir.glob("*.json"))
    if not files:
        raise CliError(f"no annotations found in {ann_dir}")
    out = []
    for f in files:
        name, pts = dgt.load_annotations(f)
        img_path = img_dir / f"{name}.pgm"
        if not img_path.exists():
            raise CliError(f"missing image {img_path} for {f}")
        out.append((name, read_pgm(img_path), pts))
    return out


# -- commands -------------------------------------------------------------
def cmd_synth(args):
    started = _now()
    doc = _load_json(args.spec)
    n_images = doc.pop("n_images", None)
    if args.n_images is not None:
        n_images = args.n_images
    if n_images is None or int(n_images) < 1:
        raise CliError("n_images must be given (in the spec or --n-images) and be >= 1")
    try:
        spec = SyntheticSceneSpec.from_dict(doc)
        scenes = generate_synthetic_dataset(spec, int(n_images))
    except (ConfigError, TypeError) as e:
        raise CliError(f"invalid scene spec: {e}") from None
    out = _mkdir(args.out_dir)
    _mkdir(out / "images")
    _mkdir(out / "annotations")
    width = len(str(len(scenes) - 1))
    for i, sc in enumerate(scenes):
        name = f"img_{i:0{width}d}"
        write_pgm(out / "images" / f"{name}.pgm", sc.image)
        ann = {"image": name, "height": spec.height, "width": spec.width,
               "points": [[float(x), float(y)] for x, y in sc.points],
               "diameters": [float(d) for d in sc.diameters]}
        with open(out / "annotations" / f"{name}.json", "w") as f:
            json.dump(ann, f)
    write_manifest(out, "synth", args.spec, spec.seed, {"n_images": len(scenes)}, started)
    print(f"wrote {len(scenes)} images to {out}")
    return EXIT_OK


def cmd_gt(args):
    started = _now()
    ann_dir = Path(args.annotations_dir)
    files = sorted(ann_dir.glob("*.json"))
    if not files:
        raise CliError(f"no annotation files in {ann_dir}")
    images_dir = Path(args.images_dir) if args.images_dir else ann_dir.parent / "images"
    out = _mkdir(args.out_dir)
    masses, failures = {}, []
    for f in files:
        try:
            doc = _load_json(f)
            name, pts = dgt.load_annotations(f)
            dims = _annotation_dims(doc, f, images_dir)
            if args.mode == "fixed":
                grid = dgt.generate_fixed(pts, dims, args.sigma)
            else:
                if len(pts) == 1:
                    print(f"warning: {f.name}: single point, fallback sigma "
                          f"{dgt.FALLBACK_SIGMA:g} used", file=sys.stderr)
                grid = dgt.generate_adaptive(pts, dims, args.k, args.beta)
        except (InputError, CliError) as e:
            failures.append(f"{f.name}: {e}")
            continue
        dgt.save_csv(out / f"{name}.csv", grid)
        masses[name] = {"points": int(len(pts)), "mass": float(grid.sum())}
    extra = {"mode": args.mode, "sigma": args.sigma, "k": args.k, "beta": args.beta,
             "mass_report": masses, "failures": failures}
    write_manifest(out, "gt", None, None, extra, started)
    for name, m in masses.items():
        print(f"{name}\tpoints={m['points']}\tmass={fmt(m['mass'])}")
    if failures:
        print("errors:\n  " + "\n  ".join(failures), file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def parse_train_doc(doc):
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise CliError(f"unsupported train config version {doc.get('version')}")
    mdoc = doc.get("model", {})
    net = mdoc.get("network", "FCN-5c")
    try:
        config = NetworkConfig.from_dict(net) if isinstance(net, dict) else get_config(net)
        tcfg = TrainConfig.from_dict(doc.get("train", {}))
    except (ConfigError, TypeError, KeyError) as e:
        raise CliError(f"invalid train config: {e}") from None
    gdoc = doc.get("gt", {})
    return (config, tuple(mdoc.get("scales", [1.0])), mdoc.get("fusion_mode", "adaptive"),
            int(mdoc.get("seed", 0)), tcfg, gdoc)


def _gt_density(image, pts, gdoc):
    if gdoc.get("mode", "fixed") == "adaptive":
        return dgt.generate_adaptive(pts, image.shape, gdoc.get("k", 5),
                                     gdoc.get("beta", dgt.DEFAULT_BETA))
    return dgt.generate_fixed(pts, image.shape, gdoc.get("sigma", 4.0))


def cmd_train(args):
    started = _now()
    doc = _load_json(args.config)
    config, scales, mode, mseed, tcfg, gdoc = parse_train_doc(doc)
    data = load_dataset(args.data_dir)
    try:
        dataset = [(to_input(img), _gt_density(img, pts, gdoc))
                   for _, img, pts in data]
    except InputError as e:
        raise CliError(str(e)) from None
    val = None
    if args.val_dir:
        val = [(img, len(pts)) for _, img, pts in load_dataset(args.val_dir)]
    out = _mkdir(args.out_dir)

    start_epoch, opt_state, records = 0, None, []
    if args.resume:
        try:
            model = load_weights(out / "model.pyrd")
            opt_state = load_optimizer_state(out / "optimizer.npz")
            records = read_log(out / "train_log.csv")
        except (OSError, WeightFileError) as e:
            raise CliError(f"cannot resume from {out}: {e}") from None
        start_epoch = int(opt_state["epoch"])
    else:
        try:
            model = PyramidModel(config, scales, mode, seed=mseed)
        except ConfigError as e:
            raise CliError(str(e)) from None

    def progress(rec):
        print(f"epoch {rec.epoch}\tlr={fmt(rec.lr)}\tloss={fmt(rec.train_loss)}"
              f"\tval_mae={fmt(rec.val_mae)}", flush=True)

    try:
        records = train(model, dataset, tcfg, val=val, out_dir=out, start_epoch=start_epoch,
                        optimizer_state=opt_state, records=records, progress=progress)
    except TrainingDiverged as e:
        write_manifest(out, "train", args.config, tcfg.seed, {"status": f"diverged: {e}"}, started)
        raise CliError(f"training diverged: {e}", EXIT_RUNTIME) from None
    write_manifest(out, "train", args.config, tcfg.seed,
                   {"status": "ok", "epochs": len(records)}, started)
    return EXIT_OK


def _load_model(path):
    try:
        return load_weights(path)
    except FileNotFoundError:
        raise CliError(f"weight file not found: {path}") from None
    except WeightFileError as e:
        raise CliError(str(e)) from None


def cmd_eval(args):
    started = _now()
    data = load_dataset(args.data_dir)
    model = None if args.passthrough else _load_model(args.weights)
    names, gt, pred = [], [], []
    t_total = 0.0
    for name, img, pts in data:
        names.append(name)
        gt.append(float(len(pts)))
        if model is None:
            pred.append(float(dgt.generate_fixed(pts, img.shape, args.sigma).sum()))
        else:
            t0 = time.perf_counter()
            pred.append(float(predict_full(model, img).sum()))
            t_total += time.perf_counter() - t0
    res = EvalResult(names, np.array(gt), np.array(pred))
    if model is not None and t_total > 0:
        res.fps = len(names) / t_total
    out = _mkdir(args.out_dir)
    res.write(out / "report.csv", out / "summary.json")
    write_manifest(out, "eval", args.weights, None, None, started)
    print(f"MAE={fmt(res.mae)}\tMSE={fmt(res.mse)}\tRMSE={fmt(res.rmse)}")
    return EXIT_OK


def cmd_predict(args):
    started = _now()
    model = _load_model(args.weights)
    try:
        image = read_pgm(args.image)
    except (InputError, OSError) as e:
        raise CliError(f"cannot read image {args.image}: {e}") from None
    dens, out = predict_full(model, image, return_output=True)
    oh, ow = dens.shape
    od = _mkdir(args.out_dir)
    dgt.save_csv(od / "density.csv", dens)
    write_pgm_normalized(od / "density.pgm", dens)
    for k, a in enumerate(out.attention):
        write_pgm_normalized(od / f"attention_s{k}.pgm", a.data[0, 0, :oh, :ow])
    write_manifest(od, "predict", args.weights, None, {"image": str(args.image)}, started)
    print(fmt(float(dens.sum())))
    return EXIT_OK


def cmd_inspect(args):
    target = args.config
    if Path(target).suffix == ".json" and Path(target).exists():
        try:
            config = NetworkConfig.from_dict(_load_json(target))
        except (ConfigError, KeyError, TypeError) as e:
            raise CliError(f"invalid network config {target}: {e}") from None
    elif target in PRESETS:
        config = PRESETS[target]
    else:
        raise CliError(f"unknown network {target!r}; presets: {', '.join(PRESETS)}")
    scales = tuple(args.scales) if args.scales else (1.0,)
    model = PyramidModel(config, scales, args.fusion_mode)
    print(f"network: {config.name}")
    print(f"receptive field: {receptive_field(config)}")
    print(f"backbone parameters: {count_parameters(model.backbone)}")
    if args.scales:
        print(f"pyramid ({len(scales)} scales, {args.fusion_mode}) parameters: "
              f"{count_parameters(model)}")
    h, w = args.input_size
    print(f"\n{'layer':<32} output (c, h, w) for {h}x{w} input")
    for desc, shape in model.backbone.layer_shapes(h, w):
        print(f"{desc:<32} {shape}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="pyramidcount", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic perspective dataset")
    s.add_argument("spec", help="scene spec JSON")
    s.add_argument("out_dir")
    s.add_argument("--n-images", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gt", help="build ground-truth density CSVs from annotations")
    s.add_argument("annotations_dir")
    s.add_argument("out_dir")
    s.add_argument("--mode", choices=("fixed", "adaptive"), default="fixed")
    s.add_argument("--sigma", type=float, default=dgt.FALLBACK_SIGMA)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--beta", type=float, default=dgt.DEFAULT_BETA)
    s.add_argument("--images-dir", help="where to find <image>.pgm when dims are not in the JSON")
    s.set_defaults(func=cmd_gt)

    s = sub.add_parser("train", help="train a pyramid model")
    s.add_argument("config", help="training JSON (model, gt and train sections)")
    s.add_argument("data_dir", help="directory with images/ and annotations/")
    s.add_argument("out_dir")
    s.add_argument("--val-dir")
    s.add_argument("--resume", action="store_true", help="continue from out_dir checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate counting error on a dataset")
    s.add_argument("weights")
    s.add_argument("data_dir")
    s.add_argument("--out-dir", default="eval_out")
    s.add_argument("--passthrough", action="store_true",
                   help="score ground-truth densities against themselves (no model)")
    s.add_argument("--sigma", type=float, default=4.0, help="GT sigma for --passthrough")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict a density map for one PGM image")
    s.add_argument("weights")
    s.add_argument("image")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("inspect", help="receptive field, parameter count and layer shapes")
    s.add_argument("config", help="preset name or network JSON file")
    s.add_argument("--scales", type=float, nargs="+")
    s.add_argument("--fusion-mode", choices=FUSION_MODES, default="adaptive")
    s.add_argument("--input-size", type=int, nargs=2, default=(128, 128), metavar=("H", "W"))
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (InputError, ConfigError, WeightFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
