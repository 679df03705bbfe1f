"""Command-line interface: train, eval, explain, embed.

Configuration comes from flags, optionally layered over a JSON config file
(flags override the file; unknown file keys are rejected before any work
starts). Exit codes: 0 success, 2 configuration/checkpoint problems,
3 data problems, 4 numeric failures — each with a one-line diagnostic on
stderr. All outputs land inside the --out directory under fixed
subdirectories: split/, checkpoints/, reports/, heatmaps/, embeddings/.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datapipe, embed, model, trainer
from .errors import (CbamVggError, ConfigError, DataError, NonFiniteError,
                     NumericError, ShapeError)
from .explain import (attention_maps, composite_presets, default_cam_layer,
                      grad_cam, grad_cam_pp, lrp, render_heatmap,
                      upsampled_spatial_gates)
from .imaging import read_image, write_png

_PROFILE_SIDES = {"mini": 32, "vgg16": 224}

_COMMON = {"out": None, "seed": 0, "config": None}
_DEFAULTS = {
    "train": {**_COMMON, "data": None, "profile": "mini", "side": None,
              "epochs": 15, "batch": 16, "lr": 0.01, "lam": 1e-4,
              "ratio": 0.8, "attention": True, "balanced": False,
              "enhance": True},
    "eval": {**_COMMON, "data": None, "checkpoint": None, "split": "all",
             "ratio": 0.8, "batch": 32},
    "explain": {**_COMMON, "checkpoint": None, "image": None,
                "method": "gradcam", "composite": None, "layer": None,
                "class_id": None, "dump": False},
    "embed": {**_COMMON, "data": None, "checkpoint": None, "layer": None,
              "perplexity": 20.0, "iterations": 1000, "batch": 32},
}


def _lr_value(text: str):
    """--lr accepts one rate or a comma-separated per-epoch schedule."""
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad learning rate {text!r}") from None
    return parts[0] if len(parts) == 1 else parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbamvgg",
        description="attention-augmented VGG classifier with explainability tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("train", help="train a model on a dataset root")
    common(p)
    p.add_argument("--data", help="dataset root (one subdirectory per class)")
    p.add_argument("--profile", choices=("mini", "vgg16"))
    p.add_argument("--side", type=int, help="input side (default per profile)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=_lr_value,
                   help="learning rate, or comma-separated per-epoch schedule")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="L2 regularization strength")
    p.add_argument("--ratio", type=float, help="train fraction of the split")
    p.add_argument("--no-attention", dest="attention", action="store_false",
                   default=None, help="ablation: force both gates to 1")
    p.add_argument("--balanced", action="store_true", default=None,
                   help="compose each batch by class round-robin")
    p.add_argument("--no-enhance", dest="enhance", action="store_false",
                   default=None, help="skip contrast enhancement")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("all", "train", "test"),
                   help="which part of the seeded split to score")
    p.add_argument("--ratio", type=float)
    p.add_argument("--batch", type=int)

    p = sub.add_parser("explain", help="write heatmaps for one image")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="input image (PNG or binary PPM)")
    p.add_argument("--method", choices=("attention", "gradcam", "gradcampp", "lrp"))
    p.add_argument("--composite", help="LRP rule composite name")
    p.add_argument("--layer", help="target layer (CAM methods)")
    p.add_argument("--class", dest="class_id", type=int,
                   help="target class (default: predicted)")
    p.add_argument("--dump", action="store_true", default=None,
                   help="also write the numeric map as a text grid")

    p = sub.add_parser("embed", help="t-SNE projection of layer features")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--layer", help="feature layer (default: flatten)")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Layer defaults <- config file <- explicit flags, rejecting unknown
    or wrong-command keys up front."""
    defaults = _DEFAULTS[args.command]
    merged = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: "
                              + ", ".join(unknown))
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    for key in ("out",):
        if merged.get(key) is None:
            raise ConfigError(f"--{key} is required")
    return merged


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is None:
            flag = {"class_id": "class", "lam": "lambda"}.get(key, key)
            raise ConfigError(f"--{flag} is required for this command")


def _outdir(cfg: dict, sub: str) -> Path:
    path = Path(cfg["out"]) / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_graph(cfg: dict) -> model.NetworkGraph:
    _require(cfg, "checkpoint")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return model.load_checkpoint(path)


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data")
    images, class_names = datapipe.load_dataset(cfg["data"])
    side = cfg["side"] or _PROFILE_SIDES[cfg["profile"]]
    graph = model.build_cbam_vgg(model.BuildConfig(
        profile=cfg["profile"], input_side=side, classes=len(class_names),
        seed=cfg["seed"], attention=cfg["attention"]))
    split = datapipe.split_dataset(images, class_names, cfg["ratio"], cfg["seed"])
    datapipe.save_split_manifest(split, _outdir(cfg, "split") / "manifest.json")

    ckpt = _outdir(cfg, "checkpoints") / "best.ckpt"
    history = trainer.fit(graph, split, cfg["epochs"], cfg["batch"], cfg["lr"],
                          trainer.LossConfig(cfg["lam"], len(class_names)),
                          seed=cfg["seed"], checkpoint_path=ckpt,
                          balanced=cfg["balanced"], enhance=cfg["enhance"],
                          log=print)
    reports = _outdir(cfg, "reports")
    (reports / "history.txt").write_text(history.to_text(), encoding="utf-8")

    best = model.load_checkpoint(ckpt)
    test_x, test_y = datapipe.prepare_part(split.test, best.input_side,
                                           cfg["enhance"])
    report = trainer.evaluate(best, test_x, test_y, cfg["batch"], class_names)
    (reports / "eval.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    print(f"best checkpoint: {ckpt}")
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data")
    graph = _load_graph(cfg)
    images, class_names = datapipe.load_dataset(cfg["data"])
    if cfg["split"] != "all":
        split = datapipe.split_dataset(images, class_names, cfg["ratio"], cfg["seed"])
        images = split.train if cfg["split"] == "train" else split.test
    x, y = datapipe.prepare_part(images, graph.input_side)
    report = trainer.evaluate(graph, x, y, cfg["batch"], class_names)
    (_outdir(cfg, "reports") / "eval.txt").write_text(report.to_text(),
                                                      encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def cmd_explain(cfg: dict) -> int:
    graph = _load_graph(cfg)
    _require(cfg, "image")
    pixels = read_image(cfg["image"])
    x = datapipe.preprocess(datapipe.clahe(pixels), graph.input_side)
    base = np.floor(x.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    probs, _ = model.forward(graph, x[None])
    predicted = int(probs[0].argmax())
    class_id = cfg["class_id"] if cfg["class_id"] is not None else predicted
    if not 0 <= class_id < graph.classes:
        raise ConfigError(f"--class {class_id} out of range for "
                          f"{graph.classes} classes")
    heatmaps = _outdir(cfg, "heatmaps")
    stem = Path(cfg["image"]).stem

    if cfg["method"] == "attention":
        records = attention_maps(graph, x)
        gates = upsampled_spatial_gates(records, graph.input_side)
        for record, gate in zip(records, gates):
            out = heatmaps / f"{stem}_attention_stage{record.stage_index}.png"
            write_png(out, render_heatmap(gate, base, "overlay"))
        lines = [" ".join(f"{v:.6f}" for v in r.channel_gate[0, :, 0, 0])
                 for r in records]
        (heatmaps / f"{stem}_channel_gates.txt").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
        written = [f"{stem}_attention_stage{r.stage_index}.png" for r in records]
    elif cfg["method"] in ("gradcam", "gradcampp"):
        fn = grad_cam if cfg["method"] == "gradcam" else grad_cam_pp
        smap = fn(graph, x, class_id, cfg["layer"])
        out = heatmaps / f"{stem}_{cfg['method']}_{smap.layer}.png"
        write_png(out, render_heatmap(smap.values, base, "overlay"))
        if cfg["dump"]:
            np.savetxt(out.with_suffix(".txt"), smap.values, fmt="%.10g")
        written = [out.name]
    else:  # lrp
        presets = composite_presets(graph)
        if cfg["composite"] not in presets:
            raise ConfigError(f"unknown composite {cfg['composite']!r}; choose "
                              f"from: " + ", ".join(sorted(presets)))
        relevance = lrp(graph, x, class_id, presets[cfg["composite"]])
        heat = relevance.pixels[0].sum(axis=0)
        out = heatmaps / f"{stem}_lrp_{cfg['composite']}.png"
        write_png(out, render_heatmap(heat, base, "overlay", signed=True))
        if cfg["dump"]:
            np.savetxt(out.with_suffix(".txt"), heat, fmt="%.10g")
        written = [out.name]

    print(f"predicted class {predicted} p={probs[0, predicted]:.6f}; "
          f"explained class {class_id}; wrote {', '.join(written)}")
    return 0


def cmd_embed(cfg: dict) -> int:
    _require(cfg, "data")
    graph = _load_graph(cfg)
    images, _ = datapipe.load_dataset(cfg["data"])
    features = embed.extract_features(graph, images, cfg["layer"], cfg["batch"])
    embedding = embed.tsne(features, cfg["perplexity"], cfg["iterations"],
                           cfg["seed"])
    outdir = _outdir(cfg, "embeddings")
    embed.write_embedding_tsv(outdir / "embedding.tsv", embedding, features)
    embed.scatter_png(outdir / "scatter.png", embedding, features.labels)
    print(f"embedded {len(features.labels)} samples from layer "
          f"{features.layer}; final KL {embedding.kl:.6f}")
    return 0


_DISPATCH = {"train": cmd_train, "eval": cmd_eval,
             "explain": cmd_explain, "embed": cmd_embed}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _DISPATCH[args.command](cfg)
    except (NumericError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CbamVggError as exc:  # any stragglers map to configuration
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
