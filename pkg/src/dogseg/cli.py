"""Command-line entry point: ``dogseg <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__

USAGE_ERROR = 1
RUNTIME_ERROR = 2

log = logging.getLogger("dogseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args, extra=None):
    from .config import RunConfig

    overrides = _overrides(getattr(args, "set", None))
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return RunConfig.resolve(args.config, overrides)


def _save_figure(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100)
    atomic_write(path, buf.getvalue())


def plot_loss(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import moving_average

    steps = [s for s, _ in history]
    values = [v for _, v in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, lw=0.5, alpha=0.4, label="batch loss")
    window = min(50, len(values))
    if window > 1:
        ax.plot(steps[window - 1:], moving_average(values, window), label=f"moving average ({window})")
    ax.set_xlabel("episodes")
    ax.set_ylabel("BCE")
    ax.legend()
    fig.tight_layout()
    _save_figure(fig, path)
    plt.close(fig)


def plot_per_class(report, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = report.to_dict()["per_class"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(list(d), [v["iou"] for v in d.values()])
    ax.axhline(report.miou, color="k", ls="--", lw=1, label=f"mIoU {report.miou:.3f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend()
    fig.tight_layout()
    _save_figure(fig, path)
    plt.close(fig)


def plot_overlays(model, episodes, path, kshot_mode=None):
    """Support with its mask, then query with ground truth and prediction outlined, one row per episode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    preds = model.predict_episodes(episodes, kshot_mode=kshot_mode)
    fig, axes = plt.subplots(len(episodes), 2, figsize=(4, 2 * len(episodes)), squeeze=False)
    for row, (ep, pred) in zip(axes, zip(episodes, preds)):
        row[0].imshow(ep.support_images[0].transpose(1, 2, 0))
        row[0].contour(ep.support_masks[0], levels=[0.5], colors="y", linewidths=1)
        row[0].set_title(f"support: {ep.class_id}", fontsize=8)
        row[1].imshow(ep.query_image.transpose(1, 2, 0))
        row[1].contour(ep.query_mask, levels=[0.5], colors="g", linewidths=1)
        if pred.any():
            row[1].contour(pred, levels=[0.5], colors="r", linewidths=1)
        row[1].set_title("query: truth green, prediction red", fontsize=8)
        for ax in row:
            ax.axis("off")
    fig.tight_layout()
    _save_figure(fig, path)
    plt.close(fig)


def cmd_gen_data(args):
    from .datasets import generate_synthetic_dataset

    cfg = _resolve(args, {"synth.seed": args.seed})
    ds = generate_synthetic_dataset(cfg.synth_config(), args.out)
    print(f"wrote {len(ds.class_ids)} classes to {ds.root}")


def _fold(cfg, dataset):
    from .episodes import make_folds

    folds = make_folds(dataset.class_ids, cfg["episode.n_folds"])
    if not 0 <= cfg["episode.fold"] < len(folds):
        raise UsageError(f"fold {cfg['episode.fold']} out of range for {len(folds)} folds")
    return folds[cfg["episode.fold"]]


def cmd_train(args):
    from .datasets import load_dataset
    from .trainer import load_checkpoint, save_checkpoint, train

    cfg = _resolve(args, {"episode.fold": args.fold, "episode.seed": args.seed,
                          "train.total_episodes": args.episodes, "episode.shots": args.shots})
    dataset = load_dataset(args.data)
    fold = _fold(cfg, dataset)
    resume = load_checkpoint(args.resume) if args.resume else None
    model_cfg = resume.model_config if resume else cfg.model_config(dataset.image_size)
    ckpt = train(cfg.train_config(), dataset, fold, model_cfg, resume=resume, checkpoint_path=args.out)
    ckpt.config["run"] = cfg.to_dict()
    save_checkpoint(ckpt, args.out)
    if args.plot:
        plot_loss(ckpt.history, args.plot)
    print(f"trained {ckpt.iteration} episodes, final loss {ckpt.history[-1][1]:.4f}; wrote {args.out}")


def cmd_eval(args):
    from .config import RunConfig
    from .datasets import load_dataset
    from .evaluation import run_protocol
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    base = ckpt.config.get("run")
    cfg = RunConfig.from_dict(base) if base else RunConfig()
    overrides = _overrides(args.set)
    overrides.update({k: v for k, v in {"episode.fold": args.fold, "episode.seed": args.seed,
                                        "eval.episodes": args.episodes, "weak.bbox_mode": args.bbox,
                                        "episode.kshot_mode": args.kshot_mode}.items() if v is not None})
    for k, v in overrides.items():
        cfg.set(k, v)
    dataset = load_dataset(args.data)
    fold = _fold(cfg, dataset)
    model = ckpt.build_model()
    shots = args.shots or ckpt.model_config.shots
    report = run_protocol(model, dataset, fold, cfg["eval.episodes"], shots, cfg["episode.seed"],
                          weak=cfg["weak.bbox_mode"], kshot_mode=cfg["episode.kshot_mode"],
                          include_background=cfg["eval.include_background"],
                          per_episode_mean=cfg["eval.per_episode_mean"], config=cfg.to_dict())
    if args.out:
        atomic_write(args.out, report.to_json())
    if args.plot:
        plot_per_class(report, args.plot)
    if args.overlay:
        from .episodes import episode_rng, sample_episode
        from .evaluation import class_stream_id

        episodes = [sample_episode(dataset, c, shots, episode_rng(cfg["episode.seed"], class_stream_id(c), 0),
                                   weak=cfg["weak.bbox_mode"]) for c in fold.test_classes]
        plot_overlays(model, episodes, args.overlay, cfg["episode.kshot_mode"])
    print(f"mIoU {report.miou:.4f}  FB-IoU {report.fb_iou:.4f}")


def cmd_ablate(args):
    from .ablation import run_ablation
    from .datasets import load_dataset

    cfg = _resolve(args)
    dataset = load_dataset(args.data)
    seeds = [int(s) for s in args.seeds.split(",")]
    folds = [int(f) for f in args.folds.split(",")] if args.folds else None
    result = run_ablation(cfg, dataset, args.axis, seeds, folds, cache_dir=args.cache)
    atomic_write(args.out, result.to_json())
    if args.csv:
        atomic_write(args.csv, result.to_csv())
    for label, s in result.summary().items():
        print(f"{label:22s} mIoU {s['miou_mean']:.4f}")


def _read_image(path, size=None):
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


def _read_mask(path, size=None):
    from PIL import Image

    m = Image.open(path).convert("L")
    if size is not None and m.size != (size[1], size[0]):
        m = m.resize((size[1], size[0]), Image.NEAREST)
    return (np.asarray(m) >= 128).astype(np.uint8)


def cmd_predict(args):
    import torch
    from PIL import Image

    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    size = model.config.encoder.input_size
    pairs = []
    for item in args.support:
        parts = item.split(",")
        if len(parts) != 2:
            raise UsageError(f"--support expects IMAGE,MASK, got {item!r}")
        pairs.append((_read_image(parts[0], size), _read_mask(parts[1], size)))
    if not any(m.any() for _, m in pairs):
        raise UsageError("support masks contain no foreground")
    dtype = next(model.parameters()).dtype
    si = torch.as_tensor(np.stack([p[0] for p in pairs])[None], dtype=dtype)
    sm = torch.as_tensor(np.stack([p[1] for p in pairs])[None])
    with Image.open(args.query) as q:
        query_size = q.size
    qi = torch.as_tensor(_read_image(args.query, size)[None], dtype=dtype)
    mode = args.kshot_mode or ("nonparametric" if len(pairs) != ckpt.model_config.shots else None)
    with torch.no_grad():
        probs = model(si, sm, qi, kshot_mode=mode)[0].numpy()
    mask = Image.fromarray(((probs >= 0.5) * 255).astype(np.uint8), mode="L")
    if mask.size != query_size:
        mask = mask.resize(query_size, Image.NEAREST)
    buf = io.BytesIO()
    mask.save(buf, format="PNG")
    atomic_write(args.out, buf.getvalue())
    print(f"foreground fraction {np.asarray(mask).mean() / 255:.3f}; wrote {args.out}")


def cmd_version(args):
    print(f"dogseg {__version__}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dogseg", description="Few-shot segmentation with DoG scale-space and recurrent fusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic training on one fold")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--fold", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--shots", type=int)
    t.add_argument("--episodes", type=int)
    t.add_argument("--resume")
    t.add_argument("--plot", help="write a loss-curve PNG")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run the test protocol on a fold's held-out classes")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fold", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--shots", type=int)
    e.add_argument("--episodes", type=int)
    e.add_argument("--bbox", choices=("none", "union", "component"))
    e.add_argument("--kshot-mode", choices=("parametric", "nonparametric"))
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--plot", help="write a per-class IoU PNG")
    e.add_argument("--overlay", help="write a PNG of predicted masks over query images")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate an ablation axis over folds and seeds")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--axis", default="all", choices=("fusion", "dog", "shots", "weak", "all"))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--folds", help="comma-separated fold indices (default: all)")
    a.add_argument("--cache", help="directory for trained checkpoints")
    a.add_argument("--out", required=True)
    a.add_argument("--csv")
    a.set_defaults(func=cmd_ablate)

    pr = sub.add_parser("predict", help="segment one query image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--support", action="append", required=True, metavar="IMAGE,MASK")
    pr.add_argument("--query", required=True)
    pr.add_argument("--kshot-mode", choices=("parametric", "nonparametric"))
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    v = sub.add_parser("version", help="print the package version")
    v.set_defaults(func=cmd_version)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"{build_parser().format_usage()}dogseg: error: a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
