"""``smcyclegan`` command line.

Exit codes: 0 success, 2 config/data error, 3 I/O error, 4 checkpoint error,
5 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, evaluation, segmenter, training
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, DataError, SMCGError, StorageError
from .imagecore import DomainTag, Image, save_image

log = logging.getLogger("smcyclegan")

EFFECTIVE_CONFIG = "effective_config.yaml"


def _prepare(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.apply_seed(args.seed)
    if args.out is not None:
        config.paths.out = args.out
    return config


def _dump(config: RunConfig, folder) -> None:
    dump_config(config, Path(folder) / EFFECTIVE_CONFIG)


def cmd_make_toy_data(args) -> int:
    config = _prepare(args)
    # an explicit --out wins; otherwise the data lands where training will look for it
    if args.out is None and config.paths.data_root:
        out = Path(config.paths.data_root)
    else:
        out = config.out_dir
    _dump(config, out)
    toy = data.generate_toy_domains(config.toy, out)
    log.info("wrote %d + %d toy images to %s", len(toy.x), len(toy.y), out)
    return 0


def _data_root(config: RunConfig) -> Path:
    if not config.paths.data_root:
        raise ConfigError("paths.data_root is not set")
    return Path(config.paths.data_root)


def cmd_train_segmenter(args) -> int:
    config = _prepare(args)
    out = config.out_dir
    if out.exists() and not out.is_dir():
        raise StorageError(f"output path {out} is not a directory")
    _dump(config, out)
    root = _data_root(config)
    sets = [data.load_dataset(root, d, config.image_size, with_masks=True) for d in DomainTag]
    images = torch.cat([s.images for s in sets])
    masks = torch.cat([s.masks for s in sets])
    params, history = segmenter.train_segmenter(images, masks, config.segmenter)
    segmenter.save_segmenter(config.segmenter_path, params, {"epoch_losses": history})
    (out / "segmenter_history.json").write_text(json.dumps({"epoch_losses": history}))
    return 0


def cmd_train(args) -> int:
    config = _prepare(args)
    out = config.out_dir
    _dump(config, out)
    root = _data_root(config)
    need_masks = config.train.mask_source == "ground_truth" and config.train.masking_possible
    ds_x = data.load_dataset(root, DomainTag.ART, config.image_size, with_masks=need_masks)
    ds_y = data.load_dataset(root, DomainTag.REAL, config.image_size, with_masks=need_masks)
    seg = None
    if config.train.masking_possible and args.resume is None:
        seg = segmenter.load_segmenter(config.segmenter_path)
    training.train(config.train, ds_x, ds_y, seg, out, resume_from=args.resume)
    return 0


def cmd_translate(args) -> int:
    config = _prepare(args)
    out = Path(args.output)
    _dump(config, out)
    generator = training.load_generator(args.checkpoint, args.direction)
    names, images, _ = data.load_image_folder(args.input, args.size)
    if not names:
        raise DataError(f"no readable images in {args.input}")
    batch = torch.stack([im.to_tensor() for im in images])
    translated = training.translate_batch(generator, batch).clamp(-1, 1)
    for name, img in zip(names, translated):
        save_image(Image(img.permute(1, 2, 0).numpy(), "symmetric"), out / (Path(name).stem + ".png"))
    log.info("translated %d images (%s)", len(names), args.direction)
    return 0


def cmd_evaluate(args) -> int:
    config = _prepare(args)
    extractor_id = args.extractor or config.evaluation.extractor
    config.evaluation.extractor = extractor_id
    report_dir = Path(config.paths.out) if config.paths.out else Path.cwd()
    _dump(config, report_dir)
    extractor = evaluation.get_extractor(extractor_id, config.evaluation.input_size)
    report = evaluation.compare_folders(args.generated, args.reference, extractor)
    report.update(generated_dir=str(args.generated), reference_dir=str(args.reference))
    try:
        (report_dir / "fid_report.json").write_text(json.dumps(report, indent=1))
    except OSError as exc:
        raise StorageError(f"cannot write FID report: {exc}") from exc
    print(f"{report['fid']:.6f}")
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run_dir)
    if not run.is_dir():
        raise StorageError(f"run directory {run} does not exist")
    metrics_path = run / "metrics.jsonl"
    if not metrics_path.is_file() or not metrics_path.read_text().strip():
        raise DataError(f"{run} holds no metrics log")
    config = _prepare(args)
    _dump(config, run / "report")
    records = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in ("adv_G", "adv_F", "cycle", "identity", "total", "loss_D_X", "loss_D_Y"):
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(run / "report" / "loss_curves.png", dpi=120)
    plt.close(fig)

    samples_path = run / "samples.npz"
    if samples_path.is_file():
        samples = np.load(samples_path)
        rows = [samples[k] for k in ("x", "g_x", "y", "f_y")]
        n = len(rows[0])
        fig, axes = plt.subplots(4, n, figsize=(1.2 * n, 5), squeeze=False)
        for r, (row, label) in enumerate(zip(rows, ("x", "G(x)", "y", "F(y)"))):
            for c in range(n):
                ax = axes[r][c]
                ax.imshow(np.clip((row[c].transpose(1, 2, 0) + 1) / 2, 0, 1))
                ax.set_xticks([])
                ax.set_yticks([])
                if c == 0:
                    ax.set_ylabel(label)
        fig.tight_layout()
        fig.savefig(run / "report" / "comparison_grid.png", dpi=120)
        plt.close(fig)
    log.info("report for %d steps written to %s", len(records), run / "report")
    return 0


def _global_flags(default=None) -> argparse.ArgumentParser:
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--config", default=default, help="YAML run configuration")
    flags.add_argument("--seed", type=int, default=default, help="override every seed in the config")
    flags.add_argument("--out", default=default, help="output directory (overrides paths.out)")
    flags.add_argument("--resume", default=default, help="TRAIN_STATE checkpoint to resume from")
    return flags


def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the copy on subcommands must not reset earlier values
    common = _global_flags(argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="smcyclegan", parents=[_global_flags()],
                                     description="Semantic-aware mask CycleGAN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("make-toy-data", parents=[common], help="render synthetic two-domain data"
                   ).set_defaults(func=cmd_make_toy_data)
    sub.add_parser("train-segmenter", parents=[common], help="train the U-Net mask model"
                   ).set_defaults(func=cmd_train_segmenter)
    sub.add_parser("train", parents=[common], help="train SMCycleGAN").set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="translate a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--direction", choices=("x2y", "y2x"), default="x2y")
    p.add_argument("--size", type=int, help="resize inputs to SIZE x SIZE first")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="FID between two image folders")
    p.add_argument("generated")
    p.add_argument("reference")
    p.add_argument("--extractor", help="raw | randconv[:seed] | torchscript:<path>")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="plot loss curves and sample grid")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SMCGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
