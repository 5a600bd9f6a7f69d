"""Command-line interface.

Subcommands: synth, extract-features, pretrain, finetune, evaluate,
attention-map.  Exit codes: 0 success, 1 usage/configuration error,
2 data error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import pipeline
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    ParameterError,
    RadioconError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

logger = logging.getLogger("radiocon")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="radiocon",
                     description="Radiomics-guided contrastive pneumonia pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.add_argument("--n", type=int, default=512)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--resolution", type=int, default=64)

    def dataset_args(p, with_config=True):
        p.add_argument("--manifest", required=True)
        p.add_argument("--images", required=True)
        if with_config:
            p.add_argument("--config", help="key=value config file")
            p.add_argument("--seed", type=int, help="overrides config seed")

    feats = sub.add_parser("extract-features", help="write the radiomics CSV")
    dataset_args(feats, with_config=False)
    feats.add_argument("--bins", type=int, default=32)
    feats.add_argument("--out", required=True, help="output CSV path")

    pre = sub.add_parser("pretrain", help="contrastive pretraining")
    dataset_args(pre)
    pre.add_argument("--out", required=True, help="output checkpoint path")

    fine = sub.add_parser("finetune", help="supervised fine-tuning")
    dataset_args(fine)
    fine.add_argument("--ckpt", help="pretrained checkpoint to start from")
    fine.add_argument("--from-scratch", action="store_true",
                      help="baseline: train without contrastive pretraining")
    fine.add_argument("--out", required=True, help="output checkpoint path")

    ev = sub.add_parser("evaluate", help="score the held-out split")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--images", required=True)
    ev.add_argument("--ckpt", required=True, help="finetuned checkpoint")
    ev.add_argument("--out", required=True, help="metrics JSON path")

    amap = sub.add_parser("attention-map", help="export an attention heat map")
    amap.add_argument("--ckpt", required=True, help="finetuned or pretrained checkpoint")
    amap.add_argument("--images", required=True, help="one input image path")
    amap.add_argument("--out", required=True, help="output PGM path")
    return parser


def _load_train_config(args) -> pipeline.TrainConfig:
    raw = pipeline.load_config_file(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return pipeline.TrainConfig.from_dict(raw)


def _load_dataset(args):
    samples, errors = data_mod.load_manifest(args.manifest, args.images)
    for line in errors:
        print(f"radiocon: data error: {line}", file=sys.stderr)
    if errors:
        raise DataError(f"{len(errors)} sample(s) failed to load")
    if not samples:
        raise DataError("manifest contains no samples")
    return samples


def _cmd_synth(args) -> int:
    data_mod.generate_synthetic_dataset(args.n, args.seed, args.resolution, args.out)
    print(f"wrote {args.n} images and manifest under {args.out}")
    return EXIT_OK


def _cmd_extract_features(args) -> int:
    samples = _load_dataset(args)
    failures = pipeline.extract_features_csv(samples, args.bins, args.out)
    for line in failures:
        print(f"radiocon: extraction failed: {line}", file=sys.stderr)
    print(f"wrote features for {len(samples) - len(failures)}/{len(samples)} "
          f"samples to {args.out}")
    return EXIT_DATA if failures else EXIT_OK


def _cmd_pretrain(args) -> int:
    config = _load_train_config(args)
    samples = _load_dataset(args)
    result = pipeline.pretrain(samples, config)
    ckpt_io.save(result.checkpoint, args.out)
    pipeline.write_loss_curve(result.loss_curve, args.out + ".losses.csv")
    print(f"pretrained for {len(result.loss_curve)} epochs; "
          f"final loss {result.loss_curve[-1]:.6f}; checkpoint at {args.out}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    config = _load_train_config(args)
    samples = _load_dataset(args)
    if args.from_scratch:
        if args.ckpt:
            raise ConfigError("--from-scratch and --ckpt are mutually exclusive")
        pretrained = None
    else:
        if not args.ckpt:
            raise ConfigError("finetune needs --ckpt (or --from-scratch)")
        pretrained = ckpt_io.load(args.ckpt)
    result = pipeline.finetune(samples, config, pretrained,
                               from_scratch=args.from_scratch)
    ckpt_io.save(result.checkpoint, args.out)
    pipeline.write_loss_curve(result.loss_curve, args.out + ".losses.csv")
    print(f"finetuned for {len(result.loss_curve)} epochs; "
          f"final loss {result.loss_curve[-1]:.6f}; checkpoint at {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    samples = _load_dataset(args)
    ckpt = ckpt_io.load(args.ckpt)
    report = pipeline.evaluate(samples, ckpt)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    auc_text = "null" if report.auc is None else f"{report.auc:.4f}"
    print(f"accuracy {report.accuracy:.4f}  f1 {report.f1:.4f}  auc {auc_text}  "
          f"-> {args.out}")
    return EXIT_OK


def _cmd_attention_map(args) -> int:
    ckpt = ckpt_io.load(args.ckpt)
    image = data_mod.load_image(args.images)
    map_u8, composite = pipeline.attention_map_images(ckpt, image)
    data_mod.write_pgm(map_u8, args.out)
    stem, dot, ext = args.out.rpartition(".")
    composite_path = (stem + "_composite." + ext) if dot else args.out + "_composite"
    data_mod.write_pgm(composite, composite_path)
    print(f"wrote {args.out} and {composite_path}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "extract-features": _cmd_extract_features,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "attention-map": _cmd_attention_map,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParameterError, ContractError, CheckpointError) as exc:
        print(f"radiocon: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"radiocon: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"radiocon: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RadioconError as exc:
        print(f"radiocon: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
