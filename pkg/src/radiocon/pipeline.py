"""The three-phase pipeline: contrastive pretraining, fine-tuning, testing.

Pretraining aligns image embeddings with radiomics embeddings of the same
study via the bidirectional contrastive objective; fine-tuning attaches the
classifier head and minimises cross-entropy over the same training split;
evaluation scores the held-out split from images alone (no boxes, no
radiomics).  All phases share a deterministic split keyed by the config
seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import losses, metrics, model
from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Sample
from .errors import ConfigError, ContractError, DataError, NumericError
from .radiomics import N_FEATURES, FEATURE_NAMES, extract_radiomics
from .rng import substream_seed

logger = logging.getLogger(__name__)

EARLY_STOP_MIN_DELTA = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    """All run hyperparameters; the config file mirrors these field names.

    ``lam`` appears as ``lambda`` in config files, checkpoints, and JSON
    (the Python keyword forces the shorter attribute name).
    """

    tau: float = 0.1
    p: float = 2.0
    lam: float = 0.5
    lr: float = 0.1
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    resolution: int = 64
    bins: int = 32
    similarity_kernel: str = "neg_distance"

    def __post_init__(self):
        losses.ContrastiveConfig(tau=self.tau, p=self.p, lam=self.lam,
                                 similarity_kernel=self.similarity_kernel)
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")

    def contrastive(self) -> losses.ContrastiveConfig:
        return losses.ContrastiveConfig(tau=self.tau, p=self.p, lam=self.lam,
                                        similarity_kernel=self.similarity_kernel)

    def backbone(self) -> model.BackboneConfig:
        return model.BackboneConfig(input_resolution=self.resolution)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in raw.items():
            name = "lam" if key == "lambda" else key
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)


_INT_KEYS = {"batch_size", "max_epochs", "patience", "seed", "resolution", "bins"}
_FLOAT_KEYS = {"tau", "p", "lambda", "lr"}


def load_config_file(path: str) -> dict:
    """Parse a flat key=value config file into a raw dict."""
    raw: dict = {}
    try:
        f = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with f:
        for line_no, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = (part.strip() for part in text.split("=", 1))
            try:
                if key in _INT_KEYS:
                    raw[key] = int(value)
                elif key in _FLOAT_KEYS:
                    raw[key] = float(value)
                else:
                    raw[key] = value
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: bad value for {key}") from exc
    return raw


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _prepare_pixels(samples: Sequence[Sample], resolution: int) -> dict:
    """id -> float32 (R, R) pixel array in [0, 255], resized if needed."""
    out = {}
    for s in samples:
        px = s.image.pixels
        if px.shape != (resolution, resolution):
            px = data_mod.resize_bilinear(px, resolution, resolution)
        out[s.id] = np.asarray(px, dtype=np.float32)
    return out


def _image_batch(pixels: dict, ids: Sequence[str]) -> Tensor:
    return model.image_batch_to_tensor(np.stack([pixels[i] for i in ids]))


@dataclass
class TrainResult:
    checkpoint: ckpt_io.Checkpoint
    loss_curve: list
    split: data_mod.DatasetSplit


def _early_stop_update(best: float, current: float, bad_epochs: int):
    if current < best - EARLY_STOP_MIN_DELTA:
        return current, 0
    return best, bad_epochs + 1


def write_loss_curve(curve: Sequence[float], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,loss\n")
        for i, value in enumerate(curve, start=1):
            f.write("%d,%.17g\n" % (i, value))


# ---------------------------------------------------------------------------
# contrastive pretraining
# ---------------------------------------------------------------------------


def pretrain(samples: Sequence[Sample], config: TrainConfig) -> TrainResult:
    """Phase 1: align the two towers over the training split."""
    if config.batch_size < 2:
        raise ConfigError("contrastive training needs batch_size >= 2")
    split = data_mod.split_dataset(samples, config.seed)
    by_id = {s.id: s for s in samples}
    train = [by_id[i] for i in split.train_ids]
    missing = [s.id for s in train if s.label == 1 and s.bbox is None]
    if missing:
        raise DataError(
            f"positive training samples without a box: {missing[:5]}"
            + ("..." if len(missing) > 5 else ""))
    if len(train) < config.batch_size:
        raise ConfigError(
            f"training split ({len(train)}) smaller than one contrastive "
            f"batch ({config.batch_size})")

    # radiomics vectors are computed once and reused every epoch
    vectors = {s.id: extract_radiomics(s.image, s.bbox, config.bins).values
               for s in train}
    matrix = np.stack([vectors[i] for i in split.train_ids])
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std_safe = np.where(std > 1e-12, std, 1.0)
    standardized = {
        sid: ((vectors[sid] - mean) / std_safe).astype(np.float32)
        for sid in split.train_ids}

    backbone = config.backbone()
    params = model.init_params(backbone, config.seed)
    pixels = _prepare_pixels(train, config.resolution)
    ccfg = config.contrastive()

    curve: list[float] = []
    best, bad = float("inf"), 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_seed = substream_seed(config.seed, "pretrain-epoch", epoch)
        batches = data_mod.make_batches(split.train_ids, config.batch_size,
                                        epoch_seed, drop_partial=True)
        if not batches:
            raise ConfigError("no full contrastive batches; reduce batch_size")
        batch_losses = []
        for batch_ids in batches:
            x = _image_batch(pixels, batch_ids)
            r = Tensor(np.stack([standardized[i] for i in batch_ids]),
                       requires_grad=False)
            with Tape() as tape:
                u, _ = model.forward_image(x, params, backbone)
                v = model.forward_radiomics(r, params)
                loss = losses.combined_loss(losses.BatchEmbeddings(u, v), ccfg)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite contrastive loss at epoch {epoch}, batch {batch_ids}")
            ad.backward(tape, loss)
            ad.sgd_step(params, config.lr)
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        curve.append(epoch_loss)
        logger.info("pretrain epoch %d: loss %.6f", epoch, epoch_loss)
        best, bad = _early_stop_update(best, epoch_loss, bad)
        if bad >= config.patience:
            logger.info("pretrain early stop after epoch %d", epoch)
            break

    ckpt = ckpt_io.from_params("pretrained", config.to_dict(), mean, std_safe, params)
    return TrainResult(checkpoint=ckpt, loss_curve=curve, split=split)


# ---------------------------------------------------------------------------
# supervised fine-tuning
# ---------------------------------------------------------------------------


def finetune(samples: Sequence[Sample], config: TrainConfig,
             pretrained: Optional[ckpt_io.Checkpoint],
             from_scratch: bool = False) -> TrainResult:
    """Phase 2: attach the classifier head and train on cross-entropy.

    Every weight the objective reaches is updated (backbone, image MLP,
    head); the radiomics tower receives no gradient from this loss and is
    carried through unchanged.  ``from_scratch`` trains the baseline with a
    fresh seed-matched initialisation instead of a pretrained checkpoint.
    """
    if from_scratch:
        if pretrained is not None:
            raise ConfigError("--from-scratch does not take an input checkpoint")
        backbone = config.backbone()
        params = model.init_params(backbone, config.seed)
        mean = np.zeros(N_FEATURES)
        std = np.ones(N_FEATURES)
    else:
        if pretrained is None:
            raise ContractError("fine-tuning requires a pretrained checkpoint")
        if pretrained.phase != "pretrained":
            raise ContractError(
                f"expected a 'pretrained' checkpoint, got {pretrained.phase!r} "
                "(use --from-scratch for baseline runs)")
        # the checkpoint owns the split identity and input geometry
        inherited = TrainConfig.from_dict(pretrained.config)
        config = replace(config, seed=inherited.seed,
                         resolution=inherited.resolution, bins=inherited.bins)
        backbone = config.backbone()
        params = pretrained.params()
        mean = np.asarray(pretrained.radiomics_mean)
        std = np.asarray(pretrained.radiomics_std)
    model.attach_head(params, backbone)

    split = data_mod.split_dataset(samples, config.seed)
    by_id = {s.id: s for s in samples}
    train = [by_id[i] for i in split.train_ids]
    labels = {s.id: s.label for s in train}
    pixels = _prepare_pixels(train, config.resolution)
    trainable = model.image_tower_param_names(params)

    curve: list[float] = []
    best, bad = float("inf"), 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_seed = substream_seed(config.seed, "finetune-epoch", epoch)
        batches = data_mod.make_batches(split.train_ids, config.batch_size,
                                        epoch_seed, drop_partial=False)
        batch_losses, batch_sizes = [], []
        for batch_ids in batches:
            x = _image_batch(pixels, batch_ids)
            y = np.array([labels[i] for i in batch_ids], dtype=np.float32)
            with Tape() as tape:
                u, _ = model.forward_image(x, params, backbone)
                probs = model.classify(u, params)
                loss = losses.finetune_loss(probs, y)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite fine-tune loss at epoch {epoch}, batch {batch_ids}")
            ad.backward(tape, loss)
            ad.sgd_step({n: params[n] for n in trainable}, config.lr)
            batch_losses.append(value)
            batch_sizes.append(len(batch_ids))
        epoch_loss = float(np.average(batch_losses, weights=batch_sizes))
        curve.append(epoch_loss)
        logger.info("finetune epoch %d: loss %.6f", epoch, epoch_loss)
        best, bad = _early_stop_update(best, epoch_loss, bad)
        if bad >= config.patience:
            logger.info("finetune early stop after epoch %d", epoch)
            break

    ckpt = ckpt_io.from_params("finetuned", config.to_dict(), mean, std, params)
    return TrainResult(checkpoint=ckpt, loss_curve=curve, split=split)


# ---------------------------------------------------------------------------
# testing
# ---------------------------------------------------------------------------


def predict_probs(samples: Sequence[Sample], config: TrainConfig,
                  params: dict, backbone: model.BackboneConfig) -> np.ndarray:
    """Positive-class probabilities from images alone, in sample order."""
    pixels = _prepare_pixels(samples, config.resolution)
    ids = [s.id for s in samples]
    probs = []
    for start in range(0, len(ids), config.batch_size):
        chunk = ids[start:start + config.batch_size]
        u, _ = model.forward_image(_image_batch(pixels, chunk), params, backbone)
        probs.append(model.classify(u, params).values)
    return np.concatenate(probs) if probs else np.zeros(0)


def evaluate(samples: Sequence[Sample], ckpt: ckpt_io.Checkpoint) -> metrics.MetricsReport:
    """Phase 3: score the held-out split of the manifest from images only.

    The split is reconstructed from the seed stored in the checkpoint, so
    evaluation pairs with the training run that produced it.
    """
    if ckpt.phase != "finetuned":
        raise ContractError(f"evaluation requires a 'finetuned' checkpoint, "
                            f"got {ckpt.phase!r}")
    config = TrainConfig.from_dict(ckpt.config)
    split = data_mod.split_dataset(samples, config.seed)
    by_id = {s.id: s for s in samples}
    test = [by_id[i] for i in split.test_ids]
    params = ckpt.params()
    probs = predict_probs(test, config, params, config.backbone())
    labels = [s.label for s in test]
    if len(set(labels)) < 2:
        logger.warning("test split contains a single class; AUC undefined")
        auc = None
    else:
        auc = metrics.roc_auc(list(zip(probs.tolist(), labels)))
    return metrics.MetricsReport.from_scores(probs, labels, auc=auc)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def extract_features_csv(samples: Sequence[Sample], bins: int, out_csv: str):
    """One row per sample, 102 schema-ordered columns; returns failures."""
    failures: list[str] = []
    with open(out_csv, "w", encoding="utf-8", newline="") as f:
        f.write("sample_id," + ",".join(FEATURE_NAMES) + "\n")
        for s in samples:
            try:
                vec = extract_radiomics(s.image, s.bbox, bins)
            except Exception as exc:  # collected, reported by the CLI
                failures.append(f"{s.id}: {exc}")
                continue
            f.write(s.id + "," + ",".join("%.17g" % x for x in vec.values) + "\n")
    return failures


def attention_map_images(ckpt: ckpt_io.Checkpoint, image: data_mod.GrayImage):
    """(map_u8, composite_u8): the scaled heat map and original|map panel."""
    config = TrainConfig.from_dict(ckpt.config)
    backbone = config.backbone()
    pixels = image.pixels
    if pixels.shape != (config.resolution, config.resolution):
        pixels = np.clip(np.rint(data_mod.resize_bilinear(
            pixels, config.resolution, config.resolution)), 0, 255).astype(np.uint8)
    amap = model.extract_attention_map(pixels, ckpt.params(), backbone)
    map_u8 = np.clip(np.rint(amap * 255.0), 0, 255).astype(np.uint8)
    composite = np.concatenate([pixels, map_u8], axis=1)
    return map_u8, composite
