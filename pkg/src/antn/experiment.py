"""Desk-scale synthetic study: u-net baselines, NTN and ANTN on one dataset."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np

from .datagen import SynthConfig, dilate_labels, erode_labels, gen_synthetic
from .metrics import (
    average_transition,
    expected_transition,
    frobenius_distance,
    label_agreement_ratio,
    pixel_accuracy,
)
from .trainer import Dataset, TrainConfig, train_antn, train_ntn, train_unet_direct

log = logging.getLogger(__name__)


def desk_synth_config(seed: int = 0) -> SynthConfig:
    return SynthConfig(image_size=64, images_total=55, radius_range=(8, 16), se_size=5, seed=seed)


def desk_train_config(seed: int = 0, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        num_classes=4,
        base_filters=8,
        epochs_init_clean=30,
        epochs_transition=60,
        epochs_alternate=60,
        alternate_interval=5,
        epochs_direct=60,
        epochs_ntn=45,
        lr_main=1e-3,
        lr_final=1e-4,
        lr_drop_epoch=135,
        optimizer="adam",
        transition_diag_logit=2.0,
        seed=seed,
    )
    return replace(cfg, **overrides)


def make_noisy_dataset(synth: SynthConfig, n_train: int = 35):
    """Split generated images into train/test and derive erosion/dilation labels."""
    data = gen_synthetic(synth)
    images = [d[0] for d in data]
    clean = [d[1] for d in data]
    eroded = [erode_labels(c, synth.se_size) for c in clean]
    dilated = [dilate_labels(c, synth.se_size) for c in clean]
    train = Dataset(images[:n_train], eroded[:n_train], dilated[:n_train], clean[:n_train])
    test = Dataset(images[n_train:], eroded[n_train:], dilated[n_train:], clean[n_train:])
    return train, test


def heldout_accuracy(net, dataset: Dataset) -> float:
    preds, truth = [], []
    for img, y in zip(dataset.images, dataset.clean):
        preds.append(net.probabilities(net.forward(img[None]))[0].argmax(axis=-1))
        truth.append(y)
    return pixel_accuracy(np.stack(preds), np.stack(truth))


@dataclass
class DeskResult:
    accuracy: Dict[str, float] = field(default_factory=dict)
    transition_distance: Dict[str, float] = field(default_factory=dict)
    ratio_estimated: List[float] = field(default_factory=list)
    ratio_actual: List[float] = field(default_factory=list)
    expected: List[np.ndarray] = field(default_factory=list)
    antn_average: List[np.ndarray] = field(default_factory=list)
    ntn_matrix: List[np.ndarray] = field(default_factory=list)
    log: List[dict] = field(default_factory=list)
    seconds: float = 0.0


def run_desk_experiment(cfg: TrainConfig | None = None, synth: SynthConfig | None = None) -> DeskResult:
    """Train u-net^1/^2/^3, NTN^1/^2 and ANTN on the same data and seed."""
    t0 = time.time()
    cfg = cfg or desk_train_config()
    synth = synth or desk_synth_config(cfg.seed)
    train, test = make_noisy_dataset(synth)
    res = DeskResult()
    sources = [train.noisy1, train.noisy2]

    unets = []
    for s, labels in enumerate(sources, start=1):
        net = train_unet_direct(train.images, [labels], cfg).clean
        unets.append(net)
        res.accuracy[f"unet{s}"] = heldout_accuracy(net, test)
        log.info("u-net%d accuracy %.4f", s, res.accuracy[f"unet{s}"])
    mix = train_unet_direct(train.images, sources, cfg, epochs=cfg.epochs_init_clean).clean
    res.accuracy["unet3"] = heldout_accuracy(mix, test)
    log.info("u-net3 accuracy %.4f", res.accuracy["unet3"])

    ntn_q = []
    for s, labels in enumerate(sources, start=1):
        ck = train_ntn(train.images, labels, cfg, base=unets[s - 1])
        res.accuracy[f"ntn{s}"] = heldout_accuracy(ck.clean, test)
        ntn_q.append(ck.nets["ntn"].matrix)
        log.info("NTN%d accuracy %.4f", s, res.accuracy[f"ntn{s}"])

    out = train_antn(train, cfg, init_clean=mix)
    res.log = out.log
    res.accuracy["antn"] = heldout_accuracy(out.checkpoint.clean, test)
    log.info("ANTN accuracy %.4f", res.accuracy["antn"])

    for s, labels in enumerate(sources, start=1):
        exp, rows = expected_transition(train.clean, labels, cfg.num_classes)
        avg = average_transition(out.checkpoint.nets[f"trans{s}"], train.images, labels)
        res.expected.append(exp)
        res.antn_average.append(avg)
        res.ntn_matrix.append(ntn_q[s - 1])
        res.transition_distance[f"antn{s}"] = frobenius_distance(avg, exp, rows)
        res.transition_distance[f"ntn{s}"] = frobenius_distance(ntn_q[s - 1], exp, rows)
        actual = label_agreement_ratio(np.stack(train.clean), np.stack(labels))
        res.ratio_actual.append(actual)
        res.ratio_estimated.append(out.log[-1][f"R{s}"] if out.log else float("nan"))
    res.seconds = time.time() - t0
    return res
