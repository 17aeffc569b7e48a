"""Command-line driver: ``antn <subcommand> ...``.

Path arguments that name image or label sets accept either a directory
(every ``*.ppm`` / ``*.pgm`` inside) or a path prefix such as
``out/noisy1_`` (files starting with that prefix). Files are paired across
sets by the last group of digits in their names.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import datagen, metrics
from .errors import ConfigError, DataError
from .io import (
    CheckpointError,
    RunConfig,
    load_checkpoint,
    read_pgm,
    read_ppm,
    save_checkpoint,
    write_pgm,
    write_ppm,
)
from .trainer import METRIC_COLUMNS, Dataset, TrainConfig, train_antn, train_ntn, train_unet_direct

log = logging.getLogger("antn")

_INDEX = re.compile(r"(\d+)(?!.*\d)")


class UsageError(Exception):
    pass


def _index(path: Path) -> str:
    m = _INDEX.search(path.stem)
    return m.group(1) if m else path.stem


def collect(spec: str, ext: str) -> Dict[str, Path]:
    """Files of one set keyed by their numeric index."""
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob(f"*{ext}"))
    else:
        files = sorted(p.parent.glob(f"{p.name}*{ext}"))
    if not files:
        raise DataError(f"no {ext} files match {spec!r}")
    out: Dict[str, Path] = {}
    for f in files:
        key = _index(f)
        if key in out:
            raise DataError(f"{f} and {out[key]} share index {key}")
        out[key] = f
    return out


def _paired(images: Dict[str, Path], labels: Dict[str, Path], what: str) -> List[Path]:
    missing = sorted(set(images) - set(labels))
    if missing:
        raise DataError(f"{what}: no label map for image index {missing[0]}")
    return [labels[k] for k in images]


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _seeded(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is not None:
        cfg.values["seed"] = seed
    return cfg


# -- commands ------------------------------------------------------------------


def cmd_gen_synth(args) -> None:
    cfg = _seeded(_load_config(args.config), args.seed).synth_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, clean) in enumerate(datagen.gen_synthetic(cfg)):
        write_ppm(out / f"img_{i:04d}.ppm", img)
        write_pgm(out / f"clean_{i:04d}.pgm", clean)
        write_pgm(out / f"noisy1_{i:04d}.pgm", datagen.erode_labels(clean, cfg.se_size))
        write_pgm(out / f"noisy2_{i:04d}.pgm", datagen.dilate_labels(clean, cfg.se_size))


def cmd_segment(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protos = datagen.ClassPrototypes(datagen.DEFAULT_PROTOTYPES[: args.classes]) if args.classes <= 4 else None
    if protos is None:
        raise UsageError("--classes above 4 needs more class prototypes than the defaults")
    for key, path in collect(args.input, ".ppm").items():
        img = read_ppm(path)
        if args.method == "kmeans":
            seg = datagen.kmeans_segment(img, args.classes, protos, seed=args.seed)
        else:
            seg = datagen.otsu_segment(img, args.classes, protos)
        write_pgm(out / f"{path.stem}.pgm", seg)


def cmd_normalize(args) -> None:
    ref = read_ppm(args.ref)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in collect(args.input, ".ppm").values():
        write_ppm(out / path.name, datagen.reinhard_normalize(read_ppm(path), ref))


def _read_labels(paths: Sequence[Path], c: int) -> List[np.ndarray]:
    return [read_pgm(p, c) for p in paths]


def _metrics_writer(path: str):
    f = open(path, "w", newline="")
    w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, restval="", extrasaction="ignore")
    w.writeheader()
    return f, w


def _clean_row(net, data: Dataset) -> dict:
    """Cross entropies of a clean net when no transition nets exist."""
    probs = np.stack([net.probabilities(net.forward(img[None]))[0] for img in data.images])
    row = {"ce_noisy1": metrics.cross_entropy_curve(probs, np.stack(data.noisy1))}
    if data.noisy2 is not None:
        row["ce_noisy2"] = metrics.cross_entropy_curve(probs, np.stack(data.noisy2))
    if data.clean is not None:
        row["ce_clean"] = metrics.cross_entropy_curve(probs, np.stack(data.clean))
    return row


def cmd_train(args) -> None:
    if args.method == "antn" and not args.labels2:
        raise UsageError("--method antn needs --labels2 (ANTN requires two noisy label sources)")
    if args.method == "ntn" and args.labels2:
        raise UsageError("--method ntn takes a single label set")
    cfg: TrainConfig = _seeded(_load_config(args.config), args.seed).train_config()
    c = cfg.num_classes
    images = collect(args.data, ".ppm")
    imgs = [read_ppm(p) for p in images.values()]
    y1 = _read_labels(_paired(images, collect(args.labels1, ".pgm"), "--labels1"), c)
    y2 = _read_labels(_paired(images, collect(args.labels2, ".pgm"), "--labels2"), c) if args.labels2 else None
    ref = _read_labels(_paired(images, collect(args.clean_ref, ".pgm"), "--clean-ref"), c) if args.clean_ref else None
    data = Dataset(imgs, y1, y2, ref)

    fh, writer = _metrics_writer(args.metrics) if args.metrics else (None, None)
    try:
        if args.method == "antn":
            res = train_antn(data, cfg, on_epoch=writer.writerow if writer else None)
            ckpt = res.checkpoint
        else:

            def on_epoch(epoch, lr, net):
                if writer is None or ((epoch + 1) % cfg.log_every and epoch + 1 != last):
                    return
                row = {"epoch": epoch + 1, "phase": "direct" if epoch < cfg.epochs_direct else "ntn", "lr": lr}
                row.update(_clean_row(net, data))
                writer.writerow(row)

            if args.method == "unet":
                sets = [y1] if y2 is None else [y1, y2]
                last = cfg.epochs_direct if len(sets) == 1 else cfg.epochs_init_clean
                ckpt = train_unet_direct(imgs, sets, cfg, on_epoch=on_epoch)
            else:
                last = cfg.epochs_direct + cfg.epochs_ntn
                ckpt = train_ntn(imgs, y1, cfg, on_epoch=on_epoch)
    finally:
        if fh:
            fh.close()
    save_checkpoint(args.out, ckpt)


def cmd_predict(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = ckpt.clean
    for path in collect(args.input, ".ppm").values():
        probs = net.probabilities(net.forward(read_ppm(path)[None]))[0]
        write_pgm(out / f"{path.stem}.pgm", probs.argmax(axis=-1))
        if args.probs:
            np.save(out / f"{path.stem}.npy", probs)


def _write_rows(rows: List[dict], header: Sequence[str], out: Optional[str]) -> None:
    f = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(f, fieldnames=list(header))
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if out:
            f.close()


def cmd_eval(args) -> None:
    preds = collect(args.pred, ".pgm")
    truth = collect(args.truth, ".pgm")
    rows, all_p, all_t = [], [], []
    for key, path in preds.items():
        if key not in truth:
            raise DataError(f"no ground truth for prediction index {key}")
        p, t = read_pgm(path), read_pgm(truth[key])
        row = {"name": path.stem, "accuracy": metrics.pixel_accuracy(p, t), "cross_entropy": ""}
        npy = path.with_suffix(".npy")
        if npy.exists():
            row["cross_entropy"] = metrics.cross_entropy_curve(np.load(npy), t)
        rows.append(row)
        all_p.append(p.ravel())
        all_t.append(t.ravel())
    ces = [r["cross_entropy"] for r in rows if r["cross_entropy"] != ""]
    rows.append(
        {
            "name": "ALL",
            "accuracy": metrics.pixel_accuracy(np.concatenate(all_p), np.concatenate(all_t)),
            "cross_entropy": float(np.mean(ces)) if ces else "",
        }
    )
    _write_rows(rows, ("name", "accuracy", "cross_entropy"), args.csv)


def cmd_eval_unsup(args) -> None:
    preds = collect(args.pred, ".pgm")
    images = collect(args.images, ".ppm")
    rows = []
    for key, path in preds.items():
        if key not in images:
            raise DataError(f"no image for prediction index {key}")
        try:
            score = metrics.uniformity_disparity(read_ppm(images[key]), read_pgm(path))
        except DataError:
            score = float("nan")
        rows.append({"name": path.stem, "uniformity_disparity": score})
    finite = [r["uniformity_disparity"] for r in rows if np.isfinite(r["uniformity_disparity"])]
    rows.append({"name": "MEAN", "uniformity_disparity": float(np.mean(finite)) if finite else float("nan")})
    _write_rows(rows, ("name", "uniformity_disparity"), args.csv)


def _write_matrix(prefix: str, name: str, mat: np.ndarray, cell: int) -> None:
    with open(f"{prefix}{name}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true"] + [f"noisy_{k}" for k in range(mat.shape[1])])
        for y, row in enumerate(mat):
            w.writerow([y] + [repr(float(v)) for v in row])
    heat = np.kron(metrics.transition_heatmap(mat), np.ones((cell, cell), dtype=np.uint8))
    write_pgm(f"{prefix}{name}.pgm", heat)


def cmd_transitions(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    c = ckpt.spec.num_classes
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    images = collect(args.data, ".ppm")
    imgs = [read_ppm(p) for p in images.values()]
    labels = {}
    for s, spec in ((1, args.labels1), (2, args.labels2)):
        if spec:
            labels[s] = _read_labels(_paired(images, collect(spec, ".pgm"), f"--labels{s}"), c)
    wrote = False
    for s in (1, 2):
        net = ckpt.nets.get(f"trans{s}")
        if net is None:
            continue
        if ckpt.readout_mode == "uniform-remainder" and s not in labels:
            raise UsageError(f"uniform-remainder checkpoints need --labels{s} to rebuild rows")
        mat = metrics.average_transition(net, imgs, labels.get(s))
        _write_matrix(args.out, f"antn{s}", mat, args.cell)
        wrote = True
    if "ntn" in ckpt.nets:
        _write_matrix(args.out, "ntn", ckpt.nets["ntn"].matrix, args.cell)
        wrote = True
    if args.clean_ref:
        ref = _read_labels(_paired(images, collect(args.clean_ref, ".pgm"), "--clean-ref"), c)
        for s, ys in labels.items():
            mat, _ = metrics.expected_transition(ref, ys, c)
            _write_matrix(args.out, f"expected{s}", mat, args.cell)
            wrote = True
    if not wrote:
        raise UsageError("checkpoint holds no transition model; pass --clean-ref and labels for expected matrices")


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antn", description="Noise-tolerant segmentation from multiple noisy label sets")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", help="generate synthetic images with erosion/dilation noisy labels")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("segment", help="classical segmentation (K-Means or Otsu)")
    s.add_argument("--method", choices=("kmeans", "otsu"), required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("normalize", help="Reinhard stain normalisation towards a reference image")
    s.add_argument("--ref", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("train", help="train u-net, NTN or ANTN")
    s.add_argument("--method", choices=("unet", "ntn", "antn"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels1", required=True)
    s.add_argument("--labels2")
    s.add_argument("--clean-ref")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="argmax label maps from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probs", action="store_true", help="also dump per-pixel probabilities as .npy")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="accuracy and cross entropy against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("eval-unsup", help="uniformity/disparity score of segmentations")
    s.add_argument("--pred", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval_unsup)

    s = sub.add_parser("transitions", help="average transition matrices as CSV and PGM heatmaps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels1")
    s.add_argument("--labels2")
    s.add_argument("--clean-ref")
    s.add_argument("--out", required=True, help="output path prefix")
    s.add_argument("--cell", type=int, default=16, help="heatmap pixels per matrix entry")
    s.set_defaults(func=cmd_transitions)
    return p


def _thread_limit():
    n = os.environ.get("ANTN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = _thread_limit()
    try:
        args.func(args)
    except UsageError as e:
        print(f"antn {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, CheckpointError, OSError) as e:
        print(f"antn {args.command}: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
