"""Command-line entry point: ``cardionet extract|preprocess|train|eval|report``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from importlib import resources

import numpy as np

from . import checkpoint as ckpt
from .dataset import (REFERENCE_POSITIVE_COUNT, BlobStore, DatasetSplit, class_counts,
                      count_positives, parse_index_csv, read_manifest, select_cases, split,
                      write_manifest)
from .errors import CardioNetError, ConfigError, MissingDataError
from .imaging import (GrayImage, center_crop, decode_image, histogram_equalize, read_image,
                      resize_bilinear, to_tensor)
from .metrics import MetricsReport, confusion_from_scores
from .report import (comparison_groups, parse_comparison, render_comparison, render_epoch_curve,
                     render_heatmap_overlay, render_metric_bars)
from .synthetic import argmax_in_disc, make_synthetic
from .training import TrainConfig, format_epoch_log, parse_epoch_log, train
from .unet import UNetConfig, build_unet

log = logging.getLogger("cardionet")

PIPELINE_VERSION = "decode-equalize-bilinear-v1"

RUN_KEYS = {
    "index_csv": None, "image_dir": "", "work_dir": "run", "manifest": None,
    "rule": "exclusive", "positive_label": "Cardiomegaly", "negative_label": "No Finding",
    "ratio": 0.8, "crop": None, "synthetic": False, "synthetic_images": 40,
    "init_checkpoint": None,
}
SYNTHETIC_PRESET = {
    "depth": 3, "base_width": 8, "input_size": 64, "batch_size": 8, "head": "max",
    "early_stop": False, "epochs": 20,
}
FIXTURES = {
    "@reference-epochs": "reference_epoch_log.csv",
    "@reference-comparison": "reference_comparison.csv",
}


def default_run_config():
    cfg = {}
    cfg.update(UNetConfig().to_dict())
    cfg.update(TrainConfig().to_dict())
    cfg.update(RUN_KEYS)
    return cfg


def resolve_config(file_values=None, overrides=None, synthetic=False):
    """defaults < synthetic preset < config file < command-line flags. Unknown keys are rejected."""
    cfg = default_run_config()
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(merged) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if synthetic or merged.get("synthetic"):
        cfg.update(SYNTHETIC_PRESET)
        cfg["synthetic"] = True
    cfg.update(merged)
    # validate eagerly
    unet_config(cfg)
    train_config(cfg)
    return cfg


def unet_config(cfg):
    return UNetConfig(**{f.name: cfg[f.name] for f in fields(UNetConfig)})


def train_config(cfg):
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})


def load_config_file(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
        raise ConfigError(f"{path}: config must be a flat key-value object")
    return doc


def fixture_path(name):
    return str(resources.files("cardionet.fixtures").joinpath(FIXTURES[name]))


def _resolve_input(path):
    return fixture_path(path) if path in FIXTURES else path


def _echo_config(cfg, work_dir):
    os.makedirs(work_dir, exist_ok=True)
    with open(os.path.join(work_dir, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


# ----------------------------------------------------------------- commands

def cmd_extract(cfg, out_manifest=None, out=None):
    out = out or sys.stdout
    if not cfg["index_csv"]:
        raise ConfigError("extract needs --index-csv (or index_csv in the config)")
    records = parse_index_csv(cfg["index_csv"], cfg["image_dir"])
    chosen = select_cases(records, cfg["positive_label"], cfg["negative_label"], cfg["rule"], cfg["seed"])
    parts = split(chosen, cfg["ratio"], cfg["seed"])
    path = out_manifest or os.path.join(cfg["work_dir"], "manifest.csv")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_manifest(path, parts)
    counts = class_counts(chosen)
    n_pos = count_positives(records, cfg["positive_label"], cfg["rule"])
    print(f"index records: {len(records)}", file=out)
    print(f"rule: {cfg['rule']}", file=out)
    print(f"positive: {counts['positive']}", file=out)
    print(f"negative: {counts['negative']}", file=out)
    print(f"train: {len(parts.train)} val: {len(parts.val)}", file=out)
    if n_pos != REFERENCE_POSITIVE_COUNT:
        print(f"note: {n_pos} positives under rule '{cfg['rule']}'; the reference extraction "
              f"reports {REFERENCE_POSITIVE_COUNT}", file=out)
    else:
        print(f"positive count matches the reference {REFERENCE_POSITIVE_COUNT}", file=out)
    print(f"manifest: {path}", file=out)
    return {"positive": counts["positive"], "negative": counts["negative"],
            "reference_positive": REFERENCE_POSITIVE_COUNT, "manifest": path}


def _preprocess_image(img: GrayImage, size, crop=None):
    img = resize_bilinear(histogram_equalize(img), size, size)
    if crop and crop != size:
        img = center_crop(img, crop, crop)
    return img


def cmd_preprocess(cfg, manifest=None, out_dir=None, size=None, out=None):
    """Returns ``(written, skipped, failures)``; failures are ``(image_id, message)``."""
    out = out or sys.stdout
    manifest = manifest or cfg["manifest"] or os.path.join(cfg["work_dir"], "manifest.csv")
    out_dir = out_dir or os.path.join(cfg["work_dir"], "blobs")
    size = size or cfg["input_size"]
    os.makedirs(out_dir, exist_ok=True)
    parts = read_manifest(manifest)
    written = skipped = 0
    failures = []
    updated = {"train": [], "val": []}
    for part, recs in parts.items():
        for r in recs:
            blob = os.path.join(out_dir, os.path.splitext(r.image_id)[0] + ".cxrn")
            try:
                with open(r.path, "rb") as fh:
                    data = fh.read()
                digest = _sha256(data)
                meta = ckpt.read_blob_meta(blob) if os.path.exists(blob) else None
                stamp = {"source_sha256": digest, "size": size, "crop": cfg["crop"],
                         "pipeline": PIPELINE_VERSION, "image_id": r.image_id}
                if meta == stamp:
                    skipped += 1
                else:
                    img = _preprocess_image(decode_image(data), size, cfg["crop"])
                    ckpt.write_tensor_blob(blob, {"image": to_tensor(img)}, stamp)
                    written += 1
                updated[part].append(_with_blob(r, blob))
            except (OSError, CardioNetError) as exc:
                failures.append((r.image_id, str(exc)))
                updated[part].append(r)
    write_manifest(manifest, DatasetSplit(updated["train"], updated["val"], cfg["seed"], cfg["ratio"]))
    print(f"written: {written} skipped: {skipped} failed: {len(failures)}", file=out)
    for image_id, msg in failures:
        print(f"failed: {image_id}: {msg}", file=sys.stderr)
    return written, skipped, failures


def _with_blob(record, blob):
    from dataclasses import replace
    return replace(record, blob_path=blob)


def _load_data(cfg):
    """``(split, tensors, discs)`` for synthetic mode or from the manifest."""
    if cfg["synthetic"]:
        return make_synthetic(cfg["synthetic_images"], cfg["input_size"], cfg["seed"], cfg["ratio"])
    manifest = cfg["manifest"] or os.path.join(cfg["work_dir"], "manifest.csv")
    parts = read_manifest(manifest)
    for r in parts["train"] + parts["val"]:
        if not r.blob_path or not os.path.exists(r.blob_path):
            raise MissingDataError(r.image_id)
    data = DatasetSplit(parts["train"], parts["val"], cfg["seed"], cfg["ratio"])
    return data, BlobStore(parts["train"] + parts["val"]), {}


def _score(model, records, tensors, threshold, batch_size=32):
    from .dataset import batches
    scores, truths, maps = [], [], []
    for x, y, _ in batches(records, tensors, batch_size, shuffle=False):
        pred = model.forward(x, "eval", threshold)
        scores.append(pred.score)
        truths.append(y > 0.5)
        maps.append(pred.map)
    return np.concatenate(scores), np.concatenate(truths), np.concatenate(maps)


def cmd_train(cfg, out=None):
    out = out or sys.stdout
    work = cfg["work_dir"]
    _echo_config(cfg, work)
    data, tensors, discs = _load_data(cfg)
    if cfg["init_checkpoint"]:
        model = ckpt.load_checkpoint(cfg["init_checkpoint"])
        if model.config != unet_config(cfg):
            raise ConfigError("init_checkpoint architecture differs from the configured one")
    else:
        model = build_unet(unet_config(cfg), cfg["seed"])
    tcfg = train_config(cfg)
    model, logs = train(model, data, tensors, tcfg)
    ckpt.save_checkpoint(model, os.path.join(work, "model.cxrn"),
                         meta={"epochs_logged": len(logs), "seed": cfg["seed"]})
    with open(os.path.join(work, "epoch_log.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(format_epoch_log(logs))
    scores, truths, maps = _score(model, data.val, tensors, tcfg.threshold, tcfg.batch_size)
    report = MetricsReport.from_counts(confusion_from_scores(scores, truths, tcfg.threshold), tcfg.threshold)
    final = logs[-1]
    print(f"epochs logged: {len(logs)}", file=out)
    print(f"final train accuracy: {final.train_accuracy:.1f}%", file=out)
    print(f"final val accuracy: {final.val_accuracy:.1f}%", file=out)
    print("val metrics: " + json.dumps(report.to_dict(), sort_keys=True), file=out)
    result = {"logs": logs, "report": report, "model": model}
    if discs:
        pos = [r for r in data.train if r.is_positive]
        _, _, pmaps = _score(model, pos, tensors, tcfg.threshold, tcfg.batch_size)
        hits = [argmax_in_disc(pmaps[i], discs[r.image_id]) for i, r in enumerate(pos)]
        result["localization"] = float(np.mean(hits))
        print(f"localization hit rate (train positives): {100 * result['localization']:.1f}%", file=out)
    return result


def cmd_eval(cfg, checkpoint=None, subset="val", threshold=None, overlays=None, out_json=None,
             out=None):
    out = out or sys.stdout
    checkpoint = checkpoint or os.path.join(cfg["work_dir"], "model.cxrn")
    threshold = cfg["threshold"] if threshold is None else threshold
    model = ckpt.load_checkpoint(checkpoint)
    data, tensors, _ = _load_data(cfg)
    records = {"val": data.val, "train": data.train, "all": data.train + data.val}[subset]
    scores, truths, maps = _score(model, records, tensors, threshold)
    report = MetricsReport.from_counts(confusion_from_scores(scores, truths, threshold), threshold)
    doc = report.to_dict()
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    out.write(text)
    if out_json:
        with open(out_json, "w", encoding="utf-8") as fh:
            fh.write(text)
    if overlays:
        os.makedirs(overlays, exist_ok=True)
        for i, r in enumerate(records):
            if cfg["synthetic"]:
                base = GrayImage(np.clip(np.floor(tensors[r.image_id][0, 0] * 255 + 0.5), 0, 255))
            else:
                base = _preprocess_image(read_image(r.path), model.config.input_size, None)
            name = os.path.splitext(os.path.basename(r.image_id))[0] + "_overlay.png"
            with open(os.path.join(overlays, name), "wb") as fh:
                fh.write(render_heatmap_overlay(base, maps[i]))
    return report


def cmd_report(epoch_log, comparison=None, metrics=None, out_dir="report", out=None):
    out = out or sys.stdout
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    src = _resolve_input(epoch_log)
    with open(src, encoding="utf-8") as fh:
        logs = parse_epoch_log(fh.read(), src)
    emit("epoch_log.csv", render_epoch_curve(logs, "csv"))
    emit("epoch_curve.svg", render_epoch_curve(logs, "svg"))
    if metrics:
        with open(metrics, encoding="utf-8") as fh:
            m = json.load(fh)
        vals = {k: 100 * m[k] for k in ("sensitivity", "specificity", "accuracy") if m.get(k) is not None}
        emit("metric_bars.svg", render_metric_bars([("this run", vals)], "Results"))
    if comparison:
        src = _resolve_input(comparison)
        with open(src, encoding="utf-8") as fh:
            rows = parse_comparison(fh.read(), src)
        emit("comparison.csv", render_comparison(rows, "csv"))
        emit("comparison.txt", render_comparison(rows, "text"))
        emit("comparison_bars.svg", render_metric_bars(comparison_groups(rows), "Comparative performance"))
    for p in written:
        print(p, file=out)
    return written


# --------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="cardionet", description=__doc__)
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--work-dir")
    p.add_argument("--synthetic", action="store_true", help="use the built-in disc/noise dataset")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="select labeled cases from an index CSV and write a manifest")
    e.add_argument("--index-csv")
    e.add_argument("--image-dir")
    e.add_argument("--rule", choices=("exclusive", "any"))
    e.add_argument("--ratio", type=float)
    e.add_argument("--out", help="manifest path (default WORK_DIR/manifest.csv)")

    pp = sub.add_parser("preprocess", help="equalize, resize and store image tensors")
    pp.add_argument("--manifest")
    pp.add_argument("--out-dir")
    pp.add_argument("--size", type=int)

    t = sub.add_parser("train", help="train the U-Net and write checkpoint + epoch log")
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--patience", type=int)
    t.add_argument("--no-early-stop", dest="early_stop", action="store_const", const=False)
    t.add_argument("--log-initial", dest="log_initial", action="store_const", const=True)
    t.add_argument("--init-checkpoint")

    ev = sub.add_parser("eval", help="score a checkpoint and emit metrics JSON")
    ev.add_argument("--checkpoint")
    ev.add_argument("--manifest")
    ev.add_argument("--subset", choices=("val", "train", "all"), default="val")
    ev.add_argument("--threshold", type=float)
    ev.add_argument("--overlays", help="directory for heatmap overlay PNGs")
    ev.add_argument("--out", help="also write the JSON here")

    r = sub.add_parser("report", help="render epoch curve, metric bars and comparison table")
    r.add_argument("--epoch-log", required=True, help="epoch-log CSV, or @reference-epochs for the bundled fixture")
    r.add_argument("--comparison", help="comparison CSV, or @reference-comparison for the bundled fixture")
    r.add_argument("--metrics", help="metrics JSON written by eval")
    r.add_argument("--out-dir", default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = {"seed": args.seed, "work_dir": args.work_dir}
        for key in ("index_csv", "image_dir", "rule", "ratio", "manifest", "epochs", "batch_size",
                    "lr", "optimizer", "patience", "early_stop", "log_initial", "init_checkpoint"):
            if hasattr(args, key):
                overrides[key] = getattr(args, key)
        cfg = resolve_config(load_config_file(args.config), overrides, args.synthetic)
        if args.command == "extract":
            cmd_extract(cfg, args.out)
        elif args.command == "preprocess":
            _, _, failures = cmd_preprocess(cfg, args.manifest, args.out_dir, args.size)
            if failures:
                print(f"error: {len(failures)} image(s) failed to preprocess", file=sys.stderr)
                return 1
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.subset, args.threshold, args.overlays, args.out)
            if report.undefined:
                print(f"warning: undefined metrics: {', '.join(report.undefined)}", file=sys.stderr)
                return 1
        elif args.command == "report":
            cmd_report(args.epoch_log, args.comparison, args.metrics,
                       args.out_dir or os.path.join(cfg["work_dir"], "report"))
        return 0
    except (CardioNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
