"""Dataset generation, training, and evaluation drivers.

Everything here is deterministic given the run config: per-volume seeds
derive from the config seed, epoch orderings from (seed, epoch), and all
artifacts (manifest, checkpoints, loss log, eval report) embed the canonical
config and contain no timestamps, so reruns are byte-identical.

A training step draws one (volume, slice) pair, materializes the
input-span window of slices around it, builds 3-channel images for the
fusion window, and optimizes the center slice's detection loss.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_to_dict
from .detector import FusionMode, assign_targets, detection_loss
from .errors import (
    CheckpointMismatchError,
    TrainingDivergedError,
    ValidationError,
)
from .metrics import LesionBox, evaluate_detections
from .model import LesionDetector
from .optim import build_optimizer
from .params import read_checkpoint, write_checkpoint
from .synthdata import (
    generate_volume,
    read_boxes_jsonl,
    read_volume,
    write_boxes_jsonl,
    write_volume,
)
from .tensor import Tape

SPLITS = ("train", "val", "test")

__all__ = ["SPLITS", "get_version", "generate_dataset", "load_split",
           "build_model", "train", "evaluate_checkpoint", "evaluate_model"]


def get_version() -> str:
    """Package version, with a git-describe suffix when available."""
    base = f"vdformer-{__version__}"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}+g{out.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return base


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _volume_seed(base_seed: int, split_index: int, volume_index: int) -> int:
    ss = np.random.SeedSequence([base_seed, split_index, volume_index])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def generate_dataset(config: RunConfig, out_dir) -> dict:
    """Write train/val/test volumes, per-split GT JSONL, and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {
        "train": config.data.num_train,
        "val": config.data.num_val,
        "test": config.data.num_test,
    }
    manifest = {
        "config": config_to_dict(config),
        "version": get_version(),
        "splits": {},
        "seeds": {},
        "checksums": {},
    }
    for split_index, split in enumerate(SPLITS):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        ids = []
        gt_records = []
        for i in range(counts[split]):
            vid = f"{split}_{i:04d}"
            seed = _volume_seed(config.seed, split_index, i)
            vol = generate_volume(seed, config.data.volume, volume_id=vid)
            path = split_dir / f"{vid}.vol"
            write_volume(path, vid, vol.voxels)
            manifest["seeds"][vid] = seed
            manifest["checksums"][f"{split}/{vid}.vol"] = _sha256(path)
            ids.append(vid)
            for z, x1, y1, x2, y2 in vol.gt_boxes:
                gt_records.append({
                    "volume_id": vid, "slice": int(z),
                    "x1": float(x1), "y1": float(y1),
                    "x2": float(x2), "y2": float(y2),
                })
        gt_path = split_dir / "gt.jsonl"
        write_boxes_jsonl(gt_path, gt_records)
        manifest["checksums"][f"{split}/gt.jsonl"] = _sha256(gt_path)
        manifest["splits"][split] = ids
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_split(data_dir, split: str):
    """Returns (ordered volume ids, {id: voxels}, {id: [LesionBox]})."""
    data = Path(data_dir)
    manifest_path = data / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json under {data}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if split not in manifest.get("splits", {}):
        raise ValidationError(f"split {split!r} not present in {manifest_path}")
    ids = manifest["splits"][split]
    volumes = {}
    for vid in ids:
        got_id, voxels = read_volume(data / split / f"{vid}.vol")
        if got_id != vid:
            raise ValidationError(
                f"volume file {split}/{vid}.vol holds id {got_id!r}"
            )
        volumes[vid] = voxels.astype(np.float64)
    gts: dict = {vid: [] for vid in ids}
    for rec in read_boxes_jsonl(data / split / "gt.jsonl"):
        gts[rec["volume_id"]].append(
            LesionBox(int(rec["slice"]), rec["x1"], rec["y1"],
                      rec["x2"], rec["y2"], 1.0)
        )
    return ids, volumes, gts


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def build_model(config: RunConfig) -> LesionDetector:
    vol = config.data.volume
    return LesionDetector(
        image_hw=(vol.height, vol.width),
        fusion=config.fusion_mode,
        span=config.slice_span,
        backbone_cfg=config.backbone,
        fusion_attention=config.fusion_attention.build(256),
        seed=config.seed,
        score_threshold=config.score_threshold,
    )


def _epoch_order(config: RunConfig, epoch: int, index: list) -> list:
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0x3E0C, epoch])
    )
    perm = rng.permutation(len(index))
    steps = config.steps_per_epoch if config.steps_per_epoch > 0 else len(index)
    return [index[i] for i in perm[:steps]]


def train(config: RunConfig, data_dir, out_dir, resume=None,
          progress=None) -> Path:
    """Train per config; returns the path of the final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids, volumes, gts = load_split(data_dir, "train")
    gt_by_slice: dict = {}
    for vid in ids:
        per = {}
        for b in gts[vid]:
            per.setdefault(b.slice_index, []).append(b)
        gt_by_slice[vid] = per

    model = build_model(config)
    optimizer = build_optimizer(
        config.optimizer.name, model.store,
        lr=config.optimizer.learning_rate,
        weight_decay=config.optimizer.weight_decay,
        momentum=config.optimizer.momentum,
    )

    start_epoch = 0
    global_step = 0
    if resume is not None:
        arrays, _cfg, meta = read_checkpoint(resume)
        model_arrays = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
        optim_arrays = {k: v for k, v in arrays.items() if k.startswith("optim.")}
        model.store.load_arrays(model_arrays)
        optimizer.load_state_arrays(optim_arrays, int(meta["step_count"]))
        start_epoch = int(meta["epoch_completed"])
        global_step = int(meta["global_step"])

    index = [
        (vid, t) for vid in ids for t in range(volumes[vid].shape[0])
    ]
    config_dict = config_to_dict(config)
    log_path = out / "train_log.jsonl"
    log_mode = "a" if resume is not None else "w"
    final_path = out / "checkpoint_final.ckpt"

    with open(log_path, log_mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, config.epochs):
            for vid, t in _epoch_order(config, epoch, index):
                volume = volumes[vid]
                boxes = gt_by_slice[vid].get(t, [])
                targets = assign_targets(boxes, model.image_hw)
                model.store.zero_grad()
                with Tape() as tape:
                    preds = model.forward_slice(volume, t)
                    total, cls_loss, reg_loss = detection_loss(preds, targets)
                if not np.isfinite(total.item()):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {global_step} "
                        f"(volume {vid}, slice {t}): "
                        f"cls={cls_loss.item()!r} reg={reg_loss.item()!r}"
                    )
                tape.backward(total)
                optimizer.step()
                record = {
                    "step": global_step,
                    "epoch": epoch,
                    "volume_id": vid,
                    "slice": t,
                    "loss": total.item(),
                    "cls": cls_loss.item(),
                    "reg": reg_loss.item(),
                }
                log.write(json.dumps(record) + "\n")
                global_step += 1
                if progress is not None:
                    progress(record)
            meta = {
                "epoch_completed": epoch + 1,
                "global_step": global_step,
                "step_count": optimizer.step_count,
                "version": get_version(),
            }
            arrays = dict(model.store.arrays())
            arrays.update(optimizer.state_arrays())
            epoch_path = out / f"checkpoint_epoch{epoch + 1:03d}.ckpt"
            write_checkpoint(epoch_path, arrays, config=config_dict, meta=meta)
            write_checkpoint(final_path, arrays, config=config_dict, meta=meta)
    return final_path


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def evaluate_model(model: LesionDetector, config: RunConfig, data_dir,
                   split: str, progress=None):
    ids, volumes, gts = load_split(data_dir, split)
    if sum(len(v) for v in gts.values()) == 0:
        from .errors import MetricUndefinedError

        raise MetricUndefinedError(
            f"split {split!r} holds no ground-truth lesions; metrics undefined"
        )
    preds = {}
    detections = []
    for vid in ids:
        boxes = model.detect_volume(volumes[vid])
        preds[vid] = boxes
        for b in boxes:
            detections.append({
                "volume_id": vid, "slice": b.slice_index,
                "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
                "score": b.score,
            })
        if progress is not None:
            progress(vid)
    report = evaluate_detections(preds, gts, num_scans=len(ids))
    report.config = config_to_dict(config)
    report.version = get_version()
    return report, detections


def model_from_checkpoint(checkpoint_path) -> tuple[LesionDetector, RunConfig]:
    from .config import config_from_dict

    arrays, config_dict, _meta = read_checkpoint(checkpoint_path)
    if config_dict is None:
        raise CheckpointMismatchError(
            f"checkpoint {checkpoint_path} embeds no config"
        )
    config = config_from_dict(config_dict)
    model = build_model(config)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    model.store.load_arrays(model_arrays)
    return model, config


def evaluate_checkpoint(checkpoint_path, data_dir, split: str, progress=None):
    model, config = model_from_checkpoint(checkpoint_path)
    return evaluate_model(model, config, data_dir, split, progress=progress)
