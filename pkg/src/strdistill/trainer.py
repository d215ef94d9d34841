"""Optimization loop, teacher-feature caching and ablation presets."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .align import AlignHeads
from .cache import FeatureCache
from .charset import LabelCodec
from .checkpoint import save_checkpoint
from .config import TrainConfig, dump_config
from .data import ManifestDataset, SynthSpec, augment, derive_seed, load_dataset, synth_generate
from .errors import ConfigError, DatasetEmpty, NonFiniteLoss
from .evaluate import load_images, predict_images, word_accuracy
from .losses import TERM_NAMES, LossWeights, loss_recognition, loss_sds
from .student import Recognizer, student_normalize
from .teacher import ClipTeacher, clip_normalize, patch_grid

logger = logging.getLogger(__name__)

TEACHER_BATCH = 32


@dataclass
class Split:
    images: torch.Tensor  # (N, 3, 32, 128) in [0, 1]
    labels: list[str]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_log: Path
    val_acc: list[float] = field(default_factory=list)
    steps: int = 0
    teacher_checksum_before: str | None = None
    teacher_checksum_after: str | None = None
    seconds: float = 0.0

    @property
    def final_val_acc(self) -> float:
        return self.val_acc[-1] if self.val_acc else float("nan")


def codec_for(config: TrainConfig) -> LabelCodec:
    return LabelCodec(max_label_len=config.student.max_label_len)


def prepare_corpus(config: TrainConfig, codec: LabelCodec) -> tuple[ManifestDataset, ManifestDataset | None]:
    if config.data_root:
        train_ds = load_dataset(config.data_root, codec)
    else:
        spec = SynthSpec(count=config.synth_count, seed=config.synth_seed)
        root = Path(config.workdir) / f"synth-{spec.fingerprint()}"
        if not (root / "gt.txt").exists():
            logger.info("rendering %d synthetic samples into %s", spec.count, root)
            synth_generate(spec, root, codec)
        train_ds = load_dataset(root, codec)
    val_ds = load_dataset(config.val_root, codec) if config.val_root else None
    return train_ds, val_ds


def split_corpus(config: TrainConfig, train_ds: ManifestDataset, val_ds: ManifestDataset | None) -> tuple[Split, Split]:
    images = load_images(train_ds)
    labels, ids = train_ds.labels, train_ds.ids
    if val_ds is not None:
        val = Split(load_images(val_ds), val_ds.labels, val_ds.ids)
        train = Split(images, labels, ids)
    else:
        # split depends on the corpus only, so every seed sees the same held-out set
        rng = np.random.default_rng(derive_seed("split", train_ds.fingerprint()))
        order = rng.permutation(len(labels))
        n_val = int(round(config.val_fraction * len(labels)))
        vi, ti = np.sort(order[:n_val]), np.sort(order[n_val:])
        val = Split(images[vi], [labels[i] for i in vi], [ids[i] for i in vi])
        train = Split(images[ti], [labels[i] for i in ti], [ids[i] for i in ti])
    if len(train) == 0:
        raise DatasetEmpty("training split is empty")
    return train, val


def cache_root(config: TrainConfig, teacher: ClipTeacher, dataset: ManifestDataset) -> Path:
    base = Path(config.teacher.cache_dir) if config.teacher.cache_dir else Path(config.workdir) / "teacher-cache"
    return base / f"{teacher.fingerprint}-{dataset.fingerprint()}"


def fill_cache(cache: FeatureCache, teacher: ClipTeacher, split: Split) -> int:
    """Compute and store teacher features for every sample missing from ``cache``."""
    todo = [i for i, sid in enumerate(split.ids) if sid not in cache]
    for start in range(0, len(todo), TEACHER_BATCH):
        idx = todo[start:start + TEACHER_BATCH]
        feats = teacher.features(clip_normalize(split.images[idx]), [split.labels[i] for i in idx])
        for j, i in enumerate(idx):
            cache.write(split.ids[i], feats.sample(j))
    if todo:
        logger.info("cached teacher features for %d samples in %s", len(todo), cache.root)
    return len(todo)


def build_models(config: TrainConfig, codec: LabelCodec) -> tuple[Recognizer, AlignHeads]:
    torch.manual_seed(config.seed)
    student = Recognizer(config.student, codec)
    # heads draw from their own stream so student init never depends on them
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "align"))
        rows, cols = patch_grid(config.teacher.variant, config.teacher.image_size)
        heads = AlignHeads.for_models(config.student, img_tokens=rows * cols + 1)
    return student, heads


def _augment_batch(images: torch.Tensor, ids: Sequence[str], seed: int, epoch: int) -> torch.Tensor:
    out = []
    for img, sid in zip(images, ids):
        arr = img.permute(1, 2, 0).numpy()
        out.append(torch.from_numpy(augment(arr, derive_seed(seed, sid, epoch))).permute(2, 0, 1))
    return torch.stack(out)


def _lr_at(step: int, total: int, config: TrainConfig) -> float:
    warmup = max(1, int(math.ceil(config.warmup_frac * total)))
    return config.lr * min(1.0, (step + 1) / warmup)


def train(config: TrainConfig, teacher: ClipTeacher | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Train the recognizer with SDS distillation; returns paths and per-epoch val accuracy."""
    t_start = time.time()
    codec = codec_for(config)
    device = torch.device(config.device)
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, ckpt_dir / "config.yaml")
    log_path = Path(log_path) if log_path else ckpt_dir / "metrics.jsonl"

    train_ds, val_ds = prepare_corpus(config, codec)
    train_split, val_split = split_corpus(config, train_ds, val_ds)
    weights: LossWeights = config.loss

    cache = None
    checksum_before = None
    if weights.active:
        if teacher is None:
            teacher = ClipTeacher(config.teacher, codec, device=device)
        checksum_before = teacher.checksum()
        can_cache = config.clean_teacher_input or not config.augment
        if config.use_cache and can_cache:
            cache = FeatureCache(cache_root(config, teacher, train_ds))
            fill_cache(cache, teacher, train_split)
        elif config.use_cache:
            logger.warning("teacher sees augmented images; features are computed live, not cached")

    student, heads = build_models(config, codec)
    student.to(device).train()
    heads.to(device).train()
    params = [*student.parameters(), *heads.parameters()]
    optimizer = torch.optim.Adam(params, lr=config.lr)

    steps_per_epoch = math.ceil(len(train_split) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    order_gen = torch.Generator().manual_seed(config.seed)
    result = TrainResult(checkpoint=ckpt_dir / "final.safetensors", metrics_log=log_path)

    step = 0
    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            if step >= total_steps:
                break
            perm = torch.randperm(len(train_split), generator=order_gen)
            for b in range(steps_per_epoch):
                if step >= total_steps:
                    break
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                ids = [train_split.ids[i] for i in idx]
                labels = [train_split.labels[i] for i in idx]
                clean = train_split.images[idx]
                images = _augment_batch(clean, ids, config.seed, epoch) if config.augment else clean
                targets = torch.tensor(codec.encode_batch(labels), device=device)

                out = student(student_normalize(images.to(device)), targets)
                loss_reg = loss_recognition(out.logits, targets, codec.pad)
                if weights.active:
                    if cache is not None:
                        feats = cache.read_many(ids).to(device)
                    else:
                        t_in = clean if config.clean_teacher_input else images
                        feats = teacher.features(clip_normalize(t_in.to(device)), labels)
                    loss_dis, terms = loss_sds(out, feats, heads, weights)
                else:
                    loss_dis, terms = loss_reg.new_zeros(()), {}
                loss = loss_reg + loss_dis

                for name, value in [("loss_reg", loss_reg), *terms.items(), ("loss_total", loss)]:
                    if not torch.isfinite(value):
                        raise NonFiniteLoss(name, value.item(), step)

                lr = _lr_at(step, total_steps, config)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], config.grad_clip)
                optimizer.step()

                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_total": loss.item(),
                    "loss_reg": loss_reg.item(),
                    "loss_dis": float(loss_dis.detach()),
                    **{f"dis_{k}": v.item() for k, v in terms.items()},
                    "timestamp": time.time(),
                }
                log.write(json.dumps(record) + "\n")
                step += 1

            acc = evaluate_split(student, val_split, codec) if len(val_split) else float("nan")
            student.train()
            result.val_acc.append(acc)
            log.write(json.dumps({"epoch": epoch, "step": step, "val_acc": acc, "timestamp": time.time()}) + "\n")
            log.flush()
            logger.info("epoch %d step %d val_acc %.2f", epoch, step, acc)
            save_checkpoint(ckpt_dir / "last.safetensors", student, heads, config.to_dict(), {"epoch": epoch, "val_acc": acc})

    save_checkpoint(result.checkpoint, student, heads, config.to_dict(), {"val_acc": result.final_val_acc})
    result.steps = step
    if teacher is not None and checksum_before is not None:
        result.teacher_checksum_before = checksum_before
        result.teacher_checksum_after = teacher.checksum()
    result.seconds = time.time() - t_start
    return result


def evaluate_split(student: Recognizer, split: Split, codec: LabelCodec) -> float:
    preds = predict_images(student, split.images, batch_size=128)
    return word_accuracy(preds, split.labels, codec)


def cache_teacher(config: TrainConfig, teacher: ClipTeacher | None = None) -> tuple[Path, int]:
    """Precompute teacher features (clean images) for the configured training corpus."""
    codec = codec_for(config)
    train_ds, val_ds = prepare_corpus(config, codec)
    train_split, _ = split_corpus(config, train_ds, val_ds)
    teacher = teacher or ClipTeacher(config.teacher, codec, device=config.device)
    cache = FeatureCache(cache_root(config, teacher, train_ds))
    return cache.root, fill_cache(cache, teacher, train_split)


# --------------------------------------------------------------------- ablations
ALL_TERMS = (True,) * 7
NO_TERMS = (False,) * 7
IMAGE_TERMS = tuple(n.startswith("enc") for n in TERM_NAMES)
TEXT_TERMS = tuple(n.startswith("dec") for n in TERM_NAMES)

ABLATIONS: dict[str, list[tuple[str, dict]]] = {
    # CLIP image tower / text tower on or off
    "table2": [
        ("none", {"stage_mask": NO_TERMS}),
        ("image", {"stage_mask": IMAGE_TERMS}),
        ("text", {"stage_mask": TEXT_TERMS}),
        ("image+text", {"stage_mask": ALL_TERMS}),
    ],
    # distillation loss family
    "table3": [
        ("none", {"stage_mask": NO_TERMS}),
        ("l1", {"stage_mask": ALL_TERMS, "base_loss": "l1"}),
        ("cos", {"stage_mask": ALL_TERMS, "base_loss": "cos"}),
        ("kl", {"stage_mask": ALL_TERMS, "base_loss": "kl"}),
        ("lcl", {"stage_mask": ALL_TERMS, "base_loss": "lcl"}),
    ],
}


@dataclass
class AblationRow:
    name: str
    seed: int
    config_hash: str
    val_acc: float
    final_loss: float
    seconds: float


@dataclass
class AblationReport:
    table: str
    rows: list[AblationRow]

    def format(self) -> str:
        lines = [f"ablation {self.table}", f"{'row':<12} {'seed':>5} {'config':<13} {'val_acc%':>9} {'loss':>9}"]
        for r in self.rows:
            lines.append(f"{r.name:<12} {r.seed:>5} {r.config_hash:<13} {r.val_acc:>9.2f} {r.final_loss:>9.4f}")
        return "\n".join(lines)


def ablation_config(base: TrainConfig, table: str, row: str, seed: int, out_dir: Path) -> TrainConfig:
    """Row config; runs are stored by config hash so rows shared across tables train once."""
    changes = dict(ABLATIONS[table])[row]
    cfg = replace(base, loss=replace(base.loss, **changes), seed=seed)
    return replace(cfg, checkpoint_dir=str(Path(out_dir) / "runs" / cfg.hash()))


def _final_loss(log_path: Path) -> float:
    last = None
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "loss_total" in rec:
                last = rec["loss_total"]
    return float("nan") if last is None else last


def run_once(cfg: TrainConfig, teacher: ClipTeacher | None = None) -> tuple[TrainResult, ClipTeacher | None]:
    """Train ``cfg`` unless its checkpoint directory already holds a finished run."""
    done = Path(cfg.checkpoint_dir) / "result.json"
    if done.exists():
        info = json.loads(done.read_text())
        if info.get("config_hash") == cfg.hash():
            res = TrainResult(
                checkpoint=Path(info["checkpoint"]),
                metrics_log=Path(info["metrics_log"]),
                val_acc=info["val_acc"],
                steps=info["steps"],
                seconds=info["seconds"],
                teacher_checksum_before=info["teacher_checksum_before"],
                teacher_checksum_after=info["teacher_checksum_after"],
            )
            return res, teacher
    if teacher is None and cfg.loss.active:
        teacher = ClipTeacher(cfg.teacher, codec_for(cfg), device=cfg.device)
    res = train(cfg, teacher=teacher if cfg.loss.active else None)
    done.write_text(json.dumps({
        "config_hash": cfg.hash(),
        "checkpoint": str(res.checkpoint),
        "metrics_log": str(res.metrics_log),
        "val_acc": res.val_acc,
        "steps": res.steps,
        "seconds": res.seconds,
        "teacher_checksum_before": res.teacher_checksum_before,
        "teacher_checksum_after": res.teacher_checksum_after,
    }, indent=2))
    return res, teacher


def ablation_run(
    table: str,
    base: TrainConfig,
    out_dir: str | Path,
    seeds: Sequence[int] | None = None,
    teacher: ClipTeacher | None = None,
) -> AblationReport:
    """Train every row of an ablation table and tabulate held-out accuracy."""
    if table not in ABLATIONS:
        raise ConfigError(f"unknown ablation {table!r}; expected one of {sorted(ABLATIONS)}", key="table")
    out_dir = Path(out_dir)
    seeds = list(seeds) if seeds else [base.seed]
    rows = []
    for seed in seeds:
        for row, _ in ABLATIONS[table]:
            cfg = ablation_config(base, table, row, seed, out_dir)
            res, teacher = run_once(cfg, teacher)
            rows.append(AblationRow(row, seed, cfg.hash(), res.final_val_acc, _final_loss(res.metrics_log), res.seconds))
            logger.info("ablation %s/%s seed %d: %.2f%%", table, row, seed, res.final_val_acc)
    report = AblationReport(table, rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{table}.txt").write_text(report.format() + "\n")
    (out_dir / f"{table}.json").write_text(json.dumps([r.__dict__ for r in rows], indent=2))
    return report
