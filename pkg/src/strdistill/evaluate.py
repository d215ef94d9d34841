"""Word accuracy, sample-weighted averaging and checkpoint benchmarking."""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .charset import DEFAULT_CODEC, LabelCodec
from .checkpoint import load_student
from .data import ManifestDataset, SynthSpec, synth_generate
from .errors import DataError, EmptyEval, LengthMismatch, MissingDataset, MissingManifest
from .student import Recognizer, student_normalize


def word_accuracy(preds: Sequence[str], gts: Sequence[str], codec: LabelCodec = DEFAULT_CODEC) -> float:
    """Percentage of exact matches after normalizing both sides."""
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} labels")
    if not gts:
        raise EmptyEval("no samples to evaluate")
    hits = sum(codec.normalize(p) == codec.normalize(g) for p, g in zip(preds, gts))
    return 100.0 * hits / len(gts)


def weighted_avg(accs: Sequence[float], counts: Sequence[int]) -> float:
    """Sample-count weighted mean of per-dataset accuracies."""
    if len(accs) != len(counts):
        raise LengthMismatch(f"{len(accs)} accuracies vs {len(counts)} counts")
    if not accs:
        raise EmptyEval("no datasets to average")
    if any(c <= 0 for c in counts):
        raise ValueError("counts must be positive")
    return sum(a * c for a, c in zip(accs, counts)) / sum(counts)


@dataclass
class DatasetResult:
    name: str
    n_samples: int
    word_accuracy: float
    dump_path: str = ""


@dataclass
class EvalReport:
    per_dataset: list[DatasetResult] = field(default_factory=list)
    weighted_avg: float = 0.0
    ms_per_image: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"{'dataset':<20} {'n':>7} {'acc%':>7}"]
        for r in self.per_dataset:
            lines.append(f"{r.name:<20} {r.n_samples:>7} {r.word_accuracy:>7.2f}")
        lines.append(f"{'weighted avg':<20} {sum(r.n_samples for r in self.per_dataset):>7} {self.weighted_avg:>7.2f}")
        if self.ms_per_image is not None:
            lines.append(f"inference: {self.ms_per_image:.2f} ms/image")
        return "\n".join(lines)


@torch.no_grad()
def predict_images(model: Recognizer, images: torch.Tensor, batch_size: int = 64) -> list[str]:
    """Greedy predictions for ``[0, 1]`` NCHW images."""
    model.eval()
    device = next(model.parameters()).device
    out: list[str] = []
    for i in range(0, len(images), batch_size):
        out.extend(model.predict(student_normalize(images[i:i + batch_size].to(device))))
    return out


def load_images(ds: ManifestDataset) -> torch.Tensor:
    arr = np.stack([s.image for s in ds]) if len(ds) else np.zeros((0, 32, 128, 3), np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _dataset_name(root: Path, taken: set[str]) -> str:
    name = root.name or "dataset"
    base, k = name, 1
    while name in taken:
        k += 1
        name = f"{base}_{k}"
    taken.add(name)
    return name


def time_inference(model: Recognizer, images: torch.Tensor, n_images: int = 3000) -> float:
    """Mean milliseconds per image for single-image greedy decoding over ``n_images`` decodes."""
    model.eval()
    start = time.perf_counter()
    for i in range(n_images):
        model.predict(student_normalize(images[i % len(images)][None]))
    return 1000.0 * (time.perf_counter() - start) / n_images


def benchmark(
    checkpoint: str | os.PathLike,
    dataset_roots: Sequence[str | os.PathLike],
    out_dir: str | os.PathLike | None = None,
    batch_size: int = 64,
    timing: bool = False,
    time_images: int = 3000,
) -> EvalReport:
    """Greedy-decode every dataset with the checkpoint's recognizer.

    Writes ``predictions_<name>.tsv`` (``id, pred, gt, 0|1``) per dataset and
    ``report.yaml`` to ``out_dir`` when given. Alignment heads and the teacher
    are never loaded.
    """
    if not dataset_roots:
        raise EmptyEval("no datasets given")
    model, _ = load_student(checkpoint)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = EvalReport()
    taken: set[str] = set()
    all_images = []
    for root in map(Path, dataset_roots):
        try:
            ds = ManifestDataset(root, model.codec)
        except MissingManifest:
            raise MissingDataset(f"dataset {root} not found or has no manifest") from None
        if len(ds) == 0:
            raise EmptyEval(f"dataset {root} has no usable samples")
        images = load_images(ds)
        all_images.append(images)
        preds = predict_images(model, images, batch_size)
        name = _dataset_name(root, taken)
        result = DatasetResult(name, len(ds), word_accuracy(preds, ds.labels, model.codec))
        if out is not None:
            dump = out / f"predictions_{name}.tsv"
            with open(dump, "w", encoding="utf-8") as fh:
                for sid, p, g in zip(ds.ids, preds, ds.labels):
                    fh.write(f"{sid}\t{p}\t{g}\t{int(model.codec.normalize(p) == g)}\n")
            result.dump_path = str(dump)
        report.per_dataset.append(result)
    report.weighted_avg = weighted_avg(
        [r.word_accuracy for r in report.per_dataset], [r.n_samples for r in report.per_dataset]
    )
    if timing:
        report.ms_per_image = time_inference(model, torch.cat(all_images), time_images)
    if out is not None:
        (out / "report.yaml").write_text(yaml.safe_dump(report.to_dict(), sort_keys=False))
    return report


@dataclass
class AlignmentCheck:
    wins: int
    total: int
    margins: list[float] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.wins / self.total if self.total else float("nan")


@torch.no_grad()
def char_alignment_check(teacher, out_dir: str | os.PathLike, n: int = 100, seed: int = 0) -> AlignmentCheck:
    """Does the teacher prefer an image's own char-split label over someone else's?

    Renders ``n`` synthetic words, then for each compares the cosine between
    the CLIP image embedding and the embedding of its own character-split
    label against a different word drawn from the same batch.
    """
    from .teacher import clip_normalize

    root = synth_generate(SynthSpec(count=n, seed=seed), out_dir, teacher.codec)
    ds = ManifestDataset(root, teacher.codec)
    labels = ds.labels
    if len(set(labels)) < 2:
        raise DataError("need at least two distinct words to form mismatched pairs")
    rng = np.random.default_rng(seed)
    wrong = []
    for label in labels:
        other = label
        while other == label:
            other = labels[int(rng.integers(len(labels)))]
        wrong.append(other)
    img = teacher.embed_image(clip_normalize(load_images(ds)))
    own = (img * teacher.embed_text(labels)).sum(-1)
    other = (img * teacher.embed_text(wrong)).sum(-1)
    margins = (own - other).tolist()
    return AlignmentCheck(sum(m > 0 for m in margins), len(margins), margins)
