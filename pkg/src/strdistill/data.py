"""Datasets, synthetic word rendering, augmentation and non-linguistic test sets.

A dataset on disk is a directory with images and a ``gt.txt`` manifest whose
lines are ``relative_path<TAB>label``.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml
from PIL import Image, ImageDraw, ImageFilter, ImageFont
from scipy import ndimage

from .charset import DEFAULT_CODEC, LabelCodec
from .errors import ConfigError, DataError, MissingManifest, NoFonts, UnreadableImage

logger = logging.getLogger(__name__)

IMAGE_SIZE = (32, 128)  # (height, width)
MANIFEST = "gt.txt"


@dataclass
class Sample:
    image: np.ndarray  # (32, 128, 3) float32 in [0, 1]
    label: str
    id: str


def read_image(path: str | os.PathLike, size: tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"cannot read image {path}: {exc}") from None


class ManifestDataset:
    """Lazily loaded ``gt.txt`` dataset with normalized labels.

    Lines whose label normalizes to empty or exceeds ``max_label_len`` are
    skipped and counted in ``skipped``.
    """

    def __init__(self, root: str | os.PathLike, codec: LabelCodec = DEFAULT_CODEC):
        self.root = Path(root)
        self.codec = codec
        manifest = self.root / MANIFEST
        if not manifest.is_file():
            raise MissingManifest(f"no {MANIFEST} in {self.root}")
        self.entries: list[tuple[str, str]] = []
        self.skipped = 0
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rel, sep, raw = line.partition("\t")
            if not sep:
                raise DataError(f"malformed manifest line in {manifest}: {line!r}")
            label = codec.normalize(raw)
            if not label or len(label) > codec.max_label_len:
                self.skipped += 1
                continue
            self.entries.append((rel, label))
        self.name = self.root.name

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [label for _, label in self.entries]

    @property
    def ids(self) -> list[str]:
        return [rel for rel, _ in self.entries]

    def __getitem__(self, i: int) -> Sample:
        rel, label = self.entries[i]
        return Sample(read_image(self.root / rel), label, rel)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def fingerprint(self) -> str:
        return hashlib.sha256((self.root / MANIFEST).read_bytes()).hexdigest()[:16]


def load_dataset(root: str | os.PathLike, codec: LabelCodec = DEFAULT_CODEC) -> ManifestDataset:
    return ManifestDataset(root, codec)


# ---------------------------------------------------------------------- synth
def default_words() -> list[str]:
    text = resources.files("strdistill").joinpath("resources/words.txt").read_text()
    return sorted({w.strip() for w in text.split() if w.strip()})


def find_fonts() -> list[str]:
    """DejaVu TrueType fonts from the system and matplotlib, in a stable order."""
    dirs = [Path("/usr/share/fonts"), Path("/usr/local/share/fonts"), Path.home() / ".fonts"]
    try:
        import matplotlib

        dirs.append(Path(matplotlib.get_data_path()) / "fonts" / "ttf")
    except ImportError:
        pass
    found: dict[str, str] = {}
    for d in dirs:
        if d.is_dir():
            for p in sorted(d.rglob("DejaVu*.ttf")):
                if "Display" not in p.name:
                    found.setdefault(p.name, str(p))
    return [found[k] for k in sorted(found)]


@dataclass
class SynthSpec:
    word_list: list[str] = field(default_factory=default_words)
    fonts: list[str] = field(default_factory=find_fonts)
    count: int = 2000
    seed: int = 7
    noise: float = 0.03  # max std of additive gaussian noise
    blur: float = 0.8  # max gaussian blur radius in pixels

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SynthSpec":
        """Read a YAML spec. ``word_list`` may be a list or a path to a one-word-per-line file."""
        path = Path(path)
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("synth spec must be a mapping", key=str(path))
        unknown = set(raw) - {"word_list", "fonts", "count", "seed", "noise", "blur"}
        if unknown:
            raise ConfigError("unknown synth spec key", key=sorted(unknown)[0])
        words = raw.pop("word_list", None)
        if isinstance(words, str):
            wpath = Path(words)
            if not wpath.is_absolute():
                wpath = path.parent / wpath
            words = [w.strip() for w in wpath.read_text().splitlines() if w.strip()]
        spec = cls(**raw)
        if words is not None:
            spec.word_list = list(words)
        return spec

    def fingerprint(self) -> str:
        blob = repr((sorted(self.word_list), [Path(f).name for f in self.fonts], self.count, self.seed, self.noise, self.blur))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def render_word(word: str, font_path: str, rng: np.random.Generator, noise: float, blur: float) -> Image.Image:
    size = int(rng.integers(22, 34))
    font = ImageFont.truetype(font_path, size)
    left, top, right, bottom = font.getbbox(word)
    tw, th = right - left, bottom - top
    pad_x, pad_y = int(rng.integers(2, 10)), int(rng.integers(2, 8))
    w = max(tw + 2 * pad_x, 3 * (th + 2 * pad_y))
    h = th + 2 * pad_y

    bg = rng.integers(0, 256, size=3)
    fg = rng.integers(0, 256, size=3)
    while np.abs(bg.astype(int) - fg.astype(int)).sum() < 220:
        fg = rng.integers(0, 256, size=3)
    canvas = np.empty((h, w, 3), dtype=np.float32)
    canvas[:] = bg
    # mild horizontal illumination gradient
    ramp = np.linspace(-1, 1, w, dtype=np.float32)[None, :, None] * rng.uniform(-25, 25)
    canvas = np.clip(canvas + ramp, 0, 255)
    img = Image.fromarray(canvas.astype(np.uint8))
    x = int(rng.integers(0, max(1, w - tw - 2 * pad_x) + 1)) + pad_x - left
    ImageDraw.Draw(img).text((x, pad_y - top), word, font=font, fill=tuple(int(c) for c in fg))
    img = img.resize((IMAGE_SIZE[1], IMAGE_SIZE[0]), Image.BILINEAR)
    radius = float(rng.uniform(0, blur))
    if radius > 0.3:
        img = img.filter(ImageFilter.GaussianBlur(radius))
    arr = np.asarray(img, dtype=np.float32)
    sigma = float(rng.uniform(0, noise)) * 255
    arr = arr + rng.normal(0.0, sigma, size=arr.shape)
    return Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


def synth_generate(spec: SynthSpec, out_dir: str | os.PathLike, codec: LabelCodec = DEFAULT_CODEC) -> Path:
    """Render ``spec.count`` words into ``out_dir`` as PNGs plus ``gt.txt``.

    The output depends only on ``spec``; rerunning produces identical bytes.
    """
    if not spec.fonts:
        raise NoFonts("no font files available for synthetic rendering")
    words = [codec.normalize(w) for w in spec.word_list]
    words = [w for w in words if 0 < len(w) <= codec.max_label_len]
    if not words:
        raise DataError("synth word_list has no usable words")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    lines = []
    for i in range(spec.count):
        word = words[int(rng.integers(len(words)))]
        font = spec.fonts[int(rng.integers(len(spec.fonts)))]
        img = render_word(word, font, rng, spec.noise, spec.blur)
        rel = f"images/{i:06d}.png"
        img.save(out / rel, format="PNG", optimize=False)
        lines.append(f"{rel}\t{word}\n")
    (out / MANIFEST).write_text("".join(lines), encoding="utf-8")
    return out


# ---------------------------------------------------------------- augmentation
AUGMENT_OPS = ("sharpness", "invert", "gaussian_blur", "poisson_noise")
_SHARPEN_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (worker-count independent)."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _sharpness(img, rng, magnitude):
    factor = 1.0 + rng.choice([-1.0, 1.0]) * 0.9 * magnitude / 30.0
    smooth = np.stack([ndimage.convolve(img[..., c], _SHARPEN_KERNEL, mode="nearest") for c in range(3)], -1)
    return smooth + factor * (img - smooth)


def _invert(img, rng, magnitude):
    return 1.0 - img


def _gaussian_blur(img, rng, magnitude):
    sigma = rng.uniform(0.1, 0.1 + 2.0 * magnitude / 30.0)
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))


def _poisson_noise(img, rng, magnitude):
    # fewer photons at higher magnitude -> stronger shot noise
    peak = 255.0 / (1.0 + magnitude)
    return rng.poisson(np.clip(img, 0, 1) * peak) / peak


_OPS = {
    "sharpness": _sharpness,
    "invert": _invert,
    "gaussian_blur": _gaussian_blur,
    "poisson_noise": _poisson_noise,
}


def augment(
    image: np.ndarray,
    seed: int,
    ops: Sequence[str] | None = None,
    num_ops: int = 2,
    magnitude: float = 5.0,
) -> np.ndarray:
    """RandAugment-style augmentation restricted to the STR-safe ops.

    With ``ops=None`` the generator seeded by ``seed`` draws ``num_ops`` ops
    (identity included as a candidate); pass an explicit sequence to force a
    policy, ``()`` being the identity.
    """
    rng = np.random.default_rng(seed)
    if ops is None:
        pool = ("identity", *AUGMENT_OPS)
        ops = [pool[i] for i in rng.integers(len(pool), size=num_ops)]
    out = image
    for op in ops:
        if op == "identity":
            continue
        out = _OPS[op](out.astype(np.float32), rng, magnitude)
    if out is image:
        return image
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -------------------------------------------------------------- non-linguistic
def make_nonlinguistic(
    labels: Sequence[str], mode: str, seed: int, alphabet: str = DEFAULT_CODEC.alphabet
) -> list[str]:
    """Strip linguistic structure from labels.

    ``shuffle`` permutes each label's characters; ``random`` replaces it with
    uniformly drawn alphabet characters of the same length.
    """
    rng = np.random.default_rng(seed)
    out = []
    for label in labels:
        if mode == "shuffle":
            out.append("".join(label[i] for i in rng.permutation(len(label))))
        elif mode == "random":
            out.append("".join(alphabet[i] for i in rng.integers(len(alphabet), size=len(label))))
        else:
            raise ConfigError(f"unknown mode {mode!r}", key="mode")
    return out


def render_labels(
    labels: Sequence[str],
    out_dir: str | os.PathLike,
    seed: int,
    fonts: Sequence[str] | None = None,
    noise: float = 0.03,
    blur: float = 0.8,
) -> Path:
    """Render exactly ``labels`` (in order) as a ``gt.txt`` dataset, e.g. a shuffled test set."""
    fonts = list(fonts) if fonts is not None else find_fonts()
    if not fonts:
        raise NoFonts("no font files available for synthetic rendering")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i, word in enumerate(labels):
        font = fonts[int(rng.integers(len(fonts)))]
        rel = f"images/{i:06d}.png"
        render_word(word, font, rng, noise, blur).save(out / rel, format="PNG", optimize=False)
        lines.append(f"{rel}\t{word}\n")
    (out / MANIFEST).write_text("".join(lines), encoding="utf-8")
    return out
