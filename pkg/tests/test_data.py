import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from strdistill.charset import ALPHABET
from strdistill.data import (
    AUGMENT_OPS,
    ManifestDataset,
    SynthSpec,
    augment,
    default_words,
    derive_seed,
    find_fonts,
    load_dataset,
    make_nonlinguistic,
    read_image,
    render_labels,
    synth_generate,
)
from strdistill.errors import ConfigError, DataError, MissingManifest, NoFonts, UnreadableImage


def write_dataset(root, labels):
    (root / "img").mkdir(parents=True)
    lines = []
    for i, label in enumerate(labels):
        Image.new("RGB", (100, 30), (i * 20, 0, 0)).save(root / "img" / f"{i}.png")
        lines.append(f"img/{i}.png\t{label}\n")
    (root / "gt.txt").write_text("".join(lines), encoding="utf-8")
    return root


def test_manifest_three_lines(tmp_path):
    ds = load_dataset(write_dataset(tmp_path, ["cat", "Dog", "b1rd"]))
    assert len(ds) == 3 and ds.labels == ["cat", "dog", "b1rd"]
    sample = ds[1]
    assert sample.image.shape == (32, 128, 3) and sample.image.dtype == np.float32
    assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
    assert sample.id == "img/1.png"


def test_manifest_normalizes_and_skips(tmp_path):
    ds = load_dataset(write_dataset(tmp_path, ["Café!", "a" * 26, "!!!", "ok"]))
    assert ds.labels == ["caf", "ok"]
    assert ds.skipped == 2


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        ManifestDataset(tmp_path)


def test_malformed_manifest(tmp_path):
    (tmp_path / "gt.txt").write_text("no-tab-here\n")
    with pytest.raises(DataError):
        ManifestDataset(tmp_path)


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(UnreadableImage):
        read_image(tmp_path / "x.png")


def test_default_words_and_fonts():
    words = default_words()
    assert len(words) >= 100 and len(set(words)) == len(words)
    assert all(set(w) <= set(ALPHABET) and 0 < len(w) <= 25 for w in words)
    assert find_fonts()


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(count=10, seed=7)
    a = synth_generate(spec, tmp_path / "a")
    b = synth_generate(spec, tmp_path / "b")
    assert (a / "gt.txt").read_bytes() == (b / "gt.txt").read_bytes()
    for i in range(10):
        assert (a / f"images/{i:06d}.png").read_bytes() == (b / f"images/{i:06d}.png").read_bytes()
    c = synth_generate(SynthSpec(count=10, seed=8), tmp_path / "c")
    assert (a / "gt.txt").read_bytes() != (c / "gt.txt").read_bytes() or any(
        (a / f"images/{i:06d}.png").read_bytes() != (c / f"images/{i:06d}.png").read_bytes() for i in range(10)
    )


def test_synth_single_word_and_count(tmp_path):
    out = synth_generate(SynthSpec(word_list=["cat"], count=25, seed=1), tmp_path)
    ds = load_dataset(out)
    assert len(ds) == 25 and set(ds.labels) == {"cat"}


def test_synth_manifest_size(tmp_path):
    out = synth_generate(SynthSpec(count=2000, seed=7), tmp_path)
    lines = (out / "gt.txt").read_text().splitlines()
    assert len(lines) == 2000
    assert len({ln.split("\t")[1] for ln in lines}) >= 100


def test_synth_spec_file(tmp_path):
    (tmp_path / "words.txt").write_text("alpha\nbeta\n")
    (tmp_path / "s.cfg").write_text("word_list: words.txt\ncount: 4\nseed: 3\n")
    spec = SynthSpec.from_file(tmp_path / "s.cfg")
    assert spec.word_list == ["alpha", "beta"] and spec.count == 4 and spec.seed == 3
    (tmp_path / "bad.cfg").write_text("colour: red\n")
    with pytest.raises(ConfigError):
        SynthSpec.from_file(tmp_path / "bad.cfg")


def test_synth_without_fonts(tmp_path):
    with pytest.raises(NoFonts):
        synth_generate(SynthSpec(fonts=[], count=1), tmp_path)


def image(seed=0):
    return np.random.default_rng(seed).random((32, 128, 3), dtype=np.float32)


def test_augment_identity_and_invert():
    img = image()
    assert augment(img, 3, ops=()) is img
    assert np.allclose(augment(img, 3, ops=("invert",)), 1.0 - img)


@pytest.mark.parametrize("op", AUGMENT_OPS)
def test_augment_ops_keep_shape_and_range(op):
    out = augment(image(), 5, ops=(op,))
    assert out.shape == (32, 128, 3) and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**62))
def test_augment_deterministic(seed):
    img = image(1)
    assert np.array_equal(augment(img, seed), augment(img, seed))


def test_derive_seed_stable():
    assert derive_seed(7, "a", 3) == derive_seed(7, "a", 3)
    assert derive_seed(7, "a", 3) != derive_seed(7, "a", 4)
    assert 0 <= derive_seed("x") < 2**63


def test_nonlinguistic():
    assert make_nonlinguistic(["ab"], "shuffle", 0)[0] in {"ab", "ba"}
    assert make_nonlinguistic(["ab", "xyz"], "shuffle", 4) == make_nonlinguistic(["ab", "xyz"], "shuffle", 4)
    assert make_nonlinguistic(["aaa"], "shuffle", 1) == ["aaa"]
    out = make_nonlinguistic(["cat"], "random", 2)[0]
    assert len(out) == 3 and set(out) <= set(ALPHABET)
    with pytest.raises(ConfigError):
        make_nonlinguistic(["cat"], "reverse", 0)


@settings(max_examples=50)
@given(st.lists(st.text(ALPHABET, min_size=1, max_size=25), max_size=5), st.integers(0, 1000))
def test_shuffle_is_permutation(labels, seed):
    out = make_nonlinguistic(labels, "shuffle", seed)
    assert [sorted(a) for a in out] == [sorted(b) for b in labels]


def test_render_labels(tmp_path):
    ds = load_dataset(render_labels(["tac", "odg"], tmp_path, seed=1))
    assert ds.labels == ["tac", "odg"]
