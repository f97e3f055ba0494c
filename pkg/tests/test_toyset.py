import collections
import hashlib
from pathlib import Path

import numpy as np
import pytest

from cagan import toyset as ts
from cagan.ppm import read_ppm, write_ppm
from cagan.text import UNK, tokenize


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_there_are_400_specs_and_20_classes():
    specs = ts.all_specs()
    assert len(specs) == 400 and len(set(specs)) == 400
    assert sorted({s.label for s in specs}) == list(range(20))
    assert ts.class_name(ts.SceneSpec("bar", "green", "small", "top", "dark").label) == "green bar"


def test_unknown_field_value_is_rejected():
    with pytest.raises(ValueError):
        ts.SceneSpec("hexagon", "red", "small", "left", "dark")


def test_red_circle_is_red():
    img = ts.render(ts.SceneSpec("circle", "red", "large", "center", "dark"), 64)
    r, g, b = img.mean(axis=(1, 2))
    assert r > g and r > b


def test_render_is_deterministic_and_in_range():
    spec = ts.SceneSpec("triangle", "yellow", "small", "top", "light")
    a, b = ts.render(spec, 64), ts.render(spec, 64)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 64, 64) and a.min() >= -1.0 and a.max() <= 1.0


def test_edges_are_antialiased():
    cov = ts.coverage(ts.SceneSpec("circle", "red", "large", "center", "dark"), 64)
    partial = (cov > 0) & (cov < 1)
    assert partial.any() and set(np.unique(cov * 16).round(9)) <= set(range(17))


@pytest.mark.parametrize("res", [64, 32, 16])
def test_color_oracle_recovers_every_spec(res):
    assert [s for s in ts.all_specs() if ts.dominant_color(ts.render(s, res)) != s.color] == []


def test_shape_oracle_recovers_every_spec_at_full_size():
    assert [s for s in ts.all_specs() if ts.dominant_shape(ts.render(s, 64)) != s.shape] == []


def test_box_downsample_matches_mean():
    img = ts.render(ts.SceneSpec("bar", "blue", "large", "left", "light"), 64)
    small = ts.downsample(img, 16)
    assert small.shape == (3, 16, 16)
    assert abs(small[0, 3, 5] - img[0, 12:16, 20:24].mean()) < 1e-15
    with pytest.raises(ValueError):
        ts.downsample(img, 24)


def test_caption_template_example():
    spec = ts.SceneSpec("square", "blue", "small", "left", "light")
    assert ts.caption(spec) == "a small blue square on the left of a light background"
    assert ts.caption(spec, 1) == "a light background with a small blue square at the left"


def test_captions_are_injective_up_to_paraphrase():
    vocab = ts.corpus_vocabulary()
    seen = {}
    for spec in ts.all_specs():
        bags = {tuple(sorted(ts.caption(spec, t).split())) for t in range(3)}
        for bag in bags:
            assert seen.setdefault(bag, spec) == spec
        for t in range(3):
            ids = tokenize(ts.caption(spec, t), vocab, 12)
            assert UNK not in ids and ids[-1] == 0


def test_caption_length_bound():
    assert ts.max_caption_tokens() == 11
    assert len(ts.corpus_vocabulary()) == 29


def test_template_choice_uses_all_paraphrases():
    counts = collections.Counter(ts.template_for(s, i) for i, s in enumerate(ts.sample_specs(300, 0, "train")))
    assert set(counts) == {0, 1, 2} and min(counts.values()) > 60


def test_class_histogram_is_balanced():
    counts = collections.Counter(s.label for s in ts.sample_specs(2000, 0, "train"))
    assert len(counts) == 20 and all(50 <= c <= 150 for c in counts.values())


def test_ppm_round_trip(tmp_path):
    img = ts.render(ts.SceneSpec("circle", "white", "small", "right", "dark"), 16)
    write_ppm(tmp_path / "x.ppm", img)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n16 16\n255\n")
    back = read_ppm(tmp_path / "x.ppm")
    assert np.max(np.abs(back - img)) <= 1.0 / 255 + 1e-12


def test_dataset_build_is_reproducible(tmp_path):
    a = ts.build_dataset(tmp_path / "a", 12, 4, seed=7, resolution=16)
    b = ts.build_dataset(tmp_path / "b", 12, 4, seed=7, resolution=16)
    c = ts.build_dataset(tmp_path / "c", 12, 4, seed=8, resolution=16)
    assert tree_digest(a) == tree_digest(b) != tree_digest(c)
    names = sorted(p.name for p in (a / "train").iterdir())
    assert names[0] == "00000.ppm" and "captions.tsv" in names and len(names) == 13


def test_dataset_seed7_checksum(tmp_path):
    root = ts.build_dataset(tmp_path, 20, 5, seed=7, resolution=16)
    assert tree_digest(root)[:16] == SEED7_DIGEST


def test_load_split_round_trip(tmp_path):
    root = ts.build_dataset(tmp_path, 6, 2, seed=3, resolution=16)
    split = ts.load_split(root, "train")
    specs = ts.sample_specs(6, 3, "train")
    assert split.specs == specs and len(split) == 6
    assert split.images.shape == (6, 3, 16, 16)
    assert split.captions[0] == ts.caption(specs[0], ts.template_for(specs[0], 0))
    assert np.array_equal(split.labels, [s.label for s in specs])
    header = (root / "train" / "captions.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["index", "caption", "shape", "color", "size", "position", "background"]
    assert ts.load_vocabulary(root).itos == ts.corpus_vocabulary().itos


def test_build_rejects_empty_splits(tmp_path):
    with pytest.raises(ValueError):
        ts.build_dataset(tmp_path, 0, 3, seed=0)


SEED7_DIGEST = "e952d303eab8bc9f"
