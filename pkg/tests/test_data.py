from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from master_str.data import (
    GLYPHS,
    RenderStyle,
    generate_corpus,
    glyph,
    load_image,
    load_manifest,
    parse_pgm,
    preprocess,
    read_manifest,
    render_sample,
    resize_bilinear,
    save_image,
    write_manifest,
)
from master_str.errors import ContractError, FormatError


def test_font_covers_alphanumerics():
    assert len(GLYPHS) == 62
    assert all(g.shape == (7, 5) for g in GLYPHS.values())


def test_noiseless_render_is_the_glyph():
    style = RenderStyle(noise=0.0)
    img = render_sample("1", np.random.default_rng(0), style).image
    m, s = style.margin, style.scale
    ink = img == style.foreground
    np.testing.assert_array_equal(ink[m:m + 7 * s, m:m + 5 * s], glyph("1", s))
    assert ink.sum() == glyph("1", s).sum()
    assert set(np.unique(img)) == {style.background, style.foreground}


def test_same_seed_same_pixels():
    a = generate_corpus(5, seed=3)
    b = generate_corpus(5, seed=3)
    assert all(np.array_equal(x.image, y.image) and x.text == y.text for x, y in zip(a, b))


def test_corpus_labels_uniform_per_length():
    corpus = generate_corpus(2000, 3, 8, "0123456789", seed=0)
    by_len = Counter(len(s.text) for s in corpus)
    assert set(by_len) == set(range(3, 9))
    # each length appears about 2000/6 times
    for n in by_len.values():
        assert abs(n - 2000 / 6) < 4 * np.sqrt(2000 / 6)
    digits = Counter(ch for s in corpus for ch in s.text)
    total = sum(digits.values())
    chi2 = sum((c - total / 10) ** 2 / (total / 10) for c in digits.values())
    assert chi2 < 27.9  # 99.9% point of chi-square with 9 dof
    for length in range(3, 9):
        first = Counter(s.text[0] for s in corpus if len(s.text) == length)
        assert len(first) == 10


def test_render_rejects_unknown_symbols():
    with pytest.raises(ContractError):
        render_sample("a-b", np.random.default_rng(0))
    with pytest.raises(ContractError):
        render_sample("", np.random.default_rng(0))


def test_preprocess_identity_size():
    img = np.random.default_rng(1).random((48, 160))
    np.testing.assert_allclose(preprocess(img)[0], img, atol=1e-12)


def test_preprocess_tall_ratio_pads():
    img = np.ones((96, 160))
    out = preprocess(img)
    assert out.shape == (1, 48, 160)
    assert np.all(out[0, :, :80] == 1.0) and np.all(out[0, :, 80:] == 0.0)


def test_preprocess_wide_ratio_stretches():
    img = np.linspace(0, 1, 240)[None, :].repeat(24, axis=0)
    out = preprocess(img)
    assert out.shape == (1, 48, 160)
    assert out[0, :, -1].min() > 0.99


def test_resize_constant_is_constant():
    np.testing.assert_allclose(resize_bilinear(np.full((7, 9), 0.3), 20, 5), 0.3, atol=1e-15)


def test_pgm_known_bytes():
    img = parse_pgm(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    np.testing.assert_allclose(img, [[0, 0.502], [1, 0.251]], atol=1e-3)


def test_pgm_rejects_colour_and_truncation():
    with pytest.raises(FormatError, match="P6"):
        parse_pgm(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(FormatError, match="byte"):
        parse_pgm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError):
        parse_pgm(b"P5\n2 2\n65535\n" + bytes(8))


def test_pgm_header_comments():
    img = parse_pgm(b"P5 # comment\n1 1\n255\n\xff")
    assert img[0, 0] == 1.0


@settings(max_examples=30, deadline=None)
@given(pixels=hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(tmp_path_factory, pixels):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    save_image(path, pixels / 255.0)
    np.testing.assert_array_equal(np.rint(load_image(path) * 255), pixels)


def test_manifest_round_trip(tmp_path):
    save_image(tmp_path / "a.pgm", np.zeros((2, 3)))
    write_manifest(tmp_path / "m.tsv", [("a.pgm", "12")])
    rows = read_manifest(tmp_path / "m.tsv")
    assert rows == [(str(tmp_path / "a.pgm"), "12")]
    assert load_manifest(tmp_path / "m.tsv")[0].image.shape == (2, 3)


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("missing.pgm\t1\n")
    with pytest.raises(FormatError, match="does not exist"):
        read_manifest(tmp_path / "m.tsv")
    (tmp_path / "n.tsv").write_text("no tab here\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "n.tsv")
