"""Synthetic glyph-string corpus, image preprocessing and PGM/TSV I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError

INPUT_HEIGHT, INPUT_WIDTH = 48, 160

# 5x7 bitmap font, one string of 7 rows per symbol
_FONT_ROWS = {
    "0": ".###. #...# #..## #.#.# ##..# #...# .###.",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###.",
    "2": ".###. #...# ....# ...#. ..#.. .#... #####",
    "3": "##### ...#. ..#.. ...#. ....# #...# .###.",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ....# #...# .###.",
    "6": "..##. .#... #.... ####. #...# #...# .###.",
    "7": "##### ....# ...#. ..#.. .#... .#... .#...",
    "8": ".###. #...# #...# .###. #...# #...# .###.",
    "9": ".###. #...# #...# .#### ....# ...#. .##..",
    "A": ".###. #...# #...# ##### #...# #...# #...#",
    "B": "####. #...# #...# ####. #...# #...# ####.",
    "C": ".###. #...# #.... #.... #.... #...# .###.",
    "D": "###.. #..#. #...# #...# #...# #..#. ###..",
    "E": "##### #.... #.... ####. #.... #.... #####",
    "F": "##### #.... #.... ####. #.... #.... #....",
    "G": ".###. #...# #.... #.### #...# #...# .####",
    "H": "#...# #...# #...# ##### #...# #...# #...#",
    "I": ".###. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "J": "..### ...#. ...#. ...#. ...#. #..#. .##..",
    "K": "#...# #..#. #.#.. ##... #.#.. #..#. #...#",
    "L": "#.... #.... #.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "N": "#...# #...# ##..# #.#.# #..## #...# #...#",
    "O": ".###. #...# #...# #...# #...# #...# .###.",
    "P": "####. #...# #...# ####. #.... #.... #....",
    "Q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "R": "####. #...# #...# ####. #.#.. #..#. #...#",
    "S": ".#### #.... #.... .###. ....# ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #...# #.#.# #.#.# #.#.# .#.#.",
    "X": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "Y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "Z": "##### ....# ...#. ..#.. .#... #.... #####",
    "a": "..... ..... .###. ....# .#### #...# .####",
    "b": "#.... #.... #.##. ##..# #...# #...# ####.",
    "c": "..... ..... .###. #.... #.... #...# .###.",
    "d": "....# ....# .##.# #..## #...# #...# .####",
    "e": "..... ..... .###. #...# ##### #.... .###.",
    "f": "..##. .#..# .#... ###.. .#... .#... .#...",
    "g": "..... .#### #...# #...# .#### ....# .###.",
    "h": "#.... #.... #.##. ##..# #...# #...# #...#",
    "i": "..#.. ..... .##.. ..#.. ..#.. ..#.. .###.",
    "j": "...#. ..... ..##. ...#. ...#. #..#. .##..",
    "k": "#.... #.... #..#. #.#.. ##... #.#.. #..#.",
    "l": ".##.. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "m": "..... ..... ##.#. #.#.# #.#.# #...# #...#",
    "n": "..... ..... #.##. ##..# #...# #...# #...#",
    "o": "..... ..... .###. #...# #...# #...# .###.",
    "p": "..... ..... ####. #...# ####. #.... #....",
    "q": "..... ..... .##.# #..## .#### ....# ....#",
    "r": "..... ..... #.##. ##..# #.... #.... #....",
    "s": "..... ..... .###. #.... .###. ....# ####.",
    "t": ".#... .#... ###.. .#... .#... .#..# ..##.",
    "u": "..... ..... #...# #...# #...# #..## .##.#",
    "v": "..... ..... #...# #...# #...# .#.#. ..#..",
    "w": "..... ..... #...# #...# #.#.# #.#.# .#.#.",
    "x": "..... ..... #...# .#.#. ..#.. .#.#. #...#",
    "y": "..... ..... #...# #...# .#### ....# .###.",
    "z": "..... ..... ##### ...#. ..#.. .#... #####",
}

GLYPHS = {
    ch: np.array([[c == "#" for c in row] for row in rows.split()], dtype=bool)
    for ch, rows in _FONT_ROWS.items()
}


@dataclass
class RenderStyle:
    scale: int = 4  # integer upscale of the 5x7 cell
    spacing: int = 4  # mean gap between glyphs, pixels
    jitter: int = 2  # gap drawn uniformly from [spacing - jitter, spacing + jitter]
    margin: int = 6
    noise: float = 0.05  # std of additive Gaussian pixel noise
    background: float = 0.1
    foreground: float = 0.9


@dataclass
class Sample:
    image: np.ndarray  # H x W floats in [0, 1]
    text: str
    path: Optional[str] = None


def glyph(ch: str, scale: int = 1) -> np.ndarray:
    if ch not in GLYPHS:
        raise ContractError(f"symbol {ch!r} cannot be rendered")
    return np.kron(GLYPHS[ch], np.ones((scale, scale), dtype=bool))


def render_sample(text: str, rng: np.random.Generator, style: RenderStyle = RenderStyle()) -> Sample:
    if not text:
        raise ContractError("cannot render an empty string")
    bad = [ch for ch in text if ch not in GLYPHS]
    if bad:
        raise ContractError(f"text contains non-renderable symbols: {''.join(bad)!r}")
    s = style.scale
    gw, gh = 5 * s, 7 * s
    lo = max(0, style.spacing - style.jitter)
    gaps = rng.integers(lo, style.spacing + style.jitter + 1, size=len(text) - 1)
    width = 2 * style.margin + gw * len(text) + int(gaps.sum())
    height = 2 * style.margin + gh
    ink = np.zeros((height, width), dtype=bool)
    x = style.margin
    for i, ch in enumerate(text):
        ink[style.margin:style.margin + gh, x:x + gw] = glyph(ch, s)
        x += gw + (int(gaps[i]) if i < len(gaps) else 0)
    img = np.where(ink, style.foreground, style.background).astype(np.float64)
    if style.noise > 0:
        img = np.clip(img + rng.normal(0.0, style.noise, size=img.shape), 0.0, 1.0)
    return Sample(image=img, text=text)


def random_text(rng: np.random.Generator, min_len: int, max_len: int, charset: str) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(charset[i] for i in rng.integers(0, len(charset), size=n))


def generate_corpus(count: int, min_len: int = 3, max_len: int = 8, charset: str = "0123456789",
                    seed: int = 0, style: RenderStyle = RenderStyle()) -> list[Sample]:
    """Sample ``i`` depends only on ``(seed, i)``, so the index range can be split freely."""
    if not 1 <= min_len <= max_len:
        raise ContractError(f"invalid length range [{min_len}, {max_len}]")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        out.append(render_sample(random_text(rng, min_len, max_len, charset), rng, style))
    return out


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w = image.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = coords(height, h)
    c0, c1, fc = coords(width, w)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def preprocess(image: np.ndarray) -> np.ndarray:
    """Map any grayscale image to the ``1 x 48 x 160`` network input.

    Wider than 160/48: stretch to 48 x 160. Otherwise scale to height 48 keeping
    the aspect ratio and zero-pad on the right.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ContractError(f"preprocess needs a non-empty 2-D image, got shape {image.shape}")
    h, w = image.shape
    out = np.zeros((1, INPUT_HEIGHT, INPUT_WIDTH))
    if w * INPUT_HEIGHT > INPUT_WIDTH * h:
        out[0] = resize_bilinear(image, INPUT_HEIGHT, INPUT_WIDTH)
    else:
        new_w = min(INPUT_WIDTH, max(1, int(round(w * INPUT_HEIGHT / h))))
        out[0, :, :new_w] = resize_bilinear(image, INPUT_HEIGHT, new_w)
    return out


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError(f"can only write 2-D grayscale images, got {image.shape}")
    h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def parse_pgm(buf: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"PGM header truncated at byte {pos}")
        tokens.append((start, buf[start:pos]))
        if len(tokens) == 1 and tokens[0][1] != b"P5":
            raise FormatError(f"unsupported image format {tokens[0][1]!r} at byte 0 (only binary PGM P5)")
    fields = []
    for off, tok in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"malformed PGM header field {tok!r} at byte {off}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} at byte {tokens[3][0]} (only 255)")
    if width < 1 or height < 1:
        raise FormatError(f"PGM has zero area ({width}x{height}) at byte {tokens[1][0]}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"PGM header not terminated by whitespace at byte {pos}")
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"PGM payload truncated at byte {len(buf)}: expected {need} bytes from byte {pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width).astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, rows: Iterable[tuple[str, str]]) -> None:
    lines = []
    for img, text in rows:
        if "\t" in text or "\n" in text:
            raise ContractError(f"transcription {text!r} contains a tab or newline")
        lines.append(f"{img}\t{text}\n")
    Path(path).write_bytes("".join(lines).encode("utf-8"))


def read_manifest(path) -> list[tuple[str, str]]:
    """Rows of ``(image path, transcription)``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    rows = []
    text = path.read_bytes().decode("utf-8")
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'path<TAB>transcription'")
        img = Path(parts[0])
        if not img.is_absolute():
            img = path.parent / img
        if not img.is_file():
            raise FormatError(f"{path}:{n}: image {img} does not exist")
        rows.append((str(img), parts[1]))
    return rows


def load_manifest(path) -> list[Sample]:
    return [Sample(image=load_image(img), text=text, path=img) for img, text in read_manifest(path)]
