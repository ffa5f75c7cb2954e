import string

import pytest
from hypothesis import given
from hypothesis import strategies as st

from master_str.errors import ConfigurationError, FormatError
from master_str.vocab import (
    UNK_GLYPH,
    Vocabulary,
    build_vocab,
    decode_tokens,
    encode_text,
)

DEFAULT = build_vocab()


def test_default_size():
    assert len(DEFAULT) == 66


def test_digits_only_size():
    assert len(build_vocab(string.digits)) == 14


def test_id_symbol_round_trip():
    for i in range(len(DEFAULT)):
        assert DEFAULT.id_of(DEFAULT.symbol_of(i)) == i


def test_encode_examples():
    v = DEFAULT
    assert encode_text("A1", v) == [v.sos_id, v.id_of("A"), v.id_of("1"), v.eos_id]
    assert encode_text("", v) == [v.sos_id, v.eos_id]
    assert encode_text("a€b", v)[2] == v.unk_id


def test_decode_examples():
    v = DEFAULT
    assert decode_tokens([v.sos_id, v.id_of("H"), v.id_of("i"), v.eos_id], v) == "Hi"
    assert decode_tokens([v.id_of("x"), v.eos_id, v.id_of("y")], v) == "x"
    assert decode_tokens([v.unk_id], v) == UNK_GLYPH


@given(st.text(alphabet=string.digits + string.ascii_letters, max_size=30))
def test_encode_decode_identity(s):
    assert decode_tokens(encode_text(s, DEFAULT), DEFAULT) == s


def test_file_round_trip(tmp_path):
    v = build_vocab("0123abc")
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    with pytest.raises(FormatError):
        Vocabulary.loads("<PAD>\n<SOS>")


def test_bad_charsets():
    with pytest.raises(ConfigurationError):
        build_vocab("aa")
    with pytest.raises(ConfigurationError):
        build_vocab(["<EOS>"])
    with pytest.raises(ConfigurationError):
        Vocabulary(("a", "b"))
