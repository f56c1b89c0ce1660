import pytest
from hypothesis import given, strategies as st

from exmem import tokenizer
from exmem.errors import InputError


def test_byte_round_trip_ascii():
    text = "Hello, world! 123"
    tokens = tokenizer.encode(text)
    assert all(0 <= t < 256 for t in tokens)
    assert tokenizer.decode(tokens) == text


def test_multibyte_round_trip():
    text = "héllo wörld é中"
    assert tokenizer.decode(tokenizer.encode(text)) == text


@given(st.text(max_size=64))
def test_round_trip_property(text):
    assert tokenizer.decode(tokenizer.encode(text)) == text


def test_decode_skips_non_byte_tokens():
    tokens = [tokenizer.BOS_TOKEN] + tokenizer.encode("ab") + [300]
    assert tokenizer.decode(tokens) == "ab"


def test_prefix_tokens():
    assert tokenizer.BOS_TOKEN == 256
    assert tokenizer.REF_PREFIX_TOKENS[0] == tokenizer.BOS_TOKEN
    assert len(tokenizer.REF_PREFIX_TOKENS) == 11
    tail = bytes(tokenizer.REF_PREFIX_TOKENS[1:]).decode()
    assert tail == tokenizer.REF_PREFIX_TEXT


def test_validate_tokens():
    tokenizer.validate_tokens([0, 255, 256], 512)
    with pytest.raises(InputError):
        tokenizer.validate_tokens([512], 512)
    with pytest.raises(InputError):
        tokenizer.validate_tokens([-1], 512)
