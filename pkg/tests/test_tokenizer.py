"""
分词器测试

作者：ST-Instruct
版本：0.1.0
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from st_instruct.exceptions import TokenizerException
from st_instruct.tokenizer import (
    BASE_SPECIAL_TOKENS,
    DIGIT_TOKENS,
    ST_HIS,
    ST_PRE,
    ST_TOKENS,
    Tokenizer,
    pretokenize,
)

SAMPLE = "the recorded bike inflows are [12 8 9], and <ST_start><ST_HIS><ST_end> follows."


class TestPretokenize:
    def test_digits_are_split(self):
        assert pretokenize("are [12 8]") == ["are", " [", "1", "2", " 8", "]"]

    def test_special_tokens_stay_whole(self):
        assert pretokenize("tokens <ST_start><ST_HIS><ST_end>,") == [
            "tokens", " ", "<ST_start>", "<ST_HIS>", "<ST_end>", ","
        ]

    @given(st.text(alphabet=st.characters(blacklist_characters="<", blacklist_categories=("Cs",))))
    @settings(max_examples=200)
    def test_covers_every_character(self, text):
        assert "".join(pretokenize(text)) == text


class TestTokenizer:
    def test_vocab_layout(self):
        tokenizer = Tokenizer.build([SAMPLE])
        assert tokenizer.vocab[:4] == BASE_SPECIAL_TOKENS
        assert tokenizer.vocab[4:24] == DIGIT_TOKENS
        assert ST_HIS not in tokenizer

    def test_round_trip_in_vocabulary(self):
        tokenizer = Tokenizer.build([SAMPLE])
        tokenizer.extend(ST_TOKENS)
        assert tokenizer.decode(tokenizer.encode(SAMPLE)) == SAMPLE

    @given(st.text(alphabet=st.characters(blacklist_characters="<", blacklist_categories=("Cs",)), max_size=60))
    @settings(max_examples=100)
    def test_round_trip_property(self, text):
        tokenizer = Tokenizer.build([text])
        assert tokenizer.decode(tokenizer.encode(text), skip_control=False) == text

    def test_extend_keeps_existing_ids(self):
        tokenizer = Tokenizer.build([SAMPLE])
        before = {token: tokenizer.id_of(token) for token in tokenizer.vocab}
        size = tokenizer.vocab_size
        ids = tokenizer.extend(ST_TOKENS)
        assert ids == list(range(size, size + 4))
        assert all(tokenizer.id_of(token) == i for token, i in before.items())
        assert tokenizer.encode(ST_PRE) == [tokenizer.id_of(ST_PRE)]

    def test_extend_twice_fails(self):
        tokenizer = Tokenizer.build([SAMPLE])
        tokenizer.extend(ST_TOKENS)
        with pytest.raises(TokenizerException):
            tokenizer.extend([ST_HIS])

    def test_extend_rejects_plain_words(self):
        tokenizer = Tokenizer.build([SAMPLE])
        with pytest.raises(TokenizerException):
            tokenizer.extend(["hello"])

    def test_unknown_words(self):
        tokenizer = Tokenizer.build([SAMPLE])
        assert tokenizer.encode("zebra") == [tokenizer.unk_id]
        with pytest.raises(TokenizerException):
            tokenizer.encode("zebra", strict=True)

    def test_numbers_always_encodable(self):
        tokenizer = Tokenizer.build(["words only"], strict=True)
        assert tokenizer.decode(tokenizer.encode(" 4096")) == " 4096"

    def test_decode_skips_control(self):
        tokenizer = Tokenizer.build([SAMPLE])
        ids = [tokenizer.bos_id] + tokenizer.encode("bike") + [tokenizer.eos_id, tokenizer.pad_id]
        assert tokenizer.decode(ids) == "bike"

    def test_decode_out_of_range(self):
        tokenizer = Tokenizer.build([SAMPLE])
        with pytest.raises(TokenizerException):
            tokenizer.decode([tokenizer.vocab_size])

    def test_save_load(self, tmp_path):
        tokenizer = Tokenizer.build([SAMPLE])
        tokenizer.extend(ST_TOKENS)
        tokenizer.save(tmp_path / "tokenizer.json")
        loaded = Tokenizer.load(tmp_path / "tokenizer.json")
        assert loaded.vocab == tokenizer.vocab
        assert loaded.encode(SAMPLE) == tokenizer.encode(SAMPLE)

    def test_duplicate_vocab(self):
        with pytest.raises(TokenizerException):
            Tokenizer(BASE_SPECIAL_TOKENS + ["a", "a"], BASE_SPECIAL_TOKENS)
