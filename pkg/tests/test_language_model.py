"""
小型解码器语言模型测试

测试重点：
- 因果性与替换局部性
- 词表扩展只追加、不改动已有行
- 贪心生成的确定性、停止条件与 <ST_PRE> 隐状态
- 64 位梯度校验

作者：ST-Instruct
版本：0.1.0
"""

import numpy as np
import pytest

from st_instruct import autodiff as ad
from st_instruct.autodiff import ParameterSet, Tensor
from st_instruct.config import LMConfig
from st_instruct.exceptions import ErrorCode, TokenizerException
from st_instruct.language_model import Substitution, TinyLM, extend_vocab, pre_token_id
from st_instruct.tokenizer import ST_HIS, ST_PRE, ST_TOKENS, Tokenizer

SMALL = LMConfig(n_layers=2, n_heads=2, d_model=8, context_length=16, regression_hidden=4)
HIS_ID = 3


def _lm(config=SMALL, vocab=10, seed=0):
    params = ParameterSet()
    lm = TinyLM(config, vocab, params, np.random.default_rng(seed))
    lm.substitution_token_id = HIS_ID
    return lm, params


class TestForward:
    def test_shapes(self):
        lm, _ = _lm()
        logits, hidden = lm.forward(np.array([[1, 2, 5, 6], [4, 4, 4, 4]]))
        assert logits.shape == (2, 4, 10)
        assert hidden.shape == (2, 4, 8)

    def test_default_width(self):
        lm, _ = _lm(LMConfig(), vocab=12)
        _, hidden = lm.forward(np.array([[1, 2, 3]]))
        assert hidden.shape == (1, 3, 128)

    def test_causality(self):
        lm, _ = _lm()
        ids = np.array([[1, 2, 5, 6, 7, 8]])
        changed = ids.copy()
        changed[0, 3] = 9
        a, _ = lm.forward(ids)
        b, _ = lm.forward(changed)
        np.testing.assert_allclose(a.data[0, :3], b.data[0, :3], rtol=0, atol=1e-7)
        assert not np.allclose(a.data[0, 3:], b.data[0, 3:])

    def test_attention_rows_sum_to_one(self):
        lm, _ = _lm()
        probes = []
        lm.hidden_states(np.array([[1, 2, 5, 6, 7]]), probes=probes)
        assert len(probes) == SMALL.n_layers
        for probs in probes:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(np.triu(probs[0, 0], k=1) < 1e-6)

    def test_context_overflow(self):
        lm, _ = _lm()
        with pytest.raises(TokenizerException) as exc_info:
            lm.forward(np.zeros((1, 17), dtype=np.int64))
        assert exc_info.value.error_code == ErrorCode.CONTEXT_OVERFLOW


class TestSubstitution:
    def _vectors(self, value):
        return Tensor(np.full((1, 1, 8), value))

    def test_substitution_is_local(self):
        lm, _ = _lm()
        ids = np.array([[1, 2, HIS_ID, 5, 6]])
        plain, _ = lm.forward(ids)
        swapped, _ = lm.forward(ids, Substitution(np.array([[2]]), self._vectors(3.0)))
        np.testing.assert_allclose(plain.data[0, :2], swapped.data[0, :2], rtol=0, atol=1e-7)
        assert not np.allclose(plain.data[0, 2:], swapped.data[0, 2:])

    def test_embedding_row_is_replaced(self):
        lm, _ = _lm()
        ids = np.array([[1, HIS_ID]])
        x = lm.embed(ids, Substitution(np.array([[1]]), self._vectors(2.0)))
        expected = 2.0 + lm.params["lm.pos_emb"].data[1]
        np.testing.assert_allclose(x.data[0, 1], expected, rtol=1e-6)

    def test_skipped_slot(self):
        lm, _ = _lm()
        ids = np.array([[1, HIS_ID, 5]])
        plain, _ = lm.forward(ids)
        skipped, _ = lm.forward(ids, Substitution(np.array([[-1]]), self._vectors(3.0)))
        np.testing.assert_array_equal(plain.data, skipped.data)

    def test_wrong_position(self):
        lm, _ = _lm()
        with pytest.raises(TokenizerException) as exc_info:
            lm.forward(np.array([[1, 2, HIS_ID]]), Substitution(np.array([[1]]), self._vectors(1.0)))
        assert exc_info.value.error_code == ErrorCode.SUBSTITUTION_ERROR


class TestVocabulary:
    def _tokenizer(self):
        return Tokenizer.build(["bike flow in a region"])

    def test_extension_is_append_only(self):
        tokenizer = self._tokenizer()
        lm, params = _lm(vocab=tokenizer.vocab_size)
        ids = np.array([tokenizer.encode("bike flow")])
        before_logits, _ = lm.forward(ids)
        before_emb = params["lm.tok_emb"].data.copy()

        new_ids = extend_vocab(tokenizer, lm, ST_TOKENS)
        assert lm.vocab_size == tokenizer.vocab_size == before_emb.shape[0] + 4
        assert new_ids == list(range(before_emb.shape[0], before_emb.shape[0] + 4))
        np.testing.assert_array_equal(params["lm.tok_emb"].data[:before_emb.shape[0]], before_emb)
        np.testing.assert_allclose(params["lm.tok_emb"].data[-1], before_emb.mean(axis=0), rtol=1e-5)

        after_logits, _ = lm.forward(ids)
        old = before_emb.shape[0]
        np.testing.assert_allclose(after_logits.data[..., :old], before_logits.data, atol=1e-6)
        assert lm.substitution_token_id == tokenizer.id_of(ST_HIS)
        assert pre_token_id(tokenizer) == tokenizer.id_of(ST_PRE)

    def test_size_mismatch(self):
        tokenizer = self._tokenizer()
        lm, _ = _lm(vocab=tokenizer.vocab_size + 1)
        with pytest.raises(TokenizerException):
            extend_vocab(tokenizer, lm, ST_TOKENS)

    def test_duplicate_extension(self):
        tokenizer = self._tokenizer()
        lm, _ = _lm(vocab=tokenizer.vocab_size)
        extend_vocab(tokenizer, lm, [ST_PRE])
        with pytest.raises(TokenizerException):
            extend_vocab(tokenizer, lm, [ST_PRE])

    def test_no_pre_token(self):
        assert pre_token_id(self._tokenizer()) is None


class TestGenerate:
    def _forced(self, token_id):
        """所有位置的隐状态都为 1，输出头只给 token_id 正分"""
        lm, params = _lm()
        params["lm.ln_f.g"].data[:] = 0.0
        params["lm.ln_f.b"].data[:] = 1.0
        params["lm.head.W"].data[:] = 0.0
        params["lm.head.W"].data[token_id] = 1.0
        return lm

    def test_zero_tokens(self):
        lm, _ = _lm()
        assert lm.generate([1, 2], 0).tokens == []

    def test_deterministic(self):
        lm, _ = _lm()
        assert lm.generate([1, 2, 5], 6).tokens == lm.generate([1, 2, 5], 6).tokens

    def test_stops_at_stop_id(self):
        result = self._forced(4).generate([1, 2], 5, stop_id=4)
        assert result.tokens == []
        assert result.stopped

    def test_pre_hidden_states(self):
        result = self._forced(7).generate([1, 2], 3, stop_id=4, pre_token_id=7)
        assert result.tokens == [7, 7, 7]
        assert not result.stopped
        assert result.st_pre_positions == [2, 3, 4]
        assert result.st_pre_hidden.shape == (3, 8)

    def test_overflow_when_decoding_reaches_context(self):
        with pytest.raises(TokenizerException) as exc_info:
            self._forced(5).generate(list(range(1, 10)), 8)
        assert exc_info.value.error_code == ErrorCode.CONTEXT_OVERFLOW

    def test_early_stop_within_context(self):
        result = self._forced(4).generate(list(range(1, 10)), 8, stop_id=4)
        assert result.tokens == []
        assert result.stopped

    def test_budget_fits_exactly(self):
        result = self._forced(5).generate(list(range(1, 10)), 7)
        assert result.tokens == [5] * 7

    def test_prompt_longer_than_context(self):
        lm, _ = _lm()
        with pytest.raises(TokenizerException) as exc_info:
            lm.generate([1] * 17, 0)
        assert exc_info.value.error_code == ErrorCode.CONTEXT_OVERFLOW

    def test_generation_leaves_no_graph(self):
        lm, params = _lm()
        lm.generate([1, 2], 2)
        assert all(params[n].grad is None for n in params.names())


class TestGradients:
    @pytest.mark.parametrize("seed", range(2))
    def test_finite_differences(self, seed, float64):
        lm, params = _lm(seed=seed)
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, 10, size=(2, 5))
        ids[:, 1] = HIS_ID
        vectors = Tensor(rng.normal(size=(2, 1, 8)), requires_grad=True, dtype=np.float64)
        targets = rng.integers(0, 10, size=(2, 5))

        def loss(_):
            logits, hidden = lm.forward(ids, Substitution(np.array([[1], [1]]), vectors))
            return ad.cross_entropy(logits, targets) + ad.mean(hidden * hidden)

        for name in ("lm.tok_emb", "lm.pos_emb", "lm.block0.attn.Wq", "lm.block1.attn.Wv",
                     "lm.block0.mlp.W1", "lm.block1.ln2.g", "lm.ln_f.g", "lm.head.W"):
            assert ad.finite_difference_check(loss, params[name]) < 1e-4, name
        assert ad.finite_difference_check(loss, vectors) < 1e-4
