import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epimetric.tokenizer import (
    EOS_ID,
    NUM_RESERVED,
    PAD_ID,
    ContextVocab,
    SubwordVocab,
    Vocabulary,
    VocabError,
    encode_text,
    learn_bpe,
    time_feature,
)


def test_first_merge_on_repeated_letter():
    vocab = learn_bpe(["aaaa"], NUM_RESERVED + 8)
    assert vocab.merges[0] == (b"a", b"a")


def test_target_size_equal_reserved_means_no_merges():
    vocab = learn_bpe(["hello world"], NUM_RESERVED)
    assert vocab.merges == []
    assert vocab.size == NUM_RESERVED


def test_target_size_below_reserved_rejected():
    with pytest.raises(VocabError):
        learn_bpe(["x"], NUM_RESERVED - 1)


def test_learning_is_deterministic():
    texts = ["the cat sat on the mat", "the bat and the cat", "mat mat mat"]
    a = learn_bpe(texts, NUM_RESERVED + 20)
    b = learn_bpe(texts, NUM_RESERVED + 20)
    assert a.merges == b.merges


def test_empty_text_encodes_to_eos_then_pad():
    vocab = learn_bpe(["abc"], NUM_RESERVED + 2)
    assert vocab.encode("", 5) == [EOS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]


def test_long_text_truncates_to_exactly_T():
    vocab = learn_bpe(["abc"], NUM_RESERVED)
    ids = vocab.encode("x" * 100, 8)
    assert len(ids) == 8
    assert PAD_ID not in ids


def test_round_trip_without_truncation():
    texts = ["the cat sat", "sphinx of black quartz", "naïve café ☕"]
    vocab = learn_bpe(texts, NUM_RESERVED + 30)
    for s in texts:
        ids = vocab.encode(s, 128)
        assert vocab.decode(ids) == s


@settings(max_examples=60, deadline=None)
@given(st.text(max_size=40), st.integers(min_value=1, max_value=48))
def test_encode_always_exact_length_and_in_range(text, T):
    vocab = learn_bpe(["some sample text to learn from 123"], NUM_RESERVED + 10)
    ids = vocab.encode(text, T)
    assert len(ids) == T
    assert all(0 <= i < vocab.size for i in ids)


def test_merge_order_is_applied_in_rank_order():
    # "ab" must merge before ("ab","c") can fire
    vocab = SubwordVocab([(b"a", b"b"), (b"ab", b"c")])
    ids = vocab.encode("abc", 4)
    assert ids[0] == vocab.token_to_id[b"abc"]
    assert ids[1] == EOS_ID


def test_time_feature_boundaries():
    assert time_feature(0) == 0
    assert time_feature(86399) == 23
    base = 1473922980  # 2016-09-15T07:03:00Z
    assert time_feature(base) == 7
    assert time_feature(base + 86400) == 7


def test_context_vocab_topk_with_lexicographic_ties():
    contexts = ["b", "b", "a", "a", "c"]
    vocab = ContextVocab.fit(contexts, K=2)
    assert vocab.contexts == ["a", "b"]
    assert vocab.size == 3
    assert vocab.encode("a") == 1
    assert vocab.encode("b") == 2
    assert vocab.encode("c") == ContextVocab.UNK_ID
    assert vocab.encode("never-seen") == ContextVocab.UNK_ID


def test_vocabulary_file_round_trip(tmp_path):
    texts = ["some words appear more than other words", "words and words again"]
    vocab = Vocabulary(subword=learn_bpe(texts, NUM_RESERVED + 25),
                       context=ContextVocab.fit(["x", "y", "x"], K=4), T=16)
    path = tmp_path / "vocab.json"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    held_out = ["words never seen before", "x ☃ y", ""]
    for s in held_out:
        assert loaded.subword.encode(s, 16) == vocab.subword.encode(s, 16)
    assert loaded.context.contexts == vocab.context.contexts
    assert loaded.T == vocab.T
    # byte-identical second save
    path2 = tmp_path / "vocab2.json"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_encode_text_wrapper_and_encoded_action():
    texts = ["hello hello world"]
    vocab = Vocabulary(subword=learn_bpe(texts, NUM_RESERVED + 5),
                       context=ContextVocab.fit(["sub1"], K=2), T=12)
    assert encode_text(vocab.subword, "hello", 12) == vocab.subword.encode("hello", 12)
    enc = vocab.encode_action("hello world", 1473922980, "sub1")
    assert enc.text_ids.shape == (12,)
    assert enc.text_ids.dtype == np.int64
    assert enc.hour_id == 7
    assert enc.context_id == 1
