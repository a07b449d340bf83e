import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokprobe.datasets import (
    ProbingExample,
    bigram_shift,
    build_shift_mask,
    class_counts,
    clause_swap,
    coordinv_reconstruct,
    eligible_bigrams,
    example_rng,
    filter_coordinated,
    load_senteval_tsv,
    subsample_indices,
    subsample_train,
    swap_adjacent,
    word_permutation_tokens,
    write_pairs,
    write_senteval_tsv,
)
from tokprobe.errors import CannotPerturbError, CoordinatorFilterError, DatasetError, MaskUnavailableError
from tokprobe.tokenizer import encode


def _write(tmp_path, text):
    p = tmp_path / "data.txt"
    p.write_text(text, encoding="utf-8")
    return p


def test_load_line(tmp_path):
    (ex,) = load_senteval_tsv(_write(tmp_path, "te\tPAST\tthe glass broke .\n"), "tense")
    assert (ex.split, ex.label, ex.sentence) == ("te", "PAST", "the glass broke .")


@pytest.mark.parametrize("line,fragment", [
    ("te\tPAST\n", "3 tab-separated"),
    ("xx\tPAST\tthe glass broke .\n", "split"),
    ("te\tFUTURE\tthe glass broke .\n", "label"),
])
def test_load_rejects_malformed_rows(tmp_path, line, fragment):
    p = _write(tmp_path, "tr\tPRES\tshe walks .\n" + line)
    with pytest.raises(DatasetError, match=fragment) as err:
        load_senteval_tsv(p, "tense")
    assert err.value.line == 2


def test_sentlen_label_is_word_count(tmp_path):
    p = _write(tmp_path, "tr\t3\tthe dog walked home today .\n")
    (ex,) = load_senteval_tsv(p, "sentlen")
    assert ex.label == 6 and ex.meta["bin"] == 3
    with pytest.raises(DatasetError):
        load_senteval_tsv(_write(tmp_path, "tr\tbig\tthe dog .\n"), "sentlen")


def test_tsv_roundtrip(tmp_path):
    exs = [ProbingExample("tr", "NN", "a dog ."), ProbingExample("te", "NNS", "two dogs .")]
    write_senteval_tsv(exs, tmp_path / "o.txt")
    back = load_senteval_tsv(tmp_path / "o.txt", "objnum")
    assert [(e.split, e.label, e.sentence) for e in back] == [(e.split, e.label, e.sentence) for e in exs]
    assert class_counts(back) == {"tr": Counter({"NN": 1}), "te": Counter({"NNS": 1})}


def test_bigram_shift_forced_choice():
    s = "she walked at the market ."
    assert 2 in eligible_bigrams(s.split())
    shifted, idx = bigram_shift(s, choice=2)
    assert shifted == "she walked the at market ." and idx == (2, 3)
    again, _ = bigram_shift(shifted, choice=2)
    assert again == s


def test_bigram_shift_rules():
    with pytest.raises(CannotPerturbError):
        bigram_shift("hi .", rng=np.random.default_rng(0))
    words = "the dog , quickly ran home .".split()
    assert eligible_bigrams(words) == [3, 4]
    with pytest.raises(CannotPerturbError):
        bigram_shift("the dog ran home .", choice=0)


def test_bigram_shift_is_uniform_over_pairs():
    s = "the big dog ran to the old market ."
    picks = Counter(bigram_shift(s, example_rng(k, s))[1][0] for k in range(3000))
    eligible = eligible_bigrams(s.split())
    assert set(picks) == set(eligible)
    expected = 3000 / len(eligible)
    assert all(abs(c - expected) < 5 * math.sqrt(expected) for c in picks.values())


def test_example_rng_keyed_by_content():
    a = example_rng(3, "the dog .", "x").integers(1 << 30)
    assert a == example_rng(3, "the dog .", "x").integers(1 << 30)
    assert a != example_rng(4, "the dog .", "x").integers(1 << 30)


def test_shift_mask_example(vocab):
    shifted = encode("she walked the at market .", vocab, pad=False)
    assert shifted.tokens == ["[CLS]", "she", "walk", "##ed", "the", "at", "market", ".", "[SEP]"]
    m = build_shift_mask(shifted, (2, 3))
    assert m.mask == [0, 0, 0, 0, 1, 1, 0, 0, 0]
    assert m.positions == [4, 5]


def test_shift_mask_multi_piece_word(vocab):
    shifted = encode("she at walked the market .", vocab, max_len=12)
    m = build_shift_mask(shifted, (1, 2))
    assert len(m.positions) == 3 and sum(m.mask) == 3
    assert [shifted.tokens[p] for p in m.positions] == ["at", "walk", "##ed"]
    assert all(m.mask[i] == 0 for i, sp in enumerate(shifted.is_special) if sp)


def test_shift_mask_unavailable_after_truncation(vocab):
    s = encode("she walked the at market .", vocab, max_len=4)
    with pytest.raises(MaskUnavailableError):
        build_shift_mask(s, (2, 3))


def test_coordinv_reconstruct_inverted():
    ex = ProbingExample("te", "I", "i cut myself and the glass broke .")
    pair = coordinv_reconstruct(ex)
    assert pair.original == "the glass broke and i cut myself ."
    assert pair.inverted == ex.sentence
    assert pair.original.split()[pair.coordinator_index] == "and"
    kept = coordinv_reconstruct(ProbingExample("te", "O", "the glass broke and i cut myself ."))
    assert kept.original == "the glass broke and i cut myself ."


def test_coordinv_filter():
    with pytest.raises(CoordinatorFilterError):
        clause_swap("a and b and c".split())
    exs = [ProbingExample("te", "O", "a and b and c"), ProbingExample("te", "O", "x but y ."),
           ProbingExample("te", "O", "no coordinator here")]
    pairs, dropped = filter_coordinated(exs)
    assert len(pairs) == 1 and dropped == 2


word = st.sampled_from(["the", "dog", "ran", "home", "she", "saw", "it", ",", ".", "!", "big", "walked"])
# inside a clause: no sentence-final marks, which would be indistinguishable from terminal punctuation
clause_word = st.sampled_from(["the", "dog", "ran", "home", "she", "saw", "it", ",", ";", "(", "big", "walked"])


@settings(max_examples=300, deadline=None)
@given(st.lists(word, min_size=3, max_size=20), st.data())
def test_bigram_swap_involution(words, data):
    pairs = eligible_bigrams(words)
    if not pairs:
        return
    i = data.draw(st.sampled_from(pairs))
    assert swap_adjacent(swap_adjacent(words, i), i) == words


@settings(max_examples=300, deadline=None)
@given(st.lists(clause_word, max_size=8), st.sampled_from(["and", "but"]), st.lists(clause_word, max_size=8),
       st.sampled_from([None, ".", "!", "?", "..."]))
def test_clause_swap_involution(left, coord, right, terminal):
    words = left + [coord] + right + ([terminal] if terminal else [])
    once, perm = clause_swap(words)
    assert sorted(perm) == list(range(len(words)))
    assert [once[perm[k]] for k in range(len(words))] == words
    twice, _ = clause_swap(once)
    assert twice == words
    if terminal:
        assert once[-1] == terminal


def test_clause_swap_keeps_comma_with_its_clause():
    words = "he ran , and she walked".split()
    once, _ = clause_swap(words)
    assert once == "she walked and he ran ,".split()
    assert clause_swap(once)[0] == words


def test_word_permutation_alignment(vocab):
    src = encode("she walked at the market .", vocab, pad=False)
    dst = encode("she walked the at market .", vocab, pad=False)
    align = word_permutation_tokens(src, dst, [0, 1, 3, 2, 4, 5])
    assert [dst.tokens[a] for a in align] == src.tokens
    cut = encode("she walked the at market .", vocab, max_len=5)
    assert word_permutation_tokens(src, cut, [0, 1, 3, 2, 4, 5]) is None


def _balanced(n=1000):
    return [ProbingExample("tr", "AB"[i % 2], f"sentence number {i}") for i in range(n)] + [
        ProbingExample("va", "A", "held out")]


def test_subsample_identity_and_counts():
    exs = _balanced()
    assert subsample_train(exs, 1.0) == exs
    idx = subsample_indices(exs, 0.1, seed=5)
    kept = [exs[i] for i in idx if exs[i].split == "tr"]
    assert len(kept) == 100
    counts = Counter(e.label for e in kept)
    assert abs(counts["A"] - counts["B"]) <= 1
    assert exs[-1] in [exs[i] for i in idx]
    assert subsample_indices(exs, 0.1, seed=5) == idx
    assert subsample_indices(exs, 0.1, seed=6) != idx


def test_subsample_ceil_and_stratification():
    exs = [ProbingExample("tr", "A", f"a{i}") for i in range(7)] + [ProbingExample("tr", "B", f"b{i}") for i in range(3)]
    kept = subsample_train(exs, 0.25, seed=0)
    assert len(kept) == 3
    assert Counter(e.label for e in kept) == Counter({"A": 2, "B": 1})


def test_subsample_stable_under_reordering():
    exs = _balanced(200)
    a = {exs[i].sentence for i in subsample_indices(exs, 0.2, seed=1)}
    rev = list(reversed(exs))
    b = {rev[i].sentence for i in subsample_indices(rev, 0.2, seed=1)}
    assert a == b


@pytest.mark.parametrize("f", [0.0, -0.5, 1.5])
def test_subsample_fraction_range(f):
    with pytest.raises(ValueError):
        subsample_train(_balanced(10), f)


def test_subsample_empty_train():
    with pytest.raises(DatasetError):
        subsample_train([ProbingExample("te", "A", "x")], 0.5)


def test_write_pairs(tmp_path):
    pairs = [{"original": "a b c d", "perturbed": "a c b d", "swap": [1, 2]}]
    write_pairs(pairs, tmp_path / "p.tsv", tmp_path / "p.json")
    assert (tmp_path / "p.tsv").read_text().splitlines() == ["te\tO\ta b c d", "te\tI\ta c b d"]
    side = json.loads((tmp_path / "p.json").read_text())
    assert side == [{"swap": [1, 2], "pair": 0, "original_line": 1, "perturbed_line": 2}]
