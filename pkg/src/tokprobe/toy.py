"""Desk-scale artifacts: fixture vocabulary, random encoder, synthetic tasks.

Everything is a pure function of the seed, so the bundled copies under
``toydata/`` can be regenerated byte for byte with ``build_toy_artifacts``.
"""
from __future__ import annotations

import os
from importlib import resources

import numpy as np

from .datasets import ProbingExample, bigram_shift, clause_swap, example_rng, write_senteval_tsv
from .model_io import EncoderConfig, manifest, save_config, save_vocab, save_weight_archive
from .tokenizer import SPECIAL_TOKENS, Vocabulary

# vocab_size comes from the fixture vocabulary
TOY_SHAPE = dict(
    num_layers=4,
    num_heads=4,
    hidden_size=64,
    intermediate_size=256,
    max_position=128,
    type_vocab_size=2,
    layer_norm_eps=1e-12,
)

DETERMINERS = ["the", "a", "this", "that", "every", "my", "his", "her", "their", "our"]
PLURAL_DETERMINERS = ["the", "some", "these", "those", "my", "his", "her", "their", "our", "many"]
NOUNS = [
    "book", "dog", "cat", "car", "house", "tree", "river", "city", "friend", "teacher", "doctor", "letter",
    "door", "window", "table", "road", "garden", "horse", "bird", "song", "story", "ship", "king", "queen",
    "farmer", "student", "market", "apple", "idea", "girl", "boy", "box", "key", "boat", "hat", "cup",
]
IRREGULAR_PLURALS = {"man": "men", "woman": "women", "child": "children", "foot": "feet", "person": "people"}
PLURALS_IN_VOCAB = {"dogs", "books", "girls"}
REGULAR_VERBS = [
    "walk", "jump", "look", "play", "open", "call", "help", "watch", "visit", "kick", "paint", "clean",
    "cook", "pull", "push", "start", "finish", "climb", "want", "need",
]
IRREGULAR_VERBS = {
    "see": ("saw", "sees"), "take": ("took", "takes"), "break": ("broke", "breaks"), "cut": ("cut", "cuts"),
    "eat": ("ate", "eats"), "find": ("found", "finds"), "give": ("gave", "gives"), "write": ("wrote", "writes"),
    "read": ("read", "reads"), "do": ("did", "does"), "make": ("made", "makes"), "hold": ("held", "holds"),
}
ADJECTIVES = ["big", "small", "old", "young", "red", "green", "happy", "sad", "tall", "quiet", "dark", "bright"]
PREPOSITIONS = ["at", "in", "on", "near", "under", "with", "from", "behind", "into", "over"]
ADVERBS = ["quickly", "slowly", "never", "always", "often", "again", "today", "there"]
PRONOUNS = ["i", "you", "he", "she", "it", "we", "they", "me", "him", "them", "myself", "himself", "herself"]
FUNCTION_WORDS = [
    "and", "but", "or", "so", "then", "is", "was", "are", "were", "has", "had", "will", "not", "very",
    "of", "for", "to", "as", "if", "when", "because", "some", "these", "those", "many", "no", "an",
    "cafe", "naive", "resume", "don", "won", "can", "zebra", "glass", "market", "un", "re",
]
SUFFIX_PIECES = ["##s", "##ed", "##es", "##d", "##ing", "##er", "##ly", "##en", "##ness", "##ful", "##able"]
MARKER = "zebra"


def vocabulary_tokens() -> list[str]:
    punct = [chr(c) for c in range(33, 127) if not chr(c).isalnum()]
    digits = [str(i) for i in range(10)]
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    words = (
        DETERMINERS + PLURAL_DETERMINERS + NOUNS + list(IRREGULAR_PLURALS) + list(IRREGULAR_PLURALS.values())
        + sorted(PLURALS_IN_VOCAB) + REGULAR_VERBS + list(IRREGULAR_VERBS)
        + [f for pair in IRREGULAR_VERBS.values() for f in pair] + ADJECTIVES + PREPOSITIONS + ADVERBS
        + PRONOUNS + FUNCTION_WORDS
    )
    base = list(SPECIAL_TOKENS) + punct + digits + letters + ["##" + c for c in letters + digits] + SUFFIX_PIECES
    ordered, seen = [], set()
    for w in base + words:
        if w not in seen:
            ordered.append(w)
            seen.add(w)
    return ordered


def toy_vocabulary() -> Vocabulary:
    return Vocabulary(vocabulary_tokens())


def toy_config(vocab: Vocabulary | None = None) -> EncoderConfig:
    vocab = vocab or toy_vocabulary()
    return EncoderConfig(vocab_size=len(vocab), **TOY_SHAPE)


def random_weights(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Random BERT-shaped weights scaled so attention is neither flat nor one-hot."""
    rng = np.random.default_rng(seed)
    d, ff = config.hidden_size, config.intermediate_size
    out = {}
    for name, shape in sorted(manifest(config).items()):
        if name.endswith("LayerNorm.weight"):
            arr = 1.0 + 0.05 * rng.standard_normal(shape)
        elif name.endswith("LayerNorm.bias") or name.endswith(".bias"):
            arr = 0.05 * rng.standard_normal(shape)
        elif "word_embeddings" in name:
            arr = rng.standard_normal(shape)
        elif "position_embeddings" in name:
            arr = 0.7 * rng.standard_normal(shape)
        elif "token_type" in name:
            arr = 0.1 * rng.standard_normal(shape)
        elif "output.dense.weight" in name and "attention" not in name:
            arr = rng.standard_normal(shape) / np.sqrt(ff)
        else:
            arr = rng.standard_normal(shape) / np.sqrt(d)
        out[name] = arr.astype(np.float32)
    return out


# ---------------------------------------------------------------- sentence grammar


def pluralize(noun):
    if noun.endswith(("x", "s", "ch", "sh")):
        return noun + "es"
    if noun.endswith("y") and noun[-2] not in "aeiou":
        return noun[:-1] + "ies"
    return noun + "s"


def _noun_phrase(rng, plural, allow_adj=True):
    if plural:
        det = PLURAL_DETERMINERS[rng.integers(len(PLURAL_DETERMINERS))]
        pool = NOUNS + list(IRREGULAR_PLURALS)
        noun = pool[rng.integers(len(pool))]
        noun = IRREGULAR_PLURALS.get(noun) or pluralize(noun)
    else:
        det = DETERMINERS[rng.integers(len(DETERMINERS))]
        pool = NOUNS + list(IRREGULAR_PLURALS)
        noun = pool[rng.integers(len(pool))]
    words = [det]
    if allow_adj and rng.random() < 0.4:
        words.append(ADJECTIVES[rng.integers(len(ADJECTIVES))])
    words.append(noun)
    return words


def _verb(rng, past, plural_subject):
    if rng.random() < 0.4:
        base = list(IRREGULAR_VERBS)[rng.integers(len(IRREGULAR_VERBS))]
        past_form, third = IRREGULAR_VERBS[base]
    else:
        base = REGULAR_VERBS[rng.integers(len(REGULAR_VERBS))]
        past_form = base + ("d" if base.endswith("e") else "ed")
        third = base + "s"
    if past:
        return past_form
    return base if plural_subject else third


def _clause(rng, past=None, obj_plural=None, subj_plural=None):
    past = bool(rng.integers(2)) if past is None else past
    subj_plural = bool(rng.integers(2)) if subj_plural is None else subj_plural
    obj_plural = bool(rng.integers(2)) if obj_plural is None else obj_plural
    words = _noun_phrase(rng, subj_plural) + [_verb(rng, past, subj_plural)] + _noun_phrase(rng, obj_plural)
    if rng.random() < 0.35:
        words += [PREPOSITIONS[rng.integers(len(PREPOSITIONS))]] + _noun_phrase(rng, bool(rng.integers(2)), False)
    if rng.random() < 0.2:
        words.append(ADVERBS[rng.integers(len(ADVERBS))])
    return words


def _split_counts(n_train, n_val, n_test):
    return [("tr", n_train), ("va", n_val), ("te", n_test)]


def make_tense(rng, sizes):
    out = []
    for split, n in sizes:
        for k in range(n):
            past = k % 2 == 0
            out.append(ProbingExample(split, "PAST" if past else "PRES", " ".join(_clause(rng, past=past) + ["."])))
    return out


def make_objnum(rng, sizes):
    out = []
    for split, n in sizes:
        for k in range(n):
            plural = k % 2 == 0
            words = _clause(rng, obj_plural=plural)
            out.append(ProbingExample(split, "NNS" if plural else "NN", " ".join(words + ["."])))
    return out


def length_bin(n_words):
    """SentEval-style length bin id for a word count."""
    edges = (8, 12, 16, 20, 25)
    return sum(n_words > e for e in edges)


def make_sentlen(rng, sizes):
    out = []
    for split, n in sizes:
        for _ in range(n):
            words = _clause(rng)
            while rng.random() < 0.45 and len(words) < 28:
                words += [["and", "but", "so", "because"][rng.integers(4)]] + _clause(rng)
            words.append(".")
            out.append(ProbingExample(split, len(words), " ".join(words), meta={"bin": length_bin(len(words))}))
    return out


def make_bshift(rng, sizes, seed):
    out = []
    for split, n in sizes:
        for k in range(n):
            words = _clause(rng) + ["."]
            text = " ".join(words)
            if k % 2:
                shifted, _ = bigram_shift(text, example_rng(seed, text, "toy-bshift"))
                out.append(ProbingExample(split, "I", shifted))
            else:
                out.append(ProbingExample(split, "O", text))
    return out


def make_coordinv(rng, sizes):
    out = []
    for split, n in sizes:
        for k in range(n):
            coord = "but" if rng.random() < 0.3 else "and"
            if rng.random() < 0.02:
                coord = "or"
            words = _clause(rng, past=True) + [coord] + _clause(rng, past=True) + ["."]
            if k % 2 and coord != "or":
                words, _ = clause_swap(words)
                out.append(ProbingExample(split, "I", " ".join(words)))
            else:
                out.append(ProbingExample(split, "O", " ".join(words)))
    return out


def make_marker_task(rng, sizes, marker=MARKER):
    """Label "yes" iff the marker word was injected into a random word salad."""
    pool = [w for w in NOUNS + ADJECTIVES + REGULAR_VERBS + DETERMINERS + PREPOSITIONS if w != marker]
    out = []
    for split, n in sizes:
        for k in range(n):
            length = int(rng.integers(6, 15))
            words = [pool[i] for i in rng.integers(len(pool), size=length)]
            has = k % 2 == 0
            if has:
                words.insert(int(rng.integers(1, length)), marker)
            out.append(ProbingExample(split, "yes" if has else "no", " ".join(words + ["."])))
    return out


TOY_TASKS = ("sentlen", "tense", "objnum", "bshift", "coordinv")
_FILENAMES = {
    "sentlen": "sentence_length.txt",
    "tense": "past_present.txt",
    "objnum": "obj_number.txt",
    "bshift": "bigram_shift.txt",
    "coordinv": "coordination_inversion.txt",
}


def toy_datasets(seed=0, n_train=600, n_val=150, n_test=150):
    sizes = _split_counts(n_train, n_val, n_test)
    makers = {
        "sentlen": lambda r: make_sentlen(r, sizes),
        "tense": lambda r: make_tense(r, sizes),
        "objnum": lambda r: make_objnum(r, sizes),
        "bshift": lambda r: make_bshift(r, sizes, seed),
        "coordinv": lambda r: make_coordinv(r, sizes),
    }
    return {name: makers[name](np.random.default_rng([seed, i])) for i, name in enumerate(TOY_TASKS)}


def build_toy_artifacts(outdir, seed=0, **sizes):
    """Write config.json, vocab.txt, weights.safetensors and data/*.txt."""
    os.makedirs(os.path.join(outdir, "data"), exist_ok=True)
    vocab = toy_vocabulary()
    config = toy_config(vocab)
    save_vocab(vocab, os.path.join(outdir, "vocab.txt"))
    save_config(config, os.path.join(outdir, "config.json"))
    save_weight_archive(random_weights(config, seed), os.path.join(outdir, "weights.safetensors"),
                        metadata={"generator": "tokprobe.toy", "seed": seed})
    for name, examples in toy_datasets(seed, **sizes).items():
        write_senteval_tsv(examples, os.path.join(outdir, "data", _FILENAMES[name]))
    return outdir


def bundled_dir() -> str:
    return str(resources.files("tokprobe") / "toydata")
