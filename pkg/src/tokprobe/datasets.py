"""Probing data: TSV ingestion, perturbations, shift masks, subsampling."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CannotPerturbError, CoordinatorFilterError, DatasetError, MaskUnavailableError
from .tokenizer import TokenizedSentence, is_punctuation_word

log = logging.getLogger(__name__)

SPLITS = ("tr", "va", "te")
COORDINATORS = ("and", "but")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    filename: str
    kind: str = "classifier"
    classes: tuple | None = None
    labeled_original: str | None = None
    labeled_perturbed: str | None = None


TASKS = {
    "sentlen": TaskSpec("sentlen", "sentence_length.txt", kind="regressor"),
    "tense": TaskSpec("tense", "past_present.txt", classes=("PAST", "PRES")),
    "objnum": TaskSpec("objnum", "obj_number.txt", classes=("NN", "NNS")),
    "subjnum": TaskSpec("subjnum", "subj_number.txt", classes=("NN", "NNS")),
    "bshift": TaskSpec("bshift", "bigram_shift.txt", classes=("I", "O"), labeled_original="O", labeled_perturbed="I"),
    "coordinv": TaskSpec("coordinv", "coordination_inversion.txt", classes=("I", "O"), labeled_original="O",
                         labeled_perturbed="I"),
}


def get_task(name) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise DatasetError(f"unknown task {name!r}; known: {', '.join(sorted(TASKS))}") from None


@dataclass
class ProbingExample:
    split: str
    label: object
    sentence: str
    twin: str | None = None
    meta: dict = field(default_factory=dict)


def load_senteval_tsv(path, task) -> list[ProbingExample]:
    """Parse ``split<TAB>label<TAB>sentence`` rows.

    For the sentence-length task the label becomes the sentence's word count
    (the probe regresses it); the original SentEval bin is kept in ``meta``.
    """
    spec = task if isinstance(task, TaskSpec) else get_task(task)
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DatasetError(f"expected 3 tab-separated columns, found {len(cols)}", line=lineno)
            split, label, sentence = cols
            if split not in SPLITS:
                raise DatasetError(f"unknown split tag {split!r}", line=lineno)
            meta = {}
            if spec.kind == "regressor":
                try:
                    meta["bin"] = int(label)
                except ValueError:
                    raise DatasetError(f"unknown label {label!r} (expected an integer)", line=lineno) from None
                label = len(sentence.split())
            elif spec.classes is not None and label not in spec.classes:
                raise DatasetError(f"unknown label {label!r} for task {spec.name}", line=lineno)
            examples.append(ProbingExample(split, label, sentence, meta=meta))
    for split, counts in class_counts(examples).items():
        log.info("%s %s: %s", spec.name, split, dict(sorted(counts.items(), key=lambda kv: str(kv[0]))))
    return examples


def class_counts(examples) -> dict[str, Counter]:
    out = defaultdict(Counter)
    for ex in examples:
        out[ex.split][ex.label] += 1
    return dict(out)


def write_senteval_tsv(examples, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            label = ex.meta.get("bin", ex.label) if isinstance(ex.label, int) else ex.label
            f.write(f"{ex.split}\t{label}\t{ex.sentence}\n")


# ---------------------------------------------------------------- seeds


def example_rng(seed: int, key: str, salt: str = "") -> np.random.Generator:
    """Counter-based generator keyed by (seed, salt, example text).

    Keying on content instead of position keeps per-example draws stable when
    the dataset is reordered or filtered.
    """
    digest = hashlib.sha256(f"{seed}\x1f{salt}\x1f{key}".encode("utf-8")).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


# ---------------------------------------------------------------- bigram shift


def eligible_bigrams(words) -> list[int]:
    """Left indices i of swappable pairs (i, i+1): never the first word, no punctuation."""
    return [
        i for i in range(1, len(words) - 1)
        if not is_punctuation_word(words[i]) and not is_punctuation_word(words[i + 1])
    ]


def swap_adjacent(words, i):
    out = list(words)
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def bigram_shift(sentence: str, rng: np.random.Generator | None = None, choice: int | None = None):
    """Swap one random eligible adjacent word pair.

    Returns ``(shifted_text, (i, i + 1))`` with whitespace-word indices.
    ``choice`` forces the left index of the pair.
    """
    words = sentence.split()
    pairs = eligible_bigrams(words)
    if not pairs:
        raise CannotPerturbError(f"no eligible bigram in {sentence!r}")
    if choice is None:
        if rng is None:
            raise ValueError("bigram_shift needs an rng or an explicit choice")
        i = pairs[int(rng.integers(len(pairs)))]
    else:
        if choice not in pairs:
            raise CannotPerturbError(f"pair at {choice} is not eligible in {sentence!r}")
        i = choice
    return " ".join(swap_adjacent(words, i)), (i, i + 1)


@dataclass
class ShiftMask:
    mask: list  # m_i per token
    positions: list  # V

    def __post_init__(self):
        if sum(self.mask) != len(self.positions):
            raise ValueError("mask and position set disagree")


def build_shift_mask(sentence: TokenizedSentence, swapped_word_indices) -> ShiftMask:
    """Mark every sub-word token of the swapped words.

    Word indices refer to whitespace words of the raw text, which is what the
    tokenizer records as ``source_index``.
    """
    positions = []
    for w in swapped_word_indices:
        pos = sentence.positions_of_source(w)
        if not pos:
            raise MaskUnavailableError(f"word {w} has no tokens (truncated?)")
        positions.extend(pos)
    positions = sorted(p for p in set(positions) if not sentence.is_special[p])
    if len(positions) < 2:
        raise MaskUnavailableError("shifted bigram covers fewer than two tokens")
    mask = [0] * sentence.n
    for p in positions:
        mask[p] = 1
    return ShiftMask(mask, positions)


def word_permutation_tokens(source: TokenizedSentence, target: TokenizedSentence, word_perm) -> list[int] | None:
    """Map every real token position of ``source`` to its position in ``target``.

    ``word_perm[k]`` is the target index of source whitespace word k. Specials
    map to specials. Returns None when the two tokenizations cannot be aligned
    (different piece counts per word, e.g. after truncation).
    """
    src_pos = defaultdict(list)
    tgt_pos = defaultdict(list)
    for i, s in enumerate(source.source_index):
        if s is not None:
            src_pos[s].append(i)
    for i, s in enumerate(target.source_index):
        if s is not None:
            tgt_pos[s].append(i)
    real = source.real_positions
    out = [None] * len(real)
    index_of = {p: k for k, p in enumerate(real)}
    for w, positions in src_pos.items():
        tw = word_perm[w]
        tp = tgt_pos.get(tw, [])
        if len(tp) != len(positions):
            return None
        for a, b in zip(positions, tp):
            out[index_of[a]] = b
    # [CLS] and [SEP]
    out[0] = 0
    if source.n_real != target.n_real:
        return None
    out[-1] = target.n_real - 1
    if any(v is None for v in out):
        return None
    return out


# ---------------------------------------------------------------- coordination inversion


class CoordPair(NamedTuple):
    original: str
    inverted: str
    coordinator_index: int  # whitespace-word index in the original sentence


SENTENCE_FINAL = set(".!?\u2026")


def is_sentence_final(word: str) -> bool:
    """True for whitespace tokens made only of sentence-final marks (".", "?!", "...")."""
    return bool(word) and all(ch in SENTENCE_FINAL for ch in word)


def clause_swap(words):
    """Swap the clauses around the single coordinator, keeping final punctuation last.

    Returns ``(new_words, perm)`` with ``perm[k]`` the new index of word k.
    """
    hits = [i for i, w in enumerate(words) if w.lower() in COORDINATORS]
    if len(hits) != 1:
        raise CoordinatorFilterError(f"expected one coordinator, found {len(hits)}")
    c = hits[0]
    end = len(words) - 1 if words and is_sentence_final(words[-1]) and len(words) - 1 > c else len(words)
    left = list(range(0, c))
    right = list(range(c + 1, end))
    order = right + [c] + left + list(range(end, len(words)))
    new_words = [words[k] for k in order]
    perm = [0] * len(words)
    for new_pos, k in enumerate(order):
        perm[k] = new_pos
    return new_words, perm


def coordinv_reconstruct(example: ProbingExample, spec: TaskSpec = TASKS["coordinv"]) -> CoordPair:
    words = example.sentence.split()
    swapped, perm = clause_swap(words)
    swapped_text = " ".join(swapped)
    coord = next(i for i, w in enumerate(words) if w.lower() in COORDINATORS)
    if example.label == spec.labeled_perturbed:
        return CoordPair(swapped_text, example.sentence, perm[coord])
    return CoordPair(example.sentence, swapped_text, coord)


def filter_coordinated(examples):
    """Keep examples with exactly one coordinator; returns ``(pairs, n_filtered)``."""
    pairs, dropped = [], 0
    for ex in examples:
        try:
            pairs.append((ex, coordinv_reconstruct(ex)))
        except CoordinatorFilterError:
            dropped += 1
    return pairs, dropped


# ---------------------------------------------------------------- subsampling


def _largest_remainder(counts: dict, total: int) -> dict:
    n = sum(counts.values())
    quotas = {k: total * c / n for k, c in counts.items()}
    alloc = {k: min(counts[k], math.floor(q)) for k, q in quotas.items()}
    remaining = total - sum(alloc.values())
    order = sorted(counts, key=lambda k: (-(quotas[k] - math.floor(quotas[k])), str(k)))
    while remaining > 0:
        progressed = False
        for k in order:
            if remaining and alloc[k] < counts[k]:
                alloc[k] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return alloc


def subsample_indices(examples, fraction: float, seed: int = 0, split: str = "tr") -> list[int]:
    """Indices kept by a class-stratified sample of ``ceil(fraction * N)`` training examples.

    Examples of other splits are always kept; indices come back in order.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train = [i for i, ex in enumerate(examples) if ex.split == split]
    if not train:
        raise DatasetError(f"split {split!r} is empty")
    if fraction == 1:
        return list(range(len(examples)))
    by_class = defaultdict(list)
    for i in train:
        by_class[examples[i].label].append(i)
    alloc = _largest_remainder({k: len(v) for k, v in by_class.items()}, math.ceil(fraction * len(train)))
    keep = set()
    for label, idx in by_class.items():
        keyed = sorted(idx, key=lambda i: (hashlib.sha256(f"{seed}\x1f{examples[i].sentence}".encode()).digest(), i))
        keep.update(keyed[:alloc[label]])
    return [i for i, ex in enumerate(examples) if ex.split != split or i in keep]


def subsample_train(examples, fraction: float, seed: int = 0, split: str = "tr"):
    """Class-stratified, seed-deterministic subsample of the training split."""
    return [examples[i] for i in subsample_indices(examples, fraction, seed, split)]


# ---------------------------------------------------------------- perturbation files


def write_pairs(pairs, tsv_path, sidecar_path, split="te", original_label="O", perturbed_label="I"):
    """Write original/perturbed pairs as interleaved TSV rows plus a JSON sidecar.

    ``pairs`` holds dicts with ``original``, ``perturbed`` and any extra
    bookkeeping (swap indices, coordinator positions), copied to the sidecar.
    """
    records = []
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as f:
        for k, p in enumerate(pairs):
            f.write(f"{split}\t{original_label}\t{p['original']}\n")
            f.write(f"{split}\t{perturbed_label}\t{p['perturbed']}\n")
            rec = {key: v for key, v in p.items() if key not in ("original", "perturbed")}
            rec.update(pair=k, original_line=2 * k + 1, perturbed_line=2 * k + 2)
            records.append(rec)
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=1, sort_keys=True)
        f.write("\n")
