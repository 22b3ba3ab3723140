"""Seeded synthetic corpora standing in for the non-redistributable tweet data.

Each class owns a handful of marker words; sentences mix markers with words
from a shared pool. ``noise`` swaps markers for another class's markers and
``label_noise`` flips labels, which makes the task imperfectly separable.
"""

from __future__ import annotations

import numpy as np

from .corpus import RawExample

_SYLLABLES = ["ba", "ka", "la", "ma", "na", "sa", "ta", "wa", "ya", "za", "hi", "mu", "ro", "de", "qu", "fe"]


def _word(rng, n_syll):
    return "".join(rng.choice(_SYLLABLES, size=n_syll))


def _distinct_words(rng, count, taken):
    out = []
    while len(out) < count:
        w = _word(rng, int(rng.integers(2, 4)))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_corpus(n_examples: int, num_classes: int = 4, seed: int = 0, markers_per_class: int = 4,
                shared_words: int = 30, min_words: int = 3, max_words: int = 9, markers_per_example: int = 2,
                noise: float = 0.0, label_noise: float = 0.0, placeholder_rate: float = 0.1,
                lexicon_seed: int | None = None, id_prefix: str = "ex") -> list[RawExample]:
    """Draw ``n_examples`` labeled sentences with balanced classes.

    ``lexicon_seed`` fixes the word lists independently of the sampling seed,
    so train and dev splits can share a lexicon.
    """
    lex_rng = np.random.default_rng(seed if lexicon_seed is None else lexicon_seed)
    taken: set = set()
    markers = [_distinct_words(lex_rng, markers_per_class, taken) for _ in range(num_classes)]
    shared = _distinct_words(lex_rng, shared_words, taken)
    labels = [f"class_{c}" for c in range(num_classes)]

    rng = np.random.default_rng([seed, 17])
    out = []
    for i in range(n_examples):
        c = i % num_classes
        n_words = int(rng.integers(min_words, max_words + 1))
        words = list(rng.choice(shared, size=n_words))
        for _ in range(markers_per_example):
            src = c
            if noise and rng.random() < noise:
                src = int(rng.integers(num_classes))
            words[int(rng.integers(len(words)))] = str(rng.choice(markers[src]))
        if placeholder_rate and rng.random() < placeholder_rate:
            words.insert(int(rng.integers(len(words) + 1)), str(rng.choice(["USER", "URL"])))
        label = c
        if label_noise and rng.random() < label_noise:
            label = int(rng.integers(num_classes))
        out.append(RawExample(f"{id_prefix}{i:05d}", " ".join(words), labels[label]))
    order = rng.permutation(n_examples)
    return [out[i] for i in order]
