"""Deterministic toy corpora for desk-scale pretraining checks.

``template_corpus``: short template sentences over a vocabulary of under 64
words; nouns fix their verb and object, so most masked words are recoverable
from context.

``topic_order_corpus``: one document per topic, each with its own disjoint
word list, and every segment opens with an ordinal marker that increases
through the document.  Topic tells documents apart (what NSP can exploit);
the ordinals carry the order signal (what SOP needs).

Run ``python -m albert_lab.synthetic templates out.txt`` to write a corpus.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

ADJECTIVES = ["red", "blue", "green", "small", "big", "old", "young", "quiet"]
NOUNS = ["cat", "dog", "bird", "horse", "fox", "mouse", "goat", "bear", "duck", "frog"]
VERBS = ["eats", "likes", "finds", "hides", "wants", "sees", "takes", "drops", "keeps", "smells"]
OBJECTS = ["bread", "apples", "fish", "seeds", "cheese", "grass", "honey", "corn", "berries", "nuts"]
PLACES = ["house", "field", "garden", "barn", "forest", "river"]


def template_sentence(rng: np.random.Generator) -> str:
    i = int(rng.integers(len(NOUNS)))
    adj = ADJECTIVES[int(rng.integers(len(ADJECTIVES)))]
    place = PLACES[int(rng.integers(len(PLACES)))]
    obj = OBJECTS[(3 * i + 1) % len(OBJECTS)]
    return f"the {adj} {NOUNS[i]} {VERBS[i]} the {obj} in the {place}"


def template_corpus(n_docs: int = 200, segments_per_doc: int = 6, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        docs.append("\n".join(template_sentence(rng) for _ in range(segments_per_doc)))
    return "\n\n".join(docs) + "\n"


def topic_words(n_topics: int, words_per_topic: int) -> list[list[str]]:
    return [[f"t{t}w{w}" for w in range(words_per_topic)] for t in range(n_topics)]


def topic_order_corpus(
    n_topics: int = 32,
    words_per_topic: int = 4,
    segments_per_doc: int = 4,
    min_words: int = 3,
    max_words: int = 5,
    seed: int = 0,
) -> str:
    """One document per topic; segment k reads ``o<k> w w ...`` with words from that topic only."""
    rng = np.random.default_rng(seed)
    docs = []
    for words in topic_words(n_topics, words_per_topic):
        lines = []
        for k in range(segments_per_doc):
            n = int(rng.integers(min_words, max_words + 1))
            body = " ".join(words[int(j)] for j in rng.integers(len(words), size=n))
            lines.append(f"o{k} {body}")
        docs.append("\n".join(lines))
    return "\n\n".join(docs) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m albert_lab.synthetic")
    ap.add_argument("kind", choices=["templates", "topic-order"])
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--docs", type=int, default=200, help="templates: number of documents")
    args = ap.parse_args(argv)
    if args.kind == "templates":
        text = template_corpus(n_docs=args.docs, seed=args.seed)
    else:
        text = topic_order_corpus(seed=args.seed)
    args.out.write_text(text, encoding="utf-8")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
