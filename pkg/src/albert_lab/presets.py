"""Named model configurations and the published parameter counts they should reproduce."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .model import ModelConfig, count_parameters

_BASE = dict(num_layers=12, hidden_size=768, vocab_size=30000)

PRESETS: dict[str, ModelConfig] = {
    "bert-base": ModelConfig(**_BASE, embedding_size=768, sharing_strategy="none", objective="mlm_nsp"),
    "bert-large": ModelConfig(num_layers=24, hidden_size=1024, embedding_size=1024, vocab_size=30000,
                              sharing_strategy="none", objective="mlm_nsp"),
    "bert-xlarge": ModelConfig(num_layers=24, hidden_size=2048, embedding_size=2048, vocab_size=30000,
                               sharing_strategy="none", objective="mlm_nsp"),
    "albert-base": ModelConfig(**_BASE, embedding_size=128, sharing_strategy="all"),
    "albert-large": ModelConfig(num_layers=24, hidden_size=1024, embedding_size=128, vocab_size=30000),
    "albert-xlarge": ModelConfig(num_layers=24, hidden_size=2048, embedding_size=128, vocab_size=30000),
    "albert-xxlarge": ModelConfig(num_layers=12, hidden_size=4096, embedding_size=128, vocab_size=30000),
}

_SHARING_NAMES = {"all": "shared", "none": "notshared", "attention_only": "shared-attention", "ffn_only": "shared-ffn"}
for _e in (64, 128, 256, 768):
    for _s, _tag in _SHARING_NAMES.items():
        PRESETS[f"albert-base-e{_e}-{_tag}"] = ModelConfig(**_BASE, embedding_size=_e, sharing_strategy=_s)


def get_preset(name: str) -> ModelConfig:
    try:
        return dataclasses.replace(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


@dataclass(frozen=True)
class PublishedCount:
    table: str
    row: str
    preset: str
    millions: float


PUBLISHED: tuple[PublishedCount, ...] = (
    # configuration table with head counts
    PublishedCount("1", "BERT base", "bert-base", 110),
    PublishedCount("1", "BERT large", "bert-large", 340),
    PublishedCount("1", "BERT xlarge", "bert-xlarge", 1370),
    PublishedCount("1", "ALBERT base", "albert-base", 12),
    PublishedCount("1", "ALBERT large", "albert-large", 18),
    PublishedCount("1", "ALBERT xlarge", "albert-xlarge", 59),
    PublishedCount("1", "ALBERT xxlarge", "albert-xxlarge", 233),
    # main model table
    PublishedCount("2", "BERT base", "bert-base", 108),
    PublishedCount("2", "BERT large", "bert-large", 334),
    PublishedCount("2", "ALBERT base", "albert-base", 12),
    PublishedCount("2", "ALBERT large", "albert-large", 18),
    PublishedCount("2", "ALBERT xlarge", "albert-xlarge", 60),
    PublishedCount("2", "ALBERT xxlarge", "albert-xxlarge", 235),
    # embedding size sweep, ALBERT-base
    PublishedCount("3", "not-shared E=64", "albert-base-e64-notshared", 87),
    PublishedCount("3", "not-shared E=128", "albert-base-e128-notshared", 89),
    PublishedCount("3", "not-shared E=256", "albert-base-e256-notshared", 93),
    PublishedCount("3", "not-shared E=768", "albert-base-e768-notshared", 108),
    PublishedCount("3", "all-shared E=64", "albert-base-e64-shared", 10),
    PublishedCount("3", "all-shared E=128", "albert-base-e128-shared", 12),
    PublishedCount("3", "all-shared E=256", "albert-base-e256-shared", 16),
    PublishedCount("3", "all-shared E=768", "albert-base-e768-shared", 31),
    # sharing strategies, ALBERT-base
    PublishedCount("4", "E=768 all-shared", "albert-base-e768-shared", 31),
    PublishedCount("4", "E=768 shared-attention", "albert-base-e768-shared-attention", 83),
    PublishedCount("4", "E=768 shared-FFN", "albert-base-e768-shared-ffn", 57),
    PublishedCount("4", "E=768 not-shared", "albert-base-e768-notshared", 108),
    PublishedCount("4", "E=128 all-shared", "albert-base-e128-shared", 12),
    PublishedCount("4", "E=128 shared-attention", "albert-base-e128-shared-attention", 64),
    PublishedCount("4", "E=128 shared-FFN", "albert-base-e128-shared-ffn", 38),
    PublishedCount("4", "E=128 not-shared", "albert-base-e128-notshared", 89),
)


def table_rows(table: str = "all") -> list[dict]:
    """Reproduce the published parameter columns with relative deviations."""
    rows = []
    for pub in PUBLISHED:
        if table not in ("all", pub.table):
            continue
        total = count_parameters(PRESETS[pub.preset]).total
        rows.append({
            "table": pub.table,
            "row": pub.row,
            "preset": pub.preset,
            "published_M": pub.millions,
            "computed_M": total / 1e6,
            "rel_dev": total / (pub.millions * 1e6) - 1.0,
        })
    return rows
