"""Paired synthetic domains with planted topics, for end-to-end experiments.

Users and items of both domains draw a latent topic. A user interacts with a
same-topic item far more often than with a cross-topic one. Item appeal within a
topic is skewed by a lognormal popularity factor. Each interaction carries a
short review drawn from the item's topic vocabulary, optionally diluted with
generic words.
Both domains use one shared word table in which each topic's words cluster
around a topic centroid, so textual features are comparable across domains
while users and items are disjoint.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import DatasetBundle, WordSemanticTable, build_bundle, write_word_vectors
from .seeding import make_rng


@dataclass
class Scenario:
    n_topics: int = 4
    source_users: int = 300
    source_items: int = 200
    target_users: int = 300
    target_items: int = 200
    source_density: float = 0.05
    target_density: float = 0.05
    target_keep: float = 0.2
    p_same: float = 0.9
    p_cross: float = 0.02
    words_per_topic: int = 25
    generic_words: int = 50
    review_length: int = 10
    topic_word_share: float = 1.0
    dim: int = 16
    centroid_scale: float = 1.0
    word_noise: float = 0.1
    popularity_sigma: float = 1.0

    def validate(self):
        if self.n_topics < 1:
            raise ValueError("scenario needs at least one topic")
        for name in ("source_users", "source_items", "target_users", "target_items",
                     "review_length", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("source_density", "target_density", "target_keep", "topic_word_share"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.word_noise < 0 or self.popularity_sigma < 0 or self.centroid_scale <= 0:
            raise ValueError("word_noise and popularity_sigma must be >= 0, centroid_scale > 0")
        if not 0 <= self.p_cross <= self.p_same:
            raise ValueError("need 0 <= p_cross <= p_same")


def word_table(sc: Scenario, seed: int) -> WordSemanticTable:
    rng = make_rng(seed, "synth", "words")
    centroids = rng.normal(0.0, sc.centroid_scale / np.sqrt(sc.dim), size=(sc.n_topics, sc.dim))
    centroids *= sc.centroid_scale / np.linalg.norm(centroids, axis=1, keepdims=True)
    tokens, rows = [], []
    for t in range(sc.n_topics):
        for w in range(sc.words_per_topic):
            tokens.append(f"t{t}w{w}")
            rows.append(centroids[t] + rng.normal(0.0, sc.word_noise / np.sqrt(sc.dim), sc.dim))
    for w in range(sc.generic_words):
        tokens.append(f"g{w}")
        rows.append(rng.normal(0.0, sc.centroid_scale / np.sqrt(sc.dim), sc.dim))
    return WordSemanticTable(tokens, np.array(rows))


def _domain(sc: Scenario, seed: int, name: str, n_users: int, n_items: int, density: float):
    rng = make_rng(seed, "synth", name)
    ut = rng.integers(0, sc.n_topics, n_users)
    it = rng.integers(0, sc.n_topics, n_items)
    aff = np.where(ut[:, None] == it[None, :], sc.p_same, sc.p_cross)
    if sc.popularity_sigma > 0:
        aff = aff * rng.lognormal(0.0, sc.popularity_sigma, n_items)[None, :]
    prob = np.clip(density * aff / aff.mean(), 0.0, 1.0)
    hits = np.argwhere(rng.random((n_users, n_items)) < prob)
    n_topic_words = rng.binomial(sc.review_length, sc.topic_word_share, size=len(hits))
    pair_reviews = {}
    for (u, i), nt in zip(hits, n_topic_words):
        topic_words = rng.integers(0, sc.words_per_topic, nt)
        generic = rng.integers(0, sc.generic_words, sc.review_length - nt)
        tokens = [f"t{it[i]}w{w}" for w in topic_words] + [f"g{w}" for w in generic]
        pair_reviews[(f"{name[0]}u{u:04d}", f"{name[0]}i{i:04d}")] = tokens
    return pair_reviews, ut, it


def generate(sc: Scenario | None = None, seed: int = 0):
    """Build ``(source_bundle, target_bundle, table)`` for a scenario."""
    sc = sc or Scenario()
    sc.validate()
    table = word_table(sc, seed)
    out = []
    for name, nu, ni, dens, keep in (
        ("source", sc.source_users, sc.source_items, sc.source_density, 1.0),
        ("target", sc.target_users, sc.target_items, sc.target_density, sc.target_keep),
    ):
        pairs, ut, it = _domain(sc, seed, name, nu, ni, dens)
        cfg = {"scenario": asdict(sc), "domain": name, "seed": seed}
        bundle = build_bundle(pairs, table, core=1, keep_fraction=keep, seed=seed, config=cfg)
        ukeys = {f"{name[0]}u{u:04d}": int(t) for u, t in enumerate(ut)}
        ikeys = {f"{name[0]}i{i:04d}": int(t) for i, t in enumerate(it)}
        bundle.user_topics = np.array([ukeys[k] for k in bundle.interactions.user_keys])
        bundle.item_topics = np.array([ikeys[k] for k in bundle.interactions.item_keys])
        out.append(bundle)
    return out[0], out[1], table


def write(out, sc: Scenario | None = None, seed: int = 0) -> dict:
    """Generate and save both bundles plus the shared word table under ``out``."""
    out = Path(out)
    source, target, table = generate(sc, seed)
    paths = {}
    for name, bundle in (("source", source), ("target", target)):
        path = bundle.save(out / name)
        for side, keys, topics in (("users", bundle.interactions.user_keys, bundle.user_topics),
                                   ("items", bundle.interactions.item_keys, bundle.item_topics)):
            with open(path / f"{side[:-1]}_topics.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "key", "topic"])
                w.writerows((j, k, int(t)) for j, (k, t) in enumerate(zip(keys, topics)))
        paths[name] = path
    write_word_vectors(table, out / "words.bin", "binary")
    paths["words"] = out / "words.bin"
    return paths
