"""Review ingestion and dataset preparation.

Raw reviews are reduced to implicit feedback (one positive per rated
user/item pair), core-filtered, optionally sparsified and split 80/10/10.
Review words are kept per user and per item, restricted to the vocabulary of a
pretrained word-vector table.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .seeding import make_rng
from .serialization import dumps_json

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class ReviewParseError(ValueError):
    """Too many malformed lines in a review stream."""


@dataclass
class RawRecord:
    user_key: str
    item_key: str
    rating: float
    tokens: list[str]

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("user_key and item_key must be non-empty")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def parse_reviews(stream: Iterable[str], max_malformed: float = 0.01) -> list[RawRecord]:
    """Parse line-delimited JSON reviews (``reviewerID``, ``asin``, ``overall``,
    ``reviewText``).

    Malformed lines are skipped and counted; if more than ``max_malformed`` of
    the non-blank lines are malformed a :class:`ReviewParseError` is raised.
    """
    records = []
    bad = 0
    total = 0
    for lineno, line in enumerate(stream, 1):
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        if not line.strip():
            continue
        total += 1
        try:
            obj = json.loads(line)
            user = str(obj["reviewerID"]).strip()
            item = str(obj["asin"]).strip()
            rating = float(obj["overall"])
            text = obj.get("reviewText") or ""
            if not isinstance(text, str):
                raise TypeError("reviewText is not a string")
            records.append(RawRecord(user, item, rating, tokenize(text)))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            bad += 1
            logger.warning("skipping malformed review line %d: %s", lineno, exc)
    if total and bad / total > max_malformed:
        raise ReviewParseError(f"{bad} of {total} review lines are malformed")
    if bad:
        logger.warning("skipped %d malformed review lines", bad)
    return records


def binarize(records: Iterable[RawRecord]) -> dict[tuple[str, str], list[str]]:
    """Collapse records to positive pairs mapped to their merged review tokens.

    Ratings are ignored: any record makes the pair positive.
    """
    pairs: dict[tuple[str, str], list[str]] = {}
    for r in records:
        pairs.setdefault((r.user_key, r.item_key), []).extend(r.tokens)
    return pairs


def _pair_list(pairs) -> list:
    return list(pairs.keys()) if isinstance(pairs, Mapping) else list(pairs)


def _rebuild(pairs, keep: list):
    if isinstance(pairs, Mapping):
        return {p: pairs[p] for p in keep}
    return keep


def k_core_filter(pairs, k: int):
    """Iteratively drop users and items with fewer than ``k`` interactions.

    ``pairs`` is a collection of ``(user, item)`` tuples or a mapping keyed by
    them; the result has the same kind and preserves input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keys = _pair_list(pairs)
    if k == 1 or not keys:
        return _rebuild(pairs, keys)
    users, u_idx = np.unique(np.array([str(p[0]) for p in keys]), return_inverse=True)
    items, i_idx = np.unique(np.array([str(p[1]) for p in keys]), return_inverse=True)
    alive = np.ones(len(keys), dtype=bool)
    while True:
        du = np.bincount(u_idx[alive], minlength=len(users))
        di = np.bincount(i_idx[alive], minlength=len(items))
        keep = alive & (du[u_idx] >= k) & (di[i_idx] >= k)
        if keep.sum() == alive.sum():
            break
        alive = keep
    return _rebuild(pairs, [p for p, a in zip(keys, alive) if a])


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sparsify(pairs, keep_fraction: float, seed: int):
    """Keep a uniformly random subset of ``round(keep_fraction * n)`` pairs."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    keys = _pair_list(pairs)
    if keep_fraction == 1.0:
        return _rebuild(pairs, keys)
    n_keep = _round_half_up(keep_fraction * len(keys))
    order = sorted(range(len(keys)), key=lambda j: (str(keys[j][0]), str(keys[j][1])))
    rng = make_rng(seed, "sparsify")
    chosen = np.sort(rng.choice(len(keys), size=n_keep, replace=False))
    picked = {order[j] for j in chosen}
    return _rebuild(pairs, [p for j, p in enumerate(keys) if j in picked])


@dataclass
class SplitSet:
    """Disjoint train / validation / test partitions of the positive pairs."""

    train: list
    validation: list
    test: list
    seed: int


def split(pairs, seed: int, fractions=(0.8, 0.1, 0.1)) -> SplitSet:
    """Random 80/10/10 partition, deterministic per seed."""
    keys = sorted(_pair_list(pairs), key=lambda p: (str(p[0]), str(p[1])))
    n = len(keys)
    if n < 10:
        raise ValueError(f"need at least 10 pairs to split, got {n}")
    n_train = _round_half_up(fractions[0] * n)
    n_val = _round_half_up(fractions[1] * n)
    perm = make_rng(seed, "split").permutation(n)
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    train, val, test = ([keys[j] for j in np.sort(p)] for p in parts)
    return SplitSet(train, val, test, seed)


# --------------------------------------------------------------------------
# word vectors


@dataclass
class WordSemanticTable:
    """Frozen pretrained word vectors ``S`` (H x K1) with their tokens."""

    tokens: list[str]
    vectors: np.ndarray
    word_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float32, copy=True)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens):
            raise ValueError("one vector row per token is required")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("word vectors contain non-finite values")
        self.vectors.setflags(write=False)
        self.word_index = {t: j for j, t in enumerate(self.tokens)}
        if len(self.word_index) != len(self.tokens):
            raise ValueError("duplicate tokens in word table")

    @property
    def H(self) -> int:
        return len(self.tokens)

    @property
    def K1(self) -> int:
        return self.vectors.shape[1]

    def restrict(self, vocabulary: Iterable[str]) -> "WordSemanticTable":
        """Sub-table over the sorted intersection with ``vocabulary``."""
        keep = sorted(set(vocabulary) & self.word_index.keys())
        rows = [self.word_index[t] for t in keep]
        return WordSemanticTable(keep, self.vectors[rows].reshape(len(keep), self.K1))


def _parse_header(line: bytes) -> tuple[int, int]:
    try:
        h, d = line.split()
        return int(h), int(d)
    except ValueError:
        raise ValueError(f"unreadable word-vector header: {line[:80]!r}") from None


def load_word_vectors(path, format: str = "auto", vocabulary=None) -> WordSemanticTable:
    """Read word2vec vectors in text or binary layout.

    Binary: ``"H K1\\n"`` then per word a space-terminated token followed by
    K1 little-endian float32 values. Text: one ``token v1 ... vK1`` per line,
    with an optional ``H K1`` header. With ``vocabulary`` only those tokens are
    kept.
    """
    path = Path(path)
    if format == "auto":
        format = "binary" if path.suffix == ".bin" else "text"
    wanted = set(vocabulary) if vocabulary is not None else None
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    if format == "binary":
        with open(path, "rb") as fh:
            H, K1 = _parse_header(fh.readline())
            vec_bytes = 4 * K1
            for _ in range(H):
                buf = bytearray()
                while True:
                    ch = fh.read(1)
                    if not ch:
                        raise ValueError(f"truncated binary word-vector file {path}")
                    if ch == b" ":
                        break
                    if ch != b"\n" or buf:
                        buf.extend(ch)
                raw = fh.read(vec_bytes)
                if len(raw) != vec_bytes:
                    raise ValueError(f"truncated binary word-vector file {path}")
                tok = buf.decode("utf-8", errors="replace")
                if wanted is None or tok in wanted:
                    tokens.append(tok)
                    rows.append(np.frombuffer(raw, dtype="<f4").astype(np.float32))
    elif format == "text":
        K1 = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                parts = line.rstrip("\n").split()
                if not parts:
                    continue
                if lineno == 0 and len(parts) == 2:
                    try:
                        _, K1 = int(parts[0]), int(parts[1])
                        continue
                    except ValueError:
                        pass
                dim = len(parts) - 1
                if K1 is None:
                    K1 = dim
                elif dim != K1:
                    raise ValueError(
                        f"dimension mismatch at line {lineno + 1}: {dim} values, expected {K1}"
                    )
                if wanted is None or parts[0] in wanted:
                    tokens.append(parts[0])
                    rows.append(np.array(parts[1:], dtype=np.float32))
        if K1 is None:
            raise ValueError(f"no vectors found in {path}")
    else:
        raise ValueError(f"unknown word-vector format {format!r}")
    vectors = np.stack(rows) if rows else np.zeros((0, K1), dtype=np.float32)
    return WordSemanticTable(tokens, vectors)


def write_word_vectors(table: WordSemanticTable, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        with open(path, "wb") as fh:
            fh.write(f"{table.H} {table.K1}\n".encode("utf-8"))
            for tok, vec in zip(table.tokens, table.vectors):
                fh.write(tok.encode("utf-8") + b" ")
                fh.write(np.asarray(vec, dtype="<f4").tobytes())
    elif format == "text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{table.H} {table.K1}\n")
            for tok, vec in zip(table.tokens, table.vectors):
                fh.write(tok + " " + " ".join(repr(float(x)) for x in vec) + "\n")
    else:
        raise ValueError(f"unknown word-vector format {format!r}")


# --------------------------------------------------------------------------
# interaction sets and bundles


@dataclass
class InteractionSet:
    """Indexed positive pairs plus per-entity review word sets.

    ``user_words[u]`` holds the sorted unique word ids of ``R_u`` (likewise for
    items); word ids index the bundle's word table.
    """

    user_keys: list[str]
    item_keys: list[str]
    positives: np.ndarray
    user_words: list[np.ndarray]
    item_words: list[np.ndarray]

    @property
    def M(self) -> int:
        return len(self.user_keys)

    @property
    def N(self) -> int:
        return len(self.item_keys)

    @property
    def sparsity(self) -> float:
        return 1.0 - len(self.positives) / (self.M * self.N)

    def matrix(self, pairs=None) -> sp.csr_matrix:
        pairs = self.positives if pairs is None else np.asarray(pairs).reshape(-1, 2)
        return sp.csr_matrix(
            (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(self.M, self.N)
        )


def sparsity_percent(interactions: int, users: int, items: int) -> float:
    """Sparsity ``1 - interactions / (users * items)`` as a percentage, 4 d.p."""
    return round(100.0 * (1.0 - interactions / (users * items)), 4)


def dataset_stats(interactions) -> dict:
    """Interaction, user and item counts with sparsity (percent, 4 d.p.)."""
    n = len(interactions.positives)
    return {
        "interactions": n,
        "users": interactions.M,
        "items": interactions.N,
        "sparsity": sparsity_percent(n, interactions.M, interactions.N),
    }


def _word_sets(pair_idx: np.ndarray, pair_words: list[np.ndarray], n: int, col: int):
    buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
    for row, w in zip(pair_idx, pair_words):
        if len(w):
            buckets[row[col]].append(w)
    return [
        np.unique(np.concatenate(b)).astype(np.int64) if b else np.zeros(0, dtype=np.int64)
        for b in buckets
    ]


@dataclass
class DatasetBundle:
    """Everything one domain needs: indexed interactions, split and word table.

    Review word sets in :attr:`interactions` are built from training pairs only.
    """

    interactions: InteractionSet
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    words: WordSemanticTable | None
    manifest: dict

    @property
    def M(self) -> int:
        return self.interactions.M

    @property
    def N(self) -> int:
        return self.interactions.N

    def split_pairs(self, name: str) -> np.ndarray:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def matrix(self, name: str = "train") -> sp.csr_matrix:
        return self.interactions.matrix(self.split_pairs(name))

    @property
    def word_vectors(self) -> np.ndarray:
        if self.words is None:
            raise ValueError("bundle carries no word vectors")
        return self.words.vectors

    # -- persistence -------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        inter = self.interactions
        _write_csv(path / "users.csv", ["index", "key"], enumerate(inter.user_keys))
        _write_csv(path / "items.csv", ["index", "key"], enumerate(inter.item_keys))
        rows = []
        for name in ("train", "validation", "test"):
            rows.extend((int(u), int(i), name) for u, i in getattr(self, name))
        _write_csv(path / "interactions.csv", ["user", "item", "split"], rows)
        _write_id_lists(path / "user_words.bin", inter.user_words)
        _write_id_lists(path / "item_words.bin", inter.item_words)
        files = ["users.csv", "items.csv", "interactions.csv", "user_words.bin", "item_words.bin"]
        if self.words is not None:
            _write_csv(path / "vocab.csv", ["index", "token"], enumerate(self.words.tokens))
            write_word_vectors(self.words, path / "vectors.bin", "binary")
            files += ["vocab.csv", "vectors.bin"]
        manifest = dict(self.manifest)
        manifest["format_version"] = BUNDLE_VERSION
        manifest["stats"] = dataset_stats(inter)
        manifest["files"] = {f: _sha256(path / f) for f in files}
        (path / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n"
        )
        self.manifest = manifest
        return path

    @classmethod
    def load(cls, path) -> "DatasetBundle":
        path = Path(path)
        mpath = path / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no dataset bundle at {path}")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format_version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {manifest.get('format_version')}")
        users = [r[1] for r in _read_csv(path / "users.csv")]
        items = [r[1] for r in _read_csv(path / "items.csv")]
        splits = {"train": [], "validation": [], "test": []}
        for u, i, name in _read_csv(path / "interactions.csv"):
            splits[name].append((int(u), int(i)))
        arrays = {k: np.array(v, dtype=np.int64).reshape(-1, 2) for k, v in splits.items()}
        positives = np.concatenate([arrays["train"], arrays["validation"], arrays["test"]])
        positives = positives[np.lexsort((positives[:, 1], positives[:, 0]))]
        inter = InteractionSet(
            users,
            items,
            positives,
            _read_id_lists(path / "user_words.bin"),
            _read_id_lists(path / "item_words.bin"),
        )
        words = None
        if (path / "vectors.bin").exists():
            words = load_word_vectors(path / "vectors.bin", "binary")
        return cls(inter, arrays["train"], arrays["validation"], arrays["test"], words, manifest)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        return [row for row in r]


_IDS_MAGIC = b"XDRWORD1"


def _write_id_lists(path: Path, lists: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_IDS_MAGIC)
        fh.write(struct.pack("<Q", len(lists)))
        for ids in lists:
            fh.write(struct.pack("<I", len(ids)))
            fh.write(np.asarray(ids, dtype="<u4").tobytes())


def _read_id_lists(path: Path) -> list[np.ndarray]:
    data = path.read_bytes()
    if data[:8] != _IDS_MAGIC:
        raise ValueError(f"{path} is not a word-id list file")
    (n,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    out = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out.append(np.frombuffer(data, dtype="<u4", count=length, offset=pos).astype(np.int64))
        pos += 4 * length
    return out


def build_bundle(
    pair_reviews: Mapping[tuple[str, str], list[str]],
    table: WordSemanticTable | None,
    core: int = 1,
    keep_fraction: float = 1.0,
    seed: int = 0,
    config: dict | None = None,
) -> DatasetBundle:
    """Run core filter -> sparsify -> split -> indexing -> vocabulary intersection."""
    pairs = k_core_filter(pair_reviews, core)
    pairs = sparsify(pairs, keep_fraction, seed)
    parts = split(pairs, seed)
    all_pairs = parts.train + parts.validation + parts.test
    user_keys = sorted({p[0] for p in all_pairs})
    item_keys = sorted({p[1] for p in all_pairs})
    uix = {k: j for j, k in enumerate(user_keys)}
    iix = {k: j for j, k in enumerate(item_keys)}

    def index(lst):
        return np.array([(uix[u], iix[i]) for u, i in lst], dtype=np.int64).reshape(-1, 2)

    train, val, test = index(parts.train), index(parts.validation), index(parts.test)
    if table is not None:
        vocab = {t for p in parts.train for t in pairs[p]}
        words = table.restrict(vocab)
        widx = words.word_index
        train_words = [
            np.array(sorted({widx[t] for t in pairs[p] if t in widx}), dtype=np.int64)
            for p in parts.train
        ]
        dropped = len(vocab) - words.H
        if dropped:
            logger.info("dropped %d corpus words absent from the vector table", dropped)
    else:
        words = None
        train_words = [np.zeros(0, dtype=np.int64) for _ in parts.train]
    user_words = _word_sets(train, train_words, len(user_keys), 0)
    item_words = _word_sets(train, train_words, len(item_keys), 1)
    positives = np.concatenate([train, val, test])
    positives = positives[np.lexsort((positives[:, 1], positives[:, 0]))]
    inter = InteractionSet(user_keys, item_keys, positives, user_words, item_words)
    manifest = {
        "seeds": {"sparsify": seed, "split": seed},
        "pipeline": ["binarize", f"k_core({core})", f"sparsify({keep_fraction})", "split(80/10/10)", "vocab_intersection"],
        "config": config or {"core": core, "keep_fraction": keep_fraction, "seed": seed},
    }
    return DatasetBundle(inter, train, val, test, words, manifest)
