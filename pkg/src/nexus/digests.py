"""Topic clustering over dyad article embeddings and dyad-month digest assembly.

Topics come from spherical k-means (cosine assignment, normalized-mean
centroids) with k = floor(N / min_topic_size) clamped to [3, max_topics]
and a post-pass merging undersized clusters into their nearest centroid.
The topic with the highest share of gold event-matched articles is marked
violent.

Two digest kinds exist per dyad-month: low-context (per topic, the five
in-month articles closest to the centroid, prefixed by all of the month's
event snippets) and high-context RAG (per event, the nearest context
article from each non-violent topic, assembled into event-blocks and
packed into digests bounded by a token budget).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import months
from .hnsw import HnswIndex, normalize
from .ingest import Article

logger = logging.getLogger(__name__)

DEFAULT_SNIPPET_TOKENS = 256
DEFAULT_MIN_TOPIC_SIZE = 200
DEFAULT_MAX_TOPICS = 21
DEFAULT_CONTEXT_LIMIT = 8192

LOW_CONTEXT = "low_context"
HIGH_CONTEXT = "high_context"


@dataclass(frozen=True)
class Snippet:
    article_id: str
    text: str
    token_count: int


@dataclass
class TopicModel:
    dyad_id: str
    centroids: np.ndarray  # (k, D), unit rows
    assignment: dict[str, int]
    violent_topic: int | None

    @property
    def topic_count(self) -> int:
        return int(self.centroids.shape[0])

    def members(self, topic: int) -> list[str]:
        return sorted(aid for aid, t in self.assignment.items() if t == topic)


@dataclass
class Digest:
    dyad_id: str
    month: int
    kind: str
    snippets: list[Snippet]
    total_tokens: int
    seed: int | None = None
    partition: str | None = None

    @property
    def snippet_ids(self) -> list[str]:
        return [s.article_id for s in self.snippets]

    @property
    def text(self) -> str:
        return "\n".join(s.text for s in self.snippets)


# ---------------------------------------------------------------------------
# Snippets
# ---------------------------------------------------------------------------

def snippet(article: Article, limit: int = DEFAULT_SNIPPET_TOKENS) -> Snippet:
    """First `limit` whitespace tokens of headline + body, single-spaced."""
    tokens = f"{article.headline} {article.body}".split()
    if not tokens:
        raise ValueError(f"article {article.article_id} has no text")
    kept = tokens[:limit]
    return Snippet(article.article_id, " ".join(kept), len(kept))


# ---------------------------------------------------------------------------
# Spherical k-means topics
# ---------------------------------------------------------------------------

def initial_topic_count(n_articles: int, min_topic_size: int, max_topics: int) -> int:
    return max(3, min(n_articles // min_topic_size, max_topics))


def _kmeanspp_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = vectors.shape[0]
    first = int(rng.integers(n))
    centroids = [vectors[first]]
    d2 = 1.0 - vectors @ centroids[0]
    for _ in range(k - 1):
        weights = np.maximum(d2, 0.0)
        total = float(weights.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weights / total))
        centroids.append(vectors[idx])
        d2 = np.minimum(d2, 1.0 - vectors @ centroids[-1])
    return np.stack(centroids)


def _normalized_mean(vectors: np.ndarray) -> np.ndarray | None:
    mean = vectors.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return None
    return (mean / norm).astype(np.float32)


def cluster_topics(
    dyad_id: str,
    ids: list[str],
    vectors: np.ndarray,
    gold_ids: set[str],
    min_topic_size: int = DEFAULT_MIN_TOPIC_SIZE,
    max_topics: int = DEFAULT_MAX_TOPICS,
    seed: int = 0,
    max_iter: int = 100,
) -> TopicModel:
    """Spherical k-means with a minimum-cluster-size merge rule.

    Fewer than 2 * min_topic_size articles fall into a single catch-all
    topic. Clusters still undersized after convergence are merged into
    their nearest centroid, so the final topic count may drop below the
    initial k.
    """
    n = len(ids)
    if n == 0:
        raise ValueError(f"dyad {dyad_id}: no articles to cluster")
    unit = np.stack([normalize(v) for v in np.asarray(vectors, dtype=np.float32)])

    def single_topic() -> TopicModel:
        centroid = _normalized_mean(unit)
        if centroid is None:
            centroid = unit[0]
        assignment = {aid: 0 for aid in ids}
        violent = 0 if any(aid in gold_ids for aid in ids) else None
        return TopicModel(dyad_id, centroid[None, :], assignment, violent)

    if n < 2 * min_topic_size:
        return single_topic()
    spread = float(np.max(np.std(unit, axis=0)))
    if spread < 1e-9:
        logger.warning("dyad %s: all embeddings identical, single topic", dyad_id)
        return single_topic()

    k = initial_topic_count(n, min_topic_size, max_topics)
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeanspp_init(unit, k, rng)
    labels = np.argmax(unit @ centroids.T, axis=1)
    for _ in range(max_iter):
        fresh = []
        for t in range(centroids.shape[0]):
            member_vecs = unit[labels == t]
            if len(member_vecs) == 0:
                fresh.append(centroids[t])  # keep; may attract points later
                continue
            centroid = _normalized_mean(member_vecs)
            fresh.append(centroid if centroid is not None else centroids[t])
        centroids = np.stack(fresh)
        new_labels = np.argmax(unit @ centroids.T, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    # drop empty clusters, then merge undersized ones into nearest centroid
    groups: list[np.ndarray] = []
    for t in range(centroids.shape[0]):
        idx = np.flatnonzero(labels == t)
        if len(idx):
            groups.append(idx)
    while len(groups) > 1:
        sizes = [len(g) for g in groups]
        smallest = int(np.argmin(sizes))
        if sizes[smallest] >= min_topic_size:
            break
        cents = np.stack([_normalized_mean(unit[g]) for g in groups])
        sims = cents @ cents[smallest]
        sims[smallest] = -np.inf
        target = int(np.argmax(sims))
        merged = np.concatenate([groups[target], groups[smallest]])
        groups = [g for i, g in enumerate(groups) if i not in (smallest, target)]
        groups.append(np.sort(merged))

    groups.sort(key=lambda g: int(g[0]))
    final_centroids = np.stack([_normalized_mean(unit[g]) for g in groups])
    assignment: dict[str, int] = {}
    for topic, g in enumerate(groups):
        for i in g:
            assignment[ids[int(i)]] = topic

    violent: int | None = None
    best_fraction = 0.0
    for topic, g in enumerate(groups):
        gold = sum(1 for i in g if ids[int(i)] in gold_ids)
        fraction = gold / len(g)
        if gold and fraction > best_fraction:
            best_fraction = fraction
            violent = topic
    return TopicModel(dyad_id, final_centroids, assignment, violent)


# ---------------------------------------------------------------------------
# Digest assembly
# ---------------------------------------------------------------------------

def _in_month(article: Article, month: int) -> bool:
    return article.month == month


def low_context_digest(
    dyad_id: str,
    month: int,
    topic_model: TopicModel,
    articles_by_id: dict[str, Article],
    gold_ids: set[str],
    embeddings,
    snippet_limit: int = DEFAULT_SNIPPET_TOKENS,
    per_topic: int = 5,
) -> Digest | None:
    """Event snippets first, then per topic the closest in-month articles.

    Topics contribute up to `per_topic` non-event articles each, ranked by
    cosine similarity to the centroid. A dyad-month with no articles and
    no events yields no digest.
    """
    event_ids = sorted(
        aid
        for aid in gold_ids
        if aid in articles_by_id and _in_month(articles_by_id[aid], month)
    )
    snippets = [snippet(articles_by_id[aid], snippet_limit) for aid in event_ids]
    for topic in range(topic_model.topic_count):
        in_month = [
            aid
            for aid in topic_model.members(topic)
            if aid not in gold_ids
            and aid in articles_by_id
            and _in_month(articles_by_id[aid], month)
        ]
        if not in_month:
            continue
        centroid = topic_model.centroids[topic]
        sims = [(float(normalize(embeddings.get(aid)) @ centroid), aid) for aid in in_month]
        sims.sort(key=lambda pair: (-pair[0], pair[1]))
        for _, aid in sims[:per_topic]:
            snippets.append(snippet(articles_by_id[aid], snippet_limit))
    if not snippets:
        return None
    return Digest(
        dyad_id=dyad_id,
        month=month,
        kind=LOW_CONTEXT,
        snippets=snippets,
        total_tokens=sum(s.token_count for s in snippets),
    )


def _retrieve_topic_context(
    query_vec: np.ndarray,
    topic_members: list[str],
    index: HnswIndex,
) -> str | None:
    """Nearest indexed member of one topic; exact fallback when the beam misses."""
    allowed = {aid for aid in topic_members if aid in index}
    if not allowed:
        return None
    hits = index.search(query_vec, k=1, allowed=allowed)
    if not hits:
        hits = index.brute_force_search(query_vec, k=1, allowed=allowed)
    return hits[0][0] if hits else None


def sample_event_blocks(
    blocks: list[list[Snippet]], context_limit: int, seed: int
) -> list[list[list[Snippet]]]:
    """Partition whole event-blocks into digests of at most context_limit tokens.

    A seeded uniform shuffle orders the blocks, which are then packed
    greedily in that order; every block lands in exactly one digest, so
    the union of emitted digests always covers all blocks.
    """
    def block_tokens(block: list[Snippet]) -> int:
        return sum(s.token_count for s in block)

    oversized = [b for b in blocks if block_tokens(b) > context_limit]
    if oversized:
        raise ValueError(
            f"event-block of {block_tokens(oversized[0])} tokens exceeds "
            f"context_limit {context_limit}"
        )
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(blocks))
    digests: list[list[list[Snippet]]] = []
    current: list[list[Snippet]] = []
    used = 0
    for i in order:
        block = blocks[int(i)]
        tokens = block_tokens(block)
        if current and used + tokens > context_limit:
            digests.append(current)
            current, used = [], 0
        current.append(block)
        used += tokens
    if current:
        digests.append(current)
    return digests


def rag_digest(
    dyad_id: str,
    month: int,
    topic_model: TopicModel,
    articles_by_id: dict[str, Article],
    gold_ids: set[str],
    embeddings,
    index: HnswIndex,
    context_limit: int = DEFAULT_CONTEXT_LIMIT,
    snippet_limit: int = DEFAULT_SNIPPET_TOKENS,
    seed: int = 0,
) -> list[Digest]:
    """Event-blocks (event snippet + nearest article per non-violent topic).

    Blocks always fit in one digest when their total is within the token
    budget; otherwise whole blocks are sampled without replacement into
    multiple digests. A month without events falls back to the
    low-context digest.
    """
    event_ids = sorted(
        aid
        for aid in gold_ids
        if aid in articles_by_id and _in_month(articles_by_id[aid], month)
    )
    if not event_ids:
        fallback = low_context_digest(
            dyad_id, month, topic_model, articles_by_id, gold_ids, embeddings, snippet_limit
        )
        return [fallback] if fallback is not None else []

    non_violent = [
        t for t in range(topic_model.topic_count) if t != topic_model.violent_topic
    ]
    blocks: list[list[Snippet]] = []
    for eid in event_ids:
        if eid not in embeddings:
            logger.warning("event article %s has no embedding, skipped", eid)
            continue
        query = normalize(embeddings.get(eid))
        block = [snippet(articles_by_id[eid], snippet_limit)]
        for topic in non_violent:
            found = _retrieve_topic_context(query, topic_model.members(topic), index)
            if found is None:
                logger.warning(
                    "dyad %s topic %d has no indexed members for event %s",
                    dyad_id,
                    topic,
                    eid,
                )
                continue
            block.append(snippet(articles_by_id[found], snippet_limit))
        blocks.append(block)
    if not blocks:
        return []

    packed = sample_event_blocks(blocks, context_limit, seed)
    out = []
    for group in packed:
        snippets = [s for block in group for s in block]
        out.append(
            Digest(
                dyad_id=dyad_id,
                month=month,
                kind=HIGH_CONTEXT,
                snippets=snippets,
                total_tokens=sum(s.token_count for s in snippets),
                seed=seed,
            )
        )
    return out


# ---------------------------------------------------------------------------
# JSONL interface
# ---------------------------------------------------------------------------

def save_digests(digests: list[Digest], path: str | Path) -> None:
    ordered = sorted(
        digests, key=lambda d: (d.kind, d.partition or "", d.dyad_id, d.month)
    )
    with open(path, "w", encoding="utf-8") as fh:
        for digest in ordered:
            fh.write(
                json.dumps(
                    {
                        "dyad_id": digest.dyad_id,
                        "month": months.format_month(digest.month),
                        "kind": digest.kind,
                        "snippet_ids": digest.snippet_ids,
                        "text": digest.text,
                        "total_tokens": digest.total_tokens,
                        "seed": digest.seed,
                        "partition": digest.partition,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_digests(path: str | Path) -> list[Digest]:
    out: list[Digest] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            texts = row["text"].split("\n") if row["text"] else []
            ids = row["snippet_ids"]
            snippets = [
                Snippet(aid, text, len(text.split()))
                for aid, text in zip(ids, texts)
            ]
            out.append(
                Digest(
                    dyad_id=row["dyad_id"],
                    month=months.parse_month(row["month"]),
                    kind=row["kind"],
                    snippets=snippets,
                    total_tokens=int(row["total_tokens"]),
                    seed=row["seed"],
                    partition=row.get("partition"),
                )
            )
    return out
