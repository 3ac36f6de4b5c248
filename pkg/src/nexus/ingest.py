"""Corpus loading, headline back-labeling, dyad filtering, monthly aggregation.

Input files are JSONL (or CSV for events) plus a flat little-endian
float32 embedding matrix with a JSON sidecar. Loaders never abort on a
bad row: they collect :class:`RowError` diagnostics with line numbers and
keep going. All downstream operations are pure functions over the loaded
collections.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import months

logger = logging.getLogger(__name__)

_TRAILING_PUNCT = string.punctuation + " "


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConflictEvent:
    """One dated, dyad-attributed fatal event with its source headline."""

    event_id: str
    dyad_id: str
    country_id: str
    date: dt.date
    fatalities: int
    headline: str

    @property
    def month(self) -> int:
        return months.month_index(self.date.year, self.date.month)


@dataclass(eq=False)
class Article:
    """A newswire article, optionally carrying an embedding vector."""

    article_id: str
    date: dt.date
    headline: str
    body: str
    embedding: np.ndarray | None = None

    @property
    def month(self) -> int:
        return months.month_index(self.date.year, self.date.month)


@dataclass(frozen=True)
class DyadProbabilityRow:
    """Per-article dyad membership probabilities from an external classifier.

    Probabilities need not sum to 1; the residual mass is an implicit
    "other" class.
    """

    article_id: str
    probabilities: dict[str, float] = field(hash=False)


@dataclass
class DyadMonthSeries:
    """Contiguous monthly grid of fatalities for one dyad.

    ``log_fatalities`` is ln(1 + raw); months with no recorded events are
    present with raw 0, so the zero state stays well-defined.
    """

    dyad_id: str
    country_id: str
    months: np.ndarray
    log_fatalities: np.ndarray
    raw_fatalities: np.ndarray

    def __post_init__(self) -> None:
        self.months = np.asarray(self.months, dtype=int)
        self.raw_fatalities = np.asarray(self.raw_fatalities, dtype=int)
        self.log_fatalities = np.asarray(self.log_fatalities, dtype=float)
        n = len(self.months)
        if len(self.log_fatalities) != n or len(self.raw_fatalities) != n:
            raise ValueError(f"series {self.dyad_id}: ragged lengths")
        if n and np.any(np.diff(self.months) != 1):
            raise ValueError(f"series {self.dyad_id}: months not contiguous")
        if np.any(self.raw_fatalities < 0):
            raise ValueError(f"series {self.dyad_id}: negative fatalities")

    def month_slice(self, lo: int, hi: int) -> "DyadMonthSeries":
        """Sub-series restricted to month indices in [lo, hi]."""
        mask = (self.months >= lo) & (self.months <= hi)
        return DyadMonthSeries(
            dyad_id=self.dyad_id,
            country_id=self.country_id,
            months=self.months[mask],
            log_fatalities=self.log_fatalities[mask],
            raw_fatalities=self.raw_fatalities[mask],
        )


@dataclass(frozen=True)
class ArticleLabel:
    """Dyad attribution for one article.

    ``gold`` marks event-headline matches; ``ambiguous`` marks headlines
    shared by events of more than one dyad.
    """

    article_id: str
    dyads: tuple[str, ...]
    gold: bool
    ambiguous: bool = False


@dataclass(frozen=True)
class RowError:
    """One rejected input row, by line number."""

    line: int
    message: str


@dataclass
class EmbeddingMatrix:
    """Row-major embedding matrix with article-id row labels."""

    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("embedding matrix shape does not match id count")
        self._row = {aid: i for i, aid in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __contains__(self, article_id: str) -> bool:
        return article_id in self._row

    def get(self, article_id: str) -> np.ndarray:
        return self.vectors[self._row[article_id]]


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

_EVENT_FIELDS = ("event_id", "dyad_id", "country_id", "date", "fatalities", "headline")
_ARTICLE_FIELDS = ("article_id", "date", "headline", "body")


def _iter_rows(path: Path) -> tuple[list[dict], list[RowError]]:
    """Read JSONL or CSV rows as dicts, collecting parse errors."""
    rows: list[dict] = []
    errors: list[RowError] = []
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                rows.append(dict(row))
                rows[-1]["__line__"] = lineno
    else:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    errors.append(RowError(lineno, f"invalid JSON: {exc}"))
                    continue
                if not isinstance(row, dict):
                    errors.append(RowError(lineno, "row is not an object"))
                    continue
                row["__line__"] = lineno
                rows.append(row)
    return rows, errors


def _parse_date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value).strip())


def load_events(
    path: str | Path,
    window: tuple[int, int] | None = None,
) -> tuple[list[ConflictEvent], list[RowError]]:
    """Load events from JSONL or CSV; rejected rows come back as errors.

    ``window`` (inclusive month-index bounds), when given, rejects events
    dated outside the configured data window.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"events file not found: {path}")
    rows, errors = _iter_rows(path)
    events: list[ConflictEvent] = []
    for row in rows:
        line = row.pop("__line__", 0)
        missing = [f for f in _EVENT_FIELDS if f not in row]
        if missing:
            errors.append(RowError(line, f"missing fields: {', '.join(missing)}"))
            continue
        try:
            fatalities = int(row["fatalities"])
            date = _parse_date(row["date"])
        except (TypeError, ValueError) as exc:
            errors.append(RowError(line, f"unparseable row: {exc}"))
            continue
        if fatalities < 0:
            errors.append(RowError(line, f"negative fatalities: {fatalities}"))
            continue
        if not str(row["dyad_id"]).strip():
            errors.append(RowError(line, "empty dyad_id"))
            continue
        month = months.month_index(date.year, date.month)
        if window is not None and not window[0] <= month <= window[1]:
            errors.append(RowError(line, f"date {date} outside data window"))
            continue
        events.append(
            ConflictEvent(
                event_id=str(row["event_id"]),
                dyad_id=str(row["dyad_id"]),
                country_id=str(row["country_id"]),
                date=date,
                fatalities=fatalities,
                headline=str(row["headline"]),
            )
        )
    if not events:
        logger.warning("no events loaded from %s", path)
    for err in errors:
        logger.warning("%s:%d: %s", path, err.line, err.message)
    return events, errors


def load_articles(path: str | Path) -> tuple[list[Article], list[RowError]]:
    """Load articles from JSONL; embeddings are attached separately."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"articles file not found: {path}")
    rows, errors = _iter_rows(path)
    articles: list[Article] = []
    for row in rows:
        line = row.pop("__line__", 0)
        missing = [f for f in _ARTICLE_FIELDS if f not in row]
        if missing:
            errors.append(RowError(line, f"missing fields: {', '.join(missing)}"))
            continue
        try:
            date = _parse_date(row["date"])
        except (TypeError, ValueError) as exc:
            errors.append(RowError(line, f"unparseable date: {exc}"))
            continue
        articles.append(
            Article(
                article_id=str(row["article_id"]),
                date=date,
                headline=str(row["headline"]),
                body=str(row["body"]),
            )
        )
    for err in errors:
        logger.warning("%s:%d: %s", path, err.line, err.message)
    return articles, errors


def _meta_path(f32_path: Path) -> Path:
    name = f32_path.name
    if name.endswith(".f32"):
        return f32_path.with_name(name[: -len(".f32")] + ".meta.json")
    return f32_path.with_name(name + ".meta.json")


def load_embeddings(
    path: str | Path, meta_path: str | Path | None = None
) -> EmbeddingMatrix:
    """Load a flat little-endian float32 matrix plus its JSON sidecar."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path is not None else _meta_path(path)
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    dim = int(meta["dim"])
    ids = [str(x) for x in meta["ids"]]
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != dim * len(ids):
        raise ValueError(
            f"{path}: expected {dim * len(ids)} float32 values, found {raw.size}"
        )
    vectors = raw.reshape(len(ids), dim)
    if not np.all(np.isfinite(vectors)):
        raise ValueError(f"{path}: non-finite embedding components")
    return EmbeddingMatrix(ids=ids, vectors=vectors)


def save_embeddings(path: str | Path, ids: list[str], vectors: np.ndarray) -> None:
    """Write the flat .f32 matrix and its .meta.json sidecar."""
    path = Path(path)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.shape[0] != len(ids):
        raise ValueError("id count does not match matrix rows")
    vectors.tofile(path)
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        json.dump({"dim": int(vectors.shape[1]), "ids": list(ids)}, fh)


def load_dyad_probs(
    path: str | Path,
) -> tuple[list[DyadProbabilityRow], list[RowError]]:
    """Load per-article dyad probability rows from JSONL."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dyad probability file not found: {path}")
    rows, errors = _iter_rows(path)
    out: list[DyadProbabilityRow] = []
    for row in rows:
        line = row.pop("__line__", 0)
        if "article_id" not in row or "probs" not in row:
            errors.append(RowError(line, "missing article_id or probs"))
            continue
        probs = {}
        bad = False
        for dyad, p in dict(row["probs"]).items():
            p = float(p)
            if not 0.0 <= p <= 1.0:
                errors.append(RowError(line, f"probability out of [0,1]: {dyad}={p}"))
                bad = True
                break
            probs[str(dyad)] = p
        if bad:
            continue
        out.append(DyadProbabilityRow(article_id=str(row["article_id"]), probabilities=probs))
    for err in errors:
        logger.warning("%s:%d: %s", path, err.line, err.message)
    return out, errors


# ---------------------------------------------------------------------------
# Labeling and filtering
# ---------------------------------------------------------------------------

def normalize_headline(text: str) -> str:
    """Lowercase, trim, collapse whitespace runs, strip trailing punctuation."""
    collapsed = " ".join(text.lower().split())
    return collapsed.rstrip(_TRAILING_PUNCT)


def match_headlines(
    articles: list[Article], events: list[ConflictEvent]
) -> dict[str, ArticleLabel]:
    """Back-label articles whose normalized headline matches a labeled event.

    A headline shared by events of several dyads labels the article with
    all of them and flags it ambiguous.
    """
    by_headline: dict[str, set[str]] = {}
    for event in events:
        by_headline.setdefault(normalize_headline(event.headline), set()).add(event.dyad_id)
    labels: dict[str, ArticleLabel] = {}
    for article in articles:
        dyads = by_headline.get(normalize_headline(article.headline))
        if not dyads:
            continue
        ordered = tuple(sorted(dyads))
        ambiguous = len(ordered) > 1
        if ambiguous:
            logger.warning(
                "article %s headline matches events of dyads %s",
                article.article_id,
                ", ".join(ordered),
            )
        labels[article.article_id] = ArticleLabel(
            article_id=article.article_id, dyads=ordered, gold=True, ambiguous=ambiguous
        )
    return labels


def apply_dyad_filter(
    articles: list[Article],
    probs: list[DyadProbabilityRow],
    threshold: float = 0.8,
    dyads: set[str] | None = None,
    gold_labels: dict[str, ArticleLabel] | None = None,
) -> dict[str, ArticleLabel]:
    """Keep classifier-labeled articles whose best allowed dyad reaches the threshold.

    Articles already gold-labeled by headline match bypass the filter (their
    gold dyads are restricted to the allowed set when one is given). The
    comparison is >= threshold: rows strictly below are eliminated.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1]: {threshold}")
    known = {a.article_id for a in articles}
    gold_labels = gold_labels or {}
    out: dict[str, ArticleLabel] = {}
    for aid, label in gold_labels.items():
        allowed = label.dyads if dyads is None else tuple(d for d in label.dyads if d in dyads)
        if allowed:
            out[aid] = ArticleLabel(aid, allowed, gold=True, ambiguous=len(allowed) > 1)
    for row in probs:
        if row.article_id not in known:
            logger.warning("probability row for unknown article %s ignored", row.article_id)
            continue
        if row.article_id in out:
            continue  # gold label bypasses the classifier filter
        candidates = {
            d: p for d, p in row.probabilities.items() if dyads is None or d in dyads
        }
        if not candidates:
            continue
        # deterministic argmax: highest probability, lexicographic tie-break
        best = min(candidates.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] >= threshold:
            out[row.article_id] = ArticleLabel(row.article_id, (best[0],), gold=False)
    return out


def select_top_dyads(
    articles: list[Article],
    labels: dict[str, ArticleLabel],
    window: tuple[int, int],
    n: int,
) -> list[str]:
    """The n dyads with the most labeled articles dated within the window.

    Ties break by lexicographic dyad_id; fewer than n distinct dyads
    returns them all with a warning.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    lo, hi = window
    counts: dict[str, int] = {}
    for article in articles:
        label = labels.get(article.article_id)
        if label is None or not lo <= article.month <= hi:
            continue
        for dyad in label.dyads:
            counts[dyad] = counts.get(dyad, 0) + 1
    if not counts:
        logger.warning("no labeled articles in selection window")
        return []
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < n:
        logger.warning("only %d dyads present, %d requested", len(ranked), n)
    return [dyad for dyad, _ in ranked[:n]]


def aggregate_monthly(
    events: list[ConflictEvent], dyad_id: str, window: tuple[int, int]
) -> DyadMonthSeries:
    """Monthly fatality sums for one dyad over a contiguous window.

    Months without events carry raw 0; y_t = ln(1 + raw_t).
    """
    lo, hi = window
    grid = np.arange(lo, hi + 1)
    raw = np.zeros(len(grid), dtype=int)
    country = ""
    for event in events:
        if event.dyad_id != dyad_id:
            continue
        if not lo <= event.month <= hi:
            raise ValueError(
                f"event {event.event_id} dated {event.date} outside window "
                f"{months.format_month(lo)}..{months.format_month(hi)}"
            )
        raw[event.month - lo] += event.fatalities
        country = country or event.country_id
    return DyadMonthSeries(
        dyad_id=dyad_id,
        country_id=country,
        months=grid,
        log_fatalities=np.log1p(raw),
        raw_fatalities=raw,
    )


# ---------------------------------------------------------------------------
# Intermediate-file serialization
# ---------------------------------------------------------------------------

def save_series(series: DyadMonthSeries, path: str | Path) -> None:
    payload = {
        "dyad_id": series.dyad_id,
        "country_id": series.country_id,
        "months": [months.format_month(int(m)) for m in series.months],
        "raw_fatalities": [int(v) for v in series.raw_fatalities],
        "log_fatalities": [float(v) for v in series.log_fatalities],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_series(path: str | Path) -> DyadMonthSeries:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return DyadMonthSeries(
        dyad_id=payload["dyad_id"],
        country_id=payload["country_id"],
        months=np.array([months.parse_month(m) for m in payload["months"]]),
        log_fatalities=np.array(payload["log_fatalities"], dtype=float),
        raw_fatalities=np.array(payload["raw_fatalities"], dtype=int),
    )


def save_labels_file(labels: dict[str, ArticleLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for aid in sorted(labels):
            label = labels[aid]
            fh.write(
                json.dumps(
                    {
                        "article_id": label.article_id,
                        "dyads": list(label.dyads),
                        "gold": label.gold,
                        "ambiguous": label.ambiguous,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_labels_file(path: str | Path) -> dict[str, ArticleLabel]:
    labels: dict[str, ArticleLabel] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            labels[row["article_id"]] = ArticleLabel(
                article_id=row["article_id"],
                dyads=tuple(row["dyads"]),
                gold=bool(row["gold"]),
                ambiguous=bool(row["ambiguous"]),
            )
    return labels
