"""MIND-format dataset ingestion and serialization.

Directory layout read and written here::

    news.tsv                 id, category, subcategory, title, abstract, url,
                             title_entities, abstract_entities
    features.tsv             news_id <TAB> comma-separated floats
    {train,valid,test}/behaviors.tsv
                             impression_id, user_id, time, history, impressions

Histories are oldest-first (MIND convention) unless ``reverse_history`` is set.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .news_encoder import MAX_TITLE_LEN, OOV_ID, PAD_ID, NewsContent, split_words, tokenize_title
from .ranking import Impression
from .user_encoder import ClickHistory

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
N_LONG = 50


class FormatError(ValueError):
    pass


@dataclass
class ParseStats:
    malformed: int = 0
    duplicates: int = 0
    rows: int = 0


@dataclass
class Dataset:
    catalog: dict[str, NewsContent]
    users: dict[str, ClickHistory]
    train: list[Impression]
    valid: list[Impression]
    test: list[Impression]
    vocab: dict[str, int]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Impression]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]

    @property
    def news_ids(self) -> list[str]:
        return sorted(self.catalog)


# -- readers -----------------------------------------------------------------

def _lines(source) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source
    text = data.decode("utf-8", errors="replace") if isinstance(data, bytes) else data
    return text.split("\n")


def parse_news_tsv(source, stats: ParseStats | None = None) -> dict[str, dict]:
    """Rows of news.tsv as ``{id: {"category", "subcategory", "title"}}``.

    Rows with fewer than 4 columns or a blank id/title are skipped and counted.
    Duplicate ids keep the last row.
    """
    stats = stats if stats is not None else ParseStats()
    out: dict[str, dict] = {}
    for line in _lines(source):
        line = line.rstrip("\r")
        if not line:
            continue
        stats.rows += 1
        cols = line.split("\t")
        if len(cols) < 4 or not cols[0].strip() or not cols[3].strip():
            stats.malformed += 1
            continue
        nid = cols[0].strip()
        if nid in out:
            stats.duplicates += 1
            log.warning("duplicate news id %s; keeping the last row", nid)
        out[nid] = {"category": cols[1], "subcategory": cols[2], "title": cols[3]}
    return out


def parse_behaviors_tsv(source, stats: ParseStats | None = None, reverse_history: bool = False,
                        max_history: int = N_LONG) -> tuple[list[Impression], dict[str, list[str]]]:
    """Impressions plus each user's history (latest row wins, truncated to the most recent)."""
    stats = stats if stats is not None else ParseStats()
    impressions: list[Impression] = []
    histories: dict[str, list[str]] = {}
    for line in _lines(source):
        line = line.rstrip("\r")
        if not line:
            continue
        stats.rows += 1
        cols = line.split("\t")
        if len(cols) != 5 or not cols[0] or not cols[1]:
            stats.malformed += 1
            continue
        imp_id, uid, ts, hist, cands = cols
        try:
            candidates = []
            for tok in cands.split():
                nid, _, lab = tok.rpartition("-")
                if not nid or lab not in ("0", "1"):
                    raise FormatError(tok)
                candidates.append((nid, int(lab)))
        except FormatError:
            stats.malformed += 1
            continue
        if not candidates:
            stats.malformed += 1
            continue
        h = hist.split()
        if reverse_history:
            h.reverse()
        histories[uid] = h[-max_history:] if max_history else h
        impressions.append(Impression(imp_id, uid, ts, candidates))
    return impressions, histories


def load_image_features(source, width: int | None = None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for row, line in enumerate(_lines(source), start=1):
        line = line.rstrip("\r")
        if not line:
            continue
        nid, sep, values = line.partition("\t")
        if not sep:
            raise FormatError(f"features row {row}: missing tab separator")
        try:
            vec = np.array([float(v) for v in values.split(",")], dtype=np.float64)
        except ValueError:
            raise FormatError(f"features row {row}: non-numeric value") from None
        if width is None:
            width = vec.size
        if vec.size != width:
            raise FormatError(f"features row {row}: width {vec.size} != {width}")
        out[nid] = vec
    return out


def build_vocab(titles: Iterable[str], min_freq: int = 2) -> dict[str, int]:
    """pad=0, oov=1, then words by descending frequency, ties alphabetical."""
    counts = Counter(w for t in titles for w in split_words(t))
    vocab = {"<pad>": PAD_ID, "<oov>": OOV_ID}
    for word, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if n >= min_freq and word not in vocab:
            vocab[word] = len(vocab)
    return vocab


def assemble(news_rows: dict[str, dict], features: dict[str, np.ndarray],
             splits: dict[str, tuple[list[Impression], dict[str, list[str]]]],
             min_freq: int = 2, max_title_len: int = MAX_TITLE_LEN, meta: dict | None = None) -> Dataset:
    vocab = build_vocab((r["title"] for r in news_rows.values()), min_freq)
    catalog = {
        nid: NewsContent(
            news_id=nid,
            title_tokens=tokenize_title(r["title"], vocab, max_title_len),
            image_feature=features.get(nid),
            category=r["category"] or None,
            title=r["title"],
            subcategory=r["subcategory"],
        )
        for nid, r in news_rows.items()
    }
    users: dict[str, ClickHistory] = {}
    imps = {}
    for name in SPLITS:
        split_imps, hists = splits.get(name, ([], {}))
        imps[name] = split_imps
        for uid, h in hists.items():
            users[uid] = ClickHistory(uid, list(h))
    ds = Dataset(catalog, users, imps["train"], imps["valid"], imps["test"], vocab, dict(meta or {}))
    ds.meta["pruned"] = enforce_integrity(ds)
    return ds


def enforce_integrity(ds: Dataset) -> dict[str, int]:
    """Drop history ids and candidates that are not in the catalog; report counts."""
    pruned = {"history": 0, "candidates": 0, "impressions": 0}
    for h in ds.users.values():
        keep = [n for n in h.clicked if n in ds.catalog]
        pruned["history"] += len(h.clicked) - len(keep)
        h.clicked = keep
    for name in SPLITS:
        kept = []
        for imp in ds.split(name):
            cands = [(n, lab) for n, lab in imp.candidates if n in ds.catalog]
            pruned["candidates"] += len(imp.candidates) - len(cands)
            if cands:
                imp.candidates = cands
                kept.append(imp)
            else:
                pruned["impressions"] += 1
        ds.split(name)[:] = kept
    if any(pruned.values()):
        log.warning("pruned dangling references: %s", pruned)
    return pruned


def load_dataset(root, min_freq: int = 2, reverse_history: bool = False) -> Dataset:
    root = Path(root)
    stats = ParseStats()
    news_rows = parse_news_tsv(root / "news.tsv", stats)
    feat_path = root / "features.tsv"
    features = load_image_features(feat_path) if feat_path.exists() else {}
    splits = {}
    for name in SPLITS:
        path = root / name / "behaviors.tsv"
        if path.exists():
            splits[name] = parse_behaviors_tsv(path, stats, reverse_history)
    if "train" not in splits:
        raise FileNotFoundError(f"{root}/train/behaviors.tsv not found")
    ds = assemble(news_rows, features, splits, min_freq)
    ds.meta["malformed_rows"] = stats.malformed
    return ds


# -- writers -----------------------------------------------------------------

def format_float(x: float) -> str:
    return repr(float(x))


def news_tsv(ds: Dataset) -> str:
    buf = io.StringIO()
    for nid in ds.news_ids:
        c = ds.catalog[nid]
        buf.write("\t".join([nid, c.category or "", c.subcategory, c.title, "", "", "[]", "[]"]) + "\n")
    return buf.getvalue()


def features_tsv(ds: Dataset) -> str:
    return "".join(f"{nid}\t{','.join(format_float(v) for v in ds.catalog[nid].image_feature)}\n"
                   for nid in ds.news_ids if ds.catalog[nid].image_feature is not None)


def behaviors_tsv(ds: Dataset, split: str) -> str:
    buf = io.StringIO()
    for imp in ds.split(split):
        hist = " ".join(ds.users[imp.user_id].clicked) if imp.user_id in ds.users else ""
        cands = " ".join(f"{n}-{lab}" for n, lab in imp.candidates)
        buf.write("\t".join([imp.impression_id, imp.user_id, imp.timestamp, hist, cands]) + "\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "news.tsv").write_text(news_tsv(ds), encoding="utf-8")
    (root / "features.tsv").write_text(features_tsv(ds), encoding="utf-8")
    for name in SPLITS:
        (root / name).mkdir(exist_ok=True)
        (root / name / "behaviors.tsv").write_text(behaviors_tsv(ds, name), encoding="utf-8")


def dataset_fingerprint(ds: Dataset) -> str:
    """Canonical text form used for equality and determinism checks."""
    parts = [news_tsv(ds), features_tsv(ds)] + [behaviors_tsv(ds, s) for s in SPLITS]
    parts.append(repr(sorted(ds.vocab.items())))
    parts.append(repr(sorted((nid, c.title_tokens) for nid, c in ds.catalog.items())))
    return "\x1e".join(parts)


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
