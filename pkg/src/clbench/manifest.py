"""Batch catalog: ingest, validate and serve the metadata universe for timeline building.

A catalog row describes one data-collection batch, i.e. the speech gathered
for one (language, district) pair. Hours are kept as 2-decimal ``Decimal``
so per-language and whole-catalog aggregates are exact, with no float drift.

Two on-disk formats are supported and produced:

* CSV (UTF-8, header required)::

      batch_id,language_iso,domain,hours,n_train,n_test
      ta-01,ta,district-01,12.50,1250,50

  ``n_train``/``n_test`` columns may be omitted or left empty; defaults are
  ``n_train = round(hours * 100)`` and ``n_test = max(1, round(hours * 4))``
  (half-up rounding), which keeps per-batch sample skew proportional to hours.

* JSON::

      {"format_version": 1,
       "batches": [{"batch_id": "ta-01", "language_iso": "ta",
                    "domain": "district-01", "hours": "12.50",
                    "n_train": 1250, "n_test": 50}, ...]}

  ``hours`` may be a string or a number; strings are preferred on write so
  the decimal round-trips exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from importlib import resources
from pathlib import Path

from .errors import ValidationError

_CSV_FIELDS = ("batch_id", "language_iso", "domain", "hours", "n_train", "n_test")
_REQUIRED_FIELDS = _CSV_FIELDS[:4]


class CatalogError(ValidationError):
    """Malformed or inconsistent catalog input."""


@dataclass(frozen=True)
class BatchMeta:
    """One data-collection batch: the speech for a single (language, domain) pair."""

    batch_id: str
    language: str
    domain: str
    hours: Decimal
    n_train: int
    n_test: int


def default_n_train(hours: Decimal) -> int:
    return int((hours * 100).to_integral_value(rounding=ROUND_HALF_UP))


def default_n_test(hours: Decimal) -> int:
    return max(1, int((hours * 4).to_integral_value(rounding=ROUND_HALF_UP)))


class Catalog:
    """Validated, immutable collection of batches with derived indexes."""

    def __init__(self, batches: list[BatchMeta]):
        self.batches: tuple[BatchMeta, ...] = tuple(batches)
        by_id: dict[str, BatchMeta] = {}
        by_pair: dict[tuple[str, str], BatchMeta] = {}
        domains: dict[str, list[str]] = {}
        for b in self.batches:
            if b.batch_id in by_id:
                raise CatalogError(f"duplicate batch_id {b.batch_id!r}")
            pair = (b.language, b.domain)
            if pair in by_pair:
                raise CatalogError(f"duplicate (language, domain) pair {pair!r}")
            by_id[b.batch_id] = b
            by_pair[pair] = b
            domains.setdefault(b.language, []).append(b.domain)
        self._by_id = by_id
        self.languages: tuple[str, ...] = tuple(sorted(domains))
        self.domains_by_language: dict[str, tuple[str, ...]] = {
            lang: tuple(ds) for lang, ds in domains.items()
        }

    def __len__(self) -> int:
        return len(self.batches)

    def __eq__(self, other) -> bool:
        return isinstance(other, Catalog) and self.batches == other.batches

    def batch(self, batch_id: str) -> BatchMeta:
        try:
            return self._by_id[batch_id]
        except KeyError:
            raise KeyError(f"unknown batch_id {batch_id!r}") from None

    def has_batch(self, batch_id: str) -> bool:
        return batch_id in self._by_id

    def batches_for_language(self, language: str) -> tuple[BatchMeta, ...]:
        return tuple(b for b in self.batches if b.language == language)


def _parse_row(row: dict, rowno: int) -> BatchMeta:
    for field in _REQUIRED_FIELDS:
        if row.get(field) in (None, ""):
            raise CatalogError(f"row {rowno}: missing field {field!r}")
    try:
        hours = Decimal(str(row["hours"]))
    except InvalidOperation:
        raise CatalogError(f"row {rowno}: bad hours value {row['hours']!r}") from None
    if hours <= 0:
        raise CatalogError(f"row {rowno}: hours must be > 0, got {hours}")

    def _count(field: str, default: int) -> int:
        raw = row.get(field)
        if raw in (None, ""):
            return default
        try:
            value = int(raw)
        except (TypeError, ValueError):
            raise CatalogError(f"row {rowno}: bad {field} value {raw!r}") from None
        if value < 1:
            raise CatalogError(f"row {rowno}: {field} must be >= 1, got {value}")
        return value

    return BatchMeta(
        batch_id=str(row["batch_id"]),
        language=str(row["language_iso"]),
        domain=str(row["domain"]),
        hours=hours,
        n_train=_count("n_train", default_n_train(hours)),
        n_test=_count("n_test", default_n_test(hours)),
    )


def _build_catalog(rows: list[tuple[int, dict]]) -> Catalog:
    batches = []
    seen_ids: dict[str, int] = {}
    seen_pairs: dict[tuple[str, str], int] = {}
    for rowno, row in rows:
        meta = _parse_row(row, rowno)
        if meta.batch_id in seen_ids:
            raise CatalogError(
                f"row {rowno}: duplicate batch_id {meta.batch_id!r} "
                f"(first seen at row {seen_ids[meta.batch_id]})"
            )
        pair = (meta.language, meta.domain)
        if pair in seen_pairs:
            raise CatalogError(
                f"row {rowno}: duplicate (language, domain) pair {pair!r} "
                f"(first seen at row {seen_pairs[pair]})"
            )
        seen_ids[meta.batch_id] = rowno
        seen_pairs[pair] = rowno
        batches.append(meta)
    if not batches:
        raise CatalogError("catalog contains no batches")
    return Catalog(batches)


def load_catalog(path: str | Path) -> Catalog:
    """Load and validate a catalog from a CSV or JSON file.

    Errors carry the 1-based row number of the offending record (CSV counts
    the header as row 1; JSON counts list positions from 1).
    """
    path = Path(path)
    if not path.exists():
        raise CatalogError(f"catalog file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json" or text.lstrip()[:1] in ("{", "["):
        return _load_json(text)
    return _load_csv(text)


def _load_json(text: str) -> Catalog:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"catalog JSON parse error: {exc}") from None
    records = obj["batches"] if isinstance(obj, dict) else obj
    if not isinstance(records, list):
        raise CatalogError("catalog JSON must be a list of batches or {'batches': [...]}")
    return _build_catalog([(i + 1, rec) for i, rec in enumerate(records)])


def _load_csv(text: str) -> Catalog:
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise CatalogError("catalog CSV is empty")
    header = [f.strip() for f in reader.fieldnames]
    missing = [f for f in _REQUIRED_FIELDS if f not in header]
    if missing:
        raise CatalogError(f"catalog CSV header is missing fields: {missing}")
    rows = []
    for i, row in enumerate(reader):
        rows.append((i + 2, {k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in row.items()}))
    return _build_catalog(rows)


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    """Write a catalog; format chosen by extension (``.json`` or CSV otherwise)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".json":
        records = [
            {
                "batch_id": b.batch_id,
                "language_iso": b.language,
                "domain": b.domain,
                "hours": str(b.hours),
                "n_train": b.n_train,
                "n_test": b.n_test,
            }
            for b in catalog.batches
        ]
        path.write_text(
            json.dumps({"format_version": 1, "batches": records}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for b in catalog.batches:
            writer.writerow([b.batch_id, b.language, b.domain, str(b.hours), b.n_train, b.n_test])


def language_hours(catalog: Catalog) -> dict[str, Decimal]:
    """Total speech hours per language, summed exactly in decimal."""
    totals: dict[str, Decimal] = {}
    for b in catalog.batches:
        totals[b.language] = totals.get(b.language, Decimal(0)) + b.hours
    return totals


def bundled_catalog_path() -> Path:
    """Path of the catalog shipped with the package (22 languages, 208 batches)."""
    return Path(resources.files("clbench").joinpath("data/catalog.csv"))


def load_bundled_catalog() -> Catalog:
    return load_catalog(bundled_catalog_path())
