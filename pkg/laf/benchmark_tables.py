#!/usr/bin/env python3
"""
Benchmark Tables
Published AP tables shipped as fixtures, and recomputation of their summary columns
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import pandas as pd

from laf.ap_evaluator import AggregationMode, CoVSummary, ExperimentMatrix, Provenance, cov_summary
from laf.errors import ConfigError, InvalidArgumentError, LafError

logger = logging.getLogger(__name__)

FIXTURE_PATH = Path(__file__).parent.parent / "fixtures" / "paper_tables.json"
SUMMARY_TOLERANCE = 0.01
SUMMARY_COLUMNS = ("mean", "std", "inv_cov")


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    cells: Tuple[float, ...]
    published: Dict[str, float]
    mode: Optional[AggregationMode] = None  # overrides the table mode


@dataclass
class BenchmarkTable:
    name: str
    title: str
    columns: List[str]
    rows: List[BenchmarkRow]
    mode: AggregationMode
    train_index: Optional[int] = None

    def row_mode(self, row: BenchmarkRow) -> AggregationMode:
        return row.mode or self.mode

    def to_matrix(self) -> ExperimentMatrix:
        """Methods as rows, test sources as columns, every cell FIXTURE"""
        return ExperimentMatrix.filled(
            [r.method for r in self.rows], self.columns, [list(r.cells) for r in self.rows], Provenance.FIXTURE)

    def summarize(self, row: BenchmarkRow) -> CoVSummary:
        mode = self.row_mode(row)
        train_index = self.train_index if mode is AggregationMode.EXCLUDE_TRAIN_COLUMN else None
        return cov_summary(row.cells, mode, train_index)


@dataclass
class SummaryCheck:
    table: str
    method: str
    recomputed: CoVSummary
    published: Dict[str, float]
    matches: Dict[str, bool] = field(default_factory=dict)

    @property
    def all_match(self) -> bool:
        return all(self.matches.values())

    def to_row(self) -> Dict:
        row = {"table": self.table, "method": self.method, "mode": self.recomputed.mode.value,
               "n_values": self.recomputed.n_values}
        for key in SUMMARY_COLUMNS:
            row[key] = getattr(self.recomputed, key)
            row[f"published_{key}"] = self.published.get(key)
            row[f"{key}_matches"] = self.matches.get(key)
        row["all_match"] = self.all_match
        return row


def load_fixture(path: Optional[Union[str, Path]] = None) -> Dict[str, BenchmarkTable]:
    """Parse the benchmark fixture into tables keyed by name"""
    path = Path(path) if path is not None else FIXTURE_PATH
    with open(path, "r") as f:
        try:
            document = json.load(f)
        except ValueError as e:
            raise ConfigError(f"cannot parse fixture {path}: {e}") from e
    try:
        tables = _parse_tables(document)
    except LafError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ConfigError(f"malformed fixture {path}: {e!r}") from e
    logger.info(f"Loaded {len(tables)} benchmark tables from {path}")
    return tables


def _parse_tables(document: Mapping) -> Dict[str, BenchmarkTable]:
    tables = {}
    for name, data in document["tables"].items():
        columns = list(data["columns"])
        rows = []
        for entry in data["rows"]:
            if len(entry["cells"]) != len(columns):
                raise InvalidArgumentError(
                    f"{name}/{entry['method']}: {len(entry['cells'])} cells for {len(columns)} columns")
            rows.append(BenchmarkRow(
                method=entry["method"],
                cells=tuple(float(v) for v in entry["cells"]),
                published={k: float(v) for k, v in entry["published"].items()},
                mode=AggregationMode(entry["mode"]) if "mode" in entry else None,
            ))
        tables[name] = BenchmarkTable(
            name=name,
            title=data.get("title", name),
            columns=columns,
            rows=rows,
            mode=AggregationMode(data["mode"]),
            train_index=data.get("train_index"),
        )
    return tables


def reproduce_published_summaries(tables: Mapping[str, BenchmarkTable],
                                  tolerance: float = SUMMARY_TOLERANCE) -> List[SummaryCheck]:
    """Recompute mean / std / CoV^-1 of every row and compare with the published columns"""
    checks = []
    for name, table in tables.items():
        for row in table.rows:
            summary = table.summarize(row)
            matches = {
                key: abs(getattr(summary, key) - row.published[key]) <= tolerance + 1e-9
                for key in SUMMARY_COLUMNS if key in row.published
            }
            checks.append(SummaryCheck(name, row.method, summary, row.published, matches))
    mismatched = [f"{c.table}/{c.method}" for c in checks if not c.all_match]
    if mismatched:
        logger.warning(f"Summary mismatch for {', '.join(mismatched)}")
    logger.info(f"Reproduced {len(checks) - len(mismatched)}/{len(checks)} published summary rows")
    return checks


def summary_frame(checks: List[SummaryCheck]) -> pd.DataFrame:
    return pd.DataFrame([c.to_row() for c in checks])


def rank_methods(summaries: Mapping[str, CoVSummary]) -> List[Tuple[str, CoVSummary]]:
    """Methods by descending CoV^-1, ties by name"""
    return sorted(summaries.items(), key=lambda item: (-item[1].inv_cov, item[0]))


def ranking_frame(summaries: Mapping[str, CoVSummary]) -> pd.DataFrame:
    return pd.DataFrame([
        {"rank": position, "method": method, "mean": s.mean, "std": s.std, "inv_cov": s.inv_cov,
         "mode": s.mode.value, "n_values": s.n_values}
        for position, (method, s) in enumerate(rank_methods(summaries), start=1)
    ])


def table_summaries(table: BenchmarkTable) -> Dict[str, CoVSummary]:
    return {row.method: table.summarize(row) for row in table.rows}
