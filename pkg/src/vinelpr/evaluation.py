"""Retrieval evaluation (Recall@N, Recall@1%) and report rendering."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .head import prefix_normalize
from .ingest import DescriptorStore

HANDCRAFTED_METHODS = ("scan_context", "fpfh")


@dataclass(frozen=True)
class MatchTrace:
    query: str
    retrieved: str
    ground_distance: float


@dataclass
class RecallResult:
    test_label: str
    dim: int
    recall_at: list  # recall_at[k] is Recall@(k + 1)
    n_1pct: int
    recall_at_1pct: float
    num_queries: int
    excluded_queries: int
    traces: list = field(default_factory=list)

    @property
    def recall_at_1(self) -> float:
        return self.recall_at[0]


@dataclass
class RecallReport:
    meta: dict
    results: list

    def get(self, test_label: str, dim: int) -> RecallResult:
        for r in self.results:
            if r.test_label == test_label and r.dim == dim:
                return r
        raise KeyError((test_label, dim))


def one_percent_count(database_size: int) -> int:
    """Candidates inspected for Recall@1%: max(1, round-half-up(1% of database))."""
    return max(1, int(math.floor(0.01 * database_size + 0.5)))


def metric_for(method_label: str) -> str:
    return "cosine" if method_label in HANDCRAFTED_METHODS else "euclidean"


def _key_str(key) -> str:
    return f"{key[0]}:{key[1]}"


def rank_database(db: np.ndarray, queries: np.ndarray, metric: str) -> np.ndarray:
    """Full candidate ranking per query, best first, ties broken by index."""
    if metric == "cosine":
        dn = np.linalg.norm(db, axis=1)
        qn = np.linalg.norm(queries, axis=1)
        if np.any(dn == 0) or np.any(qn == 0):
            raise ValueError("cosine ranking needs non-zero descriptors")
        score = -(queries @ db.T) / (qn[:, None] * dn[None, :])
    elif metric == "euclidean":
        diff = queries[:, None, :] - db[None, :, :]
        score = np.sqrt(np.einsum("qdk,qdk->qd", diff, diff))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return np.argsort(score, axis=1, kind="stable")


def recall_from_ranking(
    ranking: np.ndarray,
    db_xy: np.ndarray,
    query_xy: np.ndarray,
    threshold: float,
    max_n: int = 25,
    test_label: str = "test",
    dim: int = 0,
    db_keys: Optional[Sequence] = None,
    query_keys: Optional[Sequence] = None,
) -> RecallResult:
    """Score a precomputed ranking against ground-truth positions.

    A query is a true positive at N when any of its top-N candidates lies
    within ``threshold`` metres (planar).  Queries with no candidate within
    the threshold anywhere in the database are excluded from the
    denominator.
    """
    nq, ndb = ranking.shape
    ground = np.linalg.norm(query_xy[:, None, :] - db_xy[None, :, :], axis=2)
    ranked_ground = np.take_along_axis(ground, ranking, axis=1)
    hit = ranked_ground <= threshold
    valid = hit.any(axis=1)
    first = np.where(valid, hit.argmax(axis=1), ndb)
    num_valid = int(valid.sum())
    n1 = one_percent_count(ndb)

    def rate(n: int) -> float:
        return float(np.count_nonzero(first[valid] < n)) / num_valid if num_valid else 0.0

    db_keys = list(db_keys) if db_keys is not None else [("db", i) for i in range(ndb)]
    query_keys = list(query_keys) if query_keys is not None else [("query", i) for i in range(nq)]
    traces = [
        MatchTrace(_key_str(query_keys[q]), _key_str(db_keys[ranking[q, 0]]), float(ranked_ground[q, 0]))
        for q in range(nq)
    ]
    return RecallResult(
        test_label=test_label,
        dim=dim,
        recall_at=[rate(n) for n in range(1, max_n + 1)],
        n_1pct=n1,
        recall_at_1pct=rate(n1),
        num_queries=num_valid,
        excluded_queries=nq - num_valid,
        traces=traces,
    )


def evaluate(
    database: DescriptorStore,
    queries: DescriptorStore,
    dims: Optional[Sequence[int]] = None,
    threshold: float = 5.0,
    test_label: str = "test",
    max_n: int = 25,
    meta: Optional[dict] = None,
) -> RecallReport:
    """Recall report of ``queries`` retrieved against ``database``.

    Handcrafted stores (Scan Context, FPFH) are ranked by cosine similarity
    on the full vector.  Learned stores are ranked by Euclidean distance
    between L2-normalized prefixes, once per entry of ``dims``.
    """
    if len(database) == 0:
        raise ValueError("database is empty")
    if len(queries) == 0:
        raise ValueError("query set is empty")
    if database.descriptor_dim != queries.descriptor_dim:
        raise ValueError(
            f"dimension mismatch: database {database.descriptor_dim} vs queries {queries.descriptor_dim}"
        )
    metric = metric_for(database.method_label)
    if metric == "cosine" or not dims:
        dims = [database.descriptor_dim]
    db_vec, q_vec = database.vectors(), queries.vectors()
    db_xy, q_xy = database.poses()[:, :2], queries.poses()[:, :2]
    results = []
    for m in dims:
        if not 1 <= m <= database.descriptor_dim:
            raise ValueError(f"prefix {m} outside 1..{database.descriptor_dim}")
        if metric == "euclidean":
            a, b = prefix_normalize(db_vec, m), prefix_normalize(q_vec, m)
        else:
            a, b = db_vec, q_vec
        ranking = rank_database(a, b, metric)
        results.append(
            recall_from_ranking(
                ranking, db_xy, q_xy, threshold, max_n, test_label, int(m), database.keys(), queries.keys()
            )
        )
    full_meta = {"dataset": "", "split": "", "method": database.method_label, "threshold_m": float(threshold)}
    full_meta.update(meta or {})
    return RecallReport(full_meta, results)


# ------------------------------------------------------------- rendering
def report_to_dict(report: RecallReport) -> dict:
    return {
        "meta": dict(report.meta),
        "results": [
            {
                "test_label": r.test_label,
                "dim": r.dim,
                "recall_at": [{"n": i + 1, "value": v} for i, v in enumerate(r.recall_at)],
                "recall_at_1pct": {"n": r.n_1pct, "value": r.recall_at_1pct},
                "num_queries": r.num_queries,
                "excluded_queries": r.excluded_queries,
                "traces": [
                    {"query": t.query, "retrieved": t.retrieved, "ground_distance": t.ground_distance}
                    for t in r.traces
                ],
            }
            for r in report.results
        ],
    }


def report_from_dict(raw: dict) -> RecallReport:
    results = []
    for r in raw["results"]:
        curve = sorted(r["recall_at"], key=lambda e: e["n"])
        results.append(
            RecallResult(
                test_label=r["test_label"],
                dim=int(r["dim"]),
                recall_at=[float(e["value"]) for e in curve],
                n_1pct=int(r["recall_at_1pct"]["n"]),
                recall_at_1pct=float(r["recall_at_1pct"]["value"]),
                num_queries=int(r["num_queries"]),
                excluded_queries=int(r["excluded_queries"]),
                traces=[MatchTrace(t["query"], t["retrieved"], float(t["ground_distance"])) for t in r["traces"]],
            )
        )
    return RecallReport(dict(raw["meta"]), results)


def report_to_json(report: RecallReport) -> bytes:
    return (json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n").encode("utf-8")


def report_from_json(data: bytes) -> RecallReport:
    return report_from_dict(json.loads(data.decode("utf-8")))


CSV_COLUMNS = ["test_label", "dim", "num_queries", "excluded_queries", "recall_at_1", "n_1pct", "recall_at_1pct"]


def report_to_csv(report: RecallReport) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.results:
        w.writerow(
            [
                r.test_label, r.dim, r.num_queries, r.excluded_queries,
                repr(r.recall_at[0]) if r.recall_at else "", r.n_1pct, repr(r.recall_at_1pct),
            ]
        )
    return buf.getvalue().encode("utf-8")


def recall_curve_csv(report: RecallReport) -> bytes:
    """Long-format Recall@N table: test_label, dim, n, recall."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["test_label", "dim", "n", "recall"])
    for r in report.results:
        for i, v in enumerate(r.recall_at):
            w.writerow([r.test_label, r.dim, i + 1, repr(v)])
    return buf.getvalue().encode("utf-8")


def recall_matrix_csv(cells: dict, value: str = "recall_at_1") -> bytes:
    """Train-label x test-label matrix, e.g. for cross-season results.

    ``cells`` maps ``(train_label, test_label)`` to a RecallResult.
    """
    rows = sorted({k[0] for k in cells})
    cols = sorted({k[1] for k in cells})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["train\\test"] + cols)
    for r in rows:
        line = [r]
        for c in cols:
            res = cells.get((r, c))
            line.append("" if res is None else repr(getattr(res, value)))
        w.writerow(line)
    return buf.getvalue().encode("utf-8")
