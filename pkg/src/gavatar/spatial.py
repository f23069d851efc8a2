"""Nearest-neighbor queries on point sets via a uniform spatial hash grid.

The grid accelerates the common case (query close to the data, well-chosen
cell size); queries it cannot certify are answered by exact chunked brute
force, so results always match the exhaustive scan, including the
lowest-index tie-break.
"""

from __future__ import annotations

import numpy as np

_CHUNK_BYTES = 64 * 1024 * 1024


def knn_brute(points: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k-nearest-neighbors by exhaustive scan.

    Returns (dist2 (Q, k), idx (Q, k)) ordered by (squared distance, index);
    exact squared distances decide ties, lowest index first.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = len(points)
    k = min(k, n)
    rows = max(1, _CHUNK_BYTES // max(1, n * 24))
    out_d = np.empty((len(queries), k))
    out_i = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), rows):
        q = queries[s:s + rows]
        d2 = np.sum((q[:, None, :] - points[None, :, :]) ** 2, axis=-1)
        out_d[s:s + rows], out_i[s:s + rows] = _row_topk(d2, k)
    return out_d, out_i


def _row_topk(d2: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row k smallest by (value, column index), exact under ties."""
    n = d2.shape[1]
    if n <= max(4 * k, 128):
        idx = np.argsort(d2, axis=1, kind='stable')[:, :k]
        return np.take_along_axis(d2, idx, axis=1), idx
    kk = min(k + 64, n)
    part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
    part_d = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, part_d), axis=1)[:, :k]
    idx = np.take_along_axis(part, order, axis=1)
    vals = np.take_along_axis(part_d, order, axis=1)
    # a tie cluster straddling the partition boundary could hide a lower
    # index outside the partition; re-rank those rows exactly
    boundary = vals[:, -1]
    kept_at_boundary = (part_d == boundary[:, None]).sum(axis=1)
    total_at_boundary = (d2 == boundary[:, None]).sum(axis=1)
    suspect = np.nonzero(kept_at_boundary != total_at_boundary)[0]
    for r in suspect:
        full = np.argsort(d2[r], kind='stable')[:k]
        idx[r] = full
        vals[r] = d2[r][full]
    return vals, idx


def estimate_knn_cell(points: np.ndarray, k: int, rng_seed: int = 0) -> float:
    """Density-aware grid cell size: scaled from sampled kth-neighbor spacing."""
    points = np.asarray(points, dtype=np.float64)
    p = len(points)
    if p < 2:
        return 1.0
    rng = np.random.default_rng(rng_seed)
    probe = points[rng.choice(p, min(p, 256), replace=False)]
    d2, _ = knn_brute(points, probe, min(k + 1, p))
    spacing = float(np.median(np.sqrt(d2[:, -1])))
    return max(spacing * 2.0, 1e-9)


class UniformGrid:
    """Uniform hash grid over a fixed point set."""

    def __init__(self, points: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell_size)
        self.origin = self.points.min(axis=0) if len(self.points) else np.zeros(3)
        coords = np.floor((self.points - self.origin) / self.cell).astype(np.int64)
        self.shape = coords.max(axis=0) + 1 if len(coords) else np.ones(3, dtype=np.int64)
        lin = (coords[:, 0] * self.shape[1] + coords[:, 1]) * self.shape[2] + coords[:, 2]
        order = np.argsort(lin, kind='stable')
        self._order = order
        self._uniq, starts = np.unique(lin[order], return_index=True)
        self._starts = starts
        self._ends = np.append(starts[1:], len(lin))
        self._offsets = np.array(
            [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)],
            dtype=np.int64)

    def query(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """k nearest points per query, ordered by (squared distance, index).

        The 27-cell neighborhood answer is accepted only when the kth distance
        is strictly below one cell width — that certifies no unexamined point
        (and no tie candidate) can beat it; everything else falls back to
        exact brute force.  Queries are processed in chunks that bound the
        number of gathered candidate rows, so dense cells cannot blow up
        memory.
        """
        queries = np.asarray(queries, dtype=np.float64)
        n = len(self.points)
        q_count = len(queries)
        k = min(k, n)
        out_d = np.full((q_count, k), np.inf)
        out_i = np.full((q_count, k), -1, dtype=np.int64)
        if q_count == 0 or n == 0:
            return out_d, out_i

        cells = np.clip(np.floor((queries - self.origin) / self.cell).astype(np.int64),
                        0, self.shape - 1)
        neigh = cells[:, None, :] + self._offsets[None, :, :]       # (Q, 27, 3)
        in_range = np.all((neigh >= 0) & (neigh < self.shape), axis=-1)
        lin = (neigh[..., 0] * self.shape[1] + neigh[..., 1]) * self.shape[2] + neigh[..., 2]
        pos = np.searchsorted(self._uniq, lin.ravel())
        pos_c = np.minimum(pos, len(self._uniq) - 1).reshape(q_count, 27)
        found = in_range & (self._uniq[pos_c] == lin)
        cell_len = np.where(found, self._ends[pos_c] - self._starts[pos_c], 0)
        per_query = cell_len.sum(axis=1)

        budget = 4_000_000
        chunk_start = 0
        while chunk_start < q_count:
            acc = np.cumsum(per_query[chunk_start:])
            span = int(np.searchsorted(acc, budget)) + 1
            chunk = slice(chunk_start, min(chunk_start + span, q_count))
            self._query_chunk(queries, chunk, pos_c[chunk], found[chunk],
                              cell_len[chunk], k, out_d, out_i)
            chunk_start = chunk.stop
        certified = (out_i[:, k - 1] >= 0) & (out_d[:, k - 1] < (self.cell - 1e-12) ** 2)
        pending = np.nonzero(~certified)[0]
        if len(pending):
            pd, pi = knn_brute(self.points, queries[pending], k)
            out_d[pending] = pd
            out_i[pending] = pi
        return out_d, out_i

    def _query_chunk(self, queries, chunk, pos_c, found, cell_len, k, out_d, out_i):
        qn = pos_c.shape[0]
        cell_pos = pos_c[found]
        cell_query = np.repeat(np.arange(qn), 27).reshape(qn, 27)[found]
        lengths = cell_len[found]
        total = int(lengths.sum())
        if not total:
            return
        # flatten all [start, end) ranges into one candidate index array
        cum = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        flat = np.arange(total) + np.repeat(self._starts[cell_pos] - cum, lengths)
        cand = self._order[flat]
        cand_query = np.repeat(cell_query, lengths)
        d2 = np.sum((self.points[cand] - queries[chunk][cand_query]) ** 2, axis=-1)
        # per-query ranking by (distance, index)
        sort = np.lexsort((cand, d2, cand_query))
        cand, d2, cand_query = cand[sort], d2[sort], cand_query[sort]
        counts = np.bincount(cand_query, minlength=qn)
        seg_start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(len(cand)) - np.repeat(seg_start, counts)
        take = rank < k
        out_i[chunk][cand_query[take], rank[take]] = cand[take]
        out_d[chunk][cand_query[take], rank[take]] = d2[take]
