"""Core stream types: cluster features, sightings, records, and the indexed store.

A person record accumulates everything the stream has learned about one
tracked shopper: a cluster-feature vector over all appearance features ever
assigned to it, plus a window of recent sightings used for time-space
matching and trajectory linking.  The record store keeps records in a sparse
spatio-temporal grid so that nearest-record queries do not scan the world.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

# Walking-pace gate: 3 mph expressed in m/s, the scale that converts floor
# distance into seconds inside the time-space metric.
MPH_TO_MPS = 1609.344 / 3600.0
DEFAULT_SPEED_MPS = 3.0 * MPH_TO_MPS  # 1.34112

# Most recent sightings kept per record for matching and linking.
DEFAULT_SIGHTING_WINDOW = 32


class DegenerateMeanError(ValueError):
    """Raised when a cluster feature has a zero linear sum (no mean direction)."""


# ---------------------------------------------------------------------------
# Cluster features
# ---------------------------------------------------------------------------


@dataclass
class CFVector:
    """Additive sufficient statistics of a feature cluster.

    count:      number of feature vectors absorbed
    linear_sum: element-wise sum of the vectors
    square_sum: element-wise sum of the squared vectors
    """

    count: int
    linear_sum: np.ndarray
    square_sum: np.ndarray

    def copy(self) -> "CFVector":
        return CFVector(self.count, self.linear_sum.copy(), self.square_sum.copy())


def cf_from_features(features: np.ndarray) -> CFVector:
    """Build a CFVector from an (n, d) array of feature vectors."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, d) array")
    return CFVector(
        count=int(feats.shape[0]),
        linear_sum=feats.sum(axis=0),
        square_sum=(feats * feats).sum(axis=0),
    )


def cf_merge(a: CFVector, b: CFVector) -> CFVector:
    """Merge two cluster features; commutative and associative by construction."""
    if a.linear_sum.shape != b.linear_sum.shape:
        raise ValueError(
            f"dimension mismatch: {a.linear_sum.shape} vs {b.linear_sum.shape}"
        )
    return CFVector(
        count=a.count + b.count,
        linear_sum=a.linear_sum + b.linear_sum,
        square_sum=a.square_sum + b.square_sum,
    )


def cf_mean(cf: CFVector) -> np.ndarray:
    """Element-wise mean of the absorbed features."""
    if cf.count <= 0:
        raise ValueError("empty cluster feature has no mean")
    return cf.linear_sum / cf.count


def cf_radius(cf: CFVector) -> np.ndarray:
    """Element-wise standard deviation; variance clamped at zero for rounding."""
    mean = cf_mean(cf)
    var = cf.square_sum / cf.count - mean * mean
    return np.sqrt(np.maximum(var, 0.0))


def cf_mean_direction(cf: CFVector) -> np.ndarray:
    """Unit mean direction of the cluster, the comparison space for cosine modes."""
    ls = cf.linear_sum
    norm = float(np.linalg.norm(ls))
    if norm == 0.0:
        raise DegenerateMeanError("degenerate mean direction: linear sum is zero")
    return ls / norm


# ---------------------------------------------------------------------------
# Sightings, queries, records
# ---------------------------------------------------------------------------


@dataclass
class Sighting:
    """One camera pass: entry/exit timestamps, camera floor position, pose."""

    t_start: float
    t_end: float
    cam_pos: np.ndarray  # (2,) metres on the floor plan
    pose: np.ndarray  # (2,) unit facing vector
    cam_id: int | None = None  # which camera produced it, when known

    def __post_init__(self) -> None:
        self.cam_pos = np.asarray(self.cam_pos, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.t_end < self.t_start:
            raise ValueError(
                f"sighting ends before it starts: t_start={self.t_start}, t_end={self.t_end}"
            )

    @property
    def t_tilde(self) -> float:
        """Combined timestamp used by the time-space metric (start plus end)."""
        return self.t_start + self.t_end


@dataclass
class Query:
    """A single incoming sighting with its appearance features folded into a CF.

    raw_features keeps the snapshot vectors the CF was built from so the
    event can be re-serialized without loss; the clustering path reads
    only the CF.
    """

    sighting: Sighting
    cf: CFVector
    raw_features: np.ndarray | None = None

    @classmethod
    def from_features(cls, sighting: Sighting, features: np.ndarray) -> "Query":
        feats = np.asarray(features, dtype=np.float64)
        return cls(sighting=sighting, cf=cf_from_features(feats), raw_features=feats)


@dataclass
class PersonRecord:
    """A tracked identity: CF over all assigned features plus recent sightings."""

    record_id: int
    cf: CFVector
    sightings: list = field(default_factory=list)  # kept window, ascending t_tilde
    n_sightings_total: int = 0
    version: int = 0

    # caches refreshed by the store on every mutation
    _scaled_pts: np.ndarray | None = None
    _scaled_rows: list | None = None  # tuple rows of _scaled_pts when short
    _mean_dir: np.ndarray | None = None

    def mean_direction(self) -> np.ndarray | None:
        """Unit mean direction, or None when the linear sum is degenerate."""
        return self._mean_dir


def _scaled_point(sight: Sighting, speed: float) -> np.ndarray:
    """Map a sighting into the isotropic (x/s, y/s, t_tilde) space, units seconds."""
    return np.array(
        [sight.cam_pos[0] / speed, sight.cam_pos[1] / speed, sight.t_tilde],
        dtype=np.float64,
    )


def time_space_distance(record: PersonRecord, query: Query, speed: float = DEFAULT_SPEED_MPS) -> float:
    """Minimum over the record's kept sightings of the time-space separation.

    The separation for one sighting is sqrt(E(z_i, z_q)^2 / s^2 + (dt~)^2)
    with E the Euclidean floor distance and s the walking-pace scale, which
    equals the Euclidean distance in the scaled 3-space.
    """
    if record._scaled_pts is None or len(record._scaled_pts) == 0:
        return math.inf
    qp = _scaled_point(query.sighting, speed)
    diff = record._scaled_pts - qp
    return float(np.sqrt((diff * diff).sum(axis=1).min()))


# ---------------------------------------------------------------------------
# Record store with spatio-temporal grid index
# ---------------------------------------------------------------------------


class RecordStore:
    """Mutable set of person records indexed on a sparse 3-D grid.

    The grid lives in the scaled (x/s, y/s, t_tilde) space so that the
    time-space metric is plain Euclidean distance.  Every record is indexed
    under the cells of its kept sightings; ring expansion around a query cell
    yields exact nearest records because any cell at Chebyshev ring G holds
    only points at least (G-1) * cell_size away.
    """

    def __init__(
        self,
        dim: int,
        speed: float = DEFAULT_SPEED_MPS,
        cell_seconds: float = 15.0,
        window: int = DEFAULT_SIGHTING_WINDOW,
    ):
        if dim < 1:
            raise ValueError("feature dimension must be positive")
        if speed <= 0:
            raise ValueError("speed scale must be positive")
        if cell_seconds <= 0:
            raise ValueError("index cell size must be positive")
        if window < 1:
            raise ValueError("sighting window must hold at least one sighting")
        self.dim = dim
        self.speed = speed
        self.cell_seconds = cell_seconds
        self.window = window
        self.records: dict[int, PersonRecord] = {}
        self.tombstones: dict[int, int] = {}
        self._next_id = 0
        self._cells: dict[tuple, dict[int, int]] = {}
        self._record_cells: dict[int, set] = {}
        self._bbox_lo: list | None = None
        self._bbox_hi: list | None = None

    # -- bookkeeping ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self.records)

    def _cell_of(self, pt: np.ndarray) -> tuple:
        c = np.floor(pt / self.cell_seconds).astype(np.int64)
        return (int(c[0]), int(c[1]), int(c[2]))

    def _refresh_caches(self, rec: PersonRecord) -> None:
        rec._scaled_pts = np.array(
            [_scaled_point(s, self.speed) for s in rec.sightings], dtype=np.float64
        )
        # Plain tuples beat numpy per-record math for the short rows the
        # pick loop sees; long rows fall back to the vector path.
        rec._scaled_rows = (
            [tuple(p) for p in rec._scaled_pts] if len(rec.sightings) <= 8 else None
        )
        try:
            rec._mean_dir = cf_mean_direction(rec.cf)
        except DegenerateMeanError:
            rec._mean_dir = None

    def _reindex(self, rec: PersonRecord) -> None:
        new_cells = {self._cell_of(p) for p in rec._scaled_pts}
        old_cells = self._record_cells.get(rec.record_id, set())
        for cell in old_cells - new_cells:
            bucket = self._cells.get(cell)
            if bucket is not None:
                bucket.pop(rec.record_id, None)
                if not bucket:
                    del self._cells[cell]
        for cell in new_cells - old_cells:
            self._cells.setdefault(cell, {})[rec.record_id] = 1
            self._grow_bbox(cell)
        self._record_cells[rec.record_id] = new_cells

    def _grow_bbox(self, cell: tuple) -> None:
        if self._bbox_lo is None:
            self._bbox_lo = list(cell)
            self._bbox_hi = list(cell)
            return
        for axis in range(3):
            self._bbox_lo[axis] = min(self._bbox_lo[axis], cell[axis])
            self._bbox_hi[axis] = max(self._bbox_hi[axis], cell[axis])

    def _drop_from_index(self, record_id: int) -> None:
        for cell in self._record_cells.pop(record_id, set()):
            bucket = self._cells.get(cell)
            if bucket is not None:
                bucket.pop(record_id, None)
                if not bucket:
                    del self._cells[cell]

    # -- mutation ------------------------------------------------------------

    def _check_query(self, query: Query) -> None:
        if query.cf.linear_sum.shape != (self.dim,):
            raise ValueError(
                f"query feature dimension {query.cf.linear_sum.shape} does not match store dim {self.dim}"
            )

    def new_record(self, query: Query) -> PersonRecord:
        """Open a fresh record seeded with the query's sighting and CF."""
        self._check_query(query)
        rec = PersonRecord(
            record_id=self._next_id,
            cf=query.cf.copy(),
            sightings=[query.sighting],
            n_sightings_total=1,
        )
        self._next_id += 1
        self.records[rec.record_id] = rec
        self._refresh_caches(rec)
        self._reindex(rec)
        return rec

    def assign(self, record_id: int, query: Query) -> PersonRecord:
        """Fold a query into an existing record: CF merge plus sighting append."""
        self._check_query(query)
        rec = self.records[record_id]
        rec.cf = cf_merge(rec.cf, query.cf)
        rec.sightings.append(query.sighting)
        rec.sightings.sort(key=lambda s: s.t_tilde)
        if len(rec.sightings) > self.window:
            rec.sightings = rec.sightings[-self.window :]
        rec.n_sightings_total += 1
        rec.version += 1
        self._refresh_caches(rec)
        self._reindex(rec)
        return rec

    def merge_into(self, dst_id: int, src_id: int) -> PersonRecord:
        """Absorb record src into dst and tombstone src (dst survives)."""
        if dst_id == src_id:
            raise ValueError("cannot merge a record with itself")
        dst = self.records[dst_id]
        src = self.records[src_id]
        dst.cf = cf_merge(dst.cf, src.cf)
        merged = sorted(dst.sightings + src.sightings, key=lambda s: s.t_tilde)
        dst.sightings = merged[-self.window :]
        dst.n_sightings_total += src.n_sightings_total
        dst.version += 1
        self._drop_from_index(src_id)
        del self.records[src_id]
        self.tombstones[src_id] = dst_id
        self._refresh_caches(dst)
        self._reindex(dst)
        return dst

    def resolve(self, record_id: int) -> int:
        """Follow tombstones to the surviving record id."""
        seen = []
        cur = record_id
        while cur in self.tombstones:
            seen.append(cur)
            cur = self.tombstones[cur]
        for rid in seen:  # path compression
            self.tombstones[rid] = cur
        return cur

    # -- queries -------------------------------------------------------------

    def pick_nearest(self, query: Query, k: int) -> list:
        """Exact k nearest records by time-space distance, ties by lower id.

        Returns a list of (distance, record_id) sorted ascending.  Ring
        expansion over the grid stops once the k-th best distance is provably
        minimal or every occupied cell has been scanned.
        """
        self._check_query(query)
        if k <= 0 or not self.records:
            return []
        k = min(k, len(self.records))
        qp = _scaled_point(query.sighting, self.speed)
        qcell = self._cell_of(qp)
        h = self.cell_seconds

        found: dict[int, float] = {}
        best: list = []  # heap of (-dist, -id) holding current top-k

        def consider(rid: int) -> None:
            if rid in found:
                return
            rec = self.records[rid]
            diff = rec._scaled_pts - qp
            dist = float(np.sqrt((diff * diff).sum(axis=1).min()))
            found[rid] = dist
            item = (-dist, -rid)
            if len(best) < k:
                heapq.heappush(best, item)
            elif item > best[0]:
                heapq.heapreplace(best, item)

        lo, hi = self._bbox_lo, self._bbox_hi
        scanned_cells = 0
        total_cells = len(self._cells)
        ring = 0
        while True:
            for cell in self._shell_cells(qcell, ring, lo, hi):
                bucket = self._cells.get(cell)
                if bucket is None:
                    continue
                scanned_cells += 1
                for rid in bucket:
                    consider(rid)
            if scanned_cells >= total_cells:
                break
            if len(best) == k:
                kth = -best[0][0]
                if kth <= ring * h:
                    break
            ring += 1
        out = sorted(((dist, rid) for rid, dist in found.items()))
        return out[:k]

    def records_within(self, query: Query, radius: float) -> list:
        """All record ids whose time-space distance is at most radius (exact)."""
        self._check_query(query)
        if not self.records:
            return []
        qp = _scaled_point(query.sighting, self.speed)
        qcell = self._cell_of(qp)
        reach = int(math.floor(radius / self.cell_seconds)) + 1
        seen: set = set()
        out = []
        lo, hi = self._bbox_lo, self._bbox_hi
        for ring in range(reach + 1):
            for cell in self._shell_cells(qcell, ring, lo, hi):
                bucket = self._cells.get(cell)
                if bucket is None:
                    continue
                for rid in bucket:
                    if rid in seen:
                        continue
                    seen.add(rid)
                    rec = self.records[rid]
                    diff = rec._scaled_pts - qp
                    dist = float(np.sqrt((diff * diff).sum(axis=1).min()))
                    if dist <= radius:
                        out.append((dist, rid))
        out.sort()
        return out

    @staticmethod
    def _shell_cells(center: tuple, ring: int, lo, hi):
        """Cells at exact Chebyshev distance `ring` from center, clipped to bbox."""
        cx, cy, cz = center
        if lo is None:
            return
        if ring == 0:
            cell = (cx, cy, cz)
            if all(lo[a] <= cell[a] <= hi[a] for a in range(3)):
                yield cell
            return

        def clamp_range(c, axis):
            a0 = max(c - ring, lo[axis])
            a1 = min(c + ring, hi[axis])
            return a0, a1

        x0, x1 = clamp_range(cx, 0)
        y0, y1 = clamp_range(cy, 1)
        z0, z1 = clamp_range(cz, 2)
        # two x-faces
        for xf in (cx - ring, cx + ring):
            if lo[0] <= xf <= hi[0]:
                for y in range(y0, y1 + 1):
                    for z in range(z0, z1 + 1):
                        yield (xf, y, z)
        # two y-faces, excluding x-face rows already emitted
        xin0, xin1 = max(cx - ring + 1, lo[0]), min(cx + ring - 1, hi[0])
        for yf in (cy - ring, cy + ring):
            if lo[1] <= yf <= hi[1]:
                for x in range(xin0, xin1 + 1):
                    for z in range(z0, z1 + 1):
                        yield (x, yf, z)
        # two z-faces, excluding both previous face sets
        yin0, yin1 = max(cy - ring + 1, lo[1]), min(cy + ring - 1, hi[1])
        for zf in (cz - ring, cz + ring):
            if lo[2] <= zf <= hi[2]:
                for x in range(xin0, xin1 + 1):
                    for y in range(yin0, yin1 + 1):
                        yield (x, y, zf)
