"""File formats: event streams, record-store snapshots, trained models.

Events travel as JSON lines so other tooling can write or read them
with any language's standard library. Store snapshots and model files
are little-endian binary behind a four-byte magic tag and a format
version, so a stale, foreign, or cut-off file fails loudly instead of
deserializing into garbage. All writers are deterministic: the same
in-memory state produces the same bytes.
"""

import hashlib
import json
import math
import struct
import warnings

import numpy as np

from .engine import ModelBundle
from .gcn import GcnParams
from .stream_core import CFVector, PersonRecord, Query, RecordStore, Sighting
from .trajectory import TrajectoryParams

STORE_MAGIC = b"CSG1"
MODEL_MAGIC = b"CSGM"
STORE_VERSION = 1
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Event streams (JSON lines)
# ---------------------------------------------------------------------------


def _event_obj(query, label):
    s = query.sighting
    if query.raw_features is not None:
        feats = np.asarray(query.raw_features, dtype=np.float64)
    else:
        # fall back to the CF mean scaled to unit length; count > 1
        # queries cannot be reconstructed snapshot-for-snapshot
        feats = query.cf.linear_sum / np.linalg.norm(query.cf.linear_sum)
        feats = feats[None, :]
    obj = {
        "t_start": float(s.t_start),
        "t_end": float(s.t_end),
        "camera_id": -1 if s.cam_id is None else int(s.cam_id),
        "cam_x": float(s.cam_pos[0]),
        "cam_y": float(s.cam_pos[1]),
        "pose_angle_rad": float(math.atan2(s.pose[1], s.pose[0])),
        "features": [[float(v) for v in row] for row in feats],
    }
    if label is not None:
        obj["label"] = int(label)
    return obj


def write_events(path, events, labels=None):
    """Write one JSON object per line; key order is fixed for determinism."""
    if labels is None:
        labels = [None] * len(events)
    if len(labels) != len(events):
        raise ValueError(f"{len(events)} events but {len(labels)} labels")
    with open(path, "w", encoding="utf-8") as fh:
        for query, label in zip(events, labels):
            fh.write(json.dumps(_event_obj(query, label), sort_keys=True))
            fh.write("\n")


def read_events(path):
    """Load a JSON-lines event file.

    Returns (events, labels); labels is None when no line carried one,
    otherwise a list with None holes for unlabeled lines.
    """
    events = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not valid JSON: {exc}") from None
            missing = {
                "t_start", "t_end", "cam_x", "cam_y", "pose_angle_rad", "features",
            } - obj.keys()
            if missing:
                raise ValueError(
                    f"{path}:{lineno}: missing fields {sorted(missing)}"
                )
            ang = float(obj["pose_angle_rad"])
            cam_id = int(obj.get("camera_id", -1))
            sight = Sighting(
                t_start=float(obj["t_start"]),
                t_end=float(obj["t_end"]),
                cam_pos=np.array([obj["cam_x"], obj["cam_y"]], dtype=np.float64),
                pose=np.array([math.cos(ang), math.sin(ang)]),
                cam_id=None if cam_id < 0 else cam_id,
            )
            feats = np.asarray(obj["features"], dtype=np.float64)
            if feats.ndim != 2:
                raise ValueError(f"{path}:{lineno}: features must be a list of vectors")
            events.append(Query.from_features(sight, feats))
            labels.append(None if "label" not in obj else int(obj["label"]))
    if all(lab is None for lab in labels):
        return events, None
    return events, labels


# ---------------------------------------------------------------------------
# Record-store snapshots
# ---------------------------------------------------------------------------


class _Reader:
    """Cursor over bytes that fails cleanly on truncation."""

    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, count):
        return np.frombuffer(self.take(count * 8), dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.data):
            raise ValueError(
                f"{self.what} has {len(self.data) - self.pos} trailing bytes"
            )


def _pack_sighting(s):
    cam_id = -1 if s.cam_id is None else int(s.cam_id)
    return struct.pack(
        "<ddddddq",
        float(s.t_start), float(s.t_end),
        float(s.cam_pos[0]), float(s.cam_pos[1]),
        float(s.pose[0]), float(s.pose[1]),
        cam_id,
    )


def save_store(path, store):
    """Snapshot every record, tombstone, and the id counter."""
    parts = [
        STORE_MAGIC,
        struct.pack(
            "<HiddiqqQ",
            STORE_VERSION,
            store.dim,
            store.speed,
            store.cell_seconds,
            store.window,
            store._next_id,
            len(store.records),
            len(store.tombstones),
        ),
    ]
    for rid in sorted(store.records):
        rec = store.records[rid]
        parts.append(struct.pack("<qqqq", rid, rec.version, rec.n_sightings_total, rec.cf.count))
        parts.append(np.ascontiguousarray(rec.cf.linear_sum, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(rec.cf.square_sum, dtype="<f8").tobytes())
        parts.append(struct.pack("<q", len(rec.sightings)))
        for s in rec.sightings:
            parts.append(_pack_sighting(s))
    for src in sorted(store.tombstones):
        parts.append(struct.pack("<qq", src, store.tombstones[src]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_store(path):
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data, "record-store snapshot")
    magic = rd.take(4)
    if magic != STORE_MAGIC:
        raise ValueError(f"not a record-store snapshot: magic {magic!r}")
    (version,) = rd.unpack("H")
    if version != STORE_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    dim, speed, cell_seconds, window, next_id, n_records, n_tomb = rd.unpack("iddiqqQ")
    store = RecordStore(dim=dim, speed=speed, cell_seconds=cell_seconds, window=window)
    for _ in range(n_records):
        rid, rec_version, n_total, count = rd.unpack("qqqq")
        ls = rd.array(dim)
        ss = rd.array(dim)
        (n_sights,) = rd.unpack("q")
        sightings = []
        for _ in range(n_sights):
            t0, t1, cx, cy, px, py, cam_id = rd.unpack("ddddddq")
            sightings.append(
                Sighting(
                    t_start=t0, t_end=t1,
                    cam_pos=np.array([cx, cy]),
                    pose=np.array([px, py]),
                    cam_id=None if cam_id < 0 else int(cam_id),
                )
            )
        rec = PersonRecord(
            record_id=rid,
            cf=CFVector(count=int(count), linear_sum=ls, square_sum=ss),
            sightings=sightings,
            n_sightings_total=int(n_total),
            version=int(rec_version),
        )
        store.records[rid] = rec
        store._refresh_caches(rec)
        store._reindex(rec)
    for _ in range(n_tomb):
        src, dst = rd.unpack("qq")
        store.tombstones[int(src)] = int(dst)
    rd.done()
    store._next_id = int(next_id)
    return store


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def config_fingerprint(config):
    """Short stable digest of a config mapping (or '' for None)."""
    if config is None:
        return ""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _section_arrays(params):
    if isinstance(params, TrajectoryParams):
        arrays = {
            "w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v,
            "w1": params.w1, "b1": params.b1, "w2": params.w2, "b2": params.b2,
            "freq": params.freq, "floor_lo": params.floor_lo, "floor_hi": params.floor_hi,
        }
        if params.time_table is not None:
            arrays["time_table"] = params.time_table
        return arrays, {"time_embedding": params.time_embedding}
    if isinstance(params, GcnParams):
        return {f"weights.{i}": w for i, w in enumerate(params.weights)}, {}
    raise TypeError(f"cannot serialize {type(params).__name__}")


def _rebuild_section(name, arrays, meta):
    if name == "trajectory":
        return TrajectoryParams(
            w_q=arrays["w_q"], w_k=arrays["w_k"], w_v=arrays["w_v"],
            w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"],
            freq=arrays["freq"], floor_lo=arrays["floor_lo"], floor_hi=arrays["floor_hi"],
            time_embedding=meta.get("time_embedding", "sinusoidal"),
            time_table=arrays.get("time_table"),
        )
    n = len(arrays)
    return GcnParams(weights=[arrays[f"weights.{i}"] for i in range(n)])


def save_model(path, bundle, config=None):
    """Write a model bundle: header JSON plus raw little-endian buffers.

    config, when given, is any JSON-friendly mapping describing how the
    models were trained; its fingerprint lets a later load warn when
    run settings drifted from training settings.
    """
    sections = []
    buffers = []
    feature_dim = None
    for name, params in (
        ("trajectory", bundle.trajectory),
        ("gcn_cos", bundle.gcn_cos),
        ("gcn_vmf", bundle.gcn_vmf),
    ):
        if params is None:
            continue
        arrays, meta = _section_arrays(params)
        entry = {"name": name, "meta": meta, "arrays": []}
        for key in sorted(arrays):
            arr = np.ascontiguousarray(arrays[key], dtype="<f8")
            entry["arrays"].append({"key": key, "shape": list(arr.shape)})
            buffers.append(arr.tobytes())
        sections.append(entry)
        if name in ("gcn_cos", "gcn_vmf"):
            feature_dim = params.dims[0]
    header = {
        "format_version": MODEL_VERSION,
        "feature_dim": feature_dim,
        "fingerprint": config_fingerprint(config),
        "sections": sections,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_VERSION, len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_model(path, config=None, expect_dim=None):
    """Read a model bundle back; see save_model for the check semantics.

    A fingerprint mismatch (both sides known) warns; a feature-dimension
    mismatch against expect_dim is an error; bad magic, version, or a
    short file is an error before any section is built.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data, "model file")
    magic = rd.take(4)
    if magic != MODEL_MAGIC:
        raise ValueError(f"not a model file: magic {magic!r}")
    version, header_len = rd.unpack("HI")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    try:
        header = json.loads(rd.take(header_len).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt model header: {exc}") from None
    total = sum(
        8 * int(np.prod(spec["shape"]))
        for sec in header["sections"]
        for spec in sec["arrays"]
    )
    if rd.pos + total != len(data):
        raise ValueError(
            f"truncated model file: header promises {total} buffer bytes, "
            f"{len(data) - rd.pos} present"
        )
    if expect_dim is not None and header.get("feature_dim") not in (None, expect_dim):
        raise ValueError(
            f"model was trained at feature dimension {header['feature_dim']}, "
            f"run uses {expect_dim}"
        )
    want = config_fingerprint(config)
    have = header.get("fingerprint", "")
    if want and have and want != have:
        warnings.warn(
            f"model config fingerprint {have} does not match run config {want}; "
            "models may have been trained under different settings",
            stacklevel=2,
        )
    bundle = ModelBundle()
    for sec in header["sections"]:
        arrays = {}
        for spec in sec["arrays"]:
            shape = tuple(int(v) for v in spec["shape"])
            n = int(np.prod(shape))
            arrays[spec["key"]] = (
                np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
            )
        setattr(bundle, sec["name"], _rebuild_section(sec["name"], arrays, sec["meta"]))
    rd.done()
    return bundle
