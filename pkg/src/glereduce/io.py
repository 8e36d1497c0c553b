"""File formats: model/basis ingestion, reduced-model JSON and CSV exports.

Every writer is deterministic (fixed float formatting, sorted JSON keys) so
identical inputs give byte-identical files.
"""

import hashlib
import json
import os

import numpy as np

from .basis import BlockAssignment
from .errors import ValidationError
from .model import FullModel, Trajectory
from .reduction import ReducedModel

FLOAT_FMT = "%.17g"


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def file_hash(path):
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


def array_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        if a is None:
            h.update(b"none")
            continue
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def model_hash(model):
    return array_hash(model.A, model.Gamma, np.array([model.kBT]), model.masses)


def _resolve(path, base):
    return path if os.path.isabs(path) or base is None else os.path.join(base, path)


def read_matrix_csv(path):
    """Dense matrix from CSV; a non-numeric first row is treated as a header."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(x) for x in first.replace(",", " ").split()]
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return data


def _matrix_field(value, base, name):
    if isinstance(value, str):
        path = _resolve(value, base)
        if not os.path.exists(path):
            raise ValidationError(f"{name}: file {path} not found")
        return read_matrix_csv(path)
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: expected a row-major array or a CSV path") from exc


def model_from_dict(d, base=None):
    """FullModel from a parsed model JSON (inline arrays or CSV paths)."""
    for key in ("A", "Gamma"):
        if key not in d:
            raise ValidationError(f"model file lacks field {key!r}")
    A = _matrix_field(d["A"], base, "A")
    G = _matrix_field(d["Gamma"], base, "Gamma")
    masses = d.get("masses")
    if isinstance(masses, str):
        masses = _matrix_field(masses, base, "masses").ravel()
    model = FullModel(A, G, kBT=float(d.get("kBT", 1.0)), masses=masses)
    if "n" in d and int(d["n"]) != model.n:
        raise ValidationError(f"model file declares n={d['n']} but the matrices are {model.n}x{model.n}")
    return model


def load_model(path):
    """Read a model JSON file; returns ``(model, sha256 of the file)``."""
    if not os.path.exists(path):
        raise ValidationError(f"model file {path} not found")
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(d, os.path.dirname(os.path.abspath(path))), file_hash(path)


def model_to_dict(model):
    d = {"n": model.n, "kBT": model.kBT, "A": model.A.tolist(), "Gamma": model.Gamma.tolist()}
    if model.masses is not None:
        d["masses"] = model.masses.tolist()
    return d


def load_trajectory(path, dt=None):
    """Coordinate samples from CSV with ``dt`` from the argument or a sidecar JSON.

    The sidecar is ``<path without .csv>.json`` holding at least ``dt``.
    """
    samples = read_matrix_csv(path)
    meta = {}
    side = os.path.splitext(path)[0] + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
    if dt is None:
        dt = meta.get("dt")
    if dt is None:
        raise ValidationError("trajectory dt missing: pass it explicitly or provide a sidecar JSON")
    return Trajectory(float(dt), samples, meta=meta)


def load_block_assignment(assign_path, positions_path):
    """BlockAssignment from ``(coordinate_index, group_id)`` rows plus a positions CSV."""
    rows = read_matrix_csv(assign_path)
    if rows.shape[1] != 2:
        raise ValidationError("assignment CSV needs columns coordinate_index, group_id")
    idx = rows[:, 0].astype(int)
    groups = np.empty(idx.size, dtype=int)
    if sorted(idx.tolist()) != list(range(idx.size)):
        raise ValidationError("coordinate indices must cover 0..n-1 exactly once")
    groups[idx] = rows[:, 1].astype(int)
    positions = read_matrix_csv(positions_path)
    return BlockAssignment(groups, positions)


def _fmt_row(values):
    return ",".join(FLOAT_FMT % v for v in values)


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(_fmt_row(r) + "\n")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def matrix_series_header(m, prefix):
    return ["t"] + [f"{prefix}_{i + 1}{j + 1}" for i in range(m) for j in range(m)]


def write_matrix_series(path, times, values, prefix):
    """CSV with columns ``t, X_11, X_12, ..., X_mm`` (row-major)."""
    values = np.asarray(values)
    m = values.shape[1]
    rows = np.column_stack([times, values.reshape(values.shape[0], -1)])
    write_csv(path, matrix_series_header(m, prefix), rows)


def read_matrix_series(path):
    data = read_matrix_csv(path)
    m = int(round(np.sqrt(data.shape[1] - 1)))
    if m * m != data.shape[1] - 1:
        raise ValidationError(f"{path}: column count is not 1 + m^2")
    return data[:, 0], data[:, 1:].reshape(-1, m, m)


def write_kernel(path, times, kernel):
    write_matrix_series(path, times, kernel, "theta")


def write_correlation(path_stem, series, provenance=None):
    """``<stem>.csv`` with the values and ``<stem>.json`` with kind and provenance."""
    write_matrix_series(path_stem + ".csv", series.times, series.values, "C")
    meta = {"kind": series.kind, "m": series.m, "points": int(series.times.size), "meta": series.meta}
    if series.stderr is not None:
        write_matrix_series(path_stem + "_stderr.csv", series.times, series.stderr, "se")
        meta["stderr_file"] = os.path.basename(path_stem) + "_stderr.csv"
    meta["provenance"] = provenance or {}
    write_json(path_stem + ".json", meta)


def write_trajectory(path_stem, traj, member=None, provenance=None):
    """One trajectory as CSV (q columns then p columns) plus a JSON sidecar."""
    t = traj if member is None else traj.member(member)
    q = t.samples
    p = t.velocities if t.velocities is not None else np.zeros((q.shape[0], 0))
    m = q.shape[1]
    header = [f"q{i + 1}" for i in range(m)] + [f"p{i + 1}" for i in range(p.shape[1])]
    write_csv(path_stem + ".csv", header, np.column_stack([q, p]))
    meta = {k: v for k, v in t.meta.items() if k != "wall_time"}
    meta.update(dt=t.dt, member=0 if member is None else int(member), provenance=provenance or {})
    write_json(path_stem + ".json", meta)


def reduced_to_dict(reduced, provenance=None):
    from .projection import MOMENT_CONVENTION

    d = {
        "order": reduced.order,
        "m": reduced.m,
        "kBT": reduced.kBT,
        "A_eff": reduced.A_eff,
        "Gamma11": reduced.Gamma11,
        "B": list(reduced.Bcoef),
        "C": list(reduced.Ccoef),
        "Sigma": reduced.Sigma,
        "diagnostics": reduced.diagnostics,
        "provenance": dict(provenance or {}),
    }
    d["provenance"].setdefault("moment_convention", MOMENT_CONVENTION)
    if reduced.order == 0:
        d["Gamma_add"] = reduced.Gamma_add
    else:
        d["Qaux"] = reduced.Qaux
        d["Bhat"] = reduced.Bhat
        d["Chat"] = reduced.Chat
    return _jsonable(d)


def reduced_from_dict(d):
    order = int(d["order"])
    arr = lambda x: None if x is None else np.asarray(x, dtype=float)
    kw = dict(
        order=order, m=int(d["m"]), A_eff=arr(d["A_eff"]), Gamma11=arr(d["Gamma11"]), kBT=float(d["kBT"]),
        Bcoef=[arr(b) for b in d.get("B", [])], Ccoef=[arr(c) for c in d.get("C", [])],
        Sigma=arr(d["Sigma"]), diagnostics=dict(d.get("diagnostics", {})),
    )
    if order == 0:
        kw["Gamma_add"] = arr(d["Gamma_add"])
    else:
        kw.update(Qaux=arr(d["Qaux"]), Bhat=arr(d["Bhat"]), Chat=arr(d["Chat"]))
    return ReducedModel(**kw)


def save_reduced(path, reduced, provenance=None):
    write_json(path, reduced_to_dict(reduced, provenance))


def load_reduced(path):
    with open(path) as fh:
        d = json.load(fh)
    return reduced_from_dict(d), d.get("provenance", {})
