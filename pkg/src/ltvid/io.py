"""CSV trajectories and JSON model files. All writes are atomic (temp file then rename)."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np

from .errors import DataError
from .ltv import LTVModel, SegmentedModel
from .numeric import LTIModel, Trajectory
from .spectral import BasisFunctionExpansion, ScheduledSignal, SpectralEstimate

FORMAT_VERSION = 1


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return repr(float(v))


def table_to_csv(header, rows) -> str:
    """CSV text with shortest round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _read_table(path):
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if any(len(r) != len(header) for r in body):
        raise DataError(f"{path} is not rectangular")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path} contains non-finite values")
    return header, data


# ---------------------------------------------------------------------------
# trajectories


def trajectory_to_csv(traj: Trajectory) -> str:
    header = ["t"] + [f"x{i + 1}" for i in range(traj.n)] + [f"u{i + 1}" for i in range(traj.m)]
    t = np.arange(traj.T) * traj.dt
    return table_to_csv(header, np.column_stack([t, traj.x, traj.u]).tolist())


def save_trajectory(path, traj: Trajectory) -> None:
    atomic_write(path, trajectory_to_csv(traj))


def load_trajectory(path) -> Trajectory:
    """Read a ``t,x1..xn,u1..um`` file; ``dt`` is the first time increment."""
    header, data = _read_table(path)
    if not header or header[0] != "t":
        raise DataError("first column must be 't'")
    xs = [h for h in header[1:] if h.startswith("x")]
    us = [h for h in header[1:] if h.startswith("u")]
    if (header[1:] != xs + us or xs != [f"x{i + 1}" for i in range(len(xs))]
            or us != [f"u{i + 1}" for i in range(len(us))] or not xs):
        raise DataError("header must read t,x1..xn,u1..um")
    t = data[:, 0]
    if t.size < 2 or np.any(np.diff(t) <= 0):
        raise DataError("t must be strictly increasing with at least two rows")
    n = len(xs)
    return Trajectory(data[:, 1:1 + n], data[:, 1 + n:], float(t[1] - t[0]))


def load_signal(path) -> ScheduledSignal:
    """Read an ``x,v,y`` file."""
    header, data = _read_table(path)
    try:
        cols = [header.index(c) for c in ("x", "v", "y")]
    except ValueError:
        raise DataError("signal file needs columns x, v, y") from None
    return ScheduledSignal(data[:, cols[0]], data[:, cols[1]], data[:, cols[2]])


def save_signal(path, sig: ScheduledSignal) -> None:
    atomic_write(path, table_to_csv(["x", "v", "y"], np.column_stack([sig.x, sig.v, sig.y]).tolist()))


# ---------------------------------------------------------------------------
# models


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model, metadata=None) -> dict:
    meta = dict(metadata or {})
    if isinstance(model, LTIModel):
        d = {"type": "lti", "dims": {"n": model.n, "m": model.m},
             "A": _arr(model.A), "B": _arr(model.B)}
    elif isinstance(model, LTVModel):
        d = {"type": "ltv", "dims": {"n": model.n, "m": model.m, "T": model.T},
             "A": _arr(model.A_seq), "B": _arr(model.B_seq)}
        if model.param_covs is not None:
            d["param_covs"] = _arr(model.param_covs)
        meta.setdefault("method", model.method)
        meta.setdefault("lambda", model.lam)
    elif isinstance(model, SegmentedModel):
        first = model.segment_models[0]
        d = {"type": "segmented",
             "dims": {"n": first.n, "m": first.m, "T": model.n_steps},
             "breakpoints": [int(b) for b in model.breakpoints],
             "segments": [{"A": _arr(s.A), "B": _arr(s.B)} for s in model.segment_models],
             "total_cost": float(model.total_cost)}
    elif isinstance(model, SpectralEstimate):
        d = {"type": "spectral",
             "dims": {"O": int(model.omega.size), "J": int(model.bfe.J)},
             "omega": _arr(model.omega),
             "coeffs_re": _arr(model.coeffs.real), "coeffs_im": _arr(model.coeffs.imag),
             "basis": {"centers": _arr(model.bfe.centers), "widths": _arr(model.bfe.widths),
                       "normalized": bool(model.bfe.normalized)},
             "sigma2": float(model.sigma2), "regularizer": model.regularizer}
        if model.Sigma is not None:
            d["Sigma"] = _arr(model.Sigma)
        meta.setdefault("lambda", model.lam)
    else:
        raise DataError(f"cannot serialize {type(model).__name__}")
    d["version"] = FORMAT_VERSION
    d["metadata"] = meta
    return d


def model_from_dict(d: dict):
    kind = d.get("type")
    meta = d.get("metadata", {})
    if kind == "lti":
        return LTIModel(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float))
    if kind == "ltv":
        n, m = d["dims"]["n"], d["dims"]["m"]
        A = np.array(d["A"], dtype=float).reshape(-1, n, n)
        B = np.array(d["B"], dtype=float).reshape(-1, n, m)
        covs = np.array(d["param_covs"], dtype=float) if "param_covs" in d else None
        return LTVModel(A, B, covs, meta.get("method", ""), meta.get("lambda"))
    if kind == "segmented":
        segs = [LTIModel(np.array(s["A"], dtype=float), np.array(s["B"], dtype=float))
                for s in d["segments"]]
        return SegmentedModel(list(d["breakpoints"]), segs, float(d["total_cost"]),
                              int(d["dims"]["T"]))
    if kind == "spectral":
        b = d["basis"]
        bfe = BasisFunctionExpansion(np.array(b["centers"], dtype=float),
                                     np.array(b["widths"], dtype=float), bool(b["normalized"]))
        coeffs = np.array(d["coeffs_re"], dtype=float) + 1j * np.array(d["coeffs_im"], dtype=float)
        Sigma = np.array(d["Sigma"], dtype=float) if "Sigma" in d else None
        return SpectralEstimate(np.array(d["omega"], dtype=float), coeffs, bfe,
                                float(d["sigma2"]), Sigma, d.get("regularizer", "none"),
                                float(meta.get("lambda") or 0.0))
    raise DataError(f"unknown model type {kind!r}")


def model_to_json(model, metadata=None) -> str:
    return json.dumps(model_to_dict(model, metadata), indent=1, sort_keys=True) + "\n"


def save_model(path, model, metadata=None) -> None:
    atomic_write(path, model_to_json(model, metadata))


def load_model(path):
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read model {path}: {e}") from e
    try:
        return model_from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed model file {path}: {e}") from e
