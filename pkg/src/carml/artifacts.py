"""Versioned on-disk formats: JSON records, JSON-lines streams, npz checkpoints."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ArtifactVersionError(ValueError):
    pass


def _check_version(v, where) -> None:
    if v != FORMAT_VERSION:
        raise ArtifactVersionError(f"{where}: unsupported format_version {v!r} (expected {FORMAT_VERSION})")


def dumps_record(kind: str, payload: dict) -> str:
    return json.dumps({"format_version": FORMAT_VERSION, "kind": kind, **payload})


def loads_record(text: str, kind: str | None = None) -> dict:
    d = json.loads(text)
    _check_version(d.get("format_version"), "record")
    if kind is not None and d.get("kind") != kind:
        raise ValueError(f"expected a {kind!r} record, got {d.get('kind')!r}")
    return d


def write_json(path, kind: str, payload: dict) -> None:
    Path(path).write_text(dumps_record(kind, payload))


def read_json(path, kind: str | None = None) -> dict:
    return loads_record(Path(path).read_text(), kind)


class JsonlWriter:
    """Line-delimited JSON stream whose first line is a version header."""

    def __init__(self, path, kind: str, append: bool = False):
        self.path = Path(path)
        exists = self.path.exists() and self.path.stat().st_size > 0
        self._fh = open(self.path, "a" if append else "w")
        if not (append and exists):
            self._fh.write(dumps_record(kind, {"header": True}) + "\n")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path, kind: str | None = None) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty stream")
    loads_record(lines[0], kind)
    return [json.loads(line) for line in lines[1:] if line.strip()]


def save_npz(path, arrays: dict, meta: dict) -> None:
    """npz archive with fixed entry timestamps so equal contents give equal bytes."""
    entries = {"format_version": np.array(FORMAT_VERSION), "meta": np.array(json.dumps(meta)), **arrays}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value in entries.items():
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.asanyarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), arr.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_npz(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as f:
        _check_version(int(f["format_version"]), str(path))
        meta = json.loads(str(f["meta"]))
        arrays = {k: f[k] for k in f.files if k not in ("format_version", "meta")}
    return arrays, meta


def dump_trajectories(path, trajectories, include_obs: bool = True) -> None:
    """One line per step: episode_id, task_id, t, x, y, heading, action, obs."""
    with JsonlWriter(path, "trajectories") as w:
        for idx, tr in enumerate(trajectories):
            for t in range(len(tr)):
                rec = {"episode_id": idx, "task_id": int(tr.task_id), "t": t,
                       "x": float(tr.poses[t, 0]), "y": float(tr.poses[t, 1]), "heading": float(tr.poses[t, 2]),
                       "action": int(tr.actions[t])}
                if include_obs:
                    rec["obs"] = tr.obs[t].tolist()
                w.write(rec)


def load_trajectories(path):
    from .env import Trajectory

    rows = read_jsonl(path, "trajectories")
    by_ep: dict[int, list[dict]] = {}
    for r in rows:
        by_ep.setdefault(r["episode_id"], []).append(r)
    out = []
    for ep in sorted(by_ep):
        steps = sorted(by_ep[ep], key=lambda r: r["t"])
        obs = np.array([s.get("obs", []) for s in steps], dtype=np.float64)
        poses = np.array([[s["x"], s["y"], s["heading"]] for s in steps])
        actions = np.array([s["action"] for s in steps], dtype=np.int64)
        out.append(Trajectory(obs, poses, actions, task_id=steps[0]["task_id"], episode_id=ep))
    return out
