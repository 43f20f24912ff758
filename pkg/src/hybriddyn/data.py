"""Trajectories, datasets and their JSON-lines file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, ParseError


@dataclass
class Trajectory:
    x: np.ndarray
    u: np.ndarray
    dt: float = 1.0
    weight: float = 1.0
    id: str = ""
    env: str = ""
    info: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        u = np.asarray(self.u, dtype=float)
        if u.ndim == 1:
            u = u.reshape(x.shape[0], -1) if u.size else np.zeros((x.shape[0], 0))
        if u.shape[0] != x.shape[0]:
            raise DimensionMismatch(
                f"trajectory {self.id!r}: x has {x.shape[0]} steps but u has {u.shape[0]}")
        if self.weight < 0:
            raise ValueError("trajectory weight must be non-negative")
        self.x, self.u = x, u

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def state_dim(self) -> int:
        return self.x.shape[1]

    @property
    def action_dim(self) -> int:
        return self.u.shape[1]

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.x[start:stop], self.u[start:stop], self.dt, self.weight,
                          f"{self.id}[{start}:{stop}]", self.env)


Dataset = list  # list[Trajectory]


def dims(dataset) -> tuple[int, int]:
    d, m = dataset[0].state_dim, dataset[0].action_dim
    for traj in dataset:
        if (traj.state_dim, traj.action_dim) != (d, m):
            raise DimensionMismatch(f"trajectory {traj.id!r} has inconsistent dimensions")
    return d, m


def _record(traj: Trajectory, index: int) -> dict:
    return {"id": traj.id or str(index), "env": traj.env, "dt": float(traj.dt),
            "x": traj.x.tolist(), "u": traj.u.tolist(), "weight": float(traj.weight)}


def dumps_dataset(dataset) -> str:
    return "".join(json.dumps(_record(t, i)) + "\n" for i, t in enumerate(dataset))


def write_dataset(dataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset))


def read_dataset(path) -> list[Trajectory]:
    text = Path(path).read_text()
    out: list[Trajectory] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        tid = str(rec.get("id", lineno))
        try:
            x = np.asarray(rec["x"], dtype=float)
            u = np.asarray(rec.get("u", []), dtype=float)
            if u.size == 0:
                u = np.zeros((x.shape[0], 0))
            traj = Trajectory(x, u, float(rec.get("dt", 1.0)), float(rec.get("weight", 1.0)),
                              tid, rec.get("env", ""))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"line {lineno}: trajectory {tid!r}: {exc}") from exc
        if out and (traj.state_dim, traj.action_dim) != (out[0].state_dim, out[0].action_dim):
            raise DimensionMismatch(
                f"line {lineno}: trajectory {tid!r} dimensions differ from the first record")
        out.append(traj)
    if not out:
        raise ParseError("empty dataset")
    return out
