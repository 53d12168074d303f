"""Run artifacts: metrics.csv rows and the phase manifest."""

from __future__ import annotations

import os

METRICS_HEADER = "phase,epoch,wall_time_s,loss,accuracy,lr"


class MetricsWriter:
    """Appends rows to metrics.csv, enforcing increasing epochs per phase."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._last_epoch: dict[str, int] = {}
        if not os.path.exists(self.path):
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(METRICS_HEADER + "\n")

    def add(self, phase: str, epoch: int, wall_time_s: float, loss: float,
            accuracy: float, lr: float):
        last = self._last_epoch.get(phase)
        if last is not None and epoch <= last:
            raise ValueError(f"metrics: epoch {epoch} not increasing for phase {phase!r}")
        self._last_epoch[phase] = epoch
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{phase},{epoch},{wall_time_s:.3f},{loss:.6f},{accuracy:.6f},{lr:.8f}\n")


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"metrics file {path} missing fixed header {METRICS_HEADER!r}")
    rows = []
    for line in lines[1:]:
        phase, epoch, wall, loss, acc, lr = line.split(",")
        rows.append(
            {
                "phase": phase,
                "epoch": int(epoch),
                "wall_time_s": float(wall),
                "loss": float(loss),
                "accuracy": float(acc),
                "lr": float(lr),
            }
        )
    return rows


MANIFEST_NAME = "manifest.txt"


def manifest_path(out_dir):
    return os.path.join(os.fspath(out_dir), MANIFEST_NAME)


def read_manifest(out_dir) -> dict[str, tuple[str, int]]:
    path = manifest_path(out_dir)
    entries: dict[str, tuple[str, int]] = {}
    if not os.path.exists(path):
        return entries
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            phase, rest = (p.strip() for p in line.split("=", 1))
            ckpt_path, digest = rest.rsplit(" ", 1)
            entries[phase] = (ckpt_path.strip(), int(digest, 16))
    return entries


def update_manifest(out_dir, phase: str, ckpt_path: str, digest: int):
    entries = read_manifest(out_dir)
    entries[phase] = (os.fspath(ckpt_path), digest)
    path = manifest_path(out_dir)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for name in sorted(entries):
            p, d = entries[name]
            fh.write(f"{name} = {p} {d:016x}\n")
    os.replace(tmp, path)
