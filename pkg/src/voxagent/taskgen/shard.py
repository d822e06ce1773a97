"""Dataset shards: VXV1 volumes and masks plus a JSON-lines manifest."""

from __future__ import annotations

import json
from pathlib import Path

from ..runtime import VolumeInput
from ..voxelcore import read_mask, read_volume, write_volume
from .tasks import TaskInstance

MANIFEST = "manifest.jsonl"


def write_shard(tasks: list[TaskInstance], out_dir) -> Path:
    """Write every instance under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, t in enumerate(tasks):
        stem = f"task{i:05d}"
        vols = []
        for v in t.volumes:
            fname = f"{stem}_{v.name}.vxv"
            write_volume(out / fname, v.grid)
            vols.append({"name": v.name, "file": fname, "modality": v.modality, "date": v.date})
        masks = []
        for k, m in enumerate(t.masks):
            fname = f"{stem}_mask{k}.vxv"
            write_volume(out / fname, m)
            masks.append(fname)
        rec = {
            "id": stem,
            "kind": t.kind,
            "prompt": t.prompt,
            "volumes": vols,
            "steps": t.steps,
            "mod_targets": t.mod_targets,
            "masks": masks,
            "answer": t.answer,
            "label": t.label,
            "seed": t.seed,
            "meta": t.meta,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    path = out / MANIFEST
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_shard(shard_dir) -> list[TaskInstance]:
    root = Path(shard_dir)
    tasks = []
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        vols = [VolumeInput(v["name"], read_volume(root / v["file"]), v["modality"], v["date"]) for v in rec["volumes"]]
        masks = [read_mask(root / f) for f in rec["masks"]]
        tasks.append(
            TaskInstance(
                rec["kind"],
                rec["prompt"],
                vols,
                rec["steps"],
                rec["mod_targets"],
                masks,
                rec["answer"],
                rec["label"],
                rec["seed"],
                rec["meta"],
            )
        )
    return tasks
