"""JSON dataset manifests shared by the training, IQA and OOD pipelines.

Format::

    {"task": "iqa",            # optional: "iqa" | "ood" | "train"
     "records": [{"image_path": "dist/001.ppm", "role": "test",
                  "reference_path": "ref/001.ppm",
                  "subjective_score": 4.1, "subjective_std": 0.6,
                  "distortion_kind": "gaussian_noise", "distortion_level": 3}]}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from gradspace.errors import ManifestError

ROLES = ("train", "test")
TASKS = ("iqa", "ood", "train")


@dataclass(frozen=True)
class ImageRecord:
    image_path: Path
    role: str
    distortion_kind: str | None = None
    distortion_level: int | None = None
    reference_path: Path | None = None
    subjective_score: float | None = None
    subjective_std: float | None = None

    @property
    def image_id(self) -> str:
        return self.image_path.name


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    task: str | None = None
    base_dir: Path = field(default_factory=Path)

    def select(self, role: str | None = None, kind: str | None = "*") -> list[ImageRecord]:
        """Records by role and distortion kind; ``kind=None`` means undistorted."""
        return [r for r in self.records
                if (role is None or r.role == role) and (kind == "*" or r.distortion_kind == kind)]


def parse_manifest(doc: dict, base_dir: Path, task: str | None = None,
                   check_paths: bool = True) -> DatasetManifest:
    """Validate every record, reporting all violations at once."""
    errors: list[str] = []
    task = task or doc.get("task")
    if task is not None and task not in TASKS:
        errors.append(f"task: unknown task {task!r}")
    raw = doc.get("records")
    if not isinstance(raw, list):
        raise ManifestError("manifest needs a 'records' list")
    records = []
    for i, rec in enumerate(raw):
        where = f"records[{i}]"
        if not isinstance(rec, dict):
            errors.append(f"{where}: not an object")
            continue
        if "image_path" not in rec:
            errors.append(f"{where}: missing image_path")
            continue
        role = rec.get("role")
        if role not in ROLES:
            errors.append(f"{where}: role must be one of {ROLES}, got {role!r}")
        level = rec.get("distortion_level")
        if level is not None and (not isinstance(level, int) or not 0 <= level <= 5):
            errors.append(f"{where}: distortion_level must be an integer in 0..5, got {level!r}")
        if task == "iqa" and role == "test":
            for key in ("reference_path", "subjective_score"):
                if rec.get(key) is None:
                    errors.append(f"{where}: IQA records need {key}")
        image = base_dir / rec["image_path"]
        ref = base_dir / rec["reference_path"] if rec.get("reference_path") else None
        if check_paths:
            for p in (image, ref):
                if p is not None and not p.is_file():
                    errors.append(f"{where}: missing file {p}")
        score, std = rec.get("subjective_score"), rec.get("subjective_std")
        records.append(ImageRecord(
            image_path=image,
            role=role,
            distortion_kind=rec.get("distortion_kind"),
            distortion_level=level,
            reference_path=ref,
            subjective_score=None if score is None else float(score),
            subjective_std=None if std is None else float(std),
        ))
    if errors:
        raise ManifestError(f"{len(errors)} manifest problem(s):\n  " + "\n  ".join(errors))
    return DatasetManifest(records, task, base_dir)


def load_manifest(path, task: str | None = None) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    return parse_manifest(doc, path.parent, task)
