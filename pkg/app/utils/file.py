import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

PathLike = Union[str, Path]


def format_size(size: float) -> str:
    for unit in ["B", "KB", "MB", "GB", "TB"]:
        if size < 1024.0:
            return f"{size:.2f} {unit}"
        size /= 1024.0
    return f"{size:.2f} PB"


def get_hash_md5(file_path: PathLike, chunk_size: int = 1048576) -> str:
    hash_md5 = hashlib.md5()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            hash_md5.update(chunk)
    return hash_md5.hexdigest()


def directory_digest(folder: PathLike) -> str:
    """MD5 over every file below ``folder``, in sorted relative-path order."""
    folder = Path(folder)
    digest = hashlib.md5()
    for path in sorted(p for p in folder.rglob("*") if p.is_file()):
        digest.update(path.relative_to(folder).as_posix().encode())
        digest.update(get_hash_md5(path).encode())
    return digest.hexdigest()


def folder_size(folder: PathLike) -> int:
    return sum(p.stat().st_size for p in Path(folder).rglob("*") if p.is_file())


def inside(base_folder: PathLike, path: PathLike) -> Path:
    """
    Resolves ``path`` and checks that it lies under ``base_folder``.

    Raises:
        ValueError: The path escapes the base folder.
    """
    base = Path(base_folder).resolve()
    resolved = (base / path).resolve()
    if resolved != base and base not in resolved.parents:
        raise ValueError(f"{path} is outside the output folder {base}.")
    return resolved


def format_value(value: Any) -> str:
    """Formats a CSV cell; floats use ``repr`` so they parse back exactly."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(
    path: PathLike, fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]], append: bool = False
) -> None:
    path = Path(path)
    new_file = not append or not path.exists() or os.path.getsize(path) == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: format_value(row.get(k)) for k in fieldnames})


def read_rows_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_json(path: PathLike, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: PathLike) -> Any:
    with open(path) as f:
        return json.load(f)
