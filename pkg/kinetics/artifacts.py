"""
Run artifacts on disk.

Every file opens with a provenance header naming the tool version, the
config hash and the physics hash. Floats are written with 17 significant
digits, '.' decimals and LF line endings so that a (config, seed) pair
determines every byte.
"""
import csv
import io
import json
import logging
import re
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .exceptions import ConfigMismatchError

logger = logging.getLogger(__name__)

TOOL = "coaglab"
INCOMPLETE_MARKER = "_incomplete"
HEADER_PATTERN = re.compile(r"^# (\S+) (\S+) config=([0-9a-f]*) physics=([0-9a-f]*)$")


def tool_version():
    from .config import lab_settings

    return lab_settings()["VERSION"]


class Provenance:
    """The hashes an artifact was produced under."""

    def __init__(self, config_hash, physics_hash, version=None):
        self.config_hash = config_hash
        self.physics_hash = physics_hash
        self.version = version or tool_version()

    @classmethod
    def of(cls, cfg):
        return cls(cfg.config_hash, cfg.physics_hash)

    def line(self):
        return f"# {TOOL} {self.version} config={self.config_hash} physics={self.physics_hash}"

    def as_dict(self):
        return {TOOL: self.version, "config_hash": self.config_hash, "physics_hash": self.physics_hash}

    def __eq__(self, other):
        return isinstance(other, Provenance) and (self.config_hash, self.physics_hash) == (
            other.config_hash, other.physics_hash)

    def __repr__(self):
        return f"Provenance(config={self.config_hash[:12]}, physics={self.physics_hash[:12]})"


def parse_header(line) -> Optional[Provenance]:
    match = HEADER_PATTERN.match(line.rstrip("\n"))
    if not match or match.group(1) != TOOL:
        return None
    return Provenance(match.group(3), match.group(4), match.group(2))


# ==============================
# Value formatting
# ==============================

def format_value(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def parse_value(text):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(payload, indent=None):
    return json.dumps(payload, sort_keys=True, indent=indent, default=_jsonable,
                      ensure_ascii=False, allow_nan=True)


# ==============================
# Writers
# ==============================

def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)
    logger.debug("wrote %s (%d bytes)", path, len(text))
    return path


def csv_text(provenance: Provenance, columns: Sequence[str], rows: Iterable[Sequence]):
    buffer = io.StringIO()
    buffer.write(provenance.line() + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} values for {len(columns)} columns")
        writer.writerow([format_value(v) for v in row])
    return buffer.getvalue()


def write_csv(path, provenance, columns, rows):
    return _write(path, csv_text(provenance, columns, rows))


def write_grid_csv(path, provenance, axes, values):
    """One row per grid node: coordinates x0..x{d-1}, then the value."""
    values = np.asarray(values, dtype=float)
    mesh = np.meshgrid(*axes, indexing="ij")
    columns = [f"x{k}" for k in range(len(axes))] + ["value"]
    coords = np.stack([m.ravel() for m in mesh], axis=-1)
    rows = (list(point) + [v] for point, v in zip(coords, values.ravel()))
    return write_csv(path, provenance, columns, rows)


def write_jsonl(path, provenance, records: Iterable[Mapping]):
    lines = [dumps(provenance.as_dict())]
    lines.extend(dumps(record) for record in records)
    return _write(path, "\n".join(lines) + "\n")


def write_json(path, provenance, payload: Mapping):
    body = dict(payload)
    body.update(provenance.as_dict())
    return _write(path, dumps(body, indent=2) + "\n")


# ==============================
# Readers
# ==============================

class Table:
    """A CSV artifact read back: provenance, column names and typed rows."""

    def __init__(self, provenance, columns, rows):
        self.provenance = provenance
        self.columns = list(columns)
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        index = self.columns.index(name)
        return [row[index] for row in self.rows]

    def records(self):
        return [dict(zip(self.columns, row)) for row in self.rows]


def read_csv(path) -> Table:
    with open(path, encoding="utf-8", newline="") as handle:
        first = handle.readline()
        provenance = parse_header(first)
        if provenance is None:
            raise ConfigMismatchError(f"{path} has no {TOOL} provenance header")
        reader = csv.reader(handle)
        try:
            columns = next(reader)
        except StopIteration:
            columns = []
        rows = [[parse_value(cell) for cell in row] for row in reader]
    return Table(provenance, columns, rows)


def read_jsonl(path):
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle.read().split("\n") if line]
    if not lines:
        raise ConfigMismatchError(f"{path} is empty")
    header = json.loads(lines[0])
    if TOOL not in header:
        raise ConfigMismatchError(f"{path} has no {TOOL} provenance header")
    provenance = Provenance(header["config_hash"], header["physics_hash"], header[TOOL])
    return provenance, [json.loads(line) for line in lines[1:]]


def read_json(path):
    with open(path, encoding="utf-8") as handle:
        body = json.load(handle)
    if TOOL not in body:
        raise ConfigMismatchError(f"{path} has no {TOOL} provenance header")
    provenance = Provenance(body.pop("config_hash"), body.pop("physics_hash"), body.pop(TOOL))
    return provenance, body


def require_physics(expected: str, *artifacts: Provenance):
    """Refuse artifacts produced under a different model or initial data."""
    for provenance in artifacts:
        if provenance.physics_hash != expected:
            raise ConfigMismatchError(
                f"artifact physics {provenance.physics_hash[:12]} differs from {expected[:12]}"
            )


# ==============================
# Output directories
# ==============================

def mark_incomplete(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / INCOMPLETE_MARKER
    marker.write_text("run in progress or interrupted\n", encoding="utf-8")
    return marker


def clear_incomplete(out_dir):
    (Path(out_dir) / INCOMPLETE_MARKER).unlink(missing_ok=True)


def is_incomplete(out_dir):
    return (Path(out_dir) / INCOMPLETE_MARKER).exists()


def listing(out_dir) -> List[str]:
    return sorted(p.name for p in Path(out_dir).iterdir() if p.is_file())
