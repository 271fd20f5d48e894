"""Bit-exact file formats: label maps, probability maps, flat key=value
configs with embedded checksums, metrics CSV, and structured text reports."""

import hashlib
import struct
import numpy as np


LABEL_MAGIC = b"CSLM"
PROB_MAGIC = b"CSPM"
FORMAT_VERSION = 1

METRICS_COLUMNS = ("method", "checkpoint", "strategy", "mode", "class_id",
                   "iou", "group", "value")


class FileFormatError(Exception):
    pass


# ---------------------------------------------------------------------------
# label and probability maps


def save_label_map(path, label, class_count):
    label = np.asarray(label)
    if label.ndim != 2:
        raise FileFormatError(f"label map must be 2-D, got shape {label.shape}")
    if label.min() < 0 or label.max() > np.iinfo(np.uint16).max:
        raise FileFormatError("label ids out of uint16 range")
    h, w = label.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, h, w, class_count))
        f.write(label.astype("<u2").tobytes())


def load_label_map(path):
    with open(path, "rb") as f:
        if f.read(4) != LABEL_MAGIC:
            raise FileFormatError(f"{path}: not a label map file")
        version, h, w, class_count = struct.unpack("<IIII", f.read(16))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(h * w * 2), dtype="<u2")
    return data.reshape(h, w).astype(np.int64), class_count


def save_prob_map(path, probs, class_count):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise FileFormatError(f"probability map must be (C, H, W), got shape "
                              f"{probs.shape}")
    ch, h, w = probs.shape
    with open(path, "wb") as f:
        f.write(PROB_MAGIC)
        f.write(struct.pack("<IIIII", FORMAT_VERSION, h, w, class_count, ch))
        f.write(probs.astype("<f8").tobytes())


def load_prob_map(path):
    with open(path, "rb") as f:
        if f.read(4) != PROB_MAGIC:
            raise FileFormatError(f"{path}: not a probability map file")
        version, h, w, class_count, ch = struct.unpack("<IIIII", f.read(20))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(ch * h * w * 8), dtype="<f8")
    return data.reshape(ch, h, w).astype(np.float64), class_count


# ---------------------------------------------------------------------------
# flat key=value configs


def serialize_config(values):
    """Canonical text form: sorted key = value lines, '#'-comments allowed on
    read; a checksum of the resolved config travels with every output."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def parse_config(text):
    values = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FileFormatError(f"config line {ln}: expected 'key = value', "
                                  f"got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def config_checksum(values):
    return hashlib.sha256(serialize_config(values).encode()).hexdigest()


def save_config(path, values):
    with open(path, "w") as f:
        f.write(serialize_config(values))


def load_config(path):
    with open(path) as f:
        return parse_config(f.read())


# ---------------------------------------------------------------------------
# reports


def write_metrics_csv(path, rows):
    """rows: dicts keyed by METRICS_COLUMNS (missing values are blank)."""
    with open(path, "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join("" if row.get(c) is None else str(row[c])
                             for c in METRICS_COLUMNS) + "\n")


def read_metrics_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        return [dict(zip(header, line.strip().split(",")))
                for line in f if line.strip()]


def format_forgetting_report(report):
    from .forgetting import REPORT_FIELDS
    lines = [f"forgetting-report v{FORMAT_VERSION}", f"method = {report.method}",
             "fields = " + ",".join(REPORT_FIELDS)]
    for row in report.rows:
        lines.append(" ".join(
            f"{f}={'NA' if row[f] is None else repr(row[f])}"
            for f in REPORT_FIELDS))
    return "\n".join(lines) + "\n"


def write_forgetting_report(path, report):
    with open(path, "w") as f:
        f.write(format_forgetting_report(report))


def format_run_record(record):
    lines = [f"run-record v{FORMAT_VERSION}",
             f"task = {record.task}", f"method = {record.method}"]
    for e in record.epochs:
        lines.append(f"epoch task={e.task} epoch={e.epoch} phase={e.phase} "
                     f"loss={e.loss!r}")
    lines.append(f"grad_inf_at_snapshot = {record.grad_inf_at_snapshot!r}")
    lines.append(f"converged = {record.converged}")
    lines.append(f"wall_time = {record.wall_time!r}")
    for w in record.warnings:
        lines.append(f"warning = {w}")
    return "\n".join(lines) + "\n"


def write_run_record(path, record):
    with open(path, "w") as f:
        f.write(format_run_record(record))


def write_series(path, triples):
    """Plot-ready (x, y, series) rows."""
    with open(path, "w") as f:
        f.write("x,y,series\n")
        for x, y, series in triples:
            f.write(f"{x},{y!r},{series}\n")
