"""
File system utilities for ConvGrid: atomic writes and the CSV, JSON,
Matrix-Market and OFF formats used for results
"""

import csv
import io
import json
import os
import shutil
import tempfile

import numpy as np
import scipy.io
import scipy.sparse as sp

CSV_SCHEMA = 1


def ensure_dir(path):
    """Ensure a directory exists, creating it if necessary"""
    if path and not os.path.exists(path):
        os.makedirs(path)


def safe_write(path, content, mode="w"):
    """
    Safely write content to a file using a temporary file
    to avoid corrupting the file if the process is interrupted
    """
    dir_name = os.path.dirname(path) or "."
    ensure_dir(dir_name)
    with tempfile.NamedTemporaryFile(mode=mode, dir=dir_name, delete=False) as temp_file:
        temp_file.write(content)

    # Atomic replace
    shutil.move(temp_file.name, path)


def write_csv(path, header, rows, meta=None):
    """
    Write rows under a header line, preceded by `# key=value` comment lines.

    The first comment is always the schema version; floats keep full precision
    so identical inputs give identical bytes.
    """
    buffer = io.StringIO()
    buffer.write(f"# schema={CSV_SCHEMA}\n")
    for key, value in (meta or {}).items():
        buffer.write(f"# {key}={value}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    safe_write(path, buffer.getvalue())


def read_csv(path):
    """(meta, header, rows) of a file written by write_csv; cells stay strings"""
    meta, lines = {}, []
    with open(path, "r") as f:
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            else:
                lines.append(line)
    table = list(csv.reader(lines))
    if not table:
        return meta, [], []
    return meta, table[0], table[1:]


def write_json(path, data):
    safe_write(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r") as f:
        return json.load(f)


def read_values(path) -> np.ndarray:
    """Grid values from a whitespace/comma separated text file or a .npy file"""
    if path.endswith(".npy"):
        return np.load(path).astype(float).ravel()
    with open(path, "r") as f:
        text = f.read().replace(",", " ")
    return np.array([float(v) for v in text.split() if not v.startswith("#")], dtype=float)


def write_values(path, values):
    safe_write(path, "\n".join(repr(float(v)) for v in np.asarray(values).ravel()) + "\n")


def write_off(path, triangulation):
    safe_write(path, triangulation.to_off())


def write_matrix_market(path, matrix):
    buffer = io.BytesIO()
    scipy.io.mmwrite(buffer, sp.coo_matrix(matrix))
    safe_write(path, buffer.getvalue(), mode="wb")


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(path))


def read_off(path):
    """(vertices, triangles) of a 2D OFF file written by write_off"""
    with open(path, "r") as f:
        lines = [line.split() for line in f if line.strip() and not line.startswith("#")]
    if not lines or lines[0] != ["OFF"]:
        raise ValueError(f"{path} is not an OFF file")
    n_vertices, n_faces = int(lines[1][0]), int(lines[1][1])
    vertices = np.array([[float(v) for v in line[:2]] for line in lines[2:2 + n_vertices]]).reshape(-1, 2)
    faces = np.array([[int(v) for v in line[1:4]] for line in lines[2 + n_vertices:2 + n_vertices + n_faces]], dtype=np.int64)
    return vertices, faces.reshape(-1, 3)
