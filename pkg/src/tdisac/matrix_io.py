"""Plain-text matrix exchange format.

A file holds one or more complex matrices::

    %%tdisac-matrix v1
    name psi[0]
    shape 21 21
    <re> <im> <re> <im> ...     (one line per row, 2 * cols numbers)
    name psi[1]
    ...

Values are written with 17 significant digits so a round trip is exact.
"""

from __future__ import annotations

import numpy as np

HEADER = "%%tdisac-matrix v1"


def format_matrices(items) -> str:
    """``items`` is an iterable of (name, 2-D array) pairs."""
    lines = [HEADER]
    for name, mat in items:
        mat = np.atleast_2d(np.asarray(mat, dtype=complex))
        if mat.ndim != 2:
            raise ValueError(f"{name}: only 2-D arrays can be written")
        if any(ch.isspace() for ch in name):
            raise ValueError(f"matrix name {name!r} must not contain whitespace")
        lines.append(f"name {name}")
        lines.append(f"shape {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            pairs = np.column_stack([row.real, row.imag]).ravel()
            lines.append(" ".join(f"{v:.17g}" for v in pairs))
    return "\n".join(lines) + "\n"


def parse_matrices(text: str) -> dict:
    """Inverse of :func:`format_matrices`; returns an ordered name -> array dict."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != HEADER:
        raise ValueError("not a tdisac matrix file (bad header)")
    out = {}
    i = 1
    while i < len(lines):
        head = lines[i].split(maxsplit=1)
        if head[0] != "name" or len(head) != 2:
            raise ValueError(f"expected 'name <label>' at line {i + 1}")
        name = head[1]
        shape = lines[i + 1].split()
        if shape[0] != "shape" or len(shape) != 3:
            raise ValueError(f"expected 'shape <rows> <cols>' after {name}")
        rows, cols = int(shape[1]), int(shape[2])
        data = np.array([[float(v) for v in lines[i + 2 + r].split()] for r in range(rows)])
        if data.shape != (rows, 2 * cols):
            raise ValueError(f"{name}: row length does not match shape")
        out[name] = data[:, 0::2] + 1j * data[:, 1::2]
        i += 2 + rows
    return out


def write_matrices(path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_matrices(items))


def read_matrices(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_matrices(fh.read())
