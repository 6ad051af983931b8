"""Deterministic binary container for named arrays plus JSON metadata.

Layout: one UTF-8 JSON header line (sorted keys, no timestamps), then the raw
little-endian array payloads back to back.  Writing the same content twice
produces byte-identical files, which keeps checkpoint and dataset outputs
reproducible.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FormatError

_DTYPES = {"<f8", "<f4", "<i8", "<i4", "<u1"}


def save_container(path, format_tag: str, version: int, meta: dict, arrays: dict) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = {"format": format_tag, "version": version, "meta": meta, "arrays": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        for raw in payloads:
            fh.write(raw)


def load_container(path, expect_format: str | None = None, expect_version: int | None = None):
    """Returns (meta, arrays); raises FormatError on tag or version mismatch."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not a container file ({exc})") from exc
        if expect_format is not None and header.get("format") != expect_format:
            raise FormatError(f"{path}: format {header.get('format')!r}, expected {expect_format!r}")
        if expect_version is not None and header.get("version") != expect_version:
            raise FormatError(f"{path}: version {header.get('version')}, expected {expect_version}")
        body = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return header["meta"], arrays
