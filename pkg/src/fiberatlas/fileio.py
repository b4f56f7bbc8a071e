"""Tractogram file formats.

Two formats are supported:

* MRtrix TCK: ASCII key/value header terminated by ``END``, then
  little-endian float32 point triplets.  A (nan, nan, nan) triplet separates
  consecutive streamlines and an (inf, inf, inf) triplet terminates the
  stream.  TCK carries geometry only.

* A self-describing sidecar next to the TCK carrying what TCK cannot:
  per-point scalar channels and subject metadata.  The sidecar is a JSON
  file (``<stem>.json``) describing a little-endian float64 binary file
  (``<stem>.scalars.bin``) that holds each channel concatenated over fibers
  in file order.  The JSON records the format name/version, subject meta,
  per-fiber point counts, channel order, and a sha256 checksum of the
  binary file.

Ground-truth sidecars from the synthetic generator are plain JSON handled
in :mod:`fiberatlas.synth`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .tractogram import Group, Sex, Streamline, SubjectMeta, Tractogram

logger = logging.getLogger(__name__)

TCK_MAGIC = "mrtrix tracks"
SIDECAR_FORMAT = "tractogram-scalars"
SIDECAR_VERSION = 1


class TractogramFormatError(ValueError):
    """Malformed TCK or sidecar file."""


def write_tck(path, streamlines) -> None:
    """Write streamline geometry as little-endian float32 TCK."""
    path = Path(path)
    fibers = [np.asarray(s.points if isinstance(s, Streamline) else s, dtype=np.float32)
              for s in streamlines]
    header_fields = {
        "datatype": "Float32LE",
        "count": str(len(fibers)),
    }
    # the offset in "file: . N" counts the header itself; fix it iteratively
    offset = 0
    for _ in range(8):
        lines = [TCK_MAGIC]
        lines += [f"{k}: {v}" for k, v in header_fields.items()]
        lines += [f"file: . {offset}", "END"]
        header = ("\n".join(lines) + "\n").encode("ascii")
        if len(header) == offset:
            break
        offset = len(header)
    with open(path, "wb") as fh:
        fh.write(header)
        sep = np.full((1, 3), np.nan, dtype="<f4")
        for f in fibers:
            fh.write(f.astype("<f4").tobytes())
            fh.write(sep.tobytes())
        fh.write(np.full((1, 3), np.inf, dtype="<f4").tobytes())


def read_tck(path) -> list[np.ndarray]:
    """Read TCK geometry as a list of (n, 3) float64 arrays."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"END\n")
    if not raw.startswith(TCK_MAGIC.encode("ascii")) or end < 0:
        raise TractogramFormatError(f"{path}: not a TCK file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    fields: dict[str, str] = {}
    for line in header[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            fields[k.strip()] = v.strip()
    datatype = fields.get("datatype", "Float32LE")
    if datatype != "Float32LE":
        raise TractogramFormatError(f"{path}: unsupported datatype {datatype!r}")
    file_field = fields.get("file", f". {end + 4}")
    try:
        offset = int(file_field.split()[-1])
    except ValueError as exc:
        raise TractogramFormatError(f"{path}: bad file offset {file_field!r}") from exc
    data = np.frombuffer(raw[offset:], dtype="<f4")
    if data.size % 3:
        raise TractogramFormatError(f"{path}: point data is not a triplet stream")
    triplets = data.reshape(-1, 3)
    fibers: list[np.ndarray] = []
    start = 0
    for i in range(triplets.shape[0]):
        if np.all(np.isinf(triplets[i])):
            if i > start:
                fibers.append(triplets[start:i].astype(np.float64))
            return fibers
        if np.all(np.isnan(triplets[i])):
            if i > start:
                fibers.append(triplets[start:i].astype(np.float64))
            start = i + 1
    raise TractogramFormatError(f"{path}: missing inf terminator")


def _sidecar_paths(tck_path: Path) -> tuple[Path, Path]:
    # string concatenation: with_suffix would eat dots inside the stem
    stem = str(tck_path.with_suffix(""))
    return Path(stem + ".json"), Path(stem + ".scalars.bin")


def _meta_to_dict(meta: SubjectMeta) -> dict:
    return {
        "age_at_scan": meta.age_at_scan,
        "sex": meta.sex.value,
        "group": meta.group.value,
        "birth_age": meta.birth_age,
        "covariates": dict(meta.covariates),
    }


def _meta_from_dict(d: dict) -> SubjectMeta:
    return SubjectMeta(
        age_at_scan=d["age_at_scan"],
        sex=Sex(d.get("sex", "unknown")),
        group=Group(d.get("group", "adult")),
        birth_age=d.get("birth_age"),
        covariates=dict(d.get("covariates", {})),
    )


def save_tractogram(path, tractogram: Tractogram) -> None:
    """Write ``<path>`` (.tck) plus its JSON + binary scalar sidecar."""
    tck_path = Path(path)
    if tck_path.suffix != ".tck":
        tck_path = Path(str(tck_path) + ".tck")
    write_tck(tck_path, tractogram.streamlines)

    json_path, bin_path = _sidecar_paths(tck_path)
    counts = [s.n_points for s in tractogram.streamlines]
    channels = sorted({name for s in tractogram.streamlines for name in s.scalars})
    blobs = []
    for name in channels:
        for s in tractogram.streamlines:
            if name not in s.scalars:
                raise ValueError(f"channel {name!r} missing on some streamlines")
            blobs.append(np.asarray(s.scalars[name], dtype="<f8"))
    payload = b"".join(b.tobytes() for b in blobs)
    bin_path.write_bytes(payload)
    doc = {
        "format": SIDECAR_FORMAT,
        "version": SIDECAR_VERSION,
        "subject_id": tractogram.subject_id,
        "meta": _meta_to_dict(tractogram.meta),
        "point_counts": counts,
        "channels": channels,
        "dtype": "<f8",
        "binary_file": bin_path.name,
        "checksum_sha256": hashlib.sha256(payload).hexdigest(),
    }
    json_path.write_text(json.dumps(doc, indent=1))


def load_tractogram(path) -> Tractogram:
    """Load a TCK + sidecar pair written by :func:`save_tractogram`."""
    tck_path = Path(path)
    if tck_path.suffix != ".tck":
        tck_path = Path(str(tck_path) + ".tck")
    fibers = read_tck(tck_path)
    json_path, _ = _sidecar_paths(tck_path)
    if not json_path.exists():
        raise TractogramFormatError(f"{tck_path}: missing sidecar {json_path.name}")
    doc = json.loads(json_path.read_text())
    if doc.get("format") != SIDECAR_FORMAT:
        raise TractogramFormatError(f"{json_path}: not a tractogram sidecar")
    if doc.get("version", 0) > SIDECAR_VERSION:
        raise TractogramFormatError(
            f"{json_path}: sidecar version {doc['version']} is newer than "
            f"supported version {SIDECAR_VERSION}"
        )
    counts = doc["point_counts"]
    if [f.shape[0] for f in fibers] != counts:
        raise TractogramFormatError(f"{json_path}: point counts disagree with TCK geometry")
    bin_path = json_path.parent / doc["binary_file"]
    payload = bin_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != doc["checksum_sha256"]:
        raise TractogramFormatError(f"{bin_path}: scalar checksum mismatch")
    values = np.frombuffer(payload, dtype=doc["dtype"])
    total = sum(counts)
    channels = doc["channels"]
    if values.size != total * len(channels):
        raise TractogramFormatError(f"{bin_path}: scalar payload has wrong length")
    per_channel = {name: values[i * total:(i + 1) * total] for i, name in enumerate(channels)}
    streamlines = []
    rejected = 0
    offset = 0
    for f, n in zip(fibers, counts):
        scalars = {name: per_channel[name][offset:offset + n].copy() for name in channels}
        offset += n
        # degenerate fibers are dropped with a warning count, never silently
        if f.shape[0] < 2 or np.linalg.norm(np.diff(f, axis=0), axis=1).sum() == 0.0:
            rejected += 1
            continue
        streamlines.append(Streamline(points=f, scalars=scalars))
    if rejected:
        logger.warning("%s: rejected %d degenerate streamline(s)", tck_path, rejected)
    return Tractogram(
        subject_id=doc["subject_id"],
        streamlines=tuple(streamlines),
        meta=_meta_from_dict(doc["meta"]),
    )
