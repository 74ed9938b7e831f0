"""Checkpoints: a human-readable manifest followed by raw float64 bytes.

Layout:

    streamnav-checkpoint v1
    config <hex digest>
    array <name> <dim0,dim1,...> <byte offset> <element count>
    ...
    PAYLOAD
    <little-endian float64 payload, arrays back to back>

Offsets are into the payload region. Model parameters are stored under
``param/`` and frozen teacher weights under ``teacher/``, so a checkpoint
restores bit-identical behavior on any platform. Loading verifies the
embedded config digest when the caller supplies one.
"""

import numpy as np

MAGIC = "streamnav-checkpoint v1"
_MARKER = b"PAYLOAD\n"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model, cfg_hash: str) -> None:
    arrays = {f"param/{k}": np.asarray(v) for k, v in model.params.items()}
    arrays.update({f"teacher/{k}": np.asarray(v)
                   for k, v in model.teachers.state_dict().items()})
    lines = [MAGIC, f"config {cfg_hash}"]
    blobs, offset = [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"array {name} {shape} {offset} {arr.size}")
        blobs.append(arr.tobytes())
        offset += arr.size * 8
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(_MARKER)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expect_hash: str | None = None):
    """Returns (arrays dict, stored config hash); bit-exact restore."""
    with open(path, "rb") as fh:
        raw = fh.read()
    cut = raw.find(_MARKER)
    if cut < 0:
        raise CheckpointError("no payload marker")
    header = raw[:cut].decode("ascii").splitlines()
    payload = raw[cut + len(_MARKER):]
    if not header or header[0] != MAGIC:
        raise CheckpointError("bad magic line")
    if len(header) < 2 or not header[1].startswith("config "):
        raise CheckpointError("missing config digest")
    stored = header[1].split(" ", 1)[1].strip()
    if expect_hash is not None and stored != expect_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {stored[:12]}..., "
            f"current {expect_hash[:12]}...")
    arrays = {}
    for line in header[2:]:
        parts = line.split()
        if len(parts) != 5 or parts[0] != "array":
            raise CheckpointError(f"bad manifest line: {line!r}")
        _, name, shape_s, offset_s, count_s = parts
        offset, count = int(offset_s), int(count_s)
        shape = () if shape_s == "scalar" else \
            tuple(int(s) for s in shape_s.split(","))
        end = offset + count * 8
        if end > len(payload):
            raise CheckpointError(f"array {name} overruns the payload")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(
            np.float64).reshape(shape)
        arrays[name] = arr
    return arrays, stored


def restore_model(model, arrays: dict) -> None:
    """Overwrite a freshly built model's parameters in place."""
    from .encoders import teachers_from_state
    params = {k[len("param/"):]: v for k, v in arrays.items()
              if k.startswith("param/")}
    teach = {k[len("teacher/"):]: v for k, v in arrays.items()
             if k.startswith("teacher/")}
    if set(params) != set(model.params):
        missing = set(model.params) ^ set(params)
        raise CheckpointError(f"parameter set mismatch: {sorted(missing)[:4]}")
    for k, v in params.items():
        if v.shape != model.params[k].shape:
            raise CheckpointError(f"shape mismatch for {k}")
        model.params[k] = v.copy()
    model.teachers = teachers_from_state(teach, model.config.dims)
