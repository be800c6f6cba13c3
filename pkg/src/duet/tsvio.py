"""File formats: TSV matrices, binary model checkpoints, and run manifests.

TSV matrices are UTF-8, tab-delimited, newline-terminated; the header's first
cell is the literal `id` followed by column ids, and each data row starts
with its row id. Floats serialize with 17 significant digits so a write/read
round trip is lossless for float64.

Checkpoints are little-endian binary: an ASCII magic tag, u32 layer counts
and per-layer (out, in) dims, any format-specific f64 scalars, then the raw
f64 parameters layer by layer (weight row-major, then bias). Activations are
not stored; every head here is relu on hidden layers and identity on the
final layer, which the loaders reinstate.
"""

from __future__ import annotations

import hashlib
import json
import struct
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .align import AlignModel
from .core import Layer, Mlp
from .errors import InputError
from .fuse import FuseAdapter
from .regress import RegModel

MAGIC_ALIGN = b"DUET-ALN1"
MAGIC_REG = b"DUET-REG1"
MAGIC_FUSE = b"DUET-FUS1"


# ---------------------------------------------------------------------------
# TSV matrices
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_matrix_tsv(path, matrix, row_ids, col_ids):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise InputError("write_matrix_tsv needs a 2-D matrix")
    if matrix.shape[0] != len(row_ids) or matrix.shape[1] != len(col_ids):
        raise InputError("ids do not match matrix shape")
    lines = ["id\t" + "\t".join(str(c) for c in col_ids)]
    for rid, row in zip(row_ids, matrix):
        lines.append(str(rid) + "\t" + "\t".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix_tsv(path):
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    text = p.read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln != ""]
    if not lines:
        raise InputError(f"empty TSV: {p}")
    header = lines[0].split("\t")
    if header[0] != "id":
        raise InputError(f"malformed TSV header in {p}: first cell must be 'id'")
    col_ids = header[1:]
    row_ids = []
    rows = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        if len(cells) != len(col_ids) + 1:
            raise InputError(f"ragged TSV row in {p}")
        row_ids.append(cells[0])
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise InputError(f"non-numeric cell in {p}: {exc}") from None
    matrix = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(col_ids)))
    return matrix, row_ids, col_ids


def write_ids_tsv(path, ids, header: str = "id"):
    lines = [header] + [str(i) for i in ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ids_tsv(path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    lines = [ln for ln in p.read_text(encoding="utf-8").split("\n") if ln != ""]
    if not lines:
        raise InputError(f"empty id list: {p}")
    return lines[1:]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_mlp_dims(net: Mlp) -> bytes:
    out = struct.pack("<I", len(net.layers))
    for layer in net.layers:
        out += struct.pack("<II", *layer.weight.shape)
    return out


def _pack_mlp_params(net: Mlp) -> bytes:
    out = b""
    for layer in net.layers:
        out += layer.weight.astype("<f8").tobytes()
        out += layer.bias.astype("<f8").tobytes()
    return out


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise InputError(f"truncated checkpoint: {self.path}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.blob):
            raise InputError(f"trailing bytes in checkpoint: {self.path}")


def _read_dims(r: _Reader) -> list:
    n_layers = r.u32()
    if not 0 < n_layers <= 64:
        raise InputError(f"implausible layer count in {r.path}")
    return [(r.u32(), r.u32()) for _ in range(n_layers)]


def save_align(path, model: AlignModel):
    blob = MAGIC_ALIGN
    blob += _pack_mlp_dims(model.img_head)
    blob += _pack_mlp_dims(model.gene_head)
    blob += struct.pack("<d", model.temperature)
    blob += _pack_mlp_params(model.img_head)
    blob += _pack_mlp_params(model.gene_head)
    Path(path).write_bytes(blob)


def _open_checkpoint(path, magic: bytes) -> _Reader:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    blob = p.read_bytes()
    if blob[:len(magic)] != magic:
        raise InputError(f"bad checkpoint magic in {p}, expected {magic.decode()}")
    r = _Reader(blob, p)
    r.pos = len(magic)
    return r


def _read_mlp_with_dims(r: _Reader, dims: list) -> Mlp:
    layers = []
    for k, (out_d, in_d) in enumerate(dims):
        w = r.f64s(out_d * in_d).reshape(out_d, in_d)
        b = r.f64s(out_d)
        act = "identity" if k == len(dims) - 1 else "relu"
        layers.append(Layer(w, b, act))
    return Mlp(layers)


def load_align(path) -> AlignModel:
    r = _open_checkpoint(path, MAGIC_ALIGN)
    dims_img = _read_dims(r)
    dims_gene = _read_dims(r)
    temperature = r.f64()
    img_head = _read_mlp_with_dims(r, dims_img)
    gene_head = _read_mlp_with_dims(r, dims_gene)
    r.done()
    if img_head.out_dim != gene_head.out_dim:
        raise InputError(f"embed dims disagree in {r.path}")
    return AlignModel(img_head=img_head, gene_head=gene_head,
                      temperature=temperature, embed_dim=img_head.out_dim)


def save_reg(path, model: RegModel):
    blob = MAGIC_REG + _pack_mlp_dims(model.head) + _pack_mlp_params(model.head)
    Path(path).write_bytes(blob)


def load_reg(path) -> RegModel:
    r = _open_checkpoint(path, MAGIC_REG)
    head = _read_mlp_with_dims(r, _read_dims(r))
    r.done()
    return RegModel(head=head, feature_dim=head.in_dim, gene_dim=head.out_dim)


def save_fuse(path, adapter: FuseAdapter):
    blob = MAGIC_FUSE + _pack_mlp_dims(adapter.mlp)
    blob += struct.pack("<d", adapter.reg_coef)
    blob += _pack_mlp_params(adapter.mlp)
    Path(path).write_bytes(blob)


def load_fuse(path) -> FuseAdapter:
    r = _open_checkpoint(path, MAGIC_FUSE)
    dims = _read_dims(r)
    reg_coef = r.f64()
    mlp = _read_mlp_with_dims(r, dims)
    r.done()
    return FuseAdapter(mlp=mlp, reg_coef=reg_coef)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()


def update_manifest(manifest_path, stage: str, seed: int, config: dict,
                    outputs: list, inputs: list | None = None):
    """Record stage completion: output/input hashes, seed, config echo."""
    p = Path(manifest_path)
    if p.exists():
        manifest = json.loads(p.read_text(encoding="utf-8"))
    else:
        manifest = {"seed": seed, "config": config, "stages": {}}
    manifest["seed"] = seed
    manifest["config"] = config
    manifest["stages"][stage] = {
        "completed_at": datetime.now(timezone.utc).isoformat(),
        "outputs": {str(Path(f).name): sha256_file(f) for f in outputs},
        "inputs": {str(Path(f).name): sha256_file(f) for f in (inputs or [])},
    }
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                 encoding="utf-8")


def read_manifest(manifest_path) -> dict:
    p = Path(manifest_path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    return json.loads(p.read_text(encoding="utf-8"))
