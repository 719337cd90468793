"""Tokenization, training grids and on-disk shadow datasets.

File layout (``shadows.bin``, little-endian)::

    offset  size  field
    0       8     magic b"SHADOWDS"
    8       2     format version (uint16) = 1
    10      1     family tag (uint8): 0 = tfim, 1 = cluster
    11      1     param_dim (uint8)
    12      2     n_qubits (uint16)
    14      2     reserved (zero)
    16      5x4   vocab table: token id (uint8) + 3-byte ASCII label, ids 0..4
    36      8     record count (uint64)
    44      ...   records: param_dim x float64, then 2N x uint8 tokens

The companion ``manifest.json`` records the generation plan and the SHA-256
of ``shadows.bin``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import qsim
from .qsim import Family, HamiltonianSpec
from .shadow import ShadowEnsemble, ShadowRecord, sample_shadows

PLUS, MINUS, TOK_X, TOK_Y, TOK_Z = range(5)
VOCAB = ("+1", "-1", "X", "Y", "Z")
VOCAB_SIZE = len(VOCAB)

MAGIC = b"SHADOWDS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sHBBHH20sQ")
FAMILY_TAGS = {Family.TFIM: 0, Family.CLUSTER: 1}

TFIM_TRAIN_POINTS = (0.0, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0)
SHADOWS_PER_POINT = 10_000


class DatasetError(ValueError):
    pass


def tokenize_arrays(bases: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    """Interleave (P_1, b_1, ..., P_N, b_N) as token ids, shape (M, 2N)."""
    bases = np.atleast_2d(bases)
    outcomes = np.atleast_2d(outcomes)
    tokens = np.empty((bases.shape[0], 2 * bases.shape[1]), dtype=np.uint8)
    tokens[:, 0::2] = bases + TOK_X
    tokens[:, 1::2] = (outcomes < 0).astype(np.uint8)
    return tokens


def detokenize_arrays(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.atleast_2d(np.asarray(tokens))
    if tokens.shape[1] % 2:
        raise DatasetError("token sequence length must be even")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB_SIZE):
        bad = tokens[(tokens < 0) | (tokens >= VOCAB_SIZE)][0]
        raise DatasetError(f"token id {int(bad)} is out of vocabulary")
    p, b = tokens[:, 0::2], tokens[:, 1::2]
    if np.any(p < TOK_X) or np.any(b > MINUS):
        raise DatasetError("tokens do not alternate basis/outcome")
    return (p - TOK_X).astype(np.uint8), (1 - 2 * b.astype(np.int8)).astype(np.int8)


@dataclass(frozen=True)
class TokenizedRecord:
    params: tuple
    tokens: tuple


def tokenize(record: ShadowRecord) -> TokenizedRecord:
    toks = tokenize_arrays(np.array(record.basis), np.array(record.outcome))[0]
    return TokenizedRecord(record.params, tuple(int(t) for t in toks))


def detokenize(rec: TokenizedRecord) -> ShadowRecord:
    bases, outcomes = detokenize_arrays(np.array(rec.tokens, dtype=np.int64))
    return ShadowRecord(rec.params, bases[0], outcomes[0])


def tokens_to_text(tokens: Sequence[int]) -> str:
    return " ".join(VOCAB[t] for t in tokens)


def cluster_grid() -> list[tuple]:
    """24 simplex points: the denominator-5 lattice plus a symmetric interior triple."""
    pts = [(i / 5, j / 5, (5 - i - j) / 5) for i in range(6) for j in range(6 - i)]
    pts += sorted(set(itertools.permutations((7 / 15, 4 / 15, 4 / 15))), reverse=True)
    return pts


def training_grid(family) -> list[tuple]:
    fam = Family(family)
    if fam is Family.TFIM:
        return [(g,) for g in TFIM_TRAIN_POINTS]
    return cluster_grid()


@dataclass
class DatasetManifest:
    family: str
    n_qubits: int
    points: list
    shadows_per_point: int
    master_seed: int
    format_version: int
    record_count: int
    sha256: str = ""
    val_fraction: float = 0.05

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        data["points"] = [tuple(p) for p in data["points"]]
        return cls(**data)


@dataclass
class ShadowDataset:
    manifest: DatasetManifest
    params: np.ndarray
    tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def family(self) -> Family:
        return Family(self.manifest.family)

    @property
    def n_qubits(self) -> int:
        return self.manifest.n_qubits

    def ensemble(self) -> ShadowEnsemble:
        bases, outcomes = detokenize_arrays(self.tokens)
        return ShadowEnsemble(self.params, bases, outcomes)

    def point_slice(self, k: int) -> slice:
        m = self.manifest.shadows_per_point
        return slice(k * m, (k + 1) * m)

    def split(self, seed: int | None = None):
        """(train_indices, val_indices) by hashed record index."""
        seed = self.manifest.master_seed if seed is None else seed
        val = validation_mask(len(self), seed, self.manifest.val_fraction)
        return np.flatnonzero(~val), np.flatnonzero(val)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def validation_mask(count: int, seed: int, fraction: float = 0.05) -> np.ndarray:
    h = _splitmix64(np.arange(count, dtype=np.uint64) ^ _splitmix64(np.array([seed], dtype=np.uint64)))
    return (h >> np.uint64(11)).astype(np.float64) / 2.0**53 < fraction


def _record_dtype(param_dim: int, n_qubits: int) -> np.dtype:
    return np.dtype([("params", "<f8", (param_dim,)), ("tokens", "u1", (2 * n_qubits,))])


def _vocab_table() -> bytes:
    return b"".join(struct.pack("<B3s", i, label.encode()) for i, label in enumerate(VOCAB))


def encode(family, n_qubits: int, params: np.ndarray, tokens: np.ndarray) -> bytes:
    fam = Family(family)
    header = HEADER.pack(MAGIC, FORMAT_VERSION, FAMILY_TAGS[fam], fam.param_dim,
                         n_qubits, 0, _vocab_table(), len(tokens))
    recs = np.empty(len(tokens), dtype=_record_dtype(fam.param_dim, n_qubits))
    recs["params"] = params
    recs["tokens"] = tokens
    return header + recs.tobytes()


def decode(blob: bytes):
    if len(blob) < HEADER.size:
        raise DatasetError("file shorter than header")
    magic, version, tag, pdim, n, _, vocab, count = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {version}")
    if vocab != _vocab_table():
        raise DatasetError("vocabulary table does not match this build")
    family = {v: k for k, v in FAMILY_TAGS.items()}[tag]
    dtype = _record_dtype(pdim, n)
    body = memoryview(blob)[HEADER.size:]
    if len(body) != count * dtype.itemsize:
        raise DatasetError(f"header declares {count} records, payload holds {len(body) / dtype.itemsize:g}")
    recs = np.frombuffer(body, dtype=dtype, count=count)
    return family, n, recs["params"].copy(), recs["tokens"].copy()


def _point_shadows(args):
    family, n_qubits, k, point, count, seed = args
    spec = HamiltonianSpec(family, point, n_qubits)
    try:
        gs = qsim.solve(spec)
    except Exception as exc:
        raise DatasetError(f"ground-state solve failed at parameter point {point}: {exc}") from exc
    ens = sample_shadows(gs, spec.params, count, seed, stream=k)
    return ens.params, tokenize_arrays(ens.bases, ens.outcomes)


def generate_dataset(family, n_qubits: int, grid, shadows_per_point: int, master_seed: int,
                     out_dir=None, workers: int = 1) -> ShadowDataset:
    """Simulate shadows for every grid point, in point-major order.

    Point k draws from streams keyed by ``(master_seed, k, chunk)``, so the
    output does not depend on ``workers``.
    """
    fam = Family(family)
    points = [tuple(float(x) for x in np.atleast_1d(p)) for p in grid]
    for p in points:
        qsim.validate_params(fam, p)
    jobs = [(fam, n_qubits, k, p, shadows_per_point, master_seed) for k, p in enumerate(points)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_point_shadows, jobs))
    else:
        parts = [_point_shadows(j) for j in jobs]
    params = np.concatenate([p for p, _ in parts])
    tokens = np.concatenate([t for _, t in parts])
    blob = encode(fam, n_qubits, params, tokens)
    manifest = DatasetManifest(fam.value, n_qubits, points, shadows_per_point, master_seed,
                               FORMAT_VERSION, len(tokens), hashlib.sha256(blob).hexdigest())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "shadows.bin").write_bytes(blob)
        (out / "manifest.json").write_text(manifest.to_json())
    return ShadowDataset(manifest, params, tokens)


def load_dataset(path) -> ShadowDataset:
    path = Path(path)
    blob = (path / "shadows.bin").read_bytes()
    manifest = DatasetManifest.from_json((path / "manifest.json").read_text())
    if hashlib.sha256(blob).hexdigest() != manifest.sha256:
        raise DatasetError("dataset checksum does not match manifest")
    family, n, params, tokens = decode(blob)
    if family.value != manifest.family or n != manifest.n_qubits:
        raise DatasetError("header and manifest disagree on family or size")
    if len(tokens) != manifest.record_count or manifest.record_count != len(manifest.points) * manifest.shadows_per_point:
        raise DatasetError(
            f"manifest record count {manifest.record_count} does not match payload {len(tokens)}"
        )
    return ShadowDataset(manifest, params, tokens)


def export_text(ds: ShadowDataset, path) -> None:
    """One record per line: ``g1,g2,g3 | Z +1 X -1 ...``."""
    with open(path, "w") as fh:
        for p, t in zip(ds.params, ds.tokens):
            fh.write(",".join(repr(float(x)) for x in p) + " | " + tokens_to_text(t) + "\n")

