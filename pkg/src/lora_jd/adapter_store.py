"""Data model for LoRA collections and their compressed form, plus file I/O.

Two on-disk formats are handled here:

* an *adapter bundle*: a directory with ``manifest.json`` and one raw
  little-endian float32 file per factor (row-major);
* a *compressed artifact* (``.jdc``): 8-byte magic, u32 version, a
  length-prefixed JSON header and the concatenated float32 payloads.

All arithmetic is float64; float32 exists only on disk.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from ._linalg import product_norm

BUNDLE_VERSION = 1
JDC_MAGIC = b"JDC\0\0\0\0\0"
JDC_VERSION = 1
_F32 = np.dtype("<f4")


class Mode(str, Enum):
    FULL = "full"
    DIAG = "diag"


class FormatError(ValueError):
    """Malformed bundle, artifact or activation file."""


@dataclass(frozen=True)
class LoraAdapter:
    id: str
    b: np.ndarray
    a: np.ndarray
    original_norm: float | None = None

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if b.ndim != 2 or a.ndim != 2:
            raise ValueError(f"adapter {self.id!r}: factors must be 2-D")
        if b.shape[1] != a.shape[0] or b.shape[1] < 1:
            raise ValueError(f"adapter {self.id!r}: inner dimensions {b.shape} x {a.shape} do not match")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        if self.original_norm is None:
            object.__setattr__(self, "original_norm", product_norm(b, a))
        elif self.original_norm < 0:
            raise ValueError(f"adapter {self.id!r}: negative original_norm")

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def norm(self) -> float:
        """Current ||B A||_F."""
        return product_norm(self.b, self.a)

    def product(self) -> np.ndarray:
        return self.b @ self.a

    def restore_scale(self) -> float:
        """Factor mapping the current product back to the original scale."""
        cur = self.norm
        return self.original_norm / cur if cur > 0 else 1.0


@dataclass(frozen=True)
class AdapterCollection:
    adapters: tuple[LoraAdapter, ...]
    d_A: int
    d_B: int

    def __post_init__(self):
        object.__setattr__(self, "adapters", tuple(self.adapters))
        seen = set()
        for ad in self.adapters:
            if ad.id in seen:
                raise ValueError(f"duplicate adapter id {ad.id!r}")
            seen.add(ad.id)
            if ad.b.shape[0] != self.d_B or ad.a.shape[1] != self.d_A:
                raise ValueError(
                    f"adapter {ad.id!r} has shape {ad.b.shape[0]}x{ad.a.shape[1]}, "
                    f"collection is {self.d_B}x{self.d_A}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[np.ndarray, np.ndarray]], ids: Sequence[str] | None = None):
        """Build a collection from ``(B, A)`` pairs; ids default to ``"0", "1", ...``."""
        if ids is None:
            ids = [str(i) for i in range(len(pairs))]
        adapters = [LoraAdapter(i, b, a) for i, (b, a) in zip(ids, pairs)]
        if not adapters:
            raise ValueError("empty collection")
        return cls(tuple(adapters), d_A=adapters[0].a.shape[1], d_B=adapters[0].b.shape[0])

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self) -> Iterator[LoraAdapter]:
        return iter(self.adapters)

    def __getitem__(self, i: int) -> LoraAdapter:
        return self.adapters[i]

    @property
    def ids(self) -> list[str]:
        return [ad.id for ad in self.adapters]

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(ad.b, ad.a) for ad in self.adapters]

    def by_id(self, id_: str) -> LoraAdapter:
        for ad in self.adapters:
            if ad.id == id_:
                return ad
        raise KeyError(id_)

    def subset(self, ids: Sequence[str]) -> "AdapterCollection":
        lookup = {ad.id: ad for ad in self.adapters}
        return replace(self, adapters=tuple(lookup[i] for i in ids))


@dataclass(frozen=True)
class Sigma:
    """Per-adapter scaling: an r x r matrix (FULL) or a length-r vector (DIAG)."""
    kind: Mode
    values: np.ndarray

    def __post_init__(self):
        kind = Mode(self.kind)
        vals = np.asarray(self.values, dtype=np.float64)
        if kind is Mode.DIAG and vals.ndim != 1:
            raise ValueError("diagonal sigma needs a vector")
        if kind is Mode.FULL and (vals.ndim != 2 or vals.shape[0] != vals.shape[1]):
            raise ValueError("full sigma needs a square matrix")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", vals)

    @property
    def rank(self) -> int:
        return self.values.shape[0]

    def matrix(self) -> np.ndarray:
        return np.diag(self.values) if self.kind is Mode.DIAG else self.values

    def scaled(self, factor: float) -> "Sigma":
        return Sigma(self.kind, self.values * factor)


@dataclass(frozen=True)
class CompressedGroup:
    u: np.ndarray
    v: np.ndarray
    sigmas: Mapping[str, Sigma]

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ValueError(f"basis shapes {u.shape} and {v.shape} disagree on rank")
        for id_, s in self.sigmas.items():
            if s.rank != u.shape[1]:
                raise ValueError(f"sigma for {id_!r} has rank {s.rank}, group rank is {u.shape[1]}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "sigmas", dict(self.sigmas))

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def ids(self) -> list[str]:
        return list(self.sigmas)

    def reconstruct(self, id_: str) -> np.ndarray:
        return self.u @ self.sigmas[id_].matrix() @ self.v.T


@dataclass(frozen=True)
class CompressedCollection:
    """Groups of shared bases plus the adapter -> group map.

    ``normalized`` marks sigmas that live on the unit-norm scale; ``norms``
    then maps each id back to its original ||B A||_F.
    """
    groups: tuple[CompressedGroup, ...]
    assignment: Mapping[str, int]
    mode: Mode
    norms: Mapping[str, float] = field(default_factory=dict)
    normalized: bool = False
    method: str = "jd"

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "assignment", dict(self.assignment))
        object.__setattr__(self, "norms", {k: float(v) for k, v in self.norms.items()})
        object.__setattr__(self, "mode", Mode(self.mode))
        for id_, j in self.assignment.items():
            if not 0 <= j < len(self.groups):
                raise ValueError(f"assignment of {id_!r} to group {j} out of range")
            if id_ not in self.groups[j].sigmas:
                raise ValueError(f"group {j} holds no sigma for {id_!r}")
        members = sum(len(g.sigmas) for g in self.groups)
        if members != len(self.assignment):
            raise ValueError("every adapter must appear in exactly one group")

    @property
    def ids(self) -> list[str]:
        return list(self.assignment)

    def group_of(self, id_: str) -> CompressedGroup:
        try:
            return self.groups[self.assignment[id_]]
        except KeyError:
            raise KeyError(f"unknown adapter id {id_!r}") from None

    def sigma(self, id_: str, original_scale: bool = True) -> Sigma:
        s = self.group_of(id_).sigmas[id_]
        if original_scale and self.normalized:
            s = s.scaled(self.norms[id_])
        return s

    def reconstruct(self, id_: str, original_scale: bool = True) -> np.ndarray:
        g = self.group_of(id_)
        return g.u @ self.sigma(id_, original_scale).matrix() @ g.v.T


# ---------------------------------------------------------------- bundles

def _read_f32(path: Path, shape: tuple[int, int], id_: str) -> np.ndarray:
    raw = path.read_bytes()
    expected = shape[0] * shape[1] * 4
    if len(raw) != expected:
        raise FormatError(
            f"adapter {id_!r}: payload size mismatch in {path.name} "
            f"({len(raw)} bytes, manifest implies {expected})")
    arr = np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"adapter {id_!r}: non-finite values in {path.name}")
    return arr


def _read_manifest(path: Path) -> dict:
    manifest = path / "manifest.json"
    if not manifest.is_file():
        raise FormatError(f"missing manifest: {manifest}")
    meta = json.loads(manifest.read_text())
    if meta.get("version") != BUNDLE_VERSION:
        raise FormatError(f"unsupported version {meta.get('version')!r} in {manifest}")
    return meta


def list_modules(path) -> list[str]:
    """Module names of a bundle in order of first appearance in the manifest."""
    meta = _read_manifest(Path(path))
    out: list[str] = []
    for entry in meta["adapters"]:
        m = entry.get("module", "")
        if m not in out:
            out.append(m)
    return out


def load_collection(path, module: str | None = None) -> AdapterCollection:
    """Read an adapter bundle directory.

    A bundle may hold several layer modules (optional ``module`` key per
    entry). ``module=None`` is only accepted for single-module bundles.
    """
    path = Path(path)
    meta = _read_manifest(path)
    d_A, d_B = int(meta["d_A"]), int(meta["d_B"])
    modules = list_modules(path)
    if module is None:
        if len(modules) > 1:
            raise FormatError(f"bundle {path} holds modules {modules}; choose one")
        module = modules[0] if modules else ""
    elif module not in modules:
        raise FormatError(f"bundle {path} has no module {module!r}")
    adapters = []
    for entry in meta["adapters"]:
        if entry.get("module", "") != module:
            continue
        id_, rank = str(entry["id"]), int(entry["rank"])
        b = _read_f32(path / entry["b_file"], (d_B, rank), id_)
        a = _read_f32(path / entry["a_file"], (rank, d_A), id_)
        adapters.append(LoraAdapter(id_, b, a))
    if not adapters:
        raise FormatError(f"bundle {path} contains no adapters")
    return AdapterCollection(tuple(adapters), d_A=d_A, d_B=d_B)


def save_collection(c: AdapterCollection, path, module: str | None = None) -> None:
    """Write ``c`` as a bundle directory (factors rounded to float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ad in enumerate(c):
        b_file, a_file = f"{i:05d}_B.bin", f"{i:05d}_A.bin"
        (path / b_file).write_bytes(np.ascontiguousarray(ad.b, dtype=_F32).tobytes())
        (path / a_file).write_bytes(np.ascontiguousarray(ad.a, dtype=_F32).tobytes())
        entry = {"id": ad.id, "rank": ad.rank, "b_file": b_file, "a_file": a_file}
        if module is not None:
            entry["module"] = module
        entries.append(entry)
    meta = {"version": BUNDLE_VERSION, "d_A": c.d_A, "d_B": c.d_B, "adapters": entries}
    (path / "manifest.json").write_text(json.dumps(meta, indent=2))


# --------------------------------------------------------------- artifact

def save_compressed(c: CompressedCollection, path) -> None:
    groups_meta = []
    payloads = []
    for g in c.groups:
        members = g.ids
        groups_meta.append({
            "rank": g.rank,
            "u_shape": list(g.u.shape),
            "v_shape": list(g.v.shape),
            "members": members,
        })
        payloads.append(g.u)
        payloads.append(g.v)
        payloads.extend(g.sigmas[i].values for i in members)
    header = {
        "mode": c.mode.value,
        "method": c.method,
        "normalized": c.normalized,
        "groups": groups_meta,
        "assignment": c.assignment,
        "norms": c.norms,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(JDC_MAGIC)
        fh.write(struct.pack("<I", JDC_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for p in payloads:
            fh.write(np.ascontiguousarray(p, dtype=_F32).tobytes())


def load_compressed(path) -> CompressedCollection:
    raw = Path(path).read_bytes()
    if raw[:8] != JDC_MAGIC:
        raise FormatError(f"{path}: not a .jdc artifact")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != JDC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20:20 + hlen])
    offset = 20 + hlen
    mode = Mode(header["mode"])

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype=_F32, count=count, offset=offset).reshape(shape)
        offset = end
        return arr.astype(np.float64)

    groups = []
    for gm in header["groups"]:
        r = gm["rank"]
        u = take(tuple(gm["u_shape"]))
        v = take(tuple(gm["v_shape"]))
        sshape = (r, r) if mode is Mode.FULL else (r,)
        sigmas = {i: Sigma(mode, take(sshape)) for i in gm["members"]}
        groups.append(CompressedGroup(u, v, sigmas))
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return CompressedCollection(
        tuple(groups), header["assignment"], mode, header["norms"],
        normalized=header["normalized"], method=header.get("method", "jd"))


def storage_roundtrip(c: CompressedCollection) -> CompressedCollection:
    """Round every matrix to float32, i.e. the values a save/load would give."""
    def q(x):
        return np.asarray(x, dtype=_F32).astype(np.float64)
    groups = [CompressedGroup(q(g.u), q(g.v), {i: Sigma(s.kind, q(s.values)) for i, s in g.sigmas.items()})
              for g in c.groups]
    return replace(c, groups=tuple(groups))


# ----------------------------------------------------------- normalization

def normalize_collection(c: AdapterCollection) -> AdapterCollection:
    """Scale each B so ||B A||_F = 1; ``original_norm`` keeps the old norm."""
    out = []
    for ad in c:
        n = ad.norm
        if n == 0:
            raise ValueError(f"adapter {ad.id!r} has zero norm and cannot be normalized")
        out.append(LoraAdapter(ad.id, ad.b / n, ad.a, original_norm=ad.original_norm))
    return replace(c, adapters=tuple(out))


def denormalize_sigmas(c: CompressedCollection) -> CompressedCollection:
    """Fold the stored original norms into the sigmas."""
    if not c.normalized:
        return c
    groups = []
    for g in c.groups:
        sig = {}
        for id_, s in g.sigmas.items():
            if id_ not in c.norms:
                raise KeyError(f"no stored norm for adapter {id_!r}")
            sig[id_] = s.scaled(c.norms[id_])
        groups.append(CompressedGroup(g.u, g.v, sig))
    return replace(c, groups=tuple(groups), normalized=False)


# ------------------------------------------------------------- activations

def load_activations(path):
    """Read an activation container: ``(x, adapter_ids, base_output or None)``."""
    path = Path(path)
    meta = _read_manifest(path)
    b, l, d = (int(meta[k]) for k in ("b", "l", "d"))
    ids = [str(i) for i in meta["adapter_ids"]]
    if len(ids) != b:
        raise FormatError(f"{path}: {len(ids)} adapter ids for batch of {b}")
    x = _read_f32(path / meta["x_file"], (b, l * d), "activations").reshape(b, l, d)
    base = None
    if meta.get("base_file"):
        d_out = int(meta["d_out"])
        base = _read_f32(path / meta["base_file"], (b, l * d_out), "base").reshape(b, l, d_out)
    return x, ids, base


def save_activations(path, x: np.ndarray, adapter_ids: Sequence[str], base: np.ndarray | None = None,
                     name: str = "x") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    b, l, d = x.shape
    meta = {"version": BUNDLE_VERSION, "b": b, "l": l, "d": d,
            "adapter_ids": list(adapter_ids), "x_file": f"{name}.bin"}
    (path / f"{name}.bin").write_bytes(np.ascontiguousarray(x, dtype=_F32).tobytes())
    if base is not None:
        meta["base_file"] = "base.bin"
        meta["d_out"] = base.shape[2]
        (path / "base.bin").write_bytes(np.ascontiguousarray(base, dtype=_F32).tobytes())
    (path / "manifest.json").write_text(json.dumps(meta, indent=2))
