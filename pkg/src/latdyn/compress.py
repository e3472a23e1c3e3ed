"""Model archives, structured pruning, post-training quantization, benchmarks.

Archive layout (little-endian throughout):

    magic  b"LDYN"
    u16    format version (currently 1)
    u32    metadata byte length
    bytes  UTF-8 JSON metadata (sorted keys, compact separators)
    bytes  tensor payloads, concatenated in metadata order

Metadata carries the model kind, architecture dims, normalizer statistics and
one descriptor per tensor (name, shape, dtype, quantization params), so the
payload offsets are implied by order. Saving a loaded archive reproduces the
original bytes exactly.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .errors import ArchiveError, ContractError
from .evaluate import evaluate_jepa, evaluate_lstm
from .jepa import COMPONENTS, JepaConfig, JepaModel, closed_loop_forecast
from .nets import LstmSpec, MlpSpec, Params, lstm_forward

MAGIC = b"LDYN"
VERSION = 1

SCHEME_NONE = "none"
SCHEME_BF16 = "bf16"
SCHEME_INT8 = "int8"

_DTYPE_BYTES = {"f32": 4, "bf16": 2, "i8": 1}

INT8_SCALE_FLOOR = 1e-8
BENCH_COLUMNS = [
    "model",
    "scheme",
    "size_bytes",
    "latency_ms_per_step",
    "wmse",
    "mse_nox",
    "mse_co2",
    "mse_co",
    "mse_thc",
]


# ---------------------------------------------------------------------------
# Quantized storage primitives
# ---------------------------------------------------------------------------


def f32_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even truncation of float32 to bfloat16 bit patterns."""
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    finite = np.isfinite(x)
    rounding_bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    rounded = ((bits + rounding_bias) >> np.uint32(16)).astype(np.uint16)
    # Keep the mantissa of non-finite values intact (no carry into the exponent).
    truncated = (bits >> np.uint32(16)).astype(np.uint16)
    return np.where(finite, rounded, truncated)


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def int8_quant_params(x: np.ndarray) -> tuple[float, int]:
    """Per-tensor affine scale/zero-point from the value range.

    The range is extended through zero and spread over 254 integer steps (one
    step of headroom), which keeps every in-range value inside [-128, 127]
    after zero-point rounding, so the round-trip error is at most scale/2.
    Constant tensors get an exponent-only scale so the constant survives the
    round trip exactly; all-zero tensors use the documented 1e-8 scale floor.
    """
    lo = float(x.min())
    hi = float(x.max())
    if hi == lo:
        if lo == 0.0:
            return INT8_SCALE_FLOOR, 0
        return abs(lo) / 64.0, 0
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    scale = max((hi - lo) / 254.0, INT8_SCALE_FLOOR)
    zero_point = int(round(-128.0 - lo / scale))
    return scale, zero_point


def int8_encode(x: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    q = np.round(x.astype(np.float64) / scale) + zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def int8_decode(q: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    return ((q.astype(np.float64) - zero_point) * scale).astype(np.float32)


# ---------------------------------------------------------------------------
# Archive structure
# ---------------------------------------------------------------------------


@dataclass
class TensorEntry:
    """One serialized tensor: raw payload plus dequantization metadata."""

    name: str
    shape: tuple[int, ...]
    dtype: str  # f32 | bf16 | i8
    payload: bytes
    scale: float | None = None
    zero_point: int | None = None

    def __post_init__(self):
        if self.dtype not in _DTYPE_BYTES:
            raise ArchiveError(f"unknown tensor dtype {self.dtype!r}")
        expected = int(np.prod(self.shape)) * _DTYPE_BYTES[self.dtype]
        if len(self.payload) != expected:
            raise ArchiveError(
                f"tensor {self.name}: payload {len(self.payload)} bytes, expected {expected}"
            )

    def to_f32(self) -> np.ndarray:
        if self.dtype == "f32":
            arr = np.frombuffer(self.payload, dtype="<f4")
        elif self.dtype == "bf16":
            arr = bf16_bits_to_f32(np.frombuffer(self.payload, dtype="<u2"))
        else:
            arr = int8_decode(np.frombuffer(self.payload, dtype=np.int8), self.scale, self.zero_point)
        return arr.reshape(self.shape).copy()

    @classmethod
    def from_f32(cls, name: str, arr: np.ndarray) -> "TensorEntry":
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        return cls(name=name, shape=tuple(arr.shape), dtype="f32", payload=arr.astype("<f4").tobytes())


@dataclass
class ModelArchive:
    """In-memory form of an .ldyn file."""

    kind: str  # jepa | lstm
    scheme: str  # none | bf16 | int8
    config: dict
    specs: dict
    normalizer: dict
    entries: list[TensorEntry]
    extra: dict = field(default_factory=dict)

    def payload_bytes(self) -> int:
        return sum(len(e.payload) for e in self.entries)

    def get_normalizer(self) -> data_mod.Normalizer:
        return data_mod.Normalizer.from_dict(self.normalizer)


def _metadata_dict(archive: ModelArchive) -> dict:
    tensors = []
    for e in archive.entries:
        desc: dict = {"name": e.name, "shape": list(e.shape), "dtype": e.dtype}
        if e.scale is not None:
            desc["scale"] = e.scale
        if e.zero_point is not None:
            desc["zero_point"] = e.zero_point
        tensors.append(desc)
    return {
        "kind": archive.kind,
        "scheme": archive.scheme,
        "config": archive.config,
        "specs": archive.specs,
        "normalizer": archive.normalizer,
        "tensors": tensors,
        "extra": archive.extra,
    }


def save_archive(archive: ModelArchive, path: str | Path) -> None:
    meta = json.dumps(_metadata_dict(archive), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for e in archive.entries:
            fh.write(e.payload)


def load_archive(path: str | Path) -> ModelArchive:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise ArchiveError(f"{path}: not a model archive (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 6)
    meta_end = 10 + meta_len
    if meta_end > len(raw):
        raise ArchiveError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[10:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: corrupt metadata ({exc})") from None
    entries = []
    offset = meta_end
    for desc in meta["tensors"]:
        nbytes = int(np.prod(desc["shape"])) * _DTYPE_BYTES[desc["dtype"]]
        if offset + nbytes > len(raw):
            raise ArchiveError(f"{path}: truncated payload for tensor {desc['name']}")
        entries.append(
            TensorEntry(
                name=desc["name"],
                shape=tuple(desc["shape"]),
                dtype=desc["dtype"],
                payload=raw[offset : offset + nbytes],
                scale=desc.get("scale"),
                zero_point=desc.get("zero_point"),
            )
        )
        offset += nbytes
    if offset != len(raw):
        raise ArchiveError(f"{path}: {len(raw) - offset} trailing payload bytes")
    return ModelArchive(
        kind=meta["kind"],
        scheme=meta["scheme"],
        config=meta["config"],
        specs=meta["specs"],
        normalizer=meta["normalizer"],
        entries=entries,
        extra=meta.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# Model <-> archive bridging
# ---------------------------------------------------------------------------


def _spec_to_dict(spec: MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
    }


def _spec_from_dict(d: dict) -> MlpSpec:
    return MlpSpec(
        input_dim=d["input_dim"],
        hidden_dims=tuple(d["hidden_dims"]),
        output_dim=d["output_dim"],
        activation=d.get("activation", "leaky_relu"),
    )


def jepa_to_archive(
    model: JepaModel, normalizer: data_mod.Normalizer, extra: dict | None = None
) -> ModelArchive:
    entries = [
        TensorEntry.from_f32(name, p.detach().cpu().numpy()) for name, p in model.named_parameters()
    ]
    return ModelArchive(
        kind="jepa",
        scheme=SCHEME_NONE,
        config=model.config.to_dict(),
        specs={name: _spec_to_dict(spec) for name, spec in model.specs.items()},
        normalizer=normalizer.to_dict(),
        entries=entries,
        extra=extra or {},
    )


def lstm_to_archive(
    spec: LstmSpec, params: Params, normalizer: data_mod.Normalizer, extra: dict | None = None
) -> ModelArchive:
    names = []
    for layer in range(spec.depth):
        names += [f"lstm.w_ih{layer}", f"lstm.w_hh{layer}", f"lstm.b_ih{layer}", f"lstm.b_hh{layer}"]
    names += ["head.w", "head.b"]
    entries = [
        TensorEntry.from_f32(name, p.detach().cpu().numpy()) for name, p in zip(names, params)
    ]
    return ModelArchive(
        kind="lstm",
        scheme=SCHEME_NONE,
        config={
            "input_dim": spec.input_dim,
            "hidden_width": spec.hidden_width,
            "depth": spec.depth,
            "output_dim": spec.output_dim,
            "timesteps": spec.timesteps,
        },
        specs={},
        normalizer=normalizer.to_dict(),
        entries=entries,
        extra=extra or {},
    )


def archive_to_jepa(archive: ModelArchive) -> JepaModel:
    """Rebuild a runnable model; quantized weights expand to float32 once here."""
    if archive.kind != "jepa":
        raise ContractError(f"archive holds a {archive.kind!r} model, expected jepa")
    config = JepaConfig.from_dict(archive.config)
    specs = {name: _spec_from_dict(d) for name, d in archive.specs.items()}
    by_name = {e.name: e for e in archive.entries}
    params: dict[str, Params] = {}
    for comp in COMPONENTS:
        spec = specs[comp]
        comp_params: Params = []
        for i in range(spec.n_layers):
            for kind in ("w", "b"):
                entry = by_name.get(f"{comp}.{kind}{i}")
                if entry is None:
                    raise ArchiveError(f"missing tensor {comp}.{kind}{i}")
                comp_params.append(torch.from_numpy(entry.to_f32()))
        params[comp] = comp_params
    return JepaModel(config=config, specs=specs, params=params)


def archive_to_lstm(archive: ModelArchive) -> tuple[LstmSpec, Params]:
    if archive.kind != "lstm":
        raise ContractError(f"archive holds a {archive.kind!r} model, expected lstm")
    spec = LstmSpec(
        input_dim=archive.config["input_dim"],
        hidden_width=archive.config["hidden_width"],
        depth=archive.config["depth"],
        output_dim=archive.config["output_dim"],
        timesteps=archive.config["timesteps"],
    )
    params = [torch.from_numpy(e.to_f32()) for e in archive.entries]
    return spec, params


# ---------------------------------------------------------------------------
# Structured pruning
# ---------------------------------------------------------------------------


@dataclass
class LayerPruneInfo:
    component: str
    layer: int
    width_before: int
    kept: int
    removed: int
    removed_indices: list[int]
    scores: list[float]


@dataclass
class PruneReport:
    ratio: float
    layers: list[LayerPruneInfo]
    params_before: int
    params_after: int

    def summary(self) -> str:
        lines = [
            f"structured prune ratio={self.ratio:g}: "
            f"{self.params_before} -> {self.params_after} parameters"
        ]
        for info in self.layers:
            lines.append(
                f"  {info.component} layer {info.layer}: kept {info.kept}, removed {info.removed}"
            )
        return "\n".join(lines)


def prune_structured(model: JepaModel, ratio: float) -> tuple[JepaModel, PruneReport]:
    """Remove the weakest hidden neurons in every component, consistently.

    Neuron j of hidden layer l is scored by the L2 norm of its incoming row
    W_l[j, :] together with its outgoing column W_{l+1}[:, j]; the lowest
    floor(ratio * width) are deleted (row, bias entry and next-layer column),
    so the pruned network stays dense and runnable. Output layers are never
    pruned. Layers are processed front to back, so later scores see earlier
    removals.
    """
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"prune ratio must be in [0, 1), got {ratio}")
    params_before = model.param_count()
    new_specs: dict[str, MlpSpec] = {}
    new_params: dict[str, Params] = {}
    layer_infos: list[LayerPruneInfo] = []

    for comp in COMPONENTS:
        spec = model.specs[comp]
        tensors = [p.detach().clone() for p in model.params[comp]]
        hidden: list[int] = []
        for layer in range(len(spec.hidden_dims)):
            w = tensors[2 * layer]
            b = tensors[2 * layer + 1]
            w_next = tensors[2 * (layer + 1)]
            width = w.shape[0]
            n_remove = int(ratio * width)
            scores = torch.sqrt(w.pow(2).sum(dim=1) + w_next.pow(2).sum(dim=0))
            order = np.argsort(scores.numpy(), kind="stable")
            removed = np.sort(order[:n_remove])
            kept = np.sort(order[n_remove:])
            if kept.size == 0:
                raise ContractError(
                    f"ratio {ratio} would empty {comp} layer {layer} (width {width})"
                )
            keep_idx = torch.from_numpy(kept.copy())
            tensors[2 * layer] = w[keep_idx, :]
            tensors[2 * layer + 1] = b[keep_idx]
            tensors[2 * (layer + 1)] = w_next[:, keep_idx]
            hidden.append(int(kept.size))
            layer_infos.append(
                LayerPruneInfo(
                    component=comp,
                    layer=layer,
                    width_before=width,
                    kept=int(kept.size),
                    removed=int(removed.size),
                    removed_indices=[int(i) for i in removed],
                    scores=[float(s) for s in scores],
                )
            )
        new_specs[comp] = MlpSpec(
            input_dim=spec.input_dim,
            hidden_dims=tuple(hidden),
            output_dim=spec.output_dim,
            activation=spec.activation,
        )
        new_params[comp] = tensors

    pruned = JepaModel(config=model.config, specs=new_specs, params=new_params)
    report = PruneReport(
        ratio=ratio,
        layers=layer_infos,
        params_before=params_before,
        params_after=pruned.param_count(),
    )
    return pruned, report


# ---------------------------------------------------------------------------
# Post-training quantization
# ---------------------------------------------------------------------------


def quantize_archive(archive: ModelArchive, scheme: str) -> ModelArchive:
    """Convert a float32 archive to bf16 or int8 storage."""
    if scheme not in (SCHEME_BF16, SCHEME_INT8):
        raise ContractError(f"unknown quantization scheme {scheme!r}")
    if archive.scheme != SCHEME_NONE:
        raise ContractError(f"archive is already {archive.scheme}-quantized")
    entries = []
    for e in archive.entries:
        x = e.to_f32()
        if scheme == SCHEME_BF16:
            entries.append(
                TensorEntry(
                    name=e.name,
                    shape=e.shape,
                    dtype="bf16",
                    payload=f32_to_bf16_bits(x).astype("<u2").tobytes(),
                )
            )
        else:
            scale, zp = int8_quant_params(x)
            entries.append(
                TensorEntry(
                    name=e.name,
                    shape=e.shape,
                    dtype="i8",
                    payload=int8_encode(x, scale, zp).tobytes(),
                    scale=scale,
                    zero_point=zp,
                )
            )
    return ModelArchive(
        kind=archive.kind,
        scheme=scheme,
        config=archive.config,
        specs=archive.specs,
        normalizer=archive.normalizer,
        entries=entries,
        extra=archive.extra,
    )


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def scheme_label(archive: ModelArchive) -> str:
    """Compression tag for reports: quant scheme plus any prune ratio."""
    parts = []
    ratio = archive.extra.get("prune_ratio")
    if ratio is not None:
        parts.append(f"prune:{ratio:g}")
    if archive.scheme != SCHEME_NONE:
        parts.append(archive.scheme)
    return "+".join(parts) if parts else SCHEME_NONE


def _sequential_latency_ms(archive: ModelArchive, records, repeats: int) -> list[float]:
    """Wall-clock per-step cost of the deployment-style sequential loop over
    the full cycle; the model is built (dequantized) once, outside the timer."""
    normalizer = archive.get_normalizer()
    data_norm = normalizer.apply(data_mod.records_to_array(records))
    inputs = data_norm[:, data_mod.INPUT_COLS]
    emissions = data_norm[:, data_mod.EMISSION_COLS]
    out = []
    if archive.kind == "jepa":
        model = archive_to_jepa(archive)
        t_past = model.config.t_past
        steps = data_norm.shape[0] - t_past
        for _ in range(repeats):
            t0 = time.perf_counter()
            closed_loop_forecast(
                model,
                emissions[:t_past],
                inputs[t_past:],
                mode="teacher-forced",
                measured=emissions[t_past:],
            )
            out.append((time.perf_counter() - t0) / steps * 1000.0)
    else:
        spec, params = archive_to_lstm(archive)
        u, _ = lstm_windows(data_norm, spec.timesteps)
        seqs = torch.from_numpy(u).float()
        steps = u.shape[0]
        for _ in range(repeats):
            t0 = time.perf_counter()
            with torch.no_grad():
                for i in range(steps):
                    lstm_forward(spec, params, seqs[i : i + 1])
            out.append((time.perf_counter() - t0) / steps * 1000.0)
    return out


def benchmark(
    model_paths: list[str | Path],
    records: list[data_mod.EmissionRecord],
    repeats: int = 3,
) -> list[dict]:
    """Size/latency/accuracy rows for a set of archives, largest file first.

    Latency is measured single-threaded over ``repeats`` sequential passes;
    accuracy comes from the batched teacher-forced evaluator (same math).
    """
    if repeats < 3:
        raise ContractError(f"repeats must be >= 3, got {repeats}")
    if not model_paths:
        raise ContractError("no model archives given")
    rows = []
    n_threads = torch.get_num_threads()
    for path in model_paths:
        archive = load_archive(path)
        normalizer = archive.get_normalizer()
        if archive.kind == "jepa":
            model = archive_to_jepa(archive)
            result = evaluate_jepa(model, normalizer, records, mode="teacher-forced")
        else:
            spec, params = archive_to_lstm(archive)
            result = evaluate_lstm(spec, params, normalizer, records)
        torch.set_num_threads(1)
        try:
            latencies = _sequential_latency_ms(archive, records, repeats)
        finally:
            torch.set_num_threads(n_threads)
        row = {
            "model": Path(path).name,
            "scheme": scheme_label(archive),
            "size_bytes": os.path.getsize(path),
            "latency_ms_per_step": float(np.mean(latencies)),
            "wmse": result.wmse,
        }
        row.update(
            {f"mse_{sp}": float(m) for sp, m in zip(data_mod.SPECIES, result.per_species_mse)}
        )
        rows.append(row)
    rows.sort(key=lambda r: (-r["size_bytes"], r["model"]))
    return rows
