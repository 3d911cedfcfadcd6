"""Artifact formats, all bit-exact.

* ``.genotype.json`` - the derived architecture, deterministic key order.
* ``.dot``           - one digraph per cell kind (weights included when
                       rendering a live supernet).
* ``.bnas``          - checkpoint: magic ``BNAS``, version u32, tensor count
  u32, then per tensor: name length u32 + UTF-8 name, rank u32, dims u32 each,
  dtype u32 (0 = float32 little-endian, 1 = bit-packed signs) and the payload.
  Packed payloads hold ceil(n/8) bytes, MSB first, bit 1 for +1, bit 0 for -1,
  zero padding bits.  Bitpacked checkpoints store each binarized kernel as a
  sign plane plus a single float32 scalar, a 32x payload compression.

Everything here is little-endian.
"""

import json
import struct

import numpy as np

from .errors import CheckpointError
from .supernet import EDGE_LAYOUT, Genotype

MAGIC = b"BNAS"
VERSION = 1
DTYPE_F32 = 0
DTYPE_SIGNS = 1


def export_genotype_json(genotype):
    return json.dumps(genotype.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_genotype_json(text):
    return Genotype.from_dict(json.loads(text))


def _node_id(node):
    return {-1: "in0", 0: "in1"}.get(node, f"b{node}")


def _node_label(node):
    return {-1: "B[-1]", 0: "B[0]"}.get(node, f"B[{node}]")


def _dot_header(name):
    return [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=box];"]


def export_dot(genotype):
    """Render the derived cells; every intermediate node keeps in-degree 2."""
    blocks = []
    for kind in ("normal", "reduce"):
        entries = getattr(genotype, kind)
        if not entries:
            continue
        lines = _dot_header(kind)
        nodes = sorted({n for _, frm, to in entries for n in (frm, to)} | {-1, 0})
        for n in nodes:
            lines.append(f'  {_node_id(n)} [label="{_node_label(n)}"];')
        lines.append('  out [label="out"];')
        for op, frm, to in entries:
            lines.append(f'  {_node_id(frm)} -> {_node_id(to)} [label="{op}"];')
        for n in sorted({to for _, _, to in entries}):
            lines.append(f"  {_node_id(n)} -> out;")
        lines.append("}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks) + "\n"


def export_dot_live(network):
    """Render the supernet's mixed edges with the current mixture weights."""
    blocks = []
    for kind in network.cell_kinds:
        cell = next(c for c in network.cells if c.kind == kind)
        lines = _dot_header(kind)
        for n in range(-1, 5):
            lines.append(f'  {_node_id(n)} [label="{_node_label(n)}"];')
        lines.append('  out [label="out"];')
        for e, (to, frm) in enumerate(EDGE_LAYOUT):
            weights = network.alpha[kind][e].weights()
            label = "\\n".join(
                f"{op.kind}={weights[k]:.4f}" for k, op in enumerate(cell.edges[e].ops)
            )
            lines.append(f'  {_node_id(frm)} -> {_node_id(to)} [label="{label}"];')
        for n in range(1, 5):
            lines.append(f"  {_node_id(n)} -> out;")
        lines.append("}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks) + "\n"


def pack_signs(arr):
    """Signs of arr, MSB-first, 1 bit each; sign(0) packs as +1."""
    flat = np.asarray(arr).reshape(-1) >= 0
    return np.packbits(flat).tobytes()


def unpack_signs(payload, count, dtype=np.float32):
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count)
    return (bits.astype(dtype) * 2.0 - 1.0).astype(dtype)


def _f32_payload(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _records_from_network(network, mode):
    for name, kind, obj in network.named_arrays():
        if kind == "param":
            yield name, DTYPE_F32, obj.value.shape, _f32_payload(obj.value)
        elif kind == "buffer":
            yield name, DTYPE_F32, obj.shape, _f32_payload(obj)
        elif kind == "kernel":
            if mode == "bitpacked":
                yield f"{name}.signs", DTYPE_SIGNS, obj.x.shape, pack_signs(obj.x)
                yield f"{name}.a_hat", DTYPE_F32, (1,), struct.pack("<f", obj.a_hat)
            else:
                yield f"{name}.x", DTYPE_F32, obj.x.shape, _f32_payload(obj.x)
                yield f"{name}.a", DTYPE_F32, obj.a.shape, _f32_payload(obj.a)
        else:
            raise CheckpointError(f"unknown array kind {kind!r}")


def payload_length(dtype_code, dims):
    n = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if dtype_code == DTYPE_F32:
        return 4 * n
    if dtype_code == DTYPE_SIGNS:
        return -(-n // 8)
    raise CheckpointError(f"unknown dtype code {dtype_code}")


def save_checkpoint(network, mode="full"):
    if mode not in ("full", "bitpacked"):
        raise CheckpointError(f"unknown checkpoint mode {mode!r}")
    records = list(_records_from_network(network, mode))
    for name, code, dims, payload in records:
        if len(payload) != payload_length(code, dims):
            raise CheckpointError(f"payload length mismatch for {name}")
    return write_records(records)


def read_records(data):
    """Parse and validate the checkpoint container; returns
    [(name, dtype_code, dims, payload_bytes)]."""
    view = memoryview(data)
    if len(view) < 12 or bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    records = []

    def take(n, what):
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        (code,) = struct.unpack("<I", take(4, "dtype"))
        payload = bytes(take(payload_length(code, dims), f"payload of {name}"))
        records.append((name, code, dims, payload))
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after the last tensor")
    return records


def _decode(code, dims, payload, dtype=np.float32):
    if code == DTYPE_F32:
        arr = np.frombuffer(payload, dtype="<f4").astype(dtype)
        return arr.reshape(dims) if dims else arr.reshape(())
    n = int(np.prod(dims, dtype=np.int64))
    return unpack_signs(payload, n, dtype).reshape(dims)


def load_checkpoint(data, network=None):
    """Decode a checkpoint.  Without a network, returns {name: array}.  With
    one, writes every tensor into the matching parameter/kernel/buffer and
    returns the network; name or shape mismatches raise."""
    records = read_records(data)
    arrays = {name: _decode(code, dims, payload) for name, code, dims, payload in records}
    if network is None:
        return arrays
    used = set()

    def fetch(name, shape):
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has dims {arr.shape}, expected {shape}")
        used.add(name)
        return arr

    for name, kind, obj in network.named_arrays():
        if kind == "param":
            obj.value[...] = fetch(name, obj.value.shape)
        elif kind == "buffer":
            obj[...] = fetch(name, obj.shape)
        else:  # kernel
            if f"{name}.x" in arrays:
                obj.x[...] = fetch(f"{name}.x", obj.x.shape)
                obj.a[...] = fetch(f"{name}.a", obj.a.shape)
            else:
                signs = fetch(f"{name}.signs", obj.x.shape)
                a_hat = float(fetch(f"{name}.a_hat", (1,))[0])
                obj.x[...] = a_hat * signs
                obj.a[...] = a_hat
    unused = set(arrays) - used
    if unused:
        raise CheckpointError(f"checkpoint has {len(unused)} unexpected tensors: {sorted(unused)[:3]}...")
    return network


def bitpacked_records(records):
    """Convert full-checkpoint records to bitpacked ones: every kernel pair
    (name.x, name.a) becomes (name.signs, name.a_hat)."""
    byname = {name: (code, dims, payload) for name, code, dims, payload in records}
    out = []
    for name, code, dims, payload in records:
        if name.endswith(".x") and name[:-2] + ".a" in byname:
            base = name[:-2]
            x = _decode(code, dims, payload)
            a_code, a_dims, a_payload = byname[base + ".a"]
            a = _decode(a_code, a_dims, a_payload)
            out.append((f"{base}.signs", DTYPE_SIGNS, dims, pack_signs(x)))
            out.append((f"{base}.a_hat", DTYPE_F32, (1,), struct.pack("<f", float(a.mean()))))
        elif name.endswith(".a") and name[:-2] + ".x" in byname:
            continue
        else:
            out.append((name, code, dims, payload))
    return out


def write_records(records):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(records))
    for name, code, dims, payload in records:
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", len(dims))
        buf += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
        buf += struct.pack("<I", code)
        buf += payload
    return bytes(buf)


def checkpoint_summary(data):
    records = read_records(data)
    tensors = []
    payload_total = 0
    packed_payload = 0
    for name, code, dims, payload in records:
        tensors.append({
            "name": name,
            "dtype": "f32" if code == DTYPE_F32 else "signs",
            "dims": list(dims),
            "payload_bytes": len(payload),
        })
        payload_total += len(payload)
        if code == DTYPE_SIGNS:
            packed_payload += len(payload)
    return {
        "tensors": tensors,
        "tensor_count": len(records),
        "payload_bytes": payload_total,
        "packed_payload_bytes": packed_payload,
        "total_bytes": len(data),
    }


def bitpacked_forecast(network):
    """Byte size a bitpacked checkpoint of this network would occupy."""
    return len(save_checkpoint(network, "bitpacked"))
