"""Simulated blockchain: typed blocks, hash chaining, content storage, stakes.

Blocks carry a transaction-type tag in the header so nodes can persist only
the block kinds their role requires. Model payloads are stored through an
in-process content-addressed store; transactions then reference them by
content id. All hashing runs over a canonical length-prefixed binary
serialization, and timestamps are simulated round counters, so chains are
byte-reproducible.

Stake accounting is purely additive: winning trainers earn a fixed reward and
each aggregation node earns a smaller per-round fee.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .consensus import Role
from .nn import LayerShape, ParamVector

FIXED_STAKE_REWARD = 20  # per winning trainer per round
AGGREGATOR_REWARD = 2  # per aggregation node per round

_ZERO_HASH = bytes(32)


class UnknownCidError(KeyError):
    """Requested content id was never stored."""


@dataclass(frozen=True)
class Cid:
    """Content id: the SHA-256 digest of the stored bytes."""

    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(self.digest)}")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def of(cls, data: bytes) -> "Cid":
        return cls(hashlib.sha256(data).digest())


class ContentStore:
    """In-process content-addressed object store standing in for a file network."""

    def __init__(self) -> None:
        self._objects: dict[bytes, bytes] = {}

    def put(self, data: bytes) -> Cid:
        cid = Cid.of(data)
        self._objects.setdefault(cid.digest, bytes(data))
        return cid

    def get(self, cid: Cid) -> bytes:
        try:
            return self._objects[cid.digest]
        except KeyError:
            raise UnknownCidError(cid.hex) from None

    def __contains__(self, cid: Cid) -> bool:
        return cid.digest in self._objects

    def __len__(self) -> int:
        return len(self._objects)


class TxType(str, Enum):
    CID = "CID"
    GM = "GM"
    AVR = "AVR"
    PCC = "PCC"


@dataclass(frozen=True)
class CidTx:
    """Link to one node's local model in the content store."""

    node_id: int
    round_index: int
    cid: Cid

    tx_type = TxType.CID


@dataclass(frozen=True)
class GlobalModelTx:
    """The full global model for one round."""

    round_index: int
    aggregator_ids: tuple[int, ...]
    params: ParamVector

    tx_type = TxType.GM


@dataclass(frozen=True)
class AccuracyRecordTx:
    """Per-aggregator validation scores for one cluster average."""

    round_index: int
    cluster_index: int
    accuracies: tuple[tuple[int, float], ...]
    mean_accuracy: float

    tx_type = TxType.AVR


VS_GLOBAL = "global"
VS_LOCAL = "local"


@dataclass(frozen=True)
class PccRecordTx:
    """A correlation score: node vs previous global model, or node vs peer."""

    round_index: int
    node_id: int
    rho: float
    vs: str = VS_GLOBAL
    peer_id: int | None = None

    def __post_init__(self) -> None:
        if self.vs not in (VS_GLOBAL, VS_LOCAL):
            raise ValueError(f"vs must be {VS_GLOBAL!r} or {VS_LOCAL!r}")
        if (self.vs == VS_LOCAL) != (self.peer_id is not None):
            raise ValueError("peer_id is required exactly when vs == 'local'")

    tx_type = TxType.PCC


Transaction = Union[CidTx, GlobalModelTx, AccuracyRecordTx, PccRecordTx]


# --- canonical binary serialization (length-prefixed, big-endian) ---------


def _c_int(v: int) -> bytes:
    return b"i" + struct.pack(">q", v)


def _c_float(v: float) -> bytes:
    return b"f" + struct.pack(">d", v)


def _c_bytes(v: bytes) -> bytes:
    return b"b" + struct.pack(">I", len(v)) + v


def _c_str(v: str) -> bytes:
    raw = v.encode("utf-8")
    return b"s" + struct.pack(">I", len(raw)) + raw


def _c_seq(items: Iterable[bytes]) -> bytes:
    parts = list(items)
    return b"l" + struct.pack(">I", len(parts)) + b"".join(parts)


_DTYPE_CODES = {np.dtype(np.float32): b"\x04", np.dtype(np.float64): b"\x08"}
_CODE_DTYPES = {code[0]: dt for dt, code in _DTYPE_CODES.items()}


def encode_params(params: ParamVector) -> bytes:
    """Canonical bytes for a parameter vector; also the content-store payload."""
    dtype = np.dtype(params.values.dtype)
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported parameter dtype {dtype}")
    out = [b"PV1", _DTYPE_CODES[dtype], struct.pack(">H", len(params.shapes))]
    for s in params.shapes:
        out.append(struct.pack(">IIB", s.rows, s.cols, 1 if s.has_bias else 0))
    values = np.ascontiguousarray(params.values, dtype=dtype.newbyteorder("<"))
    out.append(struct.pack(">Q", len(params.values)))
    out.append(values.tobytes())
    return b"".join(out)


def decode_params(data: bytes) -> ParamVector:
    if data[:3] != b"PV1":
        raise ValueError("not a parameter payload")
    dtype = np.dtype(_CODE_DTYPES[data[3]])
    (n_layers,) = struct.unpack(">H", data[4:6])
    offset = 6
    shapes = []
    for _ in range(n_layers):
        rows, cols, has_bias = struct.unpack(">IIB", data[offset : offset + 9])
        shapes.append(LayerShape(rows, cols, bool(has_bias)))
        offset += 9
    (count,) = struct.unpack(">Q", data[offset : offset + 8])
    offset += 8
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise ValueError(f"parameter payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
    return ParamVector(values.astype(dtype), tuple(shapes))


def tx_canonical_bytes(tx: Transaction) -> bytes:
    if isinstance(tx, CidTx):
        return _c_seq(
            [_c_str("cid"), _c_int(tx.node_id), _c_int(tx.round_index), _c_bytes(tx.cid.digest)]
        )
    if isinstance(tx, GlobalModelTx):
        return _c_seq(
            [
                _c_str("gm"),
                _c_int(tx.round_index),
                _c_seq(_c_int(i) for i in tx.aggregator_ids),
                _c_bytes(encode_params(tx.params)),
            ]
        )
    if isinstance(tx, AccuracyRecordTx):
        return _c_seq(
            [
                _c_str("avr"),
                _c_int(tx.round_index),
                _c_int(tx.cluster_index),
                _c_seq(
                    _c_seq([_c_int(an), _c_float(acc)]) for an, acc in tx.accuracies
                ),
                _c_float(tx.mean_accuracy),
            ]
        )
    if isinstance(tx, PccRecordTx):
        return _c_seq(
            [
                _c_str("pcc"),
                _c_int(tx.round_index),
                _c_int(tx.node_id),
                _c_float(tx.rho),
                _c_str(tx.vs),
                _c_int(-1 if tx.peer_id is None else tx.peer_id),
            ]
        )
    raise TypeError(f"unknown transaction type: {type(tx)!r}")


def merkle_root(txs: Sequence[Transaction]) -> bytes:
    """Binary Merkle tree over canonical serializations; empty list -> zero root."""
    if not txs:
        return _ZERO_HASH
    level = [hashlib.sha256(tx_canonical_bytes(tx)).digest() for tx in txs]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [
            hashlib.sha256(level[i] + level[i + 1]).digest()
            for i in range(0, len(level), 2)
        ]
    return level[0]


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    tx_type: TxType
    miners: tuple[int, ...]


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]


def _header_canonical_bytes(header: BlockHeader) -> bytes:
    return _c_seq(
        [
            _c_int(header.height),
            _c_bytes(header.prev_hash),
            _c_bytes(header.merkle_root),
            _c_int(header.timestamp),
            _c_str(header.tx_type.value),
            _c_seq(_c_int(i) for i in header.miners),
        ]
    )


def header_hash(header: BlockHeader) -> bytes:
    return hashlib.sha256(_header_canonical_bytes(header)).digest()


def block_canonical_bytes(block: Block) -> bytes:
    return _header_canonical_bytes(block.header) + _c_seq(
        tx_canonical_bytes(tx) for tx in block.transactions
    )


def block_byte_size(block: Block) -> int:
    return len(block_canonical_bytes(block))


def make_block(
    txs: Sequence[Transaction],
    tx_type: TxType,
    miners: Sequence[int],
    prev: BlockHeader | None,
    timestamp: int,
) -> Block:
    """Assemble a block; ``prev=None`` builds the height-0 genesis block."""
    for tx in txs:
        if tx.tx_type is not tx_type:
            raise ValueError(
                f"mixed transaction types: {tx.tx_type.value} tx in a {tx_type.value} block"
            )
    miners = tuple(int(m) for m in miners)
    if prev is None:
        if miners:
            raise ValueError("genesis block has no miners")
        height, prev_hash = 0, _ZERO_HASH
    else:
        if not miners:
            raise ValueError("non-genesis blocks need at least one miner")
        height, prev_hash = prev.height + 1, header_hash(prev)
    header = BlockHeader(
        height=height,
        prev_hash=prev_hash,
        merkle_root=merkle_root(txs),
        timestamp=int(timestamp),
        tx_type=tx_type,
        miners=miners,
    )
    return Block(header, tuple(txs))


@dataclass(frozen=True)
class ChainViolation:
    height: int
    field: str
    detail: str


def verify_chain(blocks: Sequence[Block]) -> ChainViolation | None:
    """Check hash links, Merkle roots, heights, and per-block type homogeneity.

    Returns None for a valid chain, else the first violation found.
    """
    for i, block in enumerate(blocks):
        h = block.header
        if h.height != i:
            return ChainViolation(h.height, "height", f"expected height {i}")
        if i == 0:
            if h.prev_hash != _ZERO_HASH:
                return ChainViolation(0, "prev_hash", "genesis prev_hash must be zero")
            if h.miners:
                return ChainViolation(0, "miners", "genesis block has no miners")
        else:
            expected = header_hash(blocks[i - 1].header)
            if h.prev_hash != expected:
                return ChainViolation(h.height, "prev_hash", "broken link to previous header")
            if not h.miners:
                return ChainViolation(h.height, "miners", "missing miners")
        if h.merkle_root != merkle_root(block.transactions):
            return ChainViolation(h.height, "merkle_root", "transactions do not match root")
        for tx in block.transactions:
            if tx.tx_type is not h.tx_type:
                return ChainViolation(
                    h.height,
                    "tx_type",
                    f"{tx.tx_type.value} tx inside a {h.tx_type.value} block",
                )
    return None


@dataclass(frozen=True)
class StakeLedger:
    """Additive token balances per node id."""

    balances: dict[int, int] = field(default_factory=dict)

    @classmethod
    def fresh(cls, node_ids: Iterable[int]) -> "StakeLedger":
        return cls({int(i): 0 for i in node_ids})

    def balance(self, node_id: int) -> int:
        return self.balances.get(int(node_id), 0)

    def total(self) -> int:
        return sum(self.balances.values())


def apply_stake_rewards(
    ledger: StakeLedger,
    winning_member_ids: Sequence[int],
    aggregator_ids: Sequence[int],
) -> StakeLedger:
    """Credit winning trainers and the round's aggregators; everyone else unchanged."""
    balances = dict(ledger.balances)
    for node_id in winning_member_ids:
        balances[int(node_id)] = balances.get(int(node_id), 0) + FIXED_STAKE_REWARD
    for node_id in aggregator_ids:
        balances[int(node_id)] = balances.get(int(node_id), 0) + AGGREGATOR_REWARD
    return replace(ledger, balances=balances)


@dataclass
class NodeBlockStore:
    """Per-node persistence counters; blocks themselves live on the shared chain."""

    node_id: int
    store_optional: bool = False
    blocks_stored: int = 0
    bytes_stored: int = 0


def persist_block(store: NodeBlockStore, block: Block, role: Role) -> bool:
    """Apply the role's persistence policy; returns whether the block was kept.

    Blockchain-only nodes keep everything; the round's aggregators keep all
    four block types; trainers keep global-model blocks only, unless the
    store opts into the optional types.
    """
    keep = (
        role is Role.BLOCKCHAIN
        or role is Role.AGGREGATOR
        or block.header.tx_type is TxType.GM
        or store.store_optional
    )
    if keep:
        store.blocks_stored += 1
        store.bytes_stored += block_byte_size(block)
    return keep


# --- JSON-lines chain export ----------------------------------------------


def _params_to_json(params: ParamVector) -> dict:
    dtype = np.dtype(params.values.dtype)
    code = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}[dtype]
    raw = np.ascontiguousarray(params.values, dtype=dtype.newbyteorder("<")).tobytes()
    return {
        "dtype": code,
        "shapes": [[s.rows, s.cols, 1 if s.has_bias else 0] for s in params.shapes],
        "data_b64": base64.b64encode(raw).decode("ascii"),
    }


def _params_from_json(obj: dict) -> ParamVector:
    dtype = np.dtype({"f4": np.float32, "f8": np.float64}[obj["dtype"]])
    encoded = obj["data_b64"].encode("ascii")
    raw = base64.b64decode(encoded, validate=True)
    if base64.b64encode(raw) != encoded:
        # non-canonical base64 (e.g. flipped padding bits) must not slip through
        raise ValueError("non-canonical base64 parameter payload")
    values = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    shapes = tuple(LayerShape(r, c, bool(b)) for r, c, b in obj["shapes"])
    return ParamVector(values, shapes)


def _tx_to_json(tx: Transaction) -> dict:
    if isinstance(tx, CidTx):
        return {"kind": "cid", "node_id": tx.node_id, "round": tx.round_index, "cid": tx.cid.hex}
    if isinstance(tx, GlobalModelTx):
        return {
            "kind": "gm",
            "round": tx.round_index,
            "aggregator_ids": list(tx.aggregator_ids),
            "params": _params_to_json(tx.params),
        }
    if isinstance(tx, AccuracyRecordTx):
        return {
            "kind": "avr",
            "round": tx.round_index,
            "cluster_index": tx.cluster_index,
            "accuracies": [[an, acc] for an, acc in tx.accuracies],
            "mean_accuracy": tx.mean_accuracy,
        }
    if isinstance(tx, PccRecordTx):
        return {
            "kind": "pcc",
            "round": tx.round_index,
            "node_id": tx.node_id,
            "rho": tx.rho,
            "vs": tx.vs,
            "peer_id": tx.peer_id,
        }
    raise TypeError(f"unknown transaction type: {type(tx)!r}")


def _tx_from_json(obj: dict) -> Transaction:
    kind = obj["kind"]
    if kind == "cid":
        return CidTx(obj["node_id"], obj["round"], Cid(bytes.fromhex(obj["cid"])))
    if kind == "gm":
        return GlobalModelTx(
            obj["round"], tuple(obj["aggregator_ids"]), _params_from_json(obj["params"])
        )
    if kind == "avr":
        return AccuracyRecordTx(
            obj["round"],
            obj["cluster_index"],
            tuple((int(an), float(acc)) for an, acc in obj["accuracies"]),
            obj["mean_accuracy"],
        )
    if kind == "pcc":
        return PccRecordTx(obj["round"], obj["node_id"], obj["rho"], obj["vs"], obj["peer_id"])
    raise ValueError(f"unknown transaction kind: {kind!r}")


def block_to_json(block: Block) -> dict:
    h = block.header
    return {
        "height": h.height,
        "type": h.tx_type.value,
        "timestamp": h.timestamp,
        "prev_hash": h.prev_hash.hex(),
        "merkle_root": h.merkle_root.hex(),
        "miners": list(h.miners),
        "hash": header_hash(h).hex(),
        "txs": [_tx_to_json(tx) for tx in block.transactions],
    }


def block_from_json(obj: dict) -> tuple[Block, bytes]:
    """Rebuild a block from its JSON form; returns (block, claimed header hash)."""
    header = BlockHeader(
        height=int(obj["height"]),
        prev_hash=bytes.fromhex(obj["prev_hash"]),
        merkle_root=bytes.fromhex(obj["merkle_root"]),
        timestamp=int(obj["timestamp"]),
        tx_type=TxType(obj["type"]),
        miners=tuple(int(m) for m in obj["miners"]),
    )
    txs = tuple(_tx_from_json(t) for t in obj["txs"])
    return Block(header, txs), bytes.fromhex(obj["hash"])


def write_chain_jsonl(blocks: Sequence[Block], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for block in blocks:
            fh.write(json.dumps(block_to_json(block), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def verify_chain_file(path: Path | str) -> ChainViolation | None:
    """Decode a JSON-lines chain export and verify it, including claimed hashes."""
    blocks: list[Block] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh):
            if not raw.strip():
                continue
            try:
                block, claimed = block_from_json(json.loads(raw.decode("utf-8")))
            except Exception as exc:  # any undecodable line is a detected corruption
                return ChainViolation(lineno, "decode", f"line {lineno}: {exc}")
            if claimed != header_hash(block.header):
                return ChainViolation(
                    block.header.height, "hash", "claimed header hash does not match"
                )
            blocks.append(block)
    return verify_chain(blocks)
