"""Offline datasets of (s, a, r, s') tuples: sampling, splitting, persistence.

Binary layout (all little-endian):

    header   magic "BCRLDS\\0\\0", u32 version, u64 n, u32 S, u32 A,
             i64 source seed, f64 gamma, 32-byte MDP checksum (raw sha256),
             u8 has_source_dist
    nu       S*A float64 weights, present only when has_source_dist is 1
    records  n packed records of (u4 s, u4 a, f8 r, u4 s', u8 source index)

A plain-text sidecar ``<file>.meta`` repeats the header fields as key=value
lines for humans; the loader cross-checks it when present.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from models.mdp import FiniteMdp, StateActionDist
from utils.exceptions import (
    DatasetFormatError,
    DatasetValidationError,
    InvalidDimensionError,
    ShapeMismatchError,
)
from utils.seeding import Stream, make_rng

logger = logging.getLogger(__name__)

MAGIC = b"BCRLDS\x00\x00"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIQIIqd32sB")
RECORD = np.dtype([("s", "<u4"), ("a", "<u4"), ("r", "<f8"), ("next", "<u4"), ("index", "<u8")])


def _frozen_int(values) -> np.ndarray:
    out = np.array(values, dtype=np.int64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    num_states: int
    num_actions: int
    gamma: float
    source_seed: int
    mdp_checksum: str = ""
    source_dist: Optional[StateActionDist] = None
    indices: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.next_states) == n):
            raise ShapeMismatchError("dataset columns have different lengths")
        object.__setattr__(self, "states", _frozen_int(self.states))
        object.__setattr__(self, "actions", _frozen_int(self.actions))
        object.__setattr__(self, "next_states", _frozen_int(self.next_states))
        rewards = np.array(self.rewards, dtype=np.float64, copy=True)
        rewards.setflags(write=False)
        object.__setattr__(self, "rewards", rewards)
        indices = np.arange(n) if self.indices is None else self.indices
        object.__setattr__(self, "indices", _frozen_int(indices))

        if n and (self.states.min() < 0 or self.states.max() >= self.num_states
                  or self.next_states.min() < 0 or self.next_states.max() >= self.num_states):
            raise DatasetValidationError("dataset contains out-of-range state indices")
        if n and (self.actions.min() < 0 or self.actions.max() >= self.num_actions):
            raise DatasetValidationError("dataset contains out-of-range action indices")

    def __len__(self) -> int:
        return len(self.states)

    def tuples(self) -> List[Tuple[int, int, float, int]]:
        return [
            (int(s), int(a), float(r), int(sp))
            for s, a, r, sp in zip(self.states, self.actions, self.rewards, self.next_states)
        ]

    def subset(self, positions: np.ndarray) -> "OfflineDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return OfflineDataset(
            states=self.states[positions],
            actions=self.actions[positions],
            rewards=self.rewards[positions],
            next_states=self.next_states[positions],
            num_states=self.num_states,
            num_actions=self.num_actions,
            gamma=self.gamma,
            source_seed=self.source_seed,
            mdp_checksum=self.mdp_checksum,
            source_dist=self.source_dist,
            indices=self.indices[positions],
        )


def sample_offline_dataset(mdp: FiniteMdp, nu: StateActionDist, n: int, seed: int) -> OfflineDataset:
    """Draw n i.i.d. tuples with (s, a) ~ nu, r = r(s, a), s' ~ P(.|s, a)."""
    if n < 1:
        raise InvalidDimensionError(f"dataset size must be positive, got {n}")
    if nu.shape != (mdp.num_states, mdp.num_actions):
        raise ShapeMismatchError(f"nu has shape {nu.shape}, MDP has {(mdp.num_states, mdp.num_actions)}")

    rng = make_rng(seed, Stream.DATASET)
    pairs = rng.choice(mdp.num_pairs, size=n, p=nu.flat)
    states, actions = np.divmod(pairs, mdp.num_actions)

    # inverse CDF; point-mass rows map every draw to their single successor
    cdf = np.cumsum(mdp.transition[states, actions], axis=1)
    cdf /= cdf[:, -1:]
    draws = rng.random(n)
    next_states = np.minimum((cdf <= draws[:, None]).sum(axis=1), mdp.num_states - 1)

    logger.debug("sampled %d tuples with seed %d", n, seed)
    return OfflineDataset(
        states=states,
        actions=actions,
        rewards=mdp.reward[states, actions],
        next_states=next_states,
        num_states=mdp.num_states,
        num_actions=mdp.num_actions,
        gamma=mdp.gamma,
        source_seed=seed,
        mdp_checksum=mdp.checksum(),
        source_dist=nu,
    )


def split_dataset(data: OfflineDataset, seed: int) -> Tuple[OfflineDataset, OfflineDataset]:
    """Random disjoint halves D1, D2; each keeps its source indices."""
    if len(data) < 2:
        raise InvalidDimensionError("need at least two tuples to split")
    order = make_rng(seed, Stream.SPLIT).permutation(len(data))
    half = len(data) // 2
    return data.subset(np.sort(order[:half])), data.subset(np.sort(order[half:]))


def validate_dataset(data: OfflineDataset, mdp: FiniteMdp) -> None:
    if (data.num_states, data.num_actions) != (mdp.num_states, mdp.num_actions):
        raise DatasetValidationError("dataset and MDP disagree on the state-action space")
    if data.mdp_checksum and data.mdp_checksum != mdp.checksum():
        raise DatasetValidationError("dataset was generated from a different MDP (checksum mismatch)")
    expected = mdp.reward[data.states, data.actions]
    bad = np.flatnonzero(expected != data.rewards)
    if bad.size:
        raise DatasetValidationError(
            f"{bad.size} rewards disagree with the MDP, first at record {int(bad[0])}"
        )


def _meta_lines(data: OfflineDataset) -> List[str]:
    return [
        f"format_version={FORMAT_VERSION}",
        f"n={len(data)}",
        f"num_states={data.num_states}",
        f"num_actions={data.num_actions}",
        f"source_seed={data.source_seed}",
        f"gamma={data.gamma!r}",
        f"mdp_checksum={data.mdp_checksum}",
        f"has_source_dist={int(data.source_dist is not None)}",
    ]


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def save_dataset(data: OfflineDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checksum = bytes.fromhex(data.mdp_checksum) if data.mdp_checksum else bytes(32)
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, len(data), data.num_states, data.num_actions,
        data.source_seed, data.gamma, checksum, int(data.source_dist is not None),
    )
    records = np.empty(len(data), dtype=RECORD)
    records["s"] = data.states
    records["a"] = data.actions
    records["r"] = data.rewards
    records["next"] = data.next_states
    records["index"] = data.indices

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        if data.source_dist is not None:
            f.write(data.source_dist.flat.astype("<f8").tobytes())
        f.write(records.tobytes())
    tmp.replace(path)

    meta_tmp = meta_path(path).with_name(meta_path(path).name + ".tmp")
    meta_tmp.write_text("\n".join(_meta_lines(data)) + "\n")
    meta_tmp.replace(meta_path(path))
    return path


def _read_meta(path: Path) -> dict:
    entries = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def load_dataset(path: Union[str, Path], mdp: Optional[FiniteMdp] = None) -> OfflineDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFormatError(f"{path}: file is shorter than the header")
    magic, version, n, num_states, num_actions, seed, gamma, checksum, has_dist = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")

    offset = HEADER.size
    dist_bytes = 8 * num_states * num_actions if has_dist else 0
    expected_size = offset + dist_bytes + n * RECORD.itemsize
    if len(raw) != expected_size:
        raise DatasetFormatError(f"{path}: expected {expected_size} bytes, found {len(raw)} (truncated or padded)")

    source_dist = None
    if has_dist:
        weights = np.frombuffer(raw, dtype="<f8", count=num_states * num_actions, offset=offset)
        source_dist = StateActionDist(weights.reshape(num_states, num_actions))
        offset += dist_bytes
    records = np.frombuffer(raw, dtype=RECORD, count=n, offset=offset)

    checksum_hex = checksum.hex() if any(checksum) else ""
    sidecar = meta_path(path)
    if sidecar.exists():
        meta = _read_meta(sidecar)
        if meta.get("n") != str(n) or meta.get("mdp_checksum", "") != checksum_hex:
            raise DatasetFormatError(f"{sidecar}: metadata does not match the binary header")

    data = OfflineDataset(
        states=records["s"],
        actions=records["a"],
        rewards=records["r"],
        next_states=records["next"],
        num_states=num_states,
        num_actions=num_actions,
        gamma=gamma,
        source_seed=seed,
        mdp_checksum=checksum_hex,
        source_dist=source_dist,
        indices=records["index"],
    )
    if mdp is not None:
        validate_dataset(data, mdp)
    return data


def batch_schedule(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless minibatch positions: without replacement within an epoch, reshuffled per epoch."""
    if n < 1 or batch_size < 1:
        raise InvalidDimensionError("batch schedule needs a nonempty dataset and a positive batch size")
    rng = make_rng(seed, Stream.BATCH)
    per_epoch = max(1, n // batch_size)
    while True:
        order = rng.permutation(n)
        for b in range(per_epoch):
            yield np.sort(order[b * batch_size:(b + 1) * batch_size])
