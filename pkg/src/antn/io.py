"""File formats: binary PPM/PGM, the ANTN1 checkpoint, key=value run configs."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .datagen import SynthConfig
from .errors import ConfigError, DataError
from .segnets import (
    HEAD_CLEAN,
    HEAD_REMAINDER,
    HEAD_SOFTMAX,
    CleanNet,
    MiniUNet,
    MiniUNetSpec,
    TransitionNet,
)
from .trainer import ModelCheckpoint, NtnTransitionLayer, TrainConfig

PathLike = Union[str, Path]

# -- netpbm ------------------------------------------------------------------


def _parse_header(data: bytes, path: PathLike, magic: bytes) -> Tuple[int, int, int, int]:
    """Return ``(width, height, maxval, data_offset)`` of a binary netpbm file."""
    if data[:2] != magic:
        raise DataError(f"{path}: offset 0: expected magic {magic.decode()}, got {data[:2]!r}")
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: offset {pos}: header truncated")
        ch = data[pos : pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise DataError(f"{path}: offset {pos}: unterminated comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            values.append(int(data[start:pos]))
        else:
            raise DataError(f"{path}: offset {pos}: unexpected byte {ch!r} in header")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DataError(f"{path}: offset {pos}: missing whitespace after header")
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} not supported (only 8-bit, maxval 255)")
    return width, height, maxval, pos + 1


def _payload(data: bytes, offset: int, count: int, path: PathLike) -> np.ndarray:
    if len(data) - offset < count:
        raise DataError(f"{path}: offset {len(data)}: pixel data truncated ({len(data) - offset} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)


def read_ppm(path: PathLike) -> np.ndarray:
    """Binary P6 image as an H x W x 3 float array in [0, 1]."""
    data = Path(path).read_bytes()
    w, h, _, off = _parse_header(data, path, b"P6")
    return _payload(data, off, w * h * 3, path).reshape(h, w, 3) / 255.0


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an H x W x 3 image, got {image.shape}")
    raw = np.clip(np.rint(255.0 * image), 0, 255).astype(np.uint8)
    h, w, _ = raw.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes())


def read_pgm(path: PathLike, num_classes: Optional[int] = None) -> np.ndarray:
    """Binary P5 map; with ``num_classes`` the grey levels are validated as class indices."""
    data = Path(path).read_bytes()
    w, h, _, off = _parse_header(data, path, b"P5")
    raw = _payload(data, off, w * h, path)
    if num_classes is not None:
        bad = np.flatnonzero(raw >= num_classes)
        if bad.size:
            raise DataError(
                f"{path}: offset {off + int(bad[0])}: label {int(raw[bad[0]])} outside 0..{num_classes - 1}"
            )
    return raw.reshape(h, w).astype(np.int64)


def write_pgm(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"PGM needs a 2-d map, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise DataError("PGM grey levels must lie in 0..255")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


# -- checkpoints -------------------------------------------------------------

MAGIC = b"ANTN1"
VERSION = 1
_HEAD_CODES = {HEAD_CLEAN: 0, HEAD_SOFTMAX: 1, HEAD_REMAINDER: 2, "ntn": 3}
_CODE_HEADS = {v: k for k, v in _HEAD_CODES.items()}
_ROLE_ORDER = ("clean", "trans1", "trans2", "ntn")


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    """Serialise: magic, u16 version, u16 count, then per network
    ``u16 C, u16 F, u8 head kind, u64 n, n little-endian float64``."""
    roles = [r for r in _ROLE_ORDER if r in ckpt.nets]
    out = [MAGIC, struct.pack("<HH", VERSION, len(roles))]
    for role in roles:
        net = ckpt.nets[role]
        if isinstance(net, NtnTransitionLayer):
            kind, f = "ntn", 0
        else:
            kind, f = net.head_kind, net.spec.base_filters
        flat = net.params.flat().astype("<f8")
        out.append(struct.pack("<HHBQ", ckpt.spec.num_classes, f, _HEAD_CODES[kind], flat.size))
        out.append(flat.tobytes())
    return b"".join(out)


def save_checkpoint(path: PathLike, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _read(data: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(data):
        raise TruncatedError(f"checkpoint truncated at byte {len(data)} while reading {what}")
    return data[pos : pos + n]


def checkpoint_from_bytes(data: bytes, num_classes: Optional[int] = None) -> ModelCheckpoint:
    if data[: len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedError("checkpoint truncated inside the magic")
        raise BadMagicError(f"not an ANTN checkpoint (magic {data[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    version, count = struct.unpack("<HH", _read(data, pos, 4, "header"))
    pos += 4
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} not supported (expected {VERSION})")
    entries = []
    for i in range(count):
        c, f, code, n = struct.unpack("<HHBQ", _read(data, pos, 13, f"network {i} descriptor"))
        pos += 13
        if code not in _CODE_HEADS:
            raise CheckpointError(f"network {i}: unknown head kind {code}")
        values = np.frombuffer(_read(data, pos, 8 * n, f"network {i} parameters"), dtype="<f8").astype(np.float64)
        pos += 8 * n
        entries.append((c, f, _CODE_HEADS[code], values))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last network")
    if not entries or entries[0][2] != HEAD_CLEAN:
        raise CheckpointError("first network must be the clean-label network")
    c = entries[0][0]
    if num_classes is not None and c != num_classes:
        raise ShapeMismatchError(f"checkpoint has {c} classes, run expects {num_classes}")
    spec = MiniUNetSpec(base_filters=entries[0][1], num_classes=c)
    nets: Dict[str, object] = {}
    trans_roles = iter(("trans1", "trans2"))
    readout = "row-softmax"
    for ci, f, kind, values in entries:
        if ci != c:
            raise ShapeMismatchError("networks disagree on the number of classes")
        if kind == "ntn":
            net = NtnTransitionLayer(c)
            role = "ntn"
        elif kind == HEAD_CLEAN:
            net = CleanNet(MiniUNetSpec(base_filters=f, num_classes=c))
            role = "clean"
        else:
            readout = "row-softmax" if kind == HEAD_SOFTMAX else "uniform-remainder"
            net = TransitionNet(MiniUNetSpec(base_filters=f, num_classes=c), readout)
            role = next(trans_roles, None)
            if role is None:
                raise CheckpointError("more than two transition networks")
        if values.size != net.params.size:
            raise ShapeMismatchError(
                f"{role}: {values.size} parameters stored, architecture needs {net.params.size}"
            )
        net.params.load_flat(values)
        nets[role] = net
    if "trans1" in nets:
        method = "antn"
    elif "ntn" in nets:
        method = "ntn"
    else:
        method = "unet"
    return ModelCheckpoint(method, spec, nets, readout)


def load_checkpoint(path: PathLike, num_classes: Optional[int] = None) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), num_classes)


# -- run configuration -------------------------------------------------------


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults() -> Dict[str, object]:
    out: Dict[str, object] = {}
    for cls in (SynthConfig, TrainConfig):
        inst = cls()
        for f in fields(cls):
            out.setdefault(f.name, getattr(inst, f.name))
    return out


CONFIG_KEYS = tuple(_defaults())


@dataclass
class RunConfig:
    """Flat ``key=value`` settings covering :class:`TrainConfig` and :class:`SynthConfig`.

    ``seed`` is shared by both. Only keys set explicitly are stored; the rest
    take dataclass defaults when converted.
    """

    values: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        defaults = _defaults()
        values: Dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(value, defaults[key], key)
        return cls(values)

    @classmethod
    def load(cls, path: PathLike) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def serialize(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.values.items()))

    def _build(self, cls, **extra):
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in self.values.items() if k in names}
        kwargs.update(extra)
        return cls(**kwargs)

    def train_config(self, **extra) -> TrainConfig:
        return self._build(TrainConfig, **extra)

    def synth_config(self, **extra) -> SynthConfig:
        return self._build(SynthConfig, **extra)


def config_from(obj) -> RunConfig:
    return RunConfig(dict(asdict(obj)))
