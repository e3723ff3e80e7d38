"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"JKDCKPT\\0"  u32 version
    u64 header length, UTF-8 JSON header (run config echo, model structure,
        optimizer scalars, RNG states)
    u32 record count, then per record:
        u32 name length, UTF-8 name
        u32 ndim, ndim x u64 extents
        float64 LE payload

Record names are ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
The header is dumped with sorted keys, so a load followed by a save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import distill as D
from .encoder import Encoder, EncoderConfig
from .tensor import Tensor

MAGIC = b"JKDCKPT\0"
VERSION = 1


class CheckpointError(IOError):
    pass


def _encoder_params(enc):
    return [] if enc is None else list(enc.params.values())


def _model_tensors(trainer):
    pair = trainer.pair
    tensors = _encoder_params(pair.teacher) + _encoder_params(pair.student)
    if pair.student is None and trainer.full_pair is not None:
        tensors += _encoder_params(trainer.full_pair.student)
    tensors += list(pair.heads.values())
    if pair.student_heads is not None:
        tensors += list(pair.student_heads.values())
    return tensors


def _rng_state(gen):
    return gen.bit_generator.state


def _restore_rng(state):
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def encode_checkpoint(trainer, config=None):
    pair = trainer.pair
    student = pair.student or (trainer.full_pair.student if trainer.full_pair else None)
    header = {
        "config": config or {},
        "meta": {
            "task": trainer.task,
            "mode": trainer.mode,
            "phase": trainer.phase,
            "step": trainer.step,
            "epoch": trainer.epoch,
            "K": pair.K,
            "teacher": asdict(pair.teacher.config) if pair.teacher else None,
            "student": asdict(student.config) if student else None,
            "student_attached": pair.student is not None,
            "frozen": sorted(pair.frozen),
            "distill": asdict(trainer.cfg),
            "settings": asdict(trainer.settings),
        },
        "optimizer": {"lr": trainer.opt.lr, "beta1": trainer.opt.beta1, "beta2": trainer.opt.beta2,
                      "eps": trainer.opt.eps, "t": trainer.opt.t},
        "rng": {k: _rng_state(g) for k, g in sorted(trainer.rng.items())},
    }
    records = [("param/" + t.name, t.data) for t in _model_tensors(trainer)]
    for name in sorted(trainer.opt.m):
        records.append(("adam.m/" + name, trainer.opt.m[name]))
        records.append(("adam.v/" + name, trainer.opt.v[name]))

    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<Q", len(hjson)) + hjson
    out += struct.pack("<I", len(records))
    for name, arr in records:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def save_checkpoint(path, trainer, config=None):
    Path(path).write_bytes(encode_checkpoint(trainer, config))


def read_checkpoint(path):
    """-> (header dict, {record name: ndarray})."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        (hlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        records = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (nd,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{nd}Q", buf, pos)
            pos += 8 * nd
            count = int(np.prod(shape)) if nd else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
            records[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    return header, records


def _group(params, prefix, strip=True):
    out = {}
    for name, arr in params.items():
        if name.startswith(prefix):
            key = name[len(prefix):] if strip else name
            out[key] = Tensor(arr.copy(), requires_grad=True, name=name)
    return out


def load_checkpoint(path):
    """Rebuild the :class:`~jointkd.train.Trainer` stored in ``path``; returns (trainer, header)."""
    from .train import Trainer, TrainSettings  # deferred: train imports this module

    header, records = read_checkpoint(path)
    meta = header["meta"]
    params = {k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")}
    teacher = student = None
    if meta["teacher"]:
        teacher = Encoder(EncoderConfig(**meta["teacher"]), _group(params, "teacher."))
    if meta["student"]:
        student = Encoder(EncoderConfig(**meta["student"]), _group(params, "student."))
    heads = {k: v for k, v in _group(params, "", strip=False).items()
             if not (k.startswith("teacher.") or k.startswith("student.") or k.startswith("student_heads."))}
    s_heads = {k[len("student_heads."):]: v for k, v in _group(params, "student_heads.", strip=False).items()}
    for k, v in s_heads.items():
        v.name = "student_heads." + k
    pair = D.ModelPair(teacher, student if meta["student_attached"] else None, heads, meta["K"],
                       student_heads=s_heads or None, frozen=set(meta["frozen"]))
    full = None
    if student is not None and not meta["student_attached"]:
        full = D.ModelPair(teacher, student, heads, meta["K"])

    o = header["optimizer"]
    opt = D.Adam(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
    opt.t = o["t"]
    for k, v in records.items():
        if k.startswith("adam.m/"):
            opt.m[k[len("adam.m/"):]] = v.copy()
        elif k.startswith("adam.v/"):
            opt.v[k[len("adam.v/"):]] = v.copy()
    trainer = Trainer(
        meta["task"], pair, D.DistillConfig(**meta["distill"]), TrainSettings(**meta["settings"]),
        mode=meta["mode"], step=meta["step"], epoch=meta["epoch"], phase=meta["phase"],
        rng={k: _restore_rng(s) for k, s in header["rng"].items()}, opt=opt, full_pair=full)
    return trainer, header
