"""Checkpoint directories: a JSON manifest plus one raw little-endian file per tensor.

A directory holds ``manifest.json``, ``<tensor>.bin`` files, and optionally
``vocab.tsv`` (base checkpoints) and ``adapters/<name>/`` sub-checkpoints in
the same layout.
"""

import hashlib
import json
import logging
import pathlib
import shutil
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import numpy
import torch

from llmgpr.dumper import write_records
from llmgpr.errors import DataError, UsageError
from llmgpr.model import BaseModel, ModelConfig
from llmgpr.qlora import Adapter, AdapterSet
from llmgpr.vocab import Vocabulary

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

MANIFEST = "manifest.json"
VOCAB = "vocab.tsv"
SCHEME_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}  # type: Dict[torch.dtype, str]
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    """Tensors, metadata, and adapter sets read from a checkpoint directory."""

    path: pathlib.Path
    meta: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    adapters: Dict[str, AdapterSet] = field(default_factory=dict)

    def tensor(self, name: str) -> torch.Tensor:
        """Return a tensor; a missing one is a usage error naming the checkpoint."""
        try:
            return self.tensors[name]
        except KeyError:
            raise UsageError(
                "checkpoint {} has no tensor {}".format(self.path, name)
            ) from None

    def adapter_set(self, name: str) -> AdapterSet:
        """Return an adapter set; a missing one is a usage error."""
        try:
            return self.adapters[name]
        except KeyError:
            raise UsageError(
                "checkpoint {} has no {} adapters".format(self.path, name)
            ) from None


def tensor_checksum(
    tensors: Union[Mapping[str, torch.Tensor], torch.nn.Module]
) -> str:
    """Return a sha256 over names, shapes, dtypes, and bytes of tensors."""
    if isinstance(tensors, torch.nn.Module):
        tensors = tensors.state_dict()
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(str(t.dtype).encode("utf-8"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _write_tensors(
    directory: pathlib.Path, tensors: Mapping[str, torch.Tensor]
) -> Dict[str, Any]:
    index = {}  # type: Dict[str, Any]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise UsageError("cannot store tensor {} of {}".format(name, t.dtype))
        dtype = _DTYPES[t.dtype]
        filename = name + ".bin"
        t.numpy().astype(numpy.dtype(dtype)).tofile(str(directory / filename))
        index[name] = {"file": filename, "dtype": dtype, "shape": list(t.shape)}
    return index


def _read_tensors(
    directory: pathlib.Path, index: Mapping[str, Any]
) -> Dict[str, torch.Tensor]:
    tensors = {}  # type: Dict[str, torch.Tensor]
    for name, entry in index.items():
        path = directory / entry["file"]
        if not path.is_file():
            raise DataError("missing tensor file", [str(path)])
        arr = numpy.fromfile(str(path), dtype=numpy.dtype(entry["dtype"]))
        shape = tuple(entry["shape"])
        if arr.size != int(numpy.prod(shape, dtype=numpy.int64)):
            raise DataError("tensor file has a wrong size", [str(path)])
        native = arr.astype(arr.dtype.newbyteorder("=")).reshape(shape)
        tensors[name] = torch.from_numpy(native.copy())
    return tensors


def save_checkpoint(
    directory: PathLike,
    tensors: Mapping[str, torch.Tensor],
    meta: Optional[Mapping[str, Any]] = None,
    adapters: Iterable[AdapterSet] = (),
    vocab: Optional[Vocabulary] = None,
) -> pathlib.Path:
    """Write a checkpoint directory, replacing any previous one at once.

    The content is first written next to the target and then moved into
    place, so an interrupted write leaves the previous checkpoint intact.
    """
    target = pathlib.Path(directory)
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(str(tmp))
    tmp.mkdir(parents=True)
    manifest = {
        "format": {"type": "llmgpr-checkpoint", "scheme": SCHEME_VERSION},
        "meta": dict(meta or {}),
        "tensors": _write_tensors(tmp, tensors),
        "adapters": [],
    }  # type: Dict[str, Any]
    for adapter_set in adapters:
        sub = tmp / "adapters" / adapter_set.name
        sub.mkdir(parents=True)
        (sub / MANIFEST).write_text(
            json.dumps(
                {
                    "format": {"type": "llmgpr-adapters", "scheme": SCHEME_VERSION},
                    "name": adapter_set.name,
                    "tensors": _write_tensors(sub, adapter_set.state_dict()),
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        manifest["adapters"].append(adapter_set.name)
    if vocab is not None:
        write_records(tmp / VOCAB, vocab.records())
    (tmp / MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if target.exists():
        shutil.rmtree(str(target))
    tmp.rename(target)
    logger.info("Checkpoint written: %s", target)
    return target


def _read_manifest(directory: pathlib.Path) -> Dict[str, Any]:
    path = directory / MANIFEST
    if not path.is_file():
        raise UsageError("no checkpoint at {}".format(directory))
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise DataError("unreadable manifest", [str(path)]) from e
    if manifest.get("format", {}).get("scheme") != SCHEME_VERSION:
        raise DataError("unsupported checkpoint scheme", [str(path)])
    return dict(manifest)


def _adapter_set_from(name: str, tensors: Mapping[str, torch.Tensor]) -> AdapterSet:
    pairs = {}  # type: Dict[str, Dict[str, torch.Tensor]]
    for key, t in tensors.items():
        prefix, _, leaf = key.rpartition(".")
        pairs.setdefault(prefix, {})[leaf] = t
    adapters = {}  # type: Dict[str, Adapter]
    for prefix, ab in pairs.items():
        if set(ab) != {"A", "B"}:
            raise DataError("incomplete adapter", [prefix])
        d_out, r = ab["A"].shape
        adapter = Adapter(int(d_out), int(ab["B"].shape[1]), int(r))
        adapter.load_state_dict(ab)
        path = prefix[len("adapters.") :].replace("__", ".")
        adapters[path] = adapter
    return AdapterSet(name, adapters)


def load_checkpoint(directory: PathLike) -> Checkpoint:
    """Read a checkpoint directory written by `save_checkpoint`."""
    d = pathlib.Path(directory)
    manifest = _read_manifest(d)
    tensors = _read_tensors(d, manifest["tensors"])
    ckpt = Checkpoint(d, manifest.get("meta", {}), tensors)
    for name in manifest.get("adapters", []):
        sub = d / "adapters" / name
        sub_manifest = _read_manifest(sub)
        ckpt.adapters[name] = _adapter_set_from(
            name, _read_tensors(sub, sub_manifest["tensors"])
        )
    return ckpt


def save_base(directory: PathLike, base: BaseModel) -> pathlib.Path:
    """Write a frozen base model with its configuration and vocabulary."""
    if not base.frozen:
        raise UsageError("only a frozen base model can be saved")
    meta = {
        "kind": "base",
        "model": asdict(base.config),
        "bits": base.bits,
        "complete": True,
    }
    return save_checkpoint(directory, base.state_dict(), meta, vocab=base.vocab)


def load_base(directory: PathLike) -> BaseModel:
    """Read a frozen base model written by `save_base`."""
    ckpt = load_checkpoint(directory)
    if ckpt.meta.get("kind") != "base":
        raise DataError("not a base-model checkpoint", [str(directory)])
    vocab = Vocabulary.read(ckpt.path / VOCAB)
    base = BaseModel(ModelConfig(**ckpt.meta["model"]), vocab)
    base.frozen_structure(int(ckpt.meta["bits"]))
    base.load_state_dict(ckpt.tensors)
    return base
