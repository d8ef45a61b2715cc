"""Reading and writing tensors, linked sets and models."""

import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from config import settings

from ..cp_model import MultifacModel
from ..exceptions import InputFileError
from ..tensor import LinkedTensorSet
from .models import LinkedManifest, ModelDocument, PreprocessingRecord, TensorManifest

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)
PathLike = Union[str, Path]

_PAYLOAD_DTYPE = np.dtype("<f8")


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "document"
    return f"field '{field}': {first['msg']}"


def read_document(path: PathLike, schema: Type[M]) -> M:
    """Parse a JSON file into ``schema`` with file/line/field diagnostics."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputFileError(str(path), "file not found") from None
    except json.JSONDecodeError as error:
        raise InputFileError(
            str(path), f"line {error.lineno}, column {error.colno}: {error.msg}"
        ) from None
    try:
        return schema.model_validate(raw)
    except ValidationError as error:
        raise InputFileError(str(path), _describe(error)) from None


def write_document(path: PathLike, document: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=2) + "\n")
    return path


def _check_values(path: Path, values: np.ndarray) -> None:
    bad = np.flatnonzero(np.isinf(values))
    if bad.size:
        raise InputFileError(
            str(path),
            f"element {int(bad[0])} is {values[bad[0]]}; only NaN may mark "
            "missing entries",
        )


def read_long_csv(path: PathLike) -> np.ndarray:
    """Tensor from ``i1,...,iN,value`` rows (1-based); absent rows are missing."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputFileError(str(path), str(e)) from None
    index_columns = [c for c in frame.columns if c != "value"]
    expected = [f"i{n + 1}" for n in range(len(index_columns))]
    if "value" not in frame.columns or index_columns != expected or not expected:
        raise InputFileError(
            str(path),
            f"columns must be {', '.join(expected or ['i1'])}, value; "
            f"got {', '.join(frame.columns)}",
        )
    indices = frame[index_columns].to_numpy()
    if not np.issubdtype(indices.dtype, np.integer) or (indices < 1).any():
        raise InputFileError(str(path), "index columns must hold integers >= 1")
    duplicated = frame.duplicated(subset=index_columns)
    if duplicated.any():
        line = int(np.flatnonzero(duplicated.to_numpy())[0]) + 2
        raise InputFileError(str(path), f"line {line}: duplicate index")
    values = frame["value"].to_numpy(dtype=float)
    _check_values(path, values)
    shape = tuple(int(m) for m in indices.max(axis=0))
    tensor = np.full(shape, np.nan)
    tensor[tuple((indices - 1).T)] = values
    return tensor


def read_tensor(path: PathLike) -> np.ndarray:
    """Tensor with NaN in missing entries, from a manifest or long CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_long_csv(path)
    manifest = read_document(path, TensorManifest)
    if manifest.data is not None:
        values = np.array(
            [np.nan if v is None else v for v in manifest.data], dtype=float
        )
    else:
        payload = path.parent / str(manifest.data_file)
        if not payload.exists():
            raise InputFileError(str(path), f"data_file {payload} not found")
        values = np.fromfile(payload, dtype=_PAYLOAD_DTYPE).astype(float)
    if values.size != manifest.n_elements:
        raise InputFileError(
            str(path),
            f"shape {manifest.shape} declares {manifest.n_elements} elements, "
            f"payload holds {values.size}",
        )
    _check_values(path, values)
    return values.reshape(tuple(manifest.shape))


def write_tensor(path: PathLike, values: np.ndarray, inline: bool = False) -> Path:
    """Manifest plus a ``.f64`` sidecar (or inline values); NaN stays NaN."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(values, dtype=float)
    if inline:
        flat = [None if np.isnan(v) else float(v) for v in values.ravel()]
        manifest = TensorManifest(shape=list(values.shape), data=flat)
    else:
        payload = path.with_suffix(".f64")
        values.astype(_PAYLOAD_DTYPE).tofile(payload)
        manifest = TensorManifest(shape=list(values.shape), data_file=payload.name)
    return write_document(path, manifest)


def read_linked(path: PathLike) -> LinkedTensorSet:
    """Linked manifest, or a single tensor file read as K = 1."""
    path = Path(path)
    if path.suffix.lower() != ".csv":
        try:
            raw = json.loads(path.read_text())
        except (FileNotFoundError, json.JSONDecodeError):
            raw = None
        if isinstance(raw, dict) and "tensors" in raw:
            manifest = read_document(path, LinkedManifest)
            arrays = [read_tensor(path.parent / p) for p in manifest.tensors]
            logger.info(f"📂 read {len(arrays)} linked tensor(s) from {path}")
            return LinkedTensorSet.from_arrays(arrays)
    return LinkedTensorSet.from_arrays([read_tensor(path)])


def write_linked(
    directory: PathLike, arrays: Sequence[np.ndarray], prefix: str = "tensor"
) -> Path:
    """One tensor file per array plus ``<prefix>s.json`` listing them."""
    directory = Path(directory)
    names: List[str] = []
    for k, values in enumerate(arrays):
        name = f"{prefix}_{k + 1}.json"
        write_tensor(directory / name, values)
        names.append(name)
    return write_document(directory / f"{prefix}s.json", LinkedManifest(tensors=names))


def read_model_document(path: PathLike) -> Tuple[ModelDocument, MultifacModel]:
    """The model file together with the factors it holds."""
    document = read_document(path, ModelDocument)
    try:
        return document, document.to_model()
    except ValueError as error:
        raise InputFileError(str(path), str(error)) from None


def read_model(path: PathLike) -> MultifacModel:
    return read_model_document(path)[1]


def write_model(
    path: PathLike,
    model: MultifacModel,
    kind: str = "multifac",
    threshold: float = settings.zero_threshold,
    preprocessing: Optional[PreprocessingRecord] = None,
) -> Path:
    document = ModelDocument.from_model(model, kind, threshold, preprocessing)
    return write_document(path, document)
