"""
Model Checkpoints
A checkpoint is a directory holding a JSON manifest (format version, model config,
named parameter shapes and dtypes) next to an npz archive of the raw arrays.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from config.settings import checkpoint_config
from services.errors import ConfigError, DataError
from services.models import HarModel, ModelConfig, build, parse_section

logger = logging.getLogger(__name__)


class ParamEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: str


class CheckpointManifest(BaseModel):
    format_version: int
    config: Dict
    params: List[ParamEntry]
    metadata: Dict[str, Any] = {}


def save_checkpoint(
    model: HarModel, directory: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """Write manifest + arrays; `metadata` must be JSON-serializable. Returns the checkpoint directory"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    manifest = CheckpointManifest(
        format_version=checkpoint_config.format_version,
        config=model.config.model_dump(mode="json"),
        params=[ParamEntry(name=n, shape=list(p.shape), dtype=str(p.data.dtype)) for n, p in named],
        metadata=metadata or {},
    )
    np.savez(directory / checkpoint_config.arrays_name, **{n: p.data for n, p in named})
    (directory / checkpoint_config.manifest_name).write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True)
    )
    logger.info(f"Saved checkpoint with {len(named)} tensors to {directory}")
    return directory


def read_manifest(directory: Union[str, Path]) -> CheckpointManifest:
    directory = Path(directory)
    manifest_path = directory / checkpoint_config.manifest_name
    arrays_path = directory / checkpoint_config.arrays_name
    if not manifest_path.exists() or not arrays_path.exists():
        raise DataError(f"incomplete checkpoint: expected {manifest_path.name} and {arrays_path.name}", path=directory)

    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    except ValueError as e:
        raise DataError(f"unreadable checkpoint manifest: {e}", path=manifest_path) from None
    if manifest.format_version != checkpoint_config.format_version:
        raise ConfigError(
            f"checkpoint format {manifest.format_version} not supported (expected {checkpoint_config.format_version})"
        )
    return manifest


def load_checkpoint(directory: Union[str, Path]) -> Tuple[HarModel, Dict[str, Any]]:
    """Rebuild the model from its manifest and restore every parameter bit-exactly; also returns the metadata"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    arrays_path = directory / checkpoint_config.arrays_name
    model = build(parse_section(ModelConfig, manifest.config, "checkpoint.config"))
    params = dict(model.named_parameters())
    expected = {entry.name: entry for entry in manifest.params}
    if set(expected) != set(params):
        missing = sorted(set(params) - set(expected))
        extra = sorted(set(expected) - set(params))
        raise DataError(f"checkpoint parameters do not match model (missing {missing}, unexpected {extra})", path=directory)

    with np.load(arrays_path) as arrays:
        for name, tensor in params.items():
            if name not in arrays.files:
                raise DataError(f"array {name!r} missing from {arrays_path.name}", path=directory)
            data = arrays[name]
            entry = expected[name]
            if list(data.shape) != entry.shape or str(data.dtype) != entry.dtype:
                raise DataError(f"array {name!r} does not match its manifest entry", path=directory)
            tensor.data = data.copy()
    logger.info(f"Loaded {model.variant.value} checkpoint from {directory}")
    return model, manifest.metadata
