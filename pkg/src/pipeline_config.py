"""
Pipeline Configuration - every retrieval and reasoning constant in one validated record

Defaults are the published operating point:
- d=128 after projection from 768, C=8 centroids per page
- N1=2000 stage-1 candidates, N2=100 after the stage-2 filter
- B=256 summaries per map shard, 25 survivors per shard
- at most 3 reasoning rounds, 10 page images + 20 summaries per round
- near-duplicate threshold 0.97, seed 42

Precedence when loading: explicit overrides > config file > defaults.
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigValidationError

logger = logging.getLogger("pipeline-config")

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.json"


class PipelineConfig(BaseModel):
    """Validated pipeline constants. Immutable once built."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # Vector geometry
    embed_dim: int = Field(128, gt=0)
    source_dim: int = Field(768, gt=0)
    centroids_per_page: int = Field(8, gt=0)

    # Stage 1
    shortlist_r: int = Field(8000, gt=0)
    stage1_cutoff: int = Field(2000, gt=0)
    probe_k: int = Field(32, gt=0)
    ann_nlist: int = Field(0, ge=0)  # 0 = auto
    ann_nprobe: int = Field(16, gt=0)  # starting point; raised at build until ann_target_recall
    ann_target_recall: float = Field(0.95, ge=0.0, le=1.0)
    exact_flat: bool = False
    kmeans_iterations: int = Field(25, gt=0)
    pca_fit_samples: int = Field(100_000, gt=0)

    # Stage 2
    stage2_cutoff: int = Field(100, gt=0)
    shard_size: int = Field(256, gt=0)
    map_target_k: int = Field(25, gt=0)
    max_inflight_maps: int = Field(8, gt=0)
    ranker_retries: int = Field(2, ge=0)
    retry_backoff_s: float = Field(0.5, ge=0.0)
    interleaved_shards: bool = True
    filter_temperature: float = Field(0.0, ge=0.0)
    filter_max_new_tokens: int = Field(1024, gt=0)

    # Reasoning
    max_iterations: int = Field(3, gt=0)
    images_per_round: int = Field(10, gt=0)
    summaries_per_round: int = Field(20, gt=0)
    reasoner_temperature: float = Field(0.1, ge=0.0)
    reasoner_max_new_tokens: int = Field(2048, gt=0)
    use_memory_bank: bool = True

    # Corpus
    dedup_threshold: float = Field(0.97, ge=0.0, le=1.0)

    # Runtime
    seed: int = 42
    workers: int = Field(4, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _derive_shortlist(cls, data: Any) -> Any:
        # R defaults to 4 * N1 when only N1 is given
        if isinstance(data, dict) and "shortlist_r" not in data and "stage1_cutoff" in data:
            data = {**data, "shortlist_r": 4 * int(data["stage1_cutoff"])}
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "PipelineConfig":
        violation = first_violation(self)
        if violation:
            raise ValueError(violation)
        return self


def first_violation(cfg: PipelineConfig) -> Optional[str]:
    """Return a report for the first failing cross-field invariant, or None"""
    if cfg.stage2_cutoff > cfg.stage1_cutoff:
        return (
            f"N2 ≤ N1 violated (stage2_cutoff={cfg.stage2_cutoff} > "
            f"stage1_cutoff={cfg.stage1_cutoff})"
        )
    if cfg.map_target_k > cfg.shard_size:
        return (
            f"map_target_k ≤ B violated (map_target_k={cfg.map_target_k} > "
            f"shard_size={cfg.shard_size})"
        )
    if cfg.shortlist_r < cfg.stage1_cutoff:
        return (
            f"R ≥ N1 violated (shortlist_r={cfg.shortlist_r} < "
            f"stage1_cutoff={cfg.stage1_cutoff})"
        )
    survivors = math.ceil(cfg.stage1_cutoff / cfg.shard_size) * cfg.map_target_k
    if survivors < cfg.stage2_cutoff:
        return (
            f"ceil(N1/B)·map_target_k ≥ N2 violated ({survivors} map survivors < "
            f"stage2_cutoff={cfg.stage2_cutoff})"
        )
    if cfg.embed_dim > cfg.source_dim:
        return f"d ≤ source_dim violated (embed_dim={cfg.embed_dim} > source_dim={cfg.source_dim})"
    return None


def _first_error_message(exc: ValidationError) -> str:
    err = exc.errors()[0]
    msg = str(err.get("msg", exc))
    if msg.startswith("Value error, "):
        msg = msg[len("Value error, "):]
    loc = ".".join(str(part) for part in err.get("loc", ()))
    return f"{loc}: {msg}" if loc else msg


def validate_config(cfg: Union[PipelineConfig, Mapping[str, Any]]) -> PipelineConfig:
    """
    Check every config invariant.

    Args:
        cfg: A PipelineConfig, or a mapping of field overrides on top of defaults

    Returns:
        The same PipelineConfig object when it is valid (a new one for mappings)

    Raises:
        ConfigValidationError: naming the first failing invariant
    """
    data = cfg.model_dump() if isinstance(cfg, PipelineConfig) else dict(cfg)
    try:
        checked = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(_first_error_message(e)) from e
    return cfg if isinstance(cfg, PipelineConfig) else checked


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    """
    Load config: overrides > file > defaults.

    Args:
        path: JSON config file (None = shipped config.json if present)
        overrides: Field values that win over the file (None values are ignored)

    Returns:
        Validated PipelineConfig
    """
    data: Dict[str, Any] = {}
    config_path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    if config_path.exists():
        try:
            data.update(json.loads(config_path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigValidationError(
                f"invalid JSON in {config_path} at line {e.lineno}: {e.msg}"
            ) from e
        logger.debug(f"Loaded config file {config_path}")
    elif path is not None:
        raise ConfigValidationError(f"config file not found: {config_path}")

    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})

    return validate_config(data)


class GatewaySettings(BaseModel):
    """Model endpoint settings, read from the environment (.env honoured)"""

    model_config = ConfigDict(frozen=True)

    endpoint_url: str = "http://localhost:8000/v1"
    api_key: Optional[str] = None
    filter_model: str = "Qwen/Qwen3-30B-A3B"
    reasoner_model: str = "Qwen/Qwen2.5-VL-32B-Instruct"
    timeout_s: float = Field(120.0, gt=0)
    retries: int = Field(2, ge=0)

    @classmethod
    def from_env(cls) -> "GatewaySettings":
        load_dotenv()
        defaults = cls()
        return cls(
            endpoint_url=os.getenv("RAG_ENDPOINT_URL", defaults.endpoint_url),
            api_key=os.getenv("RAG_API_KEY") or None,
            filter_model=os.getenv("RAG_FILTER_MODEL", defaults.filter_model),
            reasoner_model=os.getenv("RAG_REASONER_MODEL", defaults.reasoner_model),
            timeout_s=float(os.getenv("RAG_HTTP_TIMEOUT", str(defaults.timeout_s))),
            retries=int(os.getenv("RAG_HTTP_RETRIES", str(defaults.retries))),
        )
