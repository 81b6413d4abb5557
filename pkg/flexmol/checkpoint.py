"""
Contêiner versionado de checkpoints.

O arquivo guarda as configurações do modelo e das features, o hash dessas
configurações e todos os tensores nomeados. A leitura recalcula o hash e
recusa arquivos adulterados ou de outra versão.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import CheckpointError
from .featurize import FeatureConfig
from .model import FlexMol, ModelConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
REQUIRED_KEYS = ("format_version", "model_config", "feature_config", "config_hash", "state_dict")


def config_hash(model_config: dict, feature_config: dict) -> str:
    data = json.dumps({"model": model_config, "features": feature_config}, sort_keys=True)
    return hashlib.sha256(data.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    feature_config: FeatureConfig
    state_dict: dict[str, torch.Tensor]
    config_hash: str
    step: int = 0
    stage: str = "stage1"
    frozen: list[str] = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        for tensor in self.state_dict.values():
            if tensor.is_floating_point():
                return tensor.dtype
        return torch.float32

    def build_model(self) -> FlexMol:
        """
        Instancia o modelo e carrega os tensores salvos, restaurando os
        parâmetros congelados.
        """
        model = FlexMol(self.model_config).to(self.dtype)
        try:
            model.load_state_dict(self.state_dict)
        except RuntimeError as e:
            raise CheckpointError(f"tensores incompatíveis com a configuração: {e}") from e
        frozen = set(self.frozen)
        for name, param in model.named_parameters():
            param.requires_grad_(name not in frozen)
        return model


def checkpoint_save(
    model: FlexMol,
    path: str | Path,
    step: int = 0,
    stage: str = "stage1",
    feature_config: FeatureConfig | None = None,
) -> Path:
    """
    Salva o modelo. Parâmetros com `requires_grad=False` são registrados como
    congelados.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model_config = model.config.to_dict()
    feature_dict = asdict(feature_config or model.config.feature_config())
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config,
        "feature_config": feature_dict,
        "config_hash": config_hash(model_config, feature_dict),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": int(step),
        "stage": stage,
        "frozen": sorted(name for name, p in model.named_parameters() if not p.requires_grad),
    }
    torch.save(payload, path)
    log.info("checkpoint salvo em %s (passo %d, %s)", path, step, stage)
    return path


def checkpoint_load(path: str | Path, feature_config: FeatureConfig | None = None) -> Checkpoint:
    """
    Lê e valida um checkpoint.

    Se `feature_config` for dado, ele precisa coincidir com o usado no
    treino.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint não encontrado: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"arquivo de checkpoint ilegível: {path}") from e

    if not isinstance(payload, dict) or any(k not in payload for k in REQUIRED_KEYS):
        raise CheckpointError(f"checkpoint sem os campos obrigatórios: {path}")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"versão de checkpoint {payload['format_version']}, esperava {FORMAT_VERSION}")
    expected = config_hash(payload["model_config"], payload["feature_config"])
    if payload["config_hash"] != expected:
        raise CheckpointError("hash de configuração não confere; checkpoint adulterado ou corrompido")

    features = FeatureConfig(**payload["feature_config"])
    if feature_config is not None and feature_config.digest() != features.digest():
        raise CheckpointError(f"checkpoint treinado com features {features}, recebi {feature_config}")
    return Checkpoint(
        model_config=ModelConfig.from_dict(payload["model_config"]),
        feature_config=features,
        state_dict=payload["state_dict"],
        config_hash=payload["config_hash"],
        step=payload.get("step", 0),
        stage=payload.get("stage", "stage1"),
        frozen=list(payload.get("frozen", [])),
    )


def load_model(path: str | Path) -> tuple[FlexMol, Checkpoint]:
    ckpt = checkpoint_load(path)
    return ckpt.build_model(), ckpt


def describe(ckpt: Checkpoint) -> dict:
    """
    Resumo do checkpoint em formato JSON, usado pelo comando `inspect`.
    """
    model = ckpt.build_model()
    return {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "dtype": str(ckpt.dtype).removeprefix("torch."),
        "model_config": ckpt.model_config.to_dict(),
        "feature_config": asdict(ckpt.feature_config),
        "parameters": model.parameter_counts(),
        "frozen": ckpt.frozen,
        "shapes": {k: list(v.shape) for k, v in ckpt.state_dict.items()},
    }
