"""
Pré-treino em dois estágios.

Stage 1 usa moléculas pareadas (2D e 3D) com todas as perdas. Stage 2
continua o treino com dados de uma única modalidade: o aprendiz de features da
modalidade ausente é congelado e fornece o alvo do decodificador, cuja saída é
fundida ao fluxo do codificador disponível.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from rich.progress import Progress

from .checkpoint import checkpoint_load, checkpoint_save
from .errors import CheckpointError, ConfigError, ModalityError
from .featurize import MASK_INDEX, FeatureCache, FeatureConfig, FeaturizedMolecule, featurize
from .losses import (
    STAGE1_TERMS,
    LossReport,
    LossWeights,
    info_nce,
    loss_c,
    loss_masked_atom,
    loss_pos,
    loss_ra,
    loss_spd,
    masked_atom_accuracy,
    pool,
    retrieval_accuracy,
    spd_accuracy,
    squared_error,
    total_stage1,
    total_stage2,
)
from .model import FlexMol, ForwardState, ModelConfig
from .molio import Batch, Modality, Molecule, collate

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
STAGE1_MODALITIES = ("paired", "2d", "3d")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    epochs_stage1: int = 20
    epochs_stage2: int = 10
    batch_size: int = 16
    mask_ratio: float = 0.15
    coord_noise: float = 1.0
    seed: int = 0
    grad_clip: float = 1.0
    max_steps: int | None = None
    deterministic: bool = True
    dtype: str = "float32"
    stage1_use_decoder: bool = True
    stage1_modality: str = "paired"
    stage2_use_decoder: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio deve estar em (0, 1), recebi {self.mask_ratio}", key="mask_ratio")
        if self.lr <= 0:
            raise ConfigError(f"lr deve ser positivo, recebi {self.lr}", key="lr")
        if self.batch_size < 1:
            raise ConfigError("batch_size deve ser ao menos 1", key="batch_size")
        if self.coord_noise < 0:
            raise ConfigError("coord_noise não pode ser negativo", key="coord_noise")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype deve ser um de {sorted(DTYPES)}", key="dtype")
        if self.stage1_modality not in STAGE1_MODALITIES:
            msg = f"stage1_modality deve ser um de {list(STAGE1_MODALITIES)}, recebi {self.stage1_modality!r}"
            raise ConfigError(msg, key="stage1_modality")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


#
# Corrupção
#
@dataclass
class CorruptionPlan:
    """
    Posições corrompidas de cada molécula do lote.

    `mask` marca os átomos selecionados; `noise_mask` os átomos com ruído nas
    coordenadas (os mesmos, quando há 3D). Os alvos são sempre os valores
    originais.
    """

    positions: list[np.ndarray]
    mask: torch.Tensor
    target_atoms: torch.Tensor
    noise_mask: torch.Tensor
    true_coords: torch.Tensor | None = None

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def num_corrupted(n_atoms: int, ratio: float) -> int:
    return min(n_atoms, max(1, math.ceil(ratio * n_atoms - 1e-9)))


def apply_corruption(batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> tuple[Batch, CorruptionPlan]:
    """
    Seleciona ⌈mask_ratio·n⌉ átomos reais (ao menos um) por molécula.

    Dos selecionados, 80% viram MASK, 10% um átomo aleatório do vocabulário e
    10% ficam inalterados. Com 3D presente, os mesmos átomos recebem ruído
    uniforme em ±coord_noise Å e as distâncias tocadas são recalculadas.
    """
    atoms = batch.atoms.clone()
    mask = torch.zeros_like(batch.atom_mask)
    coords = batch.coords.clone() if batch.has_3d else None
    positions = []
    n_real = batch.atom_mask.sum(1).tolist()
    for b, n in enumerate(n_real):
        k = num_corrupted(n, cfg.mask_ratio)
        pos = np.sort(rng.choice(n, size=k, replace=False))
        draw = rng.random(k)
        random_atoms = rng.integers(1, MASK_INDEX, size=k)
        for p, u, r in zip(pos, draw, random_atoms):
            if u < 0.8:
                atoms[b, p] = MASK_INDEX
            elif u < 0.9:
                atoms[b, p] = int(r)
        if coords is not None:
            noise = rng.uniform(-cfg.coord_noise, cfg.coord_noise, size=(k, 3))
            coords[b, torch.as_tensor(pos)] += torch.as_tensor(noise, dtype=coords.dtype)
        mask[b, torch.as_tensor(pos)] = True
        positions.append(pos)

    changes: dict = {"atoms": atoms}
    noise_mask = mask if batch.has_3d else torch.zeros_like(mask)
    if coords is not None:
        diff = coords[:, :, None, :] - coords[:, None, :, :]
        recomputed = torch.sqrt((diff * diff).sum(-1))
        touched = (noise_mask[:, :, None] | noise_mask[:, None, :]) & batch.pair_mask
        changes["coords"] = coords
        changes["dist"] = torch.where(touched, recomputed, batch.dist)

    plan = CorruptionPlan(
        positions=positions,
        mask=mask,
        target_atoms=batch.atoms,
        noise_mask=noise_mask,
        true_coords=batch.coords,
    )
    return replace(batch, **changes), plan


#
# Termos de perda por estágio
#
def stage1_terms(
    state: ForwardState,
    batch: Batch,
    plan: CorruptionPlan,
    weights: LossWeights,
    targets: dict[str, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """
    Os termos do Stage 1. `targets` permite fixar os alvos da perda de
    consistência (x_F, y_F, P, Q), como na verificação de gradientes.

    Sem os decodificadores (`state.x_hat` vazio) o termo "c" é omitido.
    """
    am = batch.atom_mask
    terms = {
        "cl": info_nce(pool(state.x_F, am), pool(state.y_F, am), weights.temperature),
        "ra": loss_ra(state.x, state.x_tilde, state.y, state.y_tilde, am),
    }
    if state.x_hat is not None:
        t = targets or {"x_F": state.x_F, "y_F": state.y_F, "P": state.P, "Q": state.Q}
        terms["c"] = loss_c(t["x_F"], state.x_hat, t["y_F"], state.y_hat, t["P"], state.P_hat, t["Q"], state.Q_hat, am)
    terms["atom"] = loss_masked_atom(state.atom_logits, plan.target_atoms, plan.mask)
    terms["pos"] = loss_pos(state.coords_hat, plan.true_coords, plan.noise_mask)
    terms["spd"] = loss_spd(state.spd_logits, batch.spd, batch.pair_mask)
    return terms


def stage_forward(model: FlexMol, batch: Batch, cfg: TrainConfig, stage: str) -> ForwardState:
    """
    Forward com as variantes do estágio: decodificadores opcionais nos dois
    estágios e, no Stage 1 com uma só modalidade, nenhuma fusão da
    modalidade ausente.
    """
    if stage != "stage1":
        return model(batch, use_decoder=cfg.stage2_use_decoder)
    if batch.modality == "paired":
        return model(batch, use_decoder=cfg.stage1_use_decoder)
    return model(batch, fuse_missing=False)


def stage_report(
    state: ForwardState,
    batch: Batch,
    plan: CorruptionPlan,
    cfg: TrainConfig,
    stage: str,
    step: int = 0,
) -> LossReport:
    if state.modality == "paired":
        terms = stage1_terms(state, batch, plan, cfg.weights)
        required = STAGE1_TERMS if cfg.stage1_use_decoder else tuple(t for t in STAGE1_TERMS if t != "c")
        return total_stage1(terms, cfg.weights, batch.size, step, required)
    use_decoder = stage != "stage1" and cfg.stage2_use_decoder
    terms = stage2_terms(state, batch, plan, use_decoder)
    return total_stage2(terms, cfg.weights, state.modality, batch.size, step)


def stage2_terms(state: ForwardState, batch: Batch, plan: CorruptionPlan, use_decoder: bool = True):
    am = batch.atom_mask
    terms = {}
    if state.modality == "2d":
        if use_decoder:
            terms["c"] = squared_error(state.y_hat, state.y_tilde.detach(), am)
        terms["atom"] = loss_masked_atom(state.atom_logits, plan.target_atoms, plan.mask)
        terms["spd"] = loss_spd(state.spd_logits, batch.spd, batch.pair_mask)
    else:
        if use_decoder:
            terms["c"] = squared_error(state.x_hat, state.x_tilde.detach(), am)
        terms["atom"] = loss_masked_atom(state.atom_logits, plan.target_atoms, plan.mask)
        terms["pos"] = loss_pos(state.coords_hat, plan.true_coords, plan.noise_mask)
    return terms


def batch_metrics(state: ForwardState, batch: Batch, plan: CorruptionPlan) -> dict[str, float]:
    metrics = {"atom_acc": masked_atom_accuracy(state.atom_logits, plan.target_atoms, plan.mask)}
    if state.spd_logits is not None:
        metrics["spd_acc"] = spd_accuracy(state.spd_logits, batch.spd, batch.pair_mask)
    if state.modality == "paired":
        am = batch.atom_mask
        metrics["retrieval_acc"] = retrieval_accuracy(pool(state.x_F, am), pool(state.y_F, am))
    return {k: v for k, v in metrics.items() if not math.isnan(v)}


#
# Log de métricas
#
class MetricsLog:
    """
    Log JSON por linha de cada passo de treino.

    Em modo determinístico o tempo de parede é omitido, de modo que duas
    execuções com a mesma semente produzem arquivos idênticos.
    """

    def __init__(self, path: str | Path | None, deterministic: bool = True):
        self.path = Path(path) if path is not None else None
        self.deterministic = deterministic
        self.records: list[dict] = []
        self._start = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, report: LossReport, epoch: int, stage: str, lr: float) -> dict:
        record = {**report.to_dict(), "epoch": epoch, "stage": stage, "lr": lr}
        if not self.deterministic:
            record["wallclock"] = time.perf_counter() - self._start
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fd:
                fd.write(json.dumps(record, sort_keys=True))
                fd.write("\n")
        return record


#
# Treino
#
def seed_everything(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def build_model(model_cfg: ModelConfig, cfg: TrainConfig) -> FlexMol:
    """
    Modelo novo com pesos iniciais sorteados a partir de `cfg.seed`.
    """
    seed_everything(cfg)
    return FlexMol(model_cfg).to(cfg.torch_dtype)


class Trainer:
    """
    Passo de otimização compartilhado pelos dois estágios.

    Adam com betas padrão sobre os parâmetros não congelados e recorte da
    norma do gradiente.
    """

    def __init__(self, model: FlexMol, cfg: TrainConfig, stage: str, metrics: MetricsLog | None = None):
        self.model = model
        self.cfg = cfg
        self.stage = stage
        self.metrics = metrics or MetricsLog(None, cfg.deterministic)
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=cfg.lr)
        self.corrupt_rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0

    def compute(self, batch: Batch) -> tuple[LossReport, ForwardState, CorruptionPlan]:
        corrupted, plan = apply_corruption(batch, self.cfg, self.corrupt_rng)
        state = stage_forward(self.model, corrupted, self.cfg, self.stage)
        report = stage_report(state, corrupted, plan, self.cfg, self.stage, self.step)
        report.metrics = batch_metrics(state, corrupted, plan)
        return report, state, plan

    def train_step(self, batch: Batch, epoch: int = 0) -> LossReport:
        self.model.train()
        report, _, _ = self.compute(batch)
        self.optimizer.zero_grad(set_to_none=True)
        report.loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        self.metrics.append(report, epoch, self.stage, self.cfg.lr)
        self.step += 1
        return report


def featurize_all(
    molecules: Sequence[Molecule],
    cfg: FeatureConfig,
    cache: FeatureCache | None = None,
) -> list[FeaturizedMolecule]:
    if cache is not None:
        return [cache.get_or_compute(mol, cfg) for mol in molecules]
    return [featurize(mol, cfg) for mol in molecules]


def iter_batches(records: list[FeaturizedMolecule], cfg: TrainConfig, rng: np.random.Generator):
    """
    Ordem embaralhada de uma época; uma conformação é sorteada por molécula.
    """
    chosen = []
    for rec in records:
        confs = rec.molecule.conformers if rec.feats3d is not None else None
        if confs and len(confs) > 1:
            rec = rec.with_conformer(int(rng.integers(len(confs))))
        chosen.append(rec)
    order = rng.permutation(len(chosen))
    for start in range(0, len(order), cfg.batch_size):
        yield collate([chosen[k] for k in order[start : start + cfg.batch_size]], cfg.torch_dtype)


@dataclass
class TrainResult:
    model: FlexMol
    reports: list[LossReport]
    checkpoint: Path | None

    @property
    def losses(self) -> list[float]:
        return [r.total for r in self.reports]


def _train(
    model: FlexMol,
    records: list[FeaturizedMolecule],
    cfg: TrainConfig,
    stage: str,
    epochs: int,
    checkpoint: str | Path | None,
    metrics_path: str | Path | None,
    feature_config: FeatureConfig,
    progress: bool,
) -> TrainResult:
    trainer = Trainer(model, cfg, stage, MetricsLog(metrics_path, cfg.deterministic))
    order_rng = np.random.default_rng([cfg.seed, 0])
    steps_per_epoch = math.ceil(len(records) / cfg.batch_size)
    total = epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    reports: list[LossReport] = []

    with Progress(disable=not progress, transient=True) as bar:
        task = bar.add_task(f"[cyan]{stage}", total=total)
        for epoch in range(epochs):
            for batch in iter_batches(records, cfg, order_rng):
                if len(reports) >= total:
                    break
                report = trainer.train_step(batch, epoch)
                reports.append(report)
                bar.update(task, advance=1, description=f"[cyan]{stage} loss={report.total:.4f}")
            if checkpoint is not None:
                checkpoint_save(model, checkpoint, trainer.step, stage, feature_config)
            log.info("%s: época %d concluída, passo %d", stage, epoch, trainer.step)
            if len(reports) >= total:
                break
    return TrainResult(model, reports, Path(checkpoint) if checkpoint is not None else None)


def run_stage1(
    dataset: Sequence[Molecule],
    model: FlexMol,
    cfg: TrainConfig,
    checkpoint: str | Path | None = None,
    metrics_path: str | Path | None = None,
    cache: FeatureCache | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Stage 1: treino com pares 2D+3D e todas as perdas.

    Com `cfg.stage1_modality` igual a "2d" ou "3d", o treino usa apenas essa
    modalidade de cada registro, sem fusão da modalidade ausente.
    """
    if cfg.stage1_modality == "paired":
        for mol in dataset:
            if mol.modality != Modality.PAIRED:
                raise ModalityError(f"registro {mol.modality.value} em treino pareado", mol_id=mol.id)
    else:
        dataset = [mol.only(cfg.stage1_modality) for mol in dataset]
    seed_everything(cfg)
    model.to(cfg.torch_dtype)
    feature_cfg = model.config.feature_config()
    records = featurize_all(dataset, feature_cfg, cache)
    log.info("Stage 1: %d moléculas, %d épocas", len(records), cfg.epochs_stage1)
    return _train(model, records, cfg, "stage1", cfg.epochs_stage1, checkpoint, metrics_path, feature_cfg, progress)


def prepare_stage2(model: FlexMol, modality: str) -> list[str]:
    """
    Congela o aprendiz de features da modalidade ausente e retorna os nomes
    dos parâmetros congelados.
    """
    missing = {"2d": "3d", "3d": "2d"}[modality]
    frozen = []
    for name, param in model.feature_learners[missing].named_parameters():
        param.requires_grad_(False)
        frozen.append(f"feature_learners.{missing}.{name}")
    return frozen


def run_stage2(
    dataset: Sequence[Molecule],
    checkpoint: str | Path,
    cfg: TrainConfig,
    modality: str,
    out_checkpoint: str | Path | None = None,
    metrics_path: str | Path | None = None,
    cache: FeatureCache | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Stage 2: treino contínuo com uma única modalidade ("2d" ou "3d") a
    partir de um checkpoint do Stage 1.
    """
    if modality not in ("2d", "3d"):
        raise ConfigError(f"modalidade deve ser '2d' ou '3d', recebi {modality!r}", key="modality")
    if checkpoint is None or not Path(checkpoint).exists():
        raise CheckpointError(f"checkpoint do Stage 1 não encontrado: {checkpoint}")
    molecules = [mol.only(modality) for mol in dataset]
    ckpt = checkpoint_load(checkpoint)
    model = ckpt.build_model()
    seed_everything(cfg)
    model.to(cfg.torch_dtype)
    frozen = prepare_stage2(model, modality)
    log.info("Stage 2 (%s): %d moléculas, congelados: %s", modality, len(molecules), ", ".join(frozen))
    records = featurize_all(molecules, ckpt.feature_config, cache)
    return _train(
        model,
        records,
        cfg,
        f"stage2_{modality}",
        cfg.epochs_stage2,
        out_checkpoint,
        metrics_path,
        ckpt.feature_config,
        progress,
    )


@torch.no_grad()
def masked_atom_eval(model: FlexMol, dataset: Sequence[Molecule], cfg: TrainConfig) -> float:
    """
    Acurácia de átomos mascarados sobre um conjunto, com corrupção semeada.
    """
    model.eval()
    records = featurize_all(dataset, model.config.feature_config())
    rng = np.random.default_rng([cfg.seed, 2])
    correct = total = 0
    for start in range(0, len(records), cfg.batch_size):
        batch = collate(records[start : start + cfg.batch_size], cfg.torch_dtype)
        corrupted, plan = apply_corruption(batch, cfg, rng)
        stage = "stage1" if batch.modality == "paired" else "stage2"
        state = stage_forward(model, corrupted, cfg, stage)
        hits = state.atom_logits[plan.mask].argmax(-1) == plan.target_atoms[plan.mask]
        correct += int(hits.sum())
        total += int(plan.mask.sum())
    return correct / max(total, 1)


@torch.no_grad()
def retrieval_eval(model: FlexMol, dataset: Sequence[Molecule], cfg: TrainConfig) -> float:
    """
    Acurácia de recuperação 2D -> 3D dentro de cada lote de `cfg.batch_size`
    moléculas pareadas, sem corrupção.
    """
    model.eval()
    records = featurize_all(dataset, model.config.feature_config())
    hits = 0
    for start in range(0, len(records), cfg.batch_size):
        batch = collate(records[start : start + cfg.batch_size], cfg.torch_dtype)
        if batch.modality != "paired":
            raise ModalityError("recuperação exige moléculas pareadas")
        state = model(batch)
        pools = pool(state.x_F, batch.atom_mask), pool(state.y_F, batch.atom_mask)
        hits += round(retrieval_accuracy(*pools) * batch.size)
    return hits / len(records)


def config_dict(cfg: TrainConfig) -> dict:
    data = asdict(cfg)
    data.update(data.pop("weights"))
    return data
