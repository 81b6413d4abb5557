"""
Objetivos de treino e sua agregação nos dois estágios.

Todas as perdas de norma quadrática são normalizadas pela contagem de átomos
(ou pares) reais do lote; posições de preenchimento nunca contribuem.
"""

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, LossError
from .model import masked_mean

TERM_WEIGHTS = {
    "cl": "w_cl",
    "ra": "w_ra",
    "c": "w_c",
    "atom": "w_atom",
    "pos": "w_pos",
    "spd": "w_spd",
}
STAGE1_TERMS = tuple(TERM_WEIGHTS)
STAGE2_TERMS = {
    "2d": ("c", "atom", "spd"),
    "3d": ("c", "atom", "pos"),
}


@dataclass(frozen=True)
class LossWeights:
    w_cl: float = 1.0
    w_ra: float = 1.0
    w_c: float = 1.0
    w_atom: float = 1.0
    w_pos: float = 1.0
    w_spd: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        weights = {k: v for k, v in asdict(self).items() if k != "temperature"}
        negative = [k for k, v in weights.items() if v < 0]
        if negative:
            raise ConfigError(f"pesos negativos: {', '.join(negative)}", key=negative[0])
        if not any(v > 0 for v in weights.values()):
            raise ConfigError("ao menos um peso deve ser positivo")
        if self.temperature <= 0:
            raise ConfigError(f"temperatura deve ser positiva, recebi {self.temperature}", key="temperature")

    def weight(self, term: str) -> float:
        return getattr(self, TERM_WEIGHTS[term])


@dataclass
class LossReport:
    """
    Valores escalares de cada termo e o total ponderado.

    `loss` é o tensor usado no backward; não faz parte da serialização.
    """

    terms: dict[str, float]
    total: float
    batch_size: int
    step: int = 0
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "batch_size": self.batch_size,
            "total": self.total,
            **{f"loss_{k}": v for k, v in self.terms.items()},
            **self.metrics,
        }


#
# Agregação molecular
#
def pool(stream: torch.Tensor, atom_mask: torch.Tensor) -> torch.Tensor:
    """
    Média dos átomos reais seguida de normalização L2 (B×n×d -> B×d).
    """
    if not atom_mask.any(dim=1).all():
        raise LossError("molécula sem átomos reais no lote")
    return F.normalize(masked_mean(stream, atom_mask), dim=-1)


#
# Perdas
#
def info_nce(x_pool: torch.Tensor, y_pool: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """
    InfoNCE simétrico com negativos do próprio lote.
    """
    logits = x_pool @ y_pool.T / temperature
    labels = torch.arange(len(logits), device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def squared_error(a: torch.Tensor, b: torch.Tensor, atom_mask: torch.Tensor) -> torch.Tensor:
    """
    Σᵢ ‖aᵢ − bᵢ‖² sobre átomos reais, dividido pelo número de átomos reais.
    """
    weights = atom_mask.to(a.dtype)[..., None]
    return ((a - b) ** 2 * weights).sum() / weights.sum().clamp(min=1.0)


def pair_squared_error(a: torch.Tensor, b: torch.Tensor, pair_mask: torch.Tensor) -> torch.Tensor:
    weights = pair_mask.to(a.dtype)[..., None]
    diff = torch.where(pair_mask[..., None], a - b, torch.zeros((), dtype=a.dtype))
    return (diff**2 * weights).sum() / weights.sum().clamp(min=1.0)


def loss_ra(x, x_tilde, y, y_tilde, atom_mask) -> torch.Tensor:
    return squared_error(x, x_tilde, atom_mask) + squared_error(y, y_tilde, atom_mask)


def loss_c(x_F, x_hat, y_F, y_hat, P, P_hat, Q, Q_hat, atom_mask) -> torch.Tensor:
    """
    Consistência entre as saídas dos codificadores e dos decodificadores.

    Os argumentos do lado do codificador (x_F, y_F, P, Q) são alvos: nenhum
    gradiente passa por eles.
    """
    pair_mask = atom_mask[:, :, None] & atom_mask[:, None, :]
    return (
        squared_error(x_hat, x_F.detach(), atom_mask)
        + squared_error(y_hat, y_F.detach(), atom_mask)
        + pair_squared_error(P_hat, P.detach(), pair_mask)
        + pair_squared_error(Q_hat, Q.detach(), pair_mask)
    )


def loss_masked_atom(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not mask.any():
        raise LossError("nenhuma posição mascarada")
    return F.cross_entropy(logits[mask], targets[mask])


def loss_pos(recovered: torch.Tensor, true_coords: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Huber (δ = 1 Å) sobre o resíduo de cada átomo corrompido, somado e
    dividido pelo número de coordenadas (3·n_mascarados).

    Com o resíduo sobre um único eixo coincide com o smooth-L1 por
    coordenada; aplicado à norma, não depende da orientação.
    """
    if not mask.any():
        return recovered.sum() * 0.0
    sq = ((recovered[mask] - true_coords[mask]) ** 2).sum(-1)
    huber = torch.where(sq < 1.0, 0.5 * sq, torch.sqrt(sq.clamp(min=1.0)) - 0.5)
    return huber.sum() / (3 * sq.numel())


def off_diagonal_mask(pair_mask: torch.Tensor) -> torch.Tensor:
    n = pair_mask.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=pair_mask.device)
    return pair_mask & ~eye


def loss_spd(logits: torch.Tensor, spd_targets: torch.Tensor, pair_mask: torch.Tensor) -> torch.Tensor:
    mask = off_diagonal_mask(pair_mask)
    if not mask.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], spd_targets[mask])


#
# Totais
#
def _weighted(terms: dict[str, torch.Tensor], weights: LossWeights, batch_size: int, step: int) -> LossReport:
    loss = sum(weights.weight(k) * t for k, t in terms.items())
    values = {k: float(t.detach()) for k, t in terms.items()}
    total = sum(weights.weight(k) * v for k, v in values.items())
    return LossReport(values, total, batch_size, step, loss)


def total_stage1(
    terms: dict[str, torch.Tensor],
    weights: LossWeights,
    batch_size: int = 0,
    step: int = 0,
    required: Sequence[str] = STAGE1_TERMS,
) -> LossReport:
    """
    Total do Stage 1. Sem os decodificadores o termo "c" não existe e
    `required` deixa de incluí-lo.
    """
    missing = [t for t in required if t not in terms]
    if missing:
        raise LossError(f"termos ausentes no Stage 1: {', '.join(missing)}")
    unknown = sorted(set(terms) - set(required))
    if unknown:
        raise LossError(f"termos desconhecidos: {', '.join(unknown)}")
    return _weighted(terms, weights, batch_size, step)


def total_stage2(
    terms: dict[str, torch.Tensor],
    weights: LossWeights,
    modality: str,
    batch_size: int = 0,
    step: int = 0,
) -> LossReport:
    """
    Total do Stage 2. Apenas os termos possíveis na modalidade disponível são
    aceitos; "cl" e "ra" exigem as duas modalidades.
    """
    if modality not in STAGE2_TERMS:
        raise LossError(f"modalidade desconhecida: {modality!r}")
    allowed = STAGE2_TERMS[modality]
    invalid = [t for t in terms if t not in allowed]
    if invalid:
        raise LossError(f"termos indisponíveis para dados {modality}: {', '.join(invalid)}")
    return _weighted(terms, weights, batch_size, step)


#
# Métricas
#
@torch.no_grad()
def masked_atom_accuracy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> float:
    if not mask.any():
        return float("nan")
    return float((logits[mask].argmax(-1) == targets[mask]).double().mean())


@torch.no_grad()
def retrieval_accuracy(x_pool: torch.Tensor, y_pool: torch.Tensor) -> float:
    """
    Fração de moléculas cujo vetor 2D tem o próprio vetor 3D como vizinho
    mais próximo no lote.
    """
    scores = x_pool @ y_pool.T
    labels = torch.arange(len(scores), device=scores.device)
    return float((scores.argmax(-1) == labels).double().mean())


@torch.no_grad()
def spd_accuracy(logits: torch.Tensor, spd_targets: torch.Tensor, pair_mask: torch.Tensor) -> float:
    mask = off_diagonal_mask(pair_mask)
    if not mask.any():
        return float("nan")
    return float((logits[mask].argmax(-1) == spd_targets[mask]).double().mean())
