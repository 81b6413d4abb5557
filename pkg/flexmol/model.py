"""
Componentes treináveis: codificações de átomos, graus, SPD, arestas e
distâncias gaussianas; codificadores 2D/3D com autoatenção compartilhada;
decodificadores entre modalidades; codificador multimodal; aprendizes de
features e cabeças de predição.

Todos os tensores seguem a convenção de lote do `flexmol.molio.Batch`:
B×n×d para fluxos por átomo e B×n×n×H para representações de pares.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from .errors import FeaturizeError, ModelError
from .featurize import MAX_ATOMIC_NUMBER, MAX_CHARGE, MIN_CHARGE, N_CHARGES, NUM_PAIR_CLASSES, VOCAB_SIZE, FeatureConfig
from .molio import BIAS_SENTINEL, Batch

log = logging.getLogger(__name__)

MODALITIES = ("2d", "3d")
DIRECTIONS = ("3d_to_2d", "2d_to_3d")


@dataclass(frozen=True)
class ModelConfig:
    """
    Hiperparâmetros da arquitetura.

    `num_layers` é a profundidade F dos codificadores e decodificadores;
    `num_mm_layers` é a profundidade L do codificador multimodal.
    """

    dim: int = 512
    num_kernels: int = 128
    num_layers: int = 4
    num_mm_layers: int = 4
    num_heads: int = 8
    mlp_ratio: int = 4
    vocab_size: int = VOCAB_SIZE
    max_degree: int = 8
    max_hop: int = 100
    max_path_len: int = 16
    edge_feat_dim: int = NUM_PAIR_CLASSES
    num_pair_classes: int = NUM_PAIR_CLASSES
    use_mm_encoder: bool = True
    gauss_max_dist: float = 10.0

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ModelError(f"dim ({self.dim}) não é divisível por num_heads ({self.num_heads})")
        for name in ("dim", "num_kernels", "num_layers", "num_mm_layers", "num_heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} deve ser ao menos 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def num_spd_classes(self) -> int:
        return self.max_hop + 2

    @classmethod
    def from_features(cls, cfg: FeatureConfig, **kwargs) -> "ModelConfig":
        return cls(
            max_degree=cfg.max_degree,
            max_hop=cfg.max_hop,
            max_path_len=cfg.max_path_len,
            edge_feat_dim=cfg.edge_feat_dim,
            **kwargs,
        )

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.max_degree, self.max_hop, self.max_path_len, self.edge_feat_dim)


def mask_pair(pair: torch.Tensor, pair_mask: torch.Tensor) -> torch.Tensor:
    """
    Fixa o sentinela de viés nas posições de par que envolvem preenchimento.
    """
    sentinel = torch.tensor(BIAS_SENTINEL, dtype=pair.dtype, device=pair.device)
    return torch.where(pair_mask[..., None], pair, sentinel)


def zero_pad_pair(pair: torch.Tensor, pair_mask: torch.Tensor) -> torch.Tensor:
    return pair.masked_fill(~pair_mask[..., None], 0.0)


def masked_mean(stream: torch.Tensor, atom_mask: torch.Tensor) -> torch.Tensor:
    weights = atom_mask.to(stream.dtype)[..., None]
    return (stream * weights).sum(1) / weights.sum(1).clamp(min=1.0)


def feed_forward(dim: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


def check_finite(name: str, *tensors: torch.Tensor) -> None:
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise ModelError(f"ativação não finita em {name}", layer=name)


#
# Codificações de entrada
#
class GaussianBasis(nn.Module):
    """
    Núcleos gaussianos sobre a distância, com afinidade aprendida por classe
    de par: ψᵏ(i, j) = N(γ_c·d_ij + β_c; μ_k, σ_k).
    """

    def __init__(self, num_kernels: int, num_pair_classes: int, max_dist: float = 10.0):
        super().__init__()
        self.means = nn.Parameter(torch.linspace(0.0, max_dist, num_kernels))
        self.raw_stds = nn.Parameter(torch.full((num_kernels,), math.log(math.expm1(1.0))))
        self.gamma = nn.Embedding(num_pair_classes, 1)
        self.beta = nn.Embedding(num_pair_classes, 1)
        nn.init.ones_(self.gamma.weight)
        nn.init.zeros_(self.beta.weight)

    @property
    def stds(self) -> torch.Tensor:
        return F.softplus(self.raw_stds)

    def forward(self, dist: torch.Tensor, pair_class: torch.Tensor) -> torch.Tensor:
        x = self.gamma(pair_class) * dist[..., None] + self.beta(pair_class)
        std = self.stds
        z = (x - self.means) / std
        return torch.exp(-0.5 * z * z) / (std * math.sqrt(2 * math.pi))


class PairLift(nn.Module):
    """
    Leva o viés escalar de cada par para H canais (um por cabeça).
    """

    def __init__(self, num_heads: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, num_heads), nn.GELU(), nn.Linear(num_heads, num_heads))

    def forward(self, bias: torch.Tensor) -> torch.Tensor:
        return self.net(bias[..., None])


#
# Atenção
#
class PairBiasedAttention(nn.Module):
    """
    Autoatenção multi-cabeça com viés aditivo por par.

    Retorna a saída e os logits QKᵀ/√d_h no formato B×n×n×H, que são somados
    à representação de pares pelo bloco que chama esta camada.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        q, k = self._split(self.q_proj(x)), self._split(self.k_proj(x))
        return torch.einsum("bihd,bjhd->bijh", q, k) / math.sqrt(self.head_dim)

    def attention_weights(self, x: torch.Tensor, pair: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x) + pair, dim=2)

    def forward(self, x: torch.Tensor, pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.logits(x)
        weights = torch.softmax(logits + pair, dim=2)
        v = self._split(self.v_proj(x))
        out = torch.einsum("bijh,bjhd->bihd", weights, v).flatten(2)
        return self.out_proj(out), logits


class CrossAttention(nn.Module):
    """
    Atenção cruzada: consultas do fluxo corrente, chaves e valores da memória.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, key_bias: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        m = memory.shape[1]
        q = self.q_proj(x).view(b, n, self.num_heads, self.head_dim)
        k = self.k_proj(memory).view(b, m, self.num_heads, self.head_dim)
        v = self.v_proj(memory).view(b, m, self.num_heads, self.head_dim)
        logits = torch.einsum("bihd,bjhd->bijh", q, k) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits + key_bias[:, None, :, None], dim=2)
        out = torch.einsum("bijh,bjhd->bihd", weights, v).flatten(2)
        return self.out_proj(out)


#
# Blocos
#
class ExpertBlock(nn.Module):
    """
    Normalizações e feed-forward próprios de uma modalidade em uma camada do
    codificador compartilhado.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.dim)
        self.norm_ffn = nn.LayerNorm(cfg.dim)
        self.ffn = feed_forward(cfg.dim, cfg.mlp_ratio)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(cfg.dim)
        self.norm_cross = nn.LayerNorm(cfg.dim)
        self.norm_memory = nn.LayerNorm(cfg.dim)
        self.cross = CrossAttention(cfg.dim, cfg.num_heads)
        self.norm_ffn = nn.LayerNorm(cfg.dim)
        self.ffn = feed_forward(cfg.dim, cfg.mlp_ratio)


class TransformerBlock(nn.Module):
    """
    Bloco pré-normalizado completo com atualização da representação de pares.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.dim)
        self.attention = PairBiasedAttention(cfg.dim, cfg.num_heads)
        self.norm_ffn = nn.LayerNorm(cfg.dim)
        self.ffn = feed_forward(cfg.dim, cfg.mlp_ratio)

    def forward(self, x, pair, pair_mask):
        out, delta = self.attention(self.norm_attn(x), pair)
        x = x + out
        x = x + self.ffn(self.norm_ffn(x))
        return x, torch.where(pair_mask[..., None], pair + delta, pair)


class SharedEncoder(nn.Module):
    """
    Codificadores 2D e 3D de profundidade F.

    A autoatenção de cada camada é a mesma para as duas modalidades; as
    normalizações e o feed-forward são específicos de cada uma.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = nn.ModuleList(PairBiasedAttention(cfg.dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.experts = nn.ModuleDict(
            {m: nn.ModuleList(ExpertBlock(cfg) for _ in range(cfg.num_layers)) for m in MODALITIES}
        )

    def forward(self, x, pair, modality: str, pair_mask):
        for layer, (attention, expert) in enumerate(zip(self.attention, self.experts[modality])):
            out, delta = attention(expert.norm_attn(x), pair)
            x = x + out
            x = x + expert.ffn(expert.norm_ffn(x))
            pair = torch.where(pair_mask[..., None], pair + delta, pair)
            check_finite(f"encoder[{modality}].{layer}", x, pair)
        return x, pair


class SharedDecoder(nn.Module):
    """
    Decodificadores 3D→2D e 2D→3D.

    Cada camada aplica autoatenção com viés de pares (compartilhada entre as
    duas direções), atenção cruzada sobre a memória (própria de cada direção)
    e feed-forward.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = nn.ModuleList(PairBiasedAttention(cfg.dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.directions = nn.ModuleDict(
            {d: nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.num_layers)) for d in DIRECTIONS}
        )

    def forward(self, source, self_bias, memory, init_pair, direction: str, pair_mask, key_bias):
        if memory.shape[:2] != source.shape[:2]:
            raise ModelError(
                f"memória com forma {tuple(memory.shape[:2])} para fonte {tuple(source.shape[:2])}",
                layer=f"decoder[{direction}]",
            )
        x = source
        pair = self_bias if self_bias is not None else init_pair
        for layer, (attention, block) in enumerate(zip(self.attention, self.directions[direction])):
            out, delta = attention(block.norm_self(x), pair)
            x = x + out
            pair = torch.where(pair_mask[..., None], pair + delta, pair)
            x = x + block.cross(block.norm_cross(x), block.norm_memory(memory), key_bias)
            x = x + block.ffn(block.norm_ffn(x))
            check_finite(f"decoder[{direction}].{layer}", x, pair)
        return x, pair


class MultiModalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.num_mm_layers))

    def forward(self, x, pair, pair_mask):
        for layer, block in enumerate(self.layers):
            x, pair = block(x, pair, pair_mask)
            check_finite(f"mm_encoder.{layer}", x, pair)
        return x, pair


#
# Cabeças
#
class AtomHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, vocab_size))

    def forward(self, stream):
        return self.net(stream)


class PositionHead(nn.Module):
    """
    Recuperação de posições equivariante:
    r̂ᵢ = rᵢ + (1/n) Σⱼ (rᵢ − rⱼ)·u_ij, com u_ij escalar lido do par (i, j).
    """

    def __init__(self, num_heads: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(num_heads, num_heads), nn.GELU(), nn.Linear(num_heads, 1))

    def forward(self, pair, coords, atom_mask):
        pair_mask = atom_mask[:, :, None] & atom_mask[:, None, :]
        weights = self.net(zero_pad_pair(pair, pair_mask)).squeeze(-1)
        weights = weights * pair_mask.to(weights.dtype)
        diff = coords[:, :, None, :] - coords[:, None, :, :]
        n_real = atom_mask.sum(1).clamp(min=1).to(coords.dtype)
        update = (diff * weights[..., None]).sum(2) / n_real[:, None, None]
        return coords + update * atom_mask[..., None].to(coords.dtype)


class SpdHead(nn.Module):
    def __init__(self, num_heads: int, hidden: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * num_heads, hidden), nn.GELU(), nn.Linear(hidden, num_classes))

    def forward(self, pair_a, pair_b, pair_mask):
        pair = torch.cat([zero_pad_pair(pair_a, pair_mask), zero_pad_pair(pair_b, pair_mask)], dim=-1)
        return self.net(pair)


#
# Modelo completo
#
@dataclass
class ForwardState:
    """
    Todos os tensores intermediários de um forward.

    No Stage 1 (pares), `x_L`/`y_L` são as saídas do codificador multimodal
    para cada fluxo. Nos forwards de modalidade única, `fused` é o fluxo
    fundido e `x_L`/`P_L` guardam a saída final sobre ele.
    """

    modality: str
    X: torch.Tensor
    x: torch.Tensor | None = None
    y: torch.Tensor | None = None
    P: torch.Tensor | None = None
    Q: torch.Tensor | None = None
    x_tilde: torch.Tensor | None = None
    y_tilde: torch.Tensor | None = None
    x_F: torch.Tensor | None = None
    y_F: torch.Tensor | None = None
    P_F: torch.Tensor | None = None
    Q_F: torch.Tensor | None = None
    x_hat: torch.Tensor | None = None
    y_hat: torch.Tensor | None = None
    P_hat: torch.Tensor | None = None
    Q_hat: torch.Tensor | None = None
    fused: torch.Tensor | None = None
    fused_bias: torch.Tensor | None = None
    x_L: torch.Tensor | None = None
    y_L: torch.Tensor | None = None
    P_L: torch.Tensor | None = None
    Q_L: torch.Tensor | None = None
    atom_logits: torch.Tensor | None = None
    coords_hat: torch.Tensor | None = None
    spd_logits: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    @property
    def final_stream(self) -> torch.Tensor:
        if self.modality == "paired":
            return self.x_L + self.y_L
        return self.x_L


class FlexMol(nn.Module):
    """
    Modelo de pré-treino unificado 2D/3D.

    Ex.:
        >>> model = FlexMol(ModelConfig(dim=8, num_kernels=4, num_heads=2))
        >>> state = model(batch)
        >>> state.atom_logits.shape
        torch.Size([B, n, 502])
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.config = cfg
        self.atom_table = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.degree_table = nn.Embedding(cfg.max_degree + 1, cfg.dim)
        self.spd_table = nn.Embedding(cfg.num_spd_classes, 1)
        self.edge_path_weights = nn.Parameter(torch.empty(cfg.max_path_len, cfg.edge_feat_dim))
        self.gaussian = GaussianBasis(cfg.num_kernels, cfg.num_pair_classes, cfg.gauss_max_dist)
        self.centrality = nn.Linear(cfg.num_kernels, cfg.dim, bias=False)
        self.pair3d = nn.Sequential(
            nn.Linear(cfg.num_kernels, cfg.num_kernels, bias=False),
            nn.GELU(),
            nn.Linear(cfg.num_kernels, 1, bias=False),
        )
        self.lift = nn.ModuleDict({m: PairLift(cfg.num_heads) for m in MODALITIES})
        self.feature_learners = nn.ModuleDict({m: feed_forward(cfg.dim, 1) for m in MODALITIES})
        self.encoder = SharedEncoder(cfg)
        self.decoder = SharedDecoder(cfg)
        self.mm_encoder = MultiModalEncoder(cfg) if cfg.use_mm_encoder else None
        self.atom_head = AtomHead(cfg.dim, cfg.vocab_size)
        self.position_head = PositionHead(cfg.num_heads)
        self.spd_head = SpdHead(cfg.num_heads, cfg.dim, cfg.num_spd_classes)

        for table in (self.atom_table, self.degree_table, self.spd_table):
            nn.init.normal_(table.weight, std=0.02)
        nn.init.normal_(self.edge_path_weights, std=0.02)

    #
    # Entradas
    #
    def embed(self, atoms: torch.Tensor) -> torch.Tensor:
        if atoms.numel() and (atoms.min() < 0 or atoms.max() >= self.config.vocab_size):
            raise FeaturizeError(f"índice fora do vocabulário [0, {self.config.vocab_size})")
        return self.atom_table(atoms)

    def embed_atoms(self, atomic_numbers: torch.Tensor, charges: torch.Tensor | None = None) -> torch.Tensor:
        """
        X: linha da tabela de átomos para cada (número atômico, carga).
        """
        if charges is None:
            charges = torch.zeros_like(atomic_numbers)
        bad_z = (atomic_numbers < 1) | (atomic_numbers > MAX_ATOMIC_NUMBER)
        bad_c = (charges < MIN_CHARGE) | (charges > MAX_CHARGE)
        if bad_z.any() or bad_c.any():
            raise FeaturizeError("átomo fora do vocabulário (número atômico 1..100, carga -2..2)")
        index = 1 + (atomic_numbers - 1) * N_CHARGES + (charges - MIN_CHARGE)
        return self.embed(index)

    def edge_encoding(self, edge_path: torch.Tensor, path_len: torch.Tensor) -> torch.Tensor:
        """
        Φ^Edge: média de ⟨eₙ, wₙ⟩ ao longo do caminho; zero sem caminho.
        """
        dots = torch.einsum("bijte,te->bij", edge_path, self.edge_path_weights.to(edge_path.dtype))
        return dots / path_len.clamp(min=1).to(dots.dtype)

    def bias_2d(self, batch: Batch) -> torch.Tensor:
        spd_bias = self.spd_table(batch.spd).squeeze(-1)
        return spd_bias + self.edge_encoding(batch.edge_path, batch.path_len)

    def build_2d_inputs(self, X: torch.Tensor, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        x = X + self.degree_table(batch.degree)
        pair = self.lift["2d"](self.bias_2d(batch))
        return x, mask_pair(pair, batch.pair_mask)

    def gaussian_basis(self, dist: torch.Tensor, pair_class: torch.Tensor) -> torch.Tensor:
        return self.gaussian(dist, pair_class)

    def bias_3d(self, psi: torch.Tensor) -> torch.Tensor:
        return self.pair3d(psi).squeeze(-1)

    def build_3d_inputs(self, X: torch.Tensor, psi: torch.Tensor, pair_mask: torch.Tensor):
        """
        y = X + Σⱼ ψ(i, j)W_D (inclui j = i) e Q = lift(Φ^3D).
        """
        centrality = (psi * pair_mask[..., None].to(psi.dtype)).sum(2)
        y = X + self.centrality(centrality)
        pair = self.lift["3d"](self.bias_3d(psi))
        return y, mask_pair(pair, pair_mask)

    def feature_learner(self, X: torch.Tensor, which: str) -> torch.Tensor:
        return self.feature_learners[which](X)

    def feature_learner_parameters(self, which: str):
        return self.feature_learners[which].parameters()

    #
    # Forwards
    #
    def _refine(self, stream, pair, pair_mask):
        if self.mm_encoder is None:
            return stream, pair
        return self.mm_encoder(stream, pair, pair_mask)

    def forward_paired(self, batch: Batch, use_decoder: bool = True) -> ForwardState:
        """
        Stage 1: as duas modalidades, os dois decodificadores e o codificador
        multimodal aplicado a cada fluxo reconstruído.

        Com `use_decoder=False` os decodificadores não são usados: o
        codificador multimodal recebe diretamente as saídas dos codificadores
        e os campos `*_hat` ficam vazios.
        """
        pm, kb = batch.pair_mask, batch.key_bias()
        X = self.embed(batch.atoms)
        x, P = self.build_2d_inputs(X, batch)
        psi = self.gaussian_basis(batch.dist, batch.pair_class)
        y, Q = self.build_3d_inputs(X, psi, pm)
        st = ForwardState("paired", X, x=x, y=y, P=P, Q=Q)
        st.x_tilde = self.feature_learner(X, "2d")
        st.y_tilde = self.feature_learner(X, "3d")

        st.x_F, st.P_F = self.encoder(x, P, "2d", pm)
        st.y_F, st.Q_F = self.encoder(y, Q, "3d", pm)
        if use_decoder:
            st.x_hat, st.P_hat = self.decoder(st.y_F, P, st.x_F, Q, "3d_to_2d", pm, kb)
            st.y_hat, st.Q_hat = self.decoder(st.x_F, Q, st.y_F, P, "2d_to_3d", pm, kb)
            streams = (st.x_hat, st.P_hat), (st.y_hat, st.Q_hat)
        else:
            streams = (st.x_F, st.P_F), (st.y_F, st.Q_F)

        (st.x_L, st.P_L), (st.y_L, st.Q_L) = (self._refine(s, p, pm) for s, p in streams)
        st.atom_logits = self.atom_head(st.x_L + st.y_L)
        st.coords_hat = self.position_head(st.Q_L, batch.coords, batch.atom_mask)
        st.spd_logits = self.spd_head(st.P_L, st.Q_L, pm)
        return st

    def forward_2d(self, batch: Batch, use_decoder: bool = True, fuse_missing: bool = True) -> ForwardState:
        """
        Stage 2 com apenas grafos 2D: a modalidade 3D é gerada pelo
        decodificador 2D→3D e fundida ao fluxo do codificador 2D.

        Sem `fuse_missing`, nada da modalidade ausente entra no fluxo
        (pré-treino apenas 2D).
        """
        pm, kb = batch.pair_mask, batch.key_bias()
        X = self.embed(batch.atoms)
        x, P = self.build_2d_inputs(X, batch)
        st = ForwardState("2d", X, x=x, P=P)
        st.x_tilde = self.feature_learner(X, "2d")
        st.y_tilde = self.feature_learner(X, "3d")
        st.x_F, st.P_F = self.encoder(x, P, "2d", pm)
        if not fuse_missing:
            st.fused, st.fused_bias = st.x_F, st.P_F
        elif use_decoder:
            st.y_hat, st.Q_hat = self.decoder(st.x_F, None, st.x_F, P, "2d_to_3d", pm, kb)
            st.fused = st.x_F + st.y_hat
            st.fused_bias = mask_pair(P + st.Q_hat, pm)
        else:
            st.fused = st.x_F + st.y_tilde
            st.fused_bias = P
        st.x_L, st.P_L = self._refine(st.fused, st.fused_bias, pm)
        st.atom_logits = self.atom_head(st.x_L)
        st.spd_logits = self.spd_head(st.P_L, st.P_L, pm)
        return st

    def forward_3d(self, batch: Batch, use_decoder: bool = True, fuse_missing: bool = True) -> ForwardState:
        """
        Espelho de `forward_2d` para dados apenas 3D.
        """
        pm, kb = batch.pair_mask, batch.key_bias()
        X = self.embed(batch.atoms)
        psi = self.gaussian_basis(batch.dist, batch.pair_class)
        y, Q = self.build_3d_inputs(X, psi, pm)
        st = ForwardState("3d", X, y=y, Q=Q)
        st.x_tilde = self.feature_learner(X, "2d")
        st.y_tilde = self.feature_learner(X, "3d")
        st.y_F, st.Q_F = self.encoder(y, Q, "3d", pm)
        if not fuse_missing:
            st.fused, st.fused_bias = st.y_F, st.Q_F
        elif use_decoder:
            st.x_hat, st.P_hat = self.decoder(st.y_F, None, st.y_F, Q, "3d_to_2d", pm, kb)
            st.fused = st.y_F + st.x_hat
            st.fused_bias = mask_pair(Q + st.P_hat, pm)
        else:
            st.fused = st.y_F + st.x_tilde
            st.fused_bias = Q
        st.x_L, st.P_L = self._refine(st.fused, st.fused_bias, pm)
        st.atom_logits = self.atom_head(st.x_L)
        st.coords_hat = self.position_head(st.P_L, batch.coords, batch.atom_mask)
        return st

    def forward(self, batch: Batch, use_decoder: bool = True, fuse_missing: bool = True) -> ForwardState:
        if batch.modality == "paired":
            return self.forward_paired(batch, use_decoder)
        if batch.modality == "2d":
            return self.forward_2d(batch, use_decoder, fuse_missing)
        return self.forward_3d(batch, use_decoder, fuse_missing)

    def representation(self, batch: Batch, use_decoder: bool = True) -> torch.Tensor:
        """
        Vetor por molécula (B×d): média mascarada do fluxo final.
        """
        state = self.forward(batch, use_decoder)
        return masked_mean(state.final_stream, batch.atom_mask)

    #
    # Inspeção
    #
    def shared_parameters(self):
        yield from self.encoder.attention.parameters()
        yield from self.decoder.attention.parameters()

    def parameter_counts(self) -> dict[str, int]:
        return {
            "total": sum(p.numel() for p in self.parameters()),
            "trainable": sum(p.numel() for p in self.parameters() if p.requires_grad),
            "shared_attention": sum(p.numel() for p in self.shared_parameters()),
            "frozen": sum(p.numel() for p in self.parameters() if not p.requires_grad),
        }
