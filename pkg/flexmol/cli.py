"""
Interface de linha de comando do flexmol.

Cada subcomando liga um dos módulos do pacote. A saída de máquina é JSON na
saída padrão; diagnósticos vão para a saída de erro. Com `--pretty`, os
resultados são mostrados como tabelas.

Códigos de saída: 0 = sucesso, 1 = erro de validação ou configuração,
2 = falha de execução.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .checkpoint import checkpoint_load, describe, load_model
from .config import load_config
from .confeval import EvalConfig, evaluate, generate_conformers, pair_sets
from .errors import FlexMolError, ValidationError
from .featurize import FeatureCache, FeatureConfig, check_features, featurize
from .finetune import FinetuneConfig, evaluate_property, finetune
from .gradcheck import run_gradcheck
from .losses import LossWeights
from .model import ModelConfig
from .molio import (
    Molecule,
    check_manifest,
    manifest_path,
    parse_jsonl,
    parse_sdf_v2000,
    random_split,
    read_manifest,
    write_jsonl,
    write_manifest,
)
from .pretrain import TrainConfig, build_model, run_stage1, run_stage2
from .settings import Settings, field_names

log = logging.getLogger("flexmol")

CONFIG_CLASSES = (ModelConfig, FeatureConfig, TrainConfig, LossWeights, EvalConfig, FinetuneConfig)
SDF_SUFFIXES = {".sdf", ".mol", ".sd"}


class ArgumentParser(argparse.ArgumentParser):
    """
    Erros de uso saem com código 1, como os demais erros de validação.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: erro: {message}\n")


def make_argparser():
    parser = ArgumentParser(prog="flexmol", description="Pré-treino molecular unificado 2D/3D")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Arquivo de configuração chave = valor.")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Semente de todos os geradores.")
    common.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=argparse.SUPPRESS,
        help="Execução serial e determinística.",
    )
    common.add_argument("--pretty", action="store_true", help="Mostra tabelas em vez de JSON.")
    common.add_argument("-p", "--pm", action="store_true", help="Habilita o post-mortem debugger em caso de falha.")
    common.add_argument("-v", "--verbose", action="count", default=0, help="Aumenta o nível de log.")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMANDO")

    cmd = commands.add_parser("convert", parents=[common], help="Converte SDF/JSONL para JSONL com manifesto.")
    cmd.add_argument("--in", dest="input", required=True, help="Arquivo de entrada (.sdf ou .jsonl).")
    cmd.add_argument("--out", required=True, help="Arquivo JSONL de saída.")
    cmd.add_argument("--split", help="Frações treino,validação,teste (ex.: 0.8,0.1,0.1).")
    cmd.set_defaults(handler=cmd_convert)

    cmd = commands.add_parser("featurize", parents=[common], help="Calcula e verifica as features.")
    cmd.add_argument("--in", dest="input", required=True, help="Arquivo JSONL ou SDF.")
    cmd.add_argument("--cache", action="store_true", help="Usa o cache em FLEXMOL_CACHE_DIR.")
    add_feature_flags(cmd)
    cmd.set_defaults(handler=cmd_featurize)

    cmd = commands.add_parser("pretrain-stage1", parents=[common], help="Pré-treino com dados pareados.")
    cmd.add_argument("--data", required=True, help="JSONL com moléculas 2D+3D.")
    cmd.add_argument("--out", required=True, help="Checkpoint de saída.")
    cmd.add_argument("--metrics", help="Log de métricas (JSON por linha).")
    add_feature_flags(cmd)
    add_model_flags(cmd)
    add_train_flags(cmd)
    cmd.set_defaults(handler=cmd_stage1)

    cmd = commands.add_parser("pretrain-stage2", parents=[common], help="Treino contínuo com uma modalidade.")
    cmd.add_argument("--data", required=True, help="JSONL com moléculas da modalidade escolhida.")
    cmd.add_argument("--modality", required=True, choices=["2d", "3d"])
    cmd.add_argument("--checkpoint", help="Checkpoint do Stage 1.")
    cmd.add_argument("--out", required=True, help="Checkpoint de saída.")
    cmd.add_argument("--metrics", help="Log de métricas (JSON por linha).")
    add_train_flags(cmd)
    cmd.set_defaults(handler=cmd_stage2)

    cmd = commands.add_parser("finetune", parents=[common], help="Ajuste fino com cabeça linear.")
    cmd.add_argument("--data", required=True, help="JSONL com rótulos ('label').")
    cmd.add_argument("--valid", help="JSONL de validação.")
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--task", choices=["regression", "classification"], default=argparse.SUPPRESS)
    cmd.add_argument("--freeze-backbone", action="store_true", default=argparse.SUPPRESS)
    cmd.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    cmd.add_argument("--epochs", type=int, default=argparse.SUPPRESS)
    cmd.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    cmd.add_argument("--dtype", choices=["float32", "float64"], default=argparse.SUPPRESS)
    cmd.set_defaults(handler=cmd_finetune)

    cmd = commands.add_parser("gen-conf", parents=[common], help="Gera conformações a partir do grafo 2D.")
    cmd.add_argument("--data", required=True, help="JSONL com moléculas com ligações.")
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--out", required=True, help="JSONL com as conformações geradas.")
    cmd.add_argument("--count", type=int, help="Conformações por molécula (padrão: 2 × referências).")
    cmd.set_defaults(handler=cmd_gen_conf)

    cmd = commands.add_parser("eval-conf", parents=[common], help="Calcula COV e MAT.")
    cmd.add_argument("--gen", required=True, help="JSONL com conformações geradas.")
    cmd.add_argument("--ref", required=True, help="JSONL com conformações de referência.")
    cmd.add_argument("--delta", type=float, default=argparse.SUPPRESS, help="Limiar de RMSD em Å.")
    cmd.add_argument(
        "--heavy-atoms-only",
        action=argparse.BooleanOptionalAction,
        default=argparse.SUPPRESS,
        help="Usa apenas átomos pesados na RMSD.",
    )
    cmd.set_defaults(handler=cmd_eval_conf)

    cmd = commands.add_parser("gradcheck", parents=[common], help="Verifica gradientes por diferenças finitas.")
    cmd.add_argument("--atoms", type=int, default=3)
    cmd.add_argument("--dim", type=int, default=8)
    cmd.add_argument("--samples", type=int, default=2, help="Entradas sorteadas por tensor.")
    cmd.set_defaults(handler=cmd_gradcheck)

    cmd = commands.add_parser("inspect", parents=[common], help="Descreve um checkpoint.")
    cmd.add_argument("checkpoint")
    cmd.set_defaults(handler=cmd_inspect)
    return parser


def add_feature_flags(cmd):
    for name in ("max-degree", "max-hop", "max-path-len"):
        cmd.add_argument(f"--{name}", type=int, default=argparse.SUPPRESS)


def add_model_flags(cmd):
    for name in ("dim", "num-kernels", "num-layers", "num-mm-layers", "num-heads", "mlp-ratio"):
        cmd.add_argument(f"--{name}", type=int, default=argparse.SUPPRESS)
    cmd.add_argument(
        "--mm-encoder",
        dest="use_mm_encoder",
        action=argparse.BooleanOptionalAction,
        default=argparse.SUPPRESS,
        help="Usa o codificador multimodal.",
    )


def add_train_flags(cmd):
    for name in ("lr", "mask-ratio", "coord-noise", "grad-clip"):
        cmd.add_argument(f"--{name}", type=float, default=argparse.SUPPRESS)
    for name in ("epochs-stage1", "epochs-stage2", "batch-size", "max-steps"):
        cmd.add_argument(f"--{name}", type=int, default=argparse.SUPPRESS)
    cmd.add_argument("--dtype", choices=["float32", "float64"], default=argparse.SUPPRESS)
    cmd.add_argument(
        "--stage1-decoder",
        dest="stage1_use_decoder",
        action=argparse.BooleanOptionalAction,
        default=argparse.SUPPRESS,
        help="Passa pelos decodificadores no Stage 1.",
    )
    cmd.add_argument(
        "--stage1-modality",
        choices=["paired", "2d", "3d"],
        default=argparse.SUPPRESS,
        help="Modalidade do Stage 1 (2d/3d: pré-treino com uma só modalidade).",
    )
    cmd.add_argument(
        "--stage2-decoder",
        dest="stage2_use_decoder",
        action=argparse.BooleanOptionalAction,
        default=argparse.SUPPRESS,
        help="Gera a modalidade ausente pelo decodificador no Stage 2.",
    )
    for name in ("w-cl", "w-ra", "w-c", "w-atom", "w-pos", "w-spd", "temperature"):
        cmd.add_argument(f"--{name}", type=float, default=argparse.SUPPRESS)


#
# Suporte
#
def configure_logging(verbosity: int = 0) -> None:
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbosity, 2)]
    handler = RichHandler(console=Console(stderr=True), show_path=False)
    logging.basicConfig(level=level, format="%(message)s", handlers=[handler], force=True)


def load_settings(args) -> Settings:
    """
    Padrões ← arquivo --config ← flags explícitas.
    """
    settings = Settings.from_defaults(*CONFIG_CLASSES)
    if args.config:
        settings = settings.push(load_config(args.config), f"arquivo {args.config}")
    known = {name for klass in CONFIG_CLASSES for name in field_names(klass)}
    flags = {k: v for k, v in vars(args).items() if k in known}
    settings = settings.push(flags, "flags")
    settings.check_known(*CONFIG_CLASSES)
    return settings


def read_molecules(path: str | Path) -> list[Molecule]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"arquivo não encontrado: {path}")
    molecules = parse_sdf_v2000(path) if path.suffix.lower() in SDF_SUFFIXES else parse_jsonl(path)
    if manifest_path(path).exists():
        check_manifest(read_manifest(path), molecules)
    log.info("%d moléculas lidas de %s", len(molecules), path)
    return molecules


def emit(data: dict, args, table: Table | None = None) -> None:
    if args.pretty and table is not None:
        Console().print(table)
    else:
        print(json.dumps(data, indent=2 if args.pretty else None, sort_keys=True))


def dict_table(title: str, data: dict) -> Table:
    table = Table(title=title)
    table.add_column("campo")
    table.add_column("valor", justify="right")
    for key, value in data.items():
        if not isinstance(value, (dict, list)):
            table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    return table


#
# Comandos
#
def cmd_convert(args) -> int:
    molecules = read_molecules(args.input)
    out = Path(args.out)
    outputs = {"all": molecules}
    if args.split:
        try:
            fractions = tuple(float(x) for x in args.split.split(","))
        except ValueError as e:
            raise ValidationError(f"frações inválidas: {args.split}") from e
        seed = load_settings(args).get("seed", 0)
        train, valid, test = random_split(molecules, fractions, seed)
        outputs = {"train": train, "valid": valid, "test": test}

    summary = {}
    for name, mols in outputs.items():
        path = out if name == "all" else out.with_name(f"{out.stem}_{name}{out.suffix}")
        write_jsonl(path, mols)
        manifest = write_manifest(path, mols)
        summary[name] = {"path": str(path), "count": manifest.count, "modality": manifest.modality.value}
    emit(summary, args)
    return 0


def cmd_featurize(args) -> int:
    settings = load_settings(args)
    cfg = settings.build(FeatureConfig)
    cache = FeatureCache() if args.cache else None
    problems = {}
    count = 0
    for mol in read_molecules(args.input):
        record = cache.get_or_compute(mol, cfg) if cache else featurize(mol, cfg)
        found = check_features(record)
        if found:
            problems[mol.id] = found
        count += 1
    summary = {"count": count, "digest": cfg.digest(), "problems": problems}
    table = dict_table("Features", {"moléculas": count, "digest": cfg.digest(), "com problemas": len(problems)})
    emit(summary, args, table)
    return 1 if problems else 0


def cmd_stage1(args) -> int:
    settings = load_settings(args)
    model_cfg = settings.build(ModelConfig)
    train_cfg = settings.build(TrainConfig)
    molecules = read_molecules(args.data)
    model = build_model(model_cfg, train_cfg)
    result = run_stage1(molecules, model, train_cfg, args.out, args.metrics, progress=args.pretty)
    summary = {"checkpoint": str(result.checkpoint), "steps": len(result.reports), **last_report(result)}
    emit(summary, args, dict_table("Stage 1", summary))
    return 0


def cmd_stage2(args) -> int:
    settings = load_settings(args)
    train_cfg = settings.build(TrainConfig)
    molecules = read_molecules(args.data)
    result = run_stage2(
        molecules,
        args.checkpoint,
        train_cfg,
        args.modality,
        args.out,
        args.metrics,
        progress=args.pretty,
    )
    summary = {"checkpoint": str(result.checkpoint), "steps": len(result.reports), **last_report(result)}
    emit(summary, args, dict_table(f"Stage 2 ({args.modality})", summary))
    return 0


def last_report(result) -> dict:
    if not result.reports:
        return {}
    return {k: v for k, v in result.reports[-1].to_dict().items() if k not in ("step", "batch_size")}


def cmd_finetune(args) -> int:
    settings = load_settings(args)
    cfg = settings.build(FinetuneConfig)
    backbone, _ = load_model(args.checkpoint)
    result = finetune(read_molecules(args.data), backbone, cfg, progress=args.pretty)
    summary = {"task": cfg.task, "history": result.history}
    if args.valid:
        summary["valid"] = evaluate_property(result.model, read_molecules(args.valid), cfg)
    final = {"train_loss": result.history[-1]["train_loss"], **summary.get("valid", {})}
    emit(summary, args, dict_table(f"Ajuste fino ({cfg.task})", final))
    return 0


def cmd_gen_conf(args) -> int:
    settings = load_settings(args)
    seed = settings.get("seed", 0)
    model, ckpt = load_model(args.checkpoint)
    generated = []
    for mol in read_molecules(args.data):
        confs = generate_conformers(mol, model, args.count, seed, ckpt.feature_config)
        generated.append(confs.to_molecule(template=mol))
    write_jsonl(args.out, generated)
    summary = {"out": args.out, "molecules": len(generated), "conformers": sum(len(m.conformers) for m in generated)}
    emit(summary, args, dict_table("Geração de conformações", summary))
    return 0


def cmd_eval_conf(args) -> int:
    settings = load_settings(args)
    cfg = settings.build(EvalConfig)
    report = evaluate(pair_sets(read_molecules(args.gen), read_molecules(args.ref)), cfg)
    emit(report.to_dict(), args, report.table())
    return 0


def cmd_gradcheck(args) -> int:
    settings = load_settings(args)
    report = run_gradcheck(n_atoms=args.atoms, dim=args.dim, seed=settings.get("seed", 0), samples=args.samples)
    emit(report.to_dict(), args, dict_table("Verificação de gradientes", report.to_dict()))
    return 0 if report.passed else 2


def cmd_inspect(args) -> int:
    data = describe(checkpoint_load(args.checkpoint))
    fields = {**data["parameters"], "stage": data["stage"], "step": data["step"]}
    emit(data, args, dict_table(f"Checkpoint {args.checkpoint}", fields))
    return 0


def main(argv=None) -> int:
    """
    Função principal da CLI. Retorna o código de saída.
    """
    parser = make_argparser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except FlexMolError as e:
        log.error("%s", e)
        on_error(e, args.pm)
        return e.exit_code
    except Exception as e:
        log.exception("falha inesperada: %s", e)
        on_error(e, args.pm)
        return 2


def on_error(exception: Exception, pm: bool):
    if not pm:
        return

    from ipdb import post_mortem  # type: ignore[import-untyped]

    post_mortem(exception.__traceback__)
