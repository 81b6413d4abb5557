"""
Exceções usadas pelo flexmol.

Cada exceção carrega um atributo de contexto (linha, molécula) e o código de
saída que a CLI deve usar quando ela escapa de um comando.
"""


class FlexMolError(Exception):
    """
    Classe base para todos os erros do flexmol.

    Erros que não são de validação são falhas de execução (código 2).
    """

    exit_code = 2


class ValidationError(FlexMolError):
    """
    Registro ou argumento que viola um invariante do modelo de dados.
    """

    exit_code = 1

    def __init__(self, msg, mol_id=None):
        if mol_id is not None:
            msg = f"[{mol_id}] {msg}"
        super().__init__(msg)
        self.mol_id = mol_id


class ParseError(ValidationError):
    """
    Erro de análise sintática de um arquivo de entrada.
    """

    def __init__(self, msg, line=None, mol_id=None):
        if line is not None:
            msg = f"linha {line}: {msg}"
        super().__init__(msg, mol_id=mol_id)
        self.line = line


class ModalityError(ValidationError):
    """
    Registro sem a modalidade (2D ou 3D) exigida pela operação.
    """


class FeaturizeError(ValidationError):
    """
    Entrada que não pode ser convertida em features estruturais.
    """


class ConfigError(FlexMolError):
    """
    Configuração inválida (arquivo, flag ou valor de campo).
    """

    exit_code = 1

    def __init__(self, msg, key=None, line=None):
        if line is not None:
            msg = f"linha {line}: {msg}"
        super().__init__(msg)
        self.key = key
        self.line = line


class CheckpointError(FlexMolError):
    """
    Checkpoint ausente, de outra versão ou com hash de configuração divergente.
    """

    exit_code = 1


class LossError(FlexMolError):
    """
    Pedido de um termo de perda incompatível com os dados disponíveis.
    """

    exit_code = 1


class ModelError(FlexMolError):
    """
    Falha numérica durante o forward (ex.: ativação não finita).
    """

    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer
