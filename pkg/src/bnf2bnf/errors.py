"""Exception types shared across the package."""


class Bnf2BnfError(Exception):
    pass


class DimensionError(Bnf2BnfError, ValueError):
    pass


class ConfigurationError(Bnf2BnfError, ValueError):
    pass


class ContractError(Bnf2BnfError, ValueError):
    pass


class NumericError(Bnf2BnfError, ArithmeticError):
    pass


class CheckpointError(Bnf2BnfError):
    pass
