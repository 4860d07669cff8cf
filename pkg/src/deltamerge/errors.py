"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters: ConfigError -> 2, HomologyError -> 3, ContainerError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad method parameters, malformed config JSON."""


class ContainerError(Exception):
    """Malformed or unreadable checkpoint container."""


class HomologyError(Exception):
    """Checkpoints are not homologous (tensor names, shapes or dtypes differ)."""
