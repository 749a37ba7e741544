"""Shell completion script generation for mnar-factor."""

from typing import Any

import click
from click.shell_completion import BashComplete, FishComplete, ZshComplete

SHELLS: dict[str, type[Any]] = {
    "bash": BashComplete,
    "zsh": ZshComplete,
    "fish": FishComplete,
}


def generate_completion_script(cli: click.Group, shell: str) -> str:
    """Return the completion script of ``cli`` for bash, zsh or fish.

    Raises:
        ValueError: If shell type is not supported
    """
    completion_class = SHELLS.get(shell.lower())
    if completion_class is None:
        raise ValueError(
            f"Unsupported shell: {shell}. Supported shells: {', '.join(SHELLS)}"
        )

    complete = completion_class(
        cli=cli,
        ctx_args={},
        prog_name="mnar-factor",
        complete_var="_MNAR_FACTOR_COMPLETE",
    )
    return complete.source()
