"""
Tests for the ``python -m src.main`` entry point.
"""

import json

from src.config import DEFAULTS
from src.main import main


def test_main_delegates_to_cli(mocker) -> None:
    """
    Test the entry point hands its arguments to the CLI.
    """
    cli_main = mocker.patch("src.main.cli_main", return_value=3)

    assert main(["reconstruct", "--input", "x.bin"]) == 3
    cli_main.assert_called_once_with(["reconstruct", "--input", "x.bin"])


def test_main_runs_config_command(capsys) -> None:
    """
    Test the entry point runs a real command.
    """
    assert main(["config", "--dump-defaults"]) == 0

    assert json.loads(capsys.readouterr().out) == DEFAULTS
