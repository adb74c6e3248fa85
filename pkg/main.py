"""Entry point for the nightforge CLI."""
from nightforge import cli_main


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(cli_main(None))
