from __future__ import annotations

import sys

from app.cli.commands import dispatch, exit_code
from app.cli.config_parser import parse_args
from app.core.errors import DfkdError


def main(argv=None) -> int:
    try:
        command, config = parse_args(argv)
    except DfkdError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return exit_code(e)
    return dispatch(command, config)


if __name__ == "__main__":
    sys.exit(main())
