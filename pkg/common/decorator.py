import json
import logging
import sys
from functools import wraps
from pathlib import Path

from pydantic import ValidationError

from common.errors import ConfigurationError

EXIT_OK = 0
EXIT_INTERNAL_ERROR = 1
EXIT_VALIDATION_ERROR = 2


# JSON config loader decorator
def load_json_config(fn):
    """Replace a `config` path on the parsed arguments with the decoded JSON object."""

    @wraps(fn)
    def wrapped(args, *rest, **kwargs):
        config_path = getattr(args, "config", None)
        if isinstance(config_path, (str, Path)):
            path = Path(config_path)
            try:
                args.config = json.loads(path.read_text(encoding="utf-8"))
            except FileNotFoundError as e:
                raise ConfigurationError(f"Config file not found: {path}") from e
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file is not valid JSON: {path}: {e}") from e
        elif config_path is None:
            args.config = {}
        return fn(args, *rest, **kwargs)

    return wrapped


def cli_command(error_status=None, logging_fn=None):
    """Run a command and turn its outcome into a process exit code.

    `error_status` is a sequence of (exception class, exit code) pairs; the first
    class found in the raised exception's MRO decides the code.
    """
    if error_status is None:
        error_status = [(Exception, EXIT_INTERNAL_ERROR)]

    status_code_map = dict(error_status)

    def decorator(fn):
        nonlocal logging_fn
        if logging_fn is None:
            logging_fn = logging.getLogger(fn.__name__).error

        @wraps(fn)
        def wrapped(args, *rest, **kwargs):
            try:
                load_json_config(fn)(args, *rest, **kwargs)
                return EXIT_OK
            except ValidationError as e:
                logging_fn(f"Validation Error: {repr(e)}", exc_info=True)
                print(f"ConfigurationError: {e}", file=sys.stderr)
                return EXIT_VALIDATION_ERROR
            except Exception as e:
                error_type = next(
                    (cls for cls in type(e).__mro__ if cls in status_code_map), None
                )
                exit_code = status_code_map.get(error_type, EXIT_INTERNAL_ERROR)
                logging_fn(f"Error: {repr(e)}", exc_info=True)
                print(f"{type(e).__name__}: {e}", file=sys.stderr)
                return exit_code

        return wrapped

    return decorator
