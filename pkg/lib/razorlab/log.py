"""
RazorLab - Logging setup

Console output mirrors lib/utils.sh: [INFO], [OK], [WARN], [ERROR],
[DEBUG] and '==>' step headers on stderr, colored only on a terminal.
Timestamps go to the sidecar run log only.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional, Union

STEP = 22
SUCCESS = 25

logging.addLevelName(STEP, 'STEP')
logging.addLevelName(SUCCESS, 'SUCCESS')

ROOT_LOGGER = 'razorlab'

_RESET = '\033[0m'
_PREFIXES = {
    logging.DEBUG: ('\033[2m', '[DEBUG]'),
    logging.INFO: ('\033[0;34m', '[INFO]'),
    STEP: ('\033[0;36m', '==>'),
    SUCCESS: ('\033[0;32m', '[OK]'),
    logging.WARNING: ('\033[0;33m', '[WARN]'),
    logging.ERROR: ('\033[0;31m', '[ERROR]'),
    logging.CRITICAL: ('\033[0;31m', '[ERROR]'),
}


class ConsoleFormatter(logging.Formatter):
    """Prefix-style formatter matching the shell helpers"""

    def __init__(self, color: bool = False):
        super().__init__('%(message)s')
        self.color = color

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        color, prefix = _PREFIXES.get(record.levelno, ('', f'[{record.levelname}]'))
        if self.color:
            if record.levelno == STEP:
                return f'{color}{prefix}{_RESET} \033[1m{message}{_RESET}'
            return f'{color}{prefix}{_RESET} {message}'
        return f'{prefix} {message}'


def get_logger(name: str) -> logging.Logger:
    """Logger below the razorlab hierarchy"""
    if name == ROOT_LOGGER or name.startswith(ROOT_LOGGER + '.'):
        return logging.getLogger(name)
    return logging.getLogger(f'{ROOT_LOGGER}.{name}')


def log_step(logger: logging.Logger, msg: str, *args) -> None:
    logger.log(STEP, msg, *args)


def log_success(logger: logging.Logger, msg: str, *args) -> None:
    logger.log(SUCCESS, msg, *args)


def resolve_level(level: Union[str, int, None] = None) -> int:
    """Explicit level, else RAZORLAB_LOG_LEVEL, else DEBUG=true, else INFO"""
    if level is None:
        level = os.environ.get('RAZORLAB_LOG_LEVEL')
    if level is None and os.environ.get('DEBUG', 'false') == 'true':
        return logging.DEBUG
    if level is None:
        return logging.INFO
    if isinstance(level, int):
        return level
    value = logging.getLevelName(str(level).upper())
    return value if isinstance(value, int) else logging.INFO


def setup_logging(
    level: Union[str, int, None] = None,
    log_file: Optional[Path] = None,
    color: Optional[bool] = None,
) -> logging.Logger:
    """
    Configure the razorlab logger.

    Replaces handlers from an earlier call, so commands may call it again
    once the output directory is known.
    """
    logger = logging.getLogger(ROOT_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    if color is None:
        color = sys.stderr.isatty() and os.environ.get('NO_COLOR') is None

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(ConsoleFormatter(color=color))
    console.setLevel(resolve_level(level))
    logger.addHandler(console)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        sidecar = logging.FileHandler(log_file, encoding='utf-8')
        sidecar.setFormatter(
            logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s')
        )
        sidecar.setLevel(logging.DEBUG)
        logger.addHandler(sidecar)

    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    return logger
